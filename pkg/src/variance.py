"""
矩匹配方差缩减模块

对采样得到的 (p, r) 行做矩匹配变换，降低对偶估计的方差：
- mm_additive 均值平移 p + θ − p̄
- mm_full 均值与协方差同时匹配 θ + Σ_full^½ Σ_s^-½ (p − p̄)
- mm_product 逐坐标乘积形式 p·θ/p̄
- dual_variance_study 重复采样求解对偶，统计 μ₀/μ₁ 的均值与方差
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

try:
    from .dual_solver import SolverConfig, solve
    from .model import assemble_dual
except ImportError:
    from dual_solver import SolverConfig, solve
    from model import assemble_dual

# 配置日志
logger = logging.getLogger(__name__)


class VarianceException(Exception):
    """方差缩减相关异常"""
    pass


class SingularSampleCovariance(VarianceException):
    """样本协方差奇异"""
    pass


class ZeroSampleMeanCoordinate(VarianceException):
    """样本均值存在零坐标"""
    pass


class InsufficientReps(VarianceException):
    """重复次数不足以估计方差"""
    pass


EIGEN_FLOOR = 1e-12
CONDITION_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class PopulationMoments:
    """总体矩：均值 θ、协方差 Σ_full（1/N 归一）与总体规模 N"""
    theta: np.ndarray
    sigma_full: np.ndarray
    N: int

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "PopulationMoments":
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        theta = rows.mean(axis=0)
        centered = rows - theta
        return cls(theta, centered.T @ centered / rows.shape[0], rows.shape[0])


@dataclass(frozen=True, eq=False)
class Sample:
    """n×M 样本行"""
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        object.__setattr__(self, "rows", rows)

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])

    def mean(self) -> np.ndarray:
        return self.rows.mean(axis=0)

    def covariance(self) -> np.ndarray:
        """1/n 归一的样本协方差"""
        centered = self.rows - self.mean()
        return centered.T @ centered / self.n

    def oob_fraction(self) -> float:
        """超出 [0,1] 的元素比例"""
        return float(np.mean((self.rows < 0.0) | (self.rows > 1.0)))


def symmetric_root(matrix: np.ndarray, inverse: bool = False) -> np.ndarray:
    """对称半正定平方根（特征值截断到 1e-12）"""
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    values = np.maximum(values, EIGEN_FLOOR)
    roots = 1.0 / np.sqrt(values) if inverse else np.sqrt(values)
    return (vectors * roots) @ vectors.T


def mm_additive(sample: Sample, pop: PopulationMoments) -> Sample:
    """p̃¹ = p + θ − p̄，输出样本均值恰为 θ"""
    return Sample(sample.rows + pop.theta - sample.mean())


def _check_conditioning(cov: np.ndarray):
    values = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    top = max(float(values[-1]), EIGEN_FLOOR)
    if values[0] <= top / CONDITION_LIMIT:
        raise SingularSampleCovariance(
            f"样本协方差近奇异: 最小特征值 {values[0]:.3e}, 最大特征值 {values[-1]:.3e}")


def mm_full(sample: Sample, pop: PopulationMoments) -> Sample:
    """
    p̃² = θ + Σ_full^½ Σ_s^-½ (p − p̄)

    输出样本的均值为 θ、协方差为 Σ_full；样本协方差奇异时退化为 mm_additive。
    """
    sigma_s = sample.covariance()
    try:
        if sample.n < 2:
            raise SingularSampleCovariance("样本量不足 2，协方差无定义")
        _check_conditioning(sigma_s)
    except SingularSampleCovariance as e:
        logger.warning(f"{e}，改用均值平移")
        return mm_additive(sample, pop)
    transform = symmetric_root(pop.sigma_full) @ symmetric_root(sigma_s, inverse=True)
    centered = sample.rows - sample.mean()
    return Sample(pop.theta + centered @ transform.T)


def mm_product(sample: Sample, pop: PopulationMoments) -> Sample:
    """
    p̃³ = p·θ/p̄（逐坐标）

    p̄ 为零的坐标原样保留并给出警告。
    """
    mean = sample.mean()
    zero = mean == 0.0
    ratio = np.ones_like(mean)
    ratio[~zero] = pop.theta[~zero] / mean[~zero]
    if np.any(zero):
        err = ZeroSampleMeanCoordinate(f"样本均值为零的坐标: {np.nonzero(zero)[0].tolist()}")
        logger.warning(f"{err}，这些坐标不做缩放")
    return Sample(sample.rows * ratio)


def _raw(sample: Sample, pop: PopulationMoments) -> Sample:
    return sample


ESTIMATORS: Dict[str, Callable[[Sample, PopulationMoments], Sample]] = {
    "raw": _raw,
    "mod1": mm_additive,
    "mod2": mm_full,
    "mod3": mm_product,
}
ESTIMATOR_ALIASES = {"mm_additive": "mod1", "mm_full": "mod2", "mm_product": "mod3"}


def canonical_estimator(name: str) -> str:
    """把 mm_additive 等别名规范为 raw/mod1/mod2/mod3"""
    key = ESTIMATOR_ALIASES.get(name, name)
    if key not in ESTIMATORS:
        raise VarianceException(f"未知的估计方式: {name}")
    return key


def apply_estimator(name: str, sample: Sample, pop: PopulationMoments) -> Sample:
    return ESTIMATORS[canonical_estimator(name)](sample, pop)


@dataclass
class VarianceReport:
    """对偶方差研究的结果"""
    estimator: str
    n: int
    reps: int
    mu0_mean: float
    mu0_var: float
    mu1_mean: float
    mu1_var: float
    oob_fraction: float
    insufficient_reps: bool = False
    mu_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def variance_standard_error(self, column: int = 0) -> float:
        """正态近似下样本方差的标准误 V·√(2/(reps−1))"""
        if self.reps < 2:
            return float("nan")
        var = self.mu0_var if column == 0 else self.mu1_var
        return float(var * np.sqrt(2.0 / (self.reps - 1)))


def _one_rep(template, estimator: str, n: int, seed: int,
             config: SolverConfig) -> tuple:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(template.population_size, size=n, replace=False))
    p = apply_estimator(estimator, Sample(template.population_p[idx]), template.p_moments)
    r = apply_estimator(estimator, Sample(template.population_r[idx]), template.r_moments)
    problem = template.build_problem(p.rows, r.rows)
    dual = assemble_dual(problem)
    solution = solve(dual, config)
    mu0 = solution.z[dual.position("mu[0]")]
    mu1 = solution.z[dual.position("mu[1]")] if len(problem.budgets) > 1 else float("nan")
    oob = (p.oob_fraction() + r.oob_fraction()) / 2.0
    return float(mu0), float(mu1), oob


def dual_variance_study(template, estimator: str, n: int, reps: int, seed: int = 0,
                        threads: int = 1, config: Optional[SolverConfig] = None) -> VarianceReport:
    """
    重复采样 n 个用户，做矩匹配后求解对偶，统计 μ₀、μ₁

    第 rep 次重复使用种子 seed + rep，结果按 rep 顺序汇总。

    Args:
        template: 提供 population_p/population_r/p_moments/r_moments/population_size
            与 build_problem(p_rows, r_rows) 的基准对象
        estimator: raw | mod1 | mod2 | mod3（或 mm_additive 等别名）
        n: 样本量
        reps: 重复次数，少于 2 时方差记为 NaN 并标记不足
    """
    estimator = canonical_estimator(estimator)
    if n < 1 or n > template.population_size:
        raise VarianceException(f"样本量 {n} 超出 [1, {template.population_size}]")
    if reps < 1:
        raise InsufficientReps("重复次数至少为 1")
    config = config or SolverConfig()
    seeds = [seed + rep for rep in range(reps)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _one_rep(template, estimator, n, s, config), seeds))
    else:
        results = [_one_rep(template, estimator, n, s, config) for s in seeds]
    samples = np.array([[r[0], r[1]] for r in results])
    oob = float(np.mean([r[2] for r in results]))
    insufficient = reps < 2
    if insufficient:
        logger.warning("重复次数少于 2，方差无定义")
    var = (lambda col: float("nan") if insufficient else float(np.var(samples[:, col], ddof=1)))
    report = VarianceReport(estimator, n, reps,
                            float(samples[:, 0].mean()), var(0),
                            float(samples[:, 1].mean()), var(1),
                            oob, insufficient, samples)
    logger.info(f"{estimator}: μ₀ 均值 {report.mu0_mean:.6g} 方差 {report.mu0_var:.6g}")
    return report


def additive_shrink_factor(N: int, n: int) -> float:
    """均值平移后协方差的理论缩放因子 1 + 1/N − 1/n"""
    return 1.0 + 1.0 / N - 1.0 / n
