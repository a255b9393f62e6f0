"""
对偶QP求解模块

用算子分裂（ADMM）迭代求解 min ½zᵀBz − p̃ᵀz, z >= 0：
- SolverConfig 求解参数（冻结数据类，构造时校验）
- ProxOperator 缓存 (B+ρI) 分解的近端算子（稠密 Cholesky / 稀疏 LU / 共轭梯度）
- solve 三步迭代 + 残差停止准则 + μ 块近似停止，满足残差准则后在支撑集上精修
- kkt_residual / polish 不动点 KKT 残差与支撑集精修
- residuals 原始/对偶残差范数
- benchmark_iteration_cost 合成稀疏对偶上的单次迭代耗时
"""

import csv
import hashlib
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq
from scipy.sparse.linalg import LinearOperator, cg, lsqr, splu

try:
    from .model import DualQP
except ImportError:
    from model import DualQP

# 配置日志
logger = logging.getLogger(__name__)


class SolverException(Exception):
    """对偶求解相关异常"""
    pass


class SingularSystem(SolverException):
    """(B+ρI) 无法分解，通常意味着输入已损坏"""
    pass


class NumericalDivergence(SolverException):
    """残差出现非有限值"""
    pass


class InvalidConfig(SolverException):
    """求解参数非法"""
    pass


class InfeasibleProblem(SolverException):
    """原问题不可行，对偶无界"""
    pass


CONVERGED_FULL = "full"
CONVERGED_APPROX_MU = "approx-mu"
MAX_ITERS = "max-iters"

LINEAR_SOLVERS = ("auto", "direct", "iterative")


@dataclass(frozen=True)
class SolverConfig:
    """ADMM 求解参数"""
    rho: float = 1.0
    eps_abs: float = 1e-6
    eps_rel: float = 1e-4
    max_iters: int = 100000
    approx_mu_tolerance: Optional[float] = None
    approx_mu_window: int = 10
    linear_solver: str = "auto"
    dense_threshold: int = 4000
    cg_tolerance: float = 1e-10
    cache_factorization: bool = True
    log_every: int = 0
    threads: int = 1
    polish: bool = True
    kkt_tolerance: float = 1e-8
    polish_interval: int = 50

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidConfig(f"rho 必须为正: {self.rho}")
        if not (self.eps_abs > 0 and self.eps_rel > 0):
            raise InvalidConfig("eps_abs 与 eps_rel 必须为正")
        if int(self.max_iters) < 1:
            raise InvalidConfig("max_iters 至少为 1")
        if self.approx_mu_tolerance is not None and not self.approx_mu_tolerance > 0:
            raise InvalidConfig("approx_mu_tolerance 必须为正")
        if self.approx_mu_window < 1:
            raise InvalidConfig("approx_mu_window 至少为 1")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise InvalidConfig(f"linear_solver 必须为 {LINEAR_SOLVERS} 之一")
        if not self.cg_tolerance > 0:
            raise InvalidConfig("cg_tolerance 必须为正")
        if self.log_every < 0 or self.threads < 1:
            raise InvalidConfig("log_every 不能为负，threads 至少为 1")
        if not self.kkt_tolerance > 0 or self.polish_interval < 1:
            raise InvalidConfig("kkt_tolerance 必须为正，polish_interval 至少为 1")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SolverConfig":
        """由配置文件的 solver 段构造，拒绝未知字段"""
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"未知的求解参数: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides) -> "SolverConfig":
        """返回覆盖了非 None 字段的新配置"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class DualSolution:
    """对偶解与收敛诊断"""
    z: np.ndarray
    mu_block: np.ndarray
    mu_labels: Tuple[str, ...]
    iterations: int
    final_residuals: Tuple[float, float]
    converged: str
    objective: float
    linear_solver: str = ""
    threads: int = 1
    diagnostics: List[Dict[str, float]] = field(default_factory=list)
    kkt_residual: float = float("nan")
    polished: bool = False

    def summary(self) -> Dict[str, Any]:
        """写入运行清单的诊断摘要"""
        return {
            "iterations": self.iterations,
            "r_norm": self.final_residuals[0],
            "s_norm": self.final_residuals[1],
            "converged": self.converged,
            "objective": self.objective,
            "linear_solver": self.linear_solver,
            "threads": self.threads,
            "kkt_residual": self.kkt_residual,
            "polished": self.polished,
            "mu": {label: float(v) for label, v in zip(self.mu_labels, self.mu_block)},
        }


class ProxOperator:
    """
    近端算子 v ↦ (B+ρI)⁻¹(p̃+ρv)

    分解在构造时完成一次，之后每次调用只做回代。

    Args:
        B: 稠密或稀疏矩阵（iterative 方式下可为 None）
        rho: 罚参数
        method: dense | sparse | iterative
        matvec: iterative 方式下 B·v 的计算函数
        cg_tolerance: 共轭梯度相对容差
    """

    def __init__(self, B, rho: float, method: str = "dense", matvec=None,
                 cg_tolerance: float = 1e-10, dimension: Optional[int] = None):
        if not rho > 0:
            raise InvalidConfig(f"rho 必须为正: {rho}")
        self.rho = float(rho)
        self.method = method
        self.cg_tolerance = cg_tolerance
        self.dimension = int(dimension if dimension is not None else B.shape[0])
        self._warm = None
        self._factor = None
        try:
            if method == "dense":
                dense = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
                self._factor = cho_factor(dense + self.rho * np.eye(self.dimension))
            elif method == "sparse":
                shifted = sp.csc_matrix(B) + self.rho * sp.identity(self.dimension, format="csc")
                self._factor = splu(sp.csc_matrix(shifted))
            elif method == "iterative":
                if matvec is None:
                    matvec = (lambda v, _B=B: np.asarray(_B @ v).ravel())
                self._operator = LinearOperator(
                    (self.dimension, self.dimension),
                    matvec=lambda v: matvec(v) + self.rho * v,
                    dtype=float,
                )
            else:
                raise InvalidConfig(f"未知的线性求解方式: {method}")
        except (LinAlgError, ValueError, RuntimeError) as e:
            raise SingularSystem(f"(B+ρI) 分解失败: {e}") from e
        logger.debug(f"近端算子就绪: 方式={method}, d={self.dimension}, rho={self.rho}")

    @classmethod
    def for_dual(cls, dual: DualQP, config: SolverConfig) -> "ProxOperator":
        """按配置为对偶QP选择线性求解方式"""
        d = dual.dimension
        small = d <= config.dense_threshold
        if config.linear_solver == "iterative" or (config.linear_solver == "auto" and not small):
            return cls(None, config.rho, "iterative", matvec=dual.matvec,
                       cg_tolerance=config.cg_tolerance, dimension=d)
        if small:
            return cls(dual.dense_B(), config.rho, "dense")
        return cls(dual.B, config.rho, "sparse")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """求解 (B+ρI)x = rhs"""
        if self.method == "dense":
            return cho_solve(self._factor, rhs)
        if self.method == "sparse":
            return self._factor.solve(rhs)
        x, info = cg(self._operator, rhs, x0=self._warm, rtol=self.cg_tolerance, atol=0.0,
                     maxiter=10 * self.dimension)
        if info < 0:
            raise SingularSystem("共轭梯度求解失败")
        if info > 0:
            logger.warning(f"共轭梯度在 {info} 次迭代后未达到容差 {self.cg_tolerance}")
        self._warm = x
        return x

    def __call__(self, p_tilde: np.ndarray, v: np.ndarray) -> np.ndarray:
        return self.solve(p_tilde + self.rho * v)


_PROX_CACHE: "OrderedDict[Tuple[str, float, str], ProxOperator]" = OrderedDict()
_PROX_CACHE_SIZE = 8


def _pick_method(dimension: int, threshold: int = 4000) -> str:
    return "dense" if dimension <= threshold else "sparse"


def matrix_fingerprint(B) -> str:
    """按矩阵内容计算的摘要，原地修改后摘要随之改变"""
    digest = hashlib.blake2b(digest_size=16)
    if sp.issparse(B):
        B = sp.csc_matrix(B)
        B.sum_duplicates()
        parts = (B.indptr, B.indices, B.data)
    else:
        parts = (np.ascontiguousarray(B, dtype=float),)
    digest.update(repr(B.shape).encode())
    for part in parts:
        digest.update(np.ascontiguousarray(part).tobytes())
    return digest.hexdigest()


def prox_quadratic(B, p_tilde: np.ndarray, rho: float, v: np.ndarray) -> np.ndarray:
    """
    计算 argmin_x ½xᵀBx − p̃ᵀx + (ρ/2)‖x−v‖²

    (B+ρI) 的分解按 (B 的内容摘要, ρ) 缓存，内容相同的矩阵复用分解。

    Raises:
        InvalidConfig: rho <= 0
        SingularSystem: 分解失败
    """
    if not rho > 0:
        raise InvalidConfig(f"rho 必须为正: {rho}")
    key = (matrix_fingerprint(B), float(rho), _pick_method(B.shape[0]))
    prox = _PROX_CACHE.get(key)
    if prox is None:
        prox = ProxOperator(B, rho, key[2])
        _PROX_CACHE[key] = prox
        while len(_PROX_CACHE) > _PROX_CACHE_SIZE:
            _PROX_CACHE.popitem(last=False)
    else:
        _PROX_CACHE.move_to_end(key)
    return prox(np.asarray(p_tilde, dtype=float), np.asarray(v, dtype=float))


def clear_prox_cache():
    _PROX_CACHE.clear()


def residuals(z_half: np.ndarray, z_new: np.ndarray, z_prev: np.ndarray,
              rho: float) -> Tuple[float, float]:
    """r = z^{k+1/2} − z^{k+1}，s = −ρ(z^{k+1} − z^k)，返回二者的 ℓ₂ 范数"""
    r = np.asarray(z_half, dtype=float) - np.asarray(z_new, dtype=float)
    s = -rho * (np.asarray(z_new, dtype=float) - np.asarray(z_prev, dtype=float))
    return float(np.linalg.norm(r)), float(np.linalg.norm(s))


def kkt_residual(dual: DualQP, z: np.ndarray) -> float:
    """不动点 KKT 残差 ‖z − (z − (Bz − p̃))₊‖₂，为零当且仅当 z 最优"""
    z = np.asarray(z, dtype=float)
    grad = dual.matvec(z) - dual.p_tilde
    return float(np.linalg.norm(z - np.maximum(z - grad, 0.0)))


def _restricted_matvec(dual: DualQP, dense_B: Optional[np.ndarray], free: np.ndarray,
                       v: np.ndarray) -> np.ndarray:
    if dense_B is not None:
        return dense_B[np.ix_(free, free)] @ v
    full = np.zeros(dual.dimension)
    full[free] = v
    return dual.matvec(full)[free]


def _min_norm_step(dual: DualQP, dense_B: Optional[np.ndarray], free: np.ndarray,
                   rhs: np.ndarray) -> np.ndarray:
    """B_FF δ = rhs 的最小范数解（B_FF 可能奇异）"""
    if dense_B is not None:
        return lstsq(dense_B[np.ix_(free, free)], rhs, cond=1e-13)[0]
    op = LinearOperator(
        (free.size, free.size),
        matvec=lambda v: _restricted_matvec(dual, None, free, v),
        rmatvec=lambda v: _restricted_matvec(dual, None, free, v),
        dtype=float,
    )
    return lsqr(op, rhs, atol=1e-14, btol=1e-14, iter_lim=10 * free.size)[0]


def polish(dual: DualQP, z: np.ndarray, dense_B: Optional[np.ndarray] = None,
           max_rounds: int = 10) -> Tuple[np.ndarray, float]:
    """
    在 ADMM 解猜出的支撑集上精修 z

    自由集 F 取 z > Bz − p̃ 的坐标，其余坐标置零；在 F 上求离当前点最近的
    B_FF z_F = p̃_F 的解并截断到非负，自由集随之更新。KKT 残差不再下降时停止。

    Args:
        dense_B: 稠密 B，缺省时用 lsqr 在 B·v 上求解

    Returns:
        (精修后的 z, 其 KKT 残差)；精修无改进时返回原 z
    """
    best = np.maximum(np.asarray(z, dtype=float), 0.0)
    best_kkt = kkt_residual(dual, best)
    current = best
    for _ in range(max_rounds):
        grad = dual.matvec(current) - dual.p_tilde
        free = np.flatnonzero(current - grad > 0.0)
        candidate = np.zeros_like(current)
        if free.size:
            z_free = current[free]
            rhs = dual.p_tilde[free] - _restricted_matvec(dual, dense_B, free, z_free)
            step = _min_norm_step(dual, dense_B, free, rhs)
            candidate[free] = np.maximum(z_free + step, 0.0)
        candidate_kkt = kkt_residual(dual, candidate)
        if not candidate_kkt < best_kkt:
            break
        best, best_kkt, current = candidate, candidate_kkt, candidate
    return best, best_kkt


class AdmmState:
    """ADMM 迭代状态：z、缩放对偶 z̃ 与近端算子"""

    def __init__(self, dual: DualQP, config: SolverConfig, prox: Optional[ProxOperator] = None):
        self.dual = dual
        self.config = config
        self.prox = prox if prox is not None else ProxOperator.for_dual(dual, config)
        self.z = np.zeros(dual.dimension)
        self.z_tilde = np.zeros(dual.dimension)

    def step(self) -> Tuple[np.ndarray, np.ndarray]:
        """执行一次三步迭代，返回 (z^{k+1/2}, z^k)"""
        if not self.config.cache_factorization:
            self.prox = ProxOperator.for_dual(self.dual, self.config)
        z_half = self.prox(self.dual.p_tilde, self.z - self.z_tilde)
        z_prev = self.z
        self.z = np.maximum(z_half + self.z_tilde, 0.0)
        self.z_tilde = self.z_tilde + z_half - self.z
        return z_half, z_prev


def solve(dual: DualQP, config: Optional[SolverConfig] = None) -> DualSolution:
    """
    用算子分裂迭代求解非负对偶QP

    从 z⁰ = z̃⁰ = 0 出发，满足残差准则、μ 块近似停止或达到 max_iters 时停止。
    开启 polish 时，残差准则满足后在支撑集上精修；精修后的 KKT 残差未达到
    kkt_tolerance 则继续迭代，每 polish_interval 次再精修一次。

    Args:
        dual: 对偶QP
        config: 求解参数，缺省使用默认值

    Returns:
        DualSolution: 对偶解与诊断

    Raises:
        NumericalDivergence: 残差出现非有限值
    """
    config = config or SolverConfig()
    state = AdmmState(dual, config)
    n = dual.dimension
    sqrt_n = np.sqrt(n)
    mu_idx = dual.block("mu")
    mu_labels = tuple(dual.index_map[k] for k in mu_idx)
    records: List[Dict[str, float]] = []
    converged = MAX_ITERS
    streak = 0
    r_norm = s_norm = float("nan")
    iteration = 0
    met_at = 0
    final_z: Optional[np.ndarray] = None
    dense_B: Optional[np.ndarray] = None
    logger.info(f"开始ADMM求解: d={n}, 方式={state.prox.method}, rho={config.rho}")

    for iteration in range(1, config.max_iters + 1):
        mu_prev = state.z[mu_idx]
        z_half, z_prev = state.step()
        r_norm, s_norm = residuals(z_half, state.z, z_prev, config.rho)
        if not (np.isfinite(r_norm) and np.isfinite(s_norm)):
            raise NumericalDivergence(f"第 {iteration} 次迭代残差非有限: r={r_norm}, s={s_norm}")

        if config.log_every and iteration % config.log_every == 0:
            record = {"iter": iteration, "r_norm": r_norm, "s_norm": s_norm}
            record.update({label: float(state.z[k]) for label, k in zip(mu_labels, mu_idx)})
            records.append(record)
            logger.debug(f"iter={iteration} r={r_norm:.3e} s={s_norm:.3e}")

        if converged != CONVERGED_FULL:
            eps_pri = sqrt_n * config.eps_abs + config.eps_rel * max(
                np.linalg.norm(z_half), np.linalg.norm(state.z))
            eps_dual = sqrt_n * config.eps_abs + config.eps_rel * np.linalg.norm(
                config.rho * state.z_tilde)
            if r_norm <= eps_pri and s_norm <= eps_dual:
                converged = CONVERGED_FULL
                met_at = iteration
                if not config.polish:
                    break

        if converged == CONVERGED_FULL:
            if (iteration - met_at) % config.polish_interval == 0:
                if dense_B is None and n <= config.dense_threshold:
                    dense_B = dual.dense_B()
                candidate, candidate_kkt = polish(dual, state.z, dense_B)
                logger.debug(f"iter={iteration} 精修 KKT 残差 {candidate_kkt:.3e}")
                if candidate_kkt <= config.kkt_tolerance:
                    final_z = candidate
                    break
            continue

        if config.approx_mu_tolerance is not None and mu_idx.size:
            mu = state.z[mu_idx]
            change = np.linalg.norm(mu - mu_prev) / max(np.linalg.norm(mu), 1e-12)
            streak = streak + 1 if change < config.approx_mu_tolerance else 0
            if streak >= config.approx_mu_window:
                converged = CONVERGED_APPROX_MU
                logger.warning(f"μ 块在 {iteration} 次迭代后近似收敛，提前停止")
                break

    if converged == MAX_ITERS:
        logger.warning(f"达到最大迭代次数 {config.max_iters}: r={r_norm:.3e}, s={s_norm:.3e}")
    elif converged == CONVERGED_FULL and config.polish and final_z is None:
        logger.warning(f"精修未达到 KKT 容差 {config.kkt_tolerance}，返回最后一次迭代")
    polished = final_z is not None and not np.array_equal(final_z, state.z)
    z = final_z if final_z is not None else state.z
    solution = DualSolution(
        z=z,
        mu_block=z[mu_idx].copy(),
        mu_labels=mu_labels,
        iterations=iteration,
        final_residuals=(r_norm, s_norm),
        converged=converged,
        objective=dual.objective(z),
        linear_solver=state.prox.method,
        threads=config.threads,
        diagnostics=records,
        kkt_residual=kkt_residual(dual, z),
        polished=polished,
    )
    logger.info(f"ADMM结束: {converged}, 迭代={iteration}, KKT={solution.kkt_residual:.3e}, "
                f"目标={solution.objective:.8g}")
    return solution


def write_diagnostics_csv(solution: DualSolution, path, manifest_ref: Optional[str] = None):
    """把诊断记录写为 CSV：iter, r_norm, s_norm, μ 块"""
    columns = ["iter", "r_norm", "s_norm"] + list(solution.mu_labels)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if manifest_ref:
            f.write(f"# manifest: {manifest_ref}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for record in solution.diagnostics:
            writer.writerow([_fmt(record[c]) for c in columns])


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def banded_dual(n: int, bandwidth: int = 2, seed: int = 0) -> DualQP:
    """合成带状稀疏对偶QP，nnz 与 n 成正比"""
    rng = np.random.default_rng(seed)
    offsets = list(range(-bandwidth, bandwidth + 1))
    diagonals = []
    for off in offsets:
        length = n - abs(off)
        diagonals.append(np.full(length, 2.0 * bandwidth + 1.0) if off == 0
                         else -rng.uniform(0.0, 1.0, length))
    B = sp.diags(diagonals, offsets, shape=(n, n), format="csc")
    B = sp.csc_matrix((B + B.T) / 2.0)
    return DualQP.from_matrix(B, rng.normal(size=n))


def benchmark_iteration_cost(sizes: Sequence[int] = (1000, 10000, 100000), iters: int = 20,
                             seed: int = 0) -> Tuple[List[Tuple[int, float]], float]:
    """
    测量合成带状稀疏对偶上每次迭代的耗时

    Returns:
        ([(n, 秒/迭代)], 对数-对数斜率)
    """
    config = SolverConfig(linear_solver="direct", dense_threshold=0)
    rows = []
    for n in sizes:
        dual = banded_dual(int(n), seed=seed)
        state = AdmmState(dual, config)
        state.step()
        start = time.perf_counter()
        for _ in range(iters):
            state.step()
        elapsed = (time.perf_counter() - start) / iters
        rows.append((int(n), elapsed))
        logger.info(f"n={n}: 每次迭代 {elapsed:.3e} 秒")
    logs = np.log([[n, t] for n, t in rows])
    slope = float(np.polyfit(logs[:, 0], logs[:, 1], 1)[0])
    return rows, slope
