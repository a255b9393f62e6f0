"""
合成实例生成模块

所有生成器对给定种子是确定的：
- uniform: 均匀随机实例（单预算，可选单纯形等式或每用户上限）
- sparse-spike-mixture: 带稀疏尖峰的混合分布实例
- binary-tree: N = 2^K 个叶子的嵌套下限约束实例
- EmailBenchmark: 方差研究用的投诉上限 + 浏览下限基准总体
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

try:
    from .instance_file import BadParams
    from .model import (GE, LE, SIMPLEX_EQUALITY, SUM_CAP, GlobalBudget, LocalConstraint,
                        LocalConstraintSet, MooProblem)
    from .variance import PopulationMoments
except ImportError:
    from instance_file import BadParams
    from model import (GE, LE, SIMPLEX_EQUALITY, SUM_CAP, GlobalBudget, LocalConstraint,
                       LocalConstraintSet, MooProblem)
    from variance import PopulationMoments

# 配置日志
logger = logging.getLogger(__name__)

KINDS = ("uniform", "sparse-spike-mixture", "binary-tree")


def sparse_spike_values(rng: np.random.Generator, size, spike_weight: float = 0.1,
                        spike_value: float = 0.0, a: float = 2.0, b: float = 5.0) -> np.ndarray:
    """以概率 spike_weight 取尖峰值，否则取 Beta(a, b)"""
    if not 0.0 <= spike_weight <= 1.0:
        raise BadParams(f"spike_weight 必须在 [0,1] 内: {spike_weight}")
    if not 0.0 <= spike_value <= 1.0:
        raise BadParams(f"spike_value 必须在 [0,1] 内: {spike_value}")
    spikes = rng.random(size) < spike_weight
    return np.where(spikes, spike_value, rng.beta(a, b, size))


def _locals(N: int, M: int, local_kind: Optional[str], cap: Optional[float]):
    if local_kind is None:
        return ()
    if local_kind == "simplex":
        return tuple(LocalConstraintSet(u, (LocalConstraint(SIMPLEX_EQUALITY),)) for u in range(N))
    if local_kind == "cap":
        if cap is None or not cap > 0:
            raise BadParams("cap 约束需要正的 cap 参数")
        return tuple(LocalConstraintSet(u, (LocalConstraint(SUM_CAP, bound=cap),)) for u in range(N))
    raise BadParams(f"未知的用户级约束类型: {local_kind}")


def uniform_instance(N: int, M: int, seed: int = 0, gamma: float = 1.0,
                     budget_rate: float = 0.3, local_kind: Optional[str] = None,
                     cap: Optional[float] = None) -> MooProblem:
    """
    p, r, q ~ U[0,1]，单个风险预算 Σ r x <= budget_rate · Σ r

    Args:
        local_kind: None | "simplex" | "cap"
    """
    if N < 1 or M < 1 or not gamma > 0 or not budget_rate > 0:
        raise BadParams("需要 N, M >= 1 且 gamma, budget_rate > 0")
    rng = np.random.default_rng(seed)
    p = rng.random((N, M))
    r = rng.random((N, M))
    q = rng.random((N, M))
    budget = GlobalBudget(r, LE, budget_rate * float(r.sum()), "risk")
    return MooProblem(p, r, q, gamma, (budget,), _locals(N, M, local_kind, cap))


def spike_instance(N: int, M: int, seed: int = 0, gamma: float = 1.0, budget_rate: float = 0.3,
                   spike_weight: float = 0.1, spike_value: float = 0.0,
                   local_kind: Optional[str] = None, cap: Optional[float] = None) -> MooProblem:
    """p、r 取自稀疏尖峰混合分布，q 均匀"""
    if N < 1 or M < 1 or not gamma > 0 or not budget_rate > 0:
        raise BadParams("需要 N, M >= 1 且 gamma, budget_rate > 0")
    rng = np.random.default_rng(seed)
    p = sparse_spike_values(rng, (N, M), spike_weight, spike_value, 2.0, 5.0)
    r = sparse_spike_values(rng, (N, M), spike_weight, spike_value, 1.5, 10.0)
    q = rng.random((N, M))
    budget = GlobalBudget(r, LE, budget_rate * float(r.sum()), "risk")
    return MooProblem(p, r, q, gamma, (budget,), _locals(N, M, local_kind, cap))


def binary_tree_subsets(K: int) -> List[Tuple[int, frozenset, int]]:
    """K 层二叉树的全部节点集合 (层级=集合大小, 成员, 深度)"""
    if K < 0:
        raise BadParams(f"K 不能为负: {K}")
    N = 2 ** K
    subsets = []
    for depth in range(K + 1):
        width = N >> depth
        for j in range(2 ** depth):
            subsets.append((width, frozenset(range(j * width, (j + 1) * width)), depth))
    return subsets


def tree_rate(depth: int, K: int) -> float:
    """深度 d 的下限比例，从叶子的 0.1 线性升到根的 0.4"""
    return 0.1 + 0.3 * (K - depth) / K if K > 0 else 0.4


def tree_engagement(rng: np.random.Generator, size) -> np.ndarray:
    """p = 0.2 + 0.6·Beta 混合，保证 p >= 0.2"""
    return 0.2 + 0.6 * sparse_spike_values(rng, size, 0.2, 0.9, 2.0, 4.0)


TREE_THETA = 0.2 + 0.6 * (0.2 * 0.9 + 0.8 * 2.0 / 6.0)


def binary_tree_instance(K: int, seed: int = 0, gamma: float = 1.0,
                         p: Optional[np.ndarray] = None) -> MooProblem:
    """
    N = 2^K 个用户、M = 1 的嵌套下限实例

    每个树节点 S 对应 Σ_{u∈S} p_u x_u >= rate(d)·|S|·θ，目标为最小化 Σx + (γ/2)‖x‖²
    （gain = −1, q = 0）。θ 为总体均值，所以离线/在线实例只有 p 不同。
    """
    if not 0 <= K <= 16:
        raise BadParams(f"K 必须在 [0, 16] 内: {K}")
    N = 2 ** K
    if p is None:
        p = tree_engagement(np.random.default_rng(seed), (N, 1))
    p = np.asarray(p, dtype=float).reshape(N, 1)
    budgets = []
    for width, members, depth in binary_tree_subsets(K):
        bound = tree_rate(depth, K) * width * TREE_THETA
        budgets.append(GlobalBudget(p, GE, bound, f"d{depth}", tuple(sorted(members))))
    zeros = np.zeros((N, 1))
    return MooProblem(p, zeros, zeros, gamma, tuple(budgets), (), -np.ones((N, 1)))


def resample_tree(problem: MooProblem, seed: int) -> MooProblem:
    """同结构、重新抽取 p 的实例（离线样本）"""
    K = int(np.log2(problem.num_users))
    p = tree_engagement(np.random.default_rng(seed), (problem.num_users, 1))
    return binary_tree_instance(K, gamma=problem.gamma, p=p)


def gen_instance(kind: str, params: Dict[str, Any], seed: int) -> MooProblem:
    """
    按类型生成实例

    Raises:
        BadParams: 类型或参数非法
    """
    params = dict(params)
    try:
        if kind == "uniform":
            return uniform_instance(int(params.pop("N", 10)), int(params.pop("M", 3)), seed,
                                    **params)
        if kind == "sparse-spike-mixture":
            return spike_instance(int(params.pop("N", 10)), int(params.pop("M", 3)), seed,
                                  **params)
        if kind == "binary-tree":
            return binary_tree_instance(int(params.pop("K", 3)), seed, **params)
    except TypeError as e:
        raise BadParams(f"{kind} 参数非法: {e}") from e
    raise BadParams(f"未知的实例类型: {kind}，可选 {KINDS}")


def gaussian_population(N: int, dim: int, seed: int = 0) -> np.ndarray:
    """随机均值与协方差的高斯总体，N×dim"""
    rng = np.random.default_rng(seed)
    mean = rng.uniform(0.2, 0.8, dim)
    factor = rng.normal(scale=0.1, size=(dim, dim))
    cov = factor @ factor.T + 0.01 * np.eye(dim)
    return rng.multivariate_normal(mean, cov, size=N)


@dataclass(frozen=True, eq=False)
class EmailBenchmark:
    """
    邮件发送基准：最小化 Σx + (γ/2)‖x − 1‖²，约束

    - 投诉上限 Σ r x <= complaint_rate · n · Σθ_r（对偶 μ₀）
    - 浏览下限 Σ p x >= pageview_rate · n · Σθ_p（对偶 μ₁）

    上下限由总体均值给出，只有样本行随采样变化。
    """
    population_p: np.ndarray
    population_r: np.ndarray
    gamma: float = 2.0
    complaint_rate: float = 0.45
    pageview_rate: float = 0.55

    @property
    def population_size(self) -> int:
        return int(self.population_p.shape[0])

    @cached_property
    def p_moments(self) -> PopulationMoments:
        return PopulationMoments.from_rows(self.population_p)

    @cached_property
    def r_moments(self) -> PopulationMoments:
        return PopulationMoments.from_rows(self.population_r)

    def build_problem(self, p_rows: np.ndarray, r_rows: np.ndarray) -> MooProblem:
        """预算权重直接使用（可能越界的）变换后样本，p/r 字段保存截断值"""
        n, m = p_rows.shape
        complaint = self.complaint_rate * n * float(self.r_moments.theta.sum())
        pageview = self.pageview_rate * n * float(self.p_moments.theta.sum())
        budgets = (
            GlobalBudget(r_rows, LE, complaint, "complaints"),
            GlobalBudget(p_rows, GE, pageview, "pageviews"),
        )
        ones = np.ones((n, m))
        return MooProblem(np.clip(p_rows, 0.0, 1.0), np.clip(r_rows, 0.0, 1.0), ones,
                          self.gamma, budgets, (), -ones)


def email_benchmark(N: int = 2000, M: int = 3, seed: int = 0,
                    spike_weight: float = 0.1) -> EmailBenchmark:
    """生成邮件基准总体：p、r 相互独立，各物品分布参数不同"""
    if N < 2 or M < 1:
        raise BadParams("需要 N >= 2 且 M >= 1")
    rng = np.random.default_rng(seed)
    p = np.column_stack([sparse_spike_values(rng, N, spike_weight, 0.02, 2.0 + i, 5.0)
                         for i in range(M)])
    r = np.column_stack([sparse_spike_values(rng, N, spike_weight, 0.0, 1.5, 6.0 + 2.0 * i)
                         for i in range(M)])
    return EmailBenchmark(p, r)
