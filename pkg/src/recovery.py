"""
原始解恢复模块

由全局对偶 μ 与用户参数恢复每个用户的最优投放计划：
- recover_capped 排序-阈值闭式解（断点扫描，O(M log M)）
- enumerate_patterns 逐对枚举 (t₁,t₂) 的字面实现，用于对照
- recover_general 向用户级约束集合 𝒦_u 的投影
- project_capped_box 向 {0<=x<=1, Σx<=cap} 的投影（ν 二分）
- recover_user / recover_all 第二阶段批量恢复
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

try:
    from .dual_solver import SolverConfig, solve
    from .model import (GENERAL_LINEAR, SIMPLEX_EQUALITY, SUM_CAP, SUM_FLOOR, LocalConstraintSet,
                        MooProblem, dualize, local_region_is_nonempty)
except ImportError:
    from dual_solver import SolverConfig, solve
    from model import (GENERAL_LINEAR, SIMPLEX_EQUALITY, SUM_CAP, SUM_FLOOR, LocalConstraintSet,
                       MooProblem, dualize, local_region_is_nonempty)

# 配置日志
logger = logging.getLogger(__name__)


class RecoveryException(Exception):
    """原始解恢复相关异常"""
    pass


class NoValidPattern(RecoveryException):
    """没有 (t₁,t₂) 满足窗口条件，通常是数值退化"""
    pass


class InfeasibleLocalSet(RecoveryException):
    """用户级约束集合与盒约束不相交"""
    pass


# 内层投影求解参数
INNER_CONFIG = SolverConfig(eps_abs=1e-10, eps_rel=1e-10, max_iters=20000)
FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class UserScores:
    """用户得分 c_u = a_u − Σ_k μ_k·(±w_k)_u"""
    user: int
    c: np.ndarray
    gamma: float

    def __post_init__(self):
        c = np.array(self.c, dtype=float, copy=True)
        if not np.all(np.isfinite(c)):
            raise RecoveryException(f"用户 {self.user} 的得分含非有限值")
        if not self.gamma > 0:
            raise RecoveryException("gamma 必须为正")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)

    @classmethod
    def from_problem(cls, problem: MooProblem, user: int, mu: Sequence[float]) -> "UserScores":
        """按预算方向组合：<= 预算减去 μw，>= 预算加上 μw"""
        mu = np.asarray(mu, dtype=float)
        if mu.shape[0] != len(problem.budgets):
            raise RecoveryException(f"μ 长度 {mu.shape[0]} 与预算数 {len(problem.budgets)} 不一致")
        c = np.array(problem.a[user], dtype=float)
        for m, b in zip(mu, problem.budgets):
            c -= m * b.sign * b.weights[user]
        return cls(user, c, problem.gamma)

    @property
    def target(self) -> np.ndarray:
        """投影目标 c/γ"""
        return self.c / self.gamma


@dataclass
class ServingPlan:
    """单个用户的投放计划"""
    user: int
    x: np.ndarray
    nu: Optional[float] = None
    active_pattern: Optional[Tuple[int, int]] = None
    feasible: bool = True
    method: str = ""


def _shifted_clip_root(v: np.ndarray, target: float) -> float:
    """求 τ 使 Σ clip(v − τ, 0, 1) = target（0 <= target <= len(v)）"""
    lo, hi = float(v.min()) - 1.0, float(v.max())

    def excess(tau: float) -> float:
        return float(np.clip(v - tau, 0.0, 1.0).sum()) - target

    if excess(hi) == 0.0:
        return hi
    return brentq(excess, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def project_capped_box(v: np.ndarray, cap: float) -> np.ndarray:
    """
    v 到 {x: 0<=x<=1, Σx<=cap} 的精确欧氏投影

    Args:
        v: 待投影向量
        cap: 上限（> 0）

    Returns:
        np.ndarray: 投影结果
    """
    if not cap > 0:
        raise RecoveryException(f"cap 必须为正: {cap}")
    v = np.asarray(v, dtype=float)
    x = np.clip(v, 0.0, 1.0)
    if x.sum() <= cap:
        return x
    nu = _shifted_clip_root(v, cap)
    return np.clip(v - nu, 0.0, 1.0)


def _canonical_pattern(u: np.ndarray, binding: bool, tol: float = 1e-12) -> Tuple[int, int]:
    """
    由降序排列的 (c−ν)/γ 给出 (t₁,t₂)

    t₁ 取最小可行值；约束紧时 t₂ 至少为 t₁+1，与逐对枚举找到的第一组一致。
    """
    t1 = int(np.sum(u > 1.0 + tol))
    t2 = int(np.sum(u > tol))
    if binding:
        t2 = min(max(t2, t1 + 1), u.shape[0])
    return t1, t2


def recover_capped(scores: UserScores, cap: float) -> ServingPlan:
    """
    SumCap 约束下的排序-阈值恢复

    若 ν=0 时上限不紧，返回 clip(c/γ, 0, 1)；否则在 ν 的断点上扫描，
    用前缀和计算每段的 Σx，定位满足 Σx = K_u 的段并用闭式公式求 ν。
    退化段（t₂ = t₁）交给 ν 二分。

    Args:
        scores: 用户得分
        cap: K_u（> 0）

    Returns:
        ServingPlan: 含 x、ν 与 (t₁,t₂)

    Raises:
        NoValidPattern: 找不到满足条件的段
    """
    if not cap > 0:
        raise RecoveryException(f"K_u 必须为正: {cap}")
    c, gamma = scores.c, scores.gamma
    order = np.argsort(-c, kind="stable")
    cs = c[order]
    x = np.clip(c / gamma, 0.0, 1.0)
    if x.sum() <= cap + 1e-12:
        pattern = _canonical_pattern(cs / gamma, binding=False)
        return ServingPlan(scores.user, x, 0.0, pattern, True, "capped")

    m = cs.shape[0]
    prefix = np.concatenate([[0.0], np.cumsum(cs)])
    ascending = cs[::-1]

    def counts(nu: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        # t₁ = #{c >= ν+γ}，t₂ = #{c > ν}
        t1 = m - np.searchsorted(ascending, nu + gamma, side="left")
        t2 = m - np.searchsorted(ascending, nu, side="right")
        return t1, t2

    def total(nu: np.ndarray) -> np.ndarray:
        t1, t2 = counts(nu)
        return t1 + (prefix[t2] - prefix[t1] - (t2 - t1) * nu) / gamma

    breakpoints = np.concatenate([cs - gamma, cs])
    breakpoints = np.unique(breakpoints[breakpoints > 0.0])
    nus = np.concatenate([[0.0], breakpoints])
    values = total(nus)
    below = np.nonzero(values <= cap)[0]
    if below.size == 0 or below[0] == 0:
        raise NoValidPattern(f"用户 {scores.user}: 断点扫描未找到穿越 K_u 的段")
    j = int(below[0])
    lo, hi = nus[j - 1], nus[j]
    t1, t2 = counts(np.array([(lo + hi) / 2.0]))
    t1, t2 = int(t1[0]), int(t2[0])
    if t2 > t1 and values[j] < cap:
        nu = (gamma * (t1 - cap) + prefix[t2] - prefix[t1]) / (t2 - t1)
    else:
        nu = brentq(lambda t: float(total(np.array([t]))[0]) - cap, lo, hi,
                    xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    x = np.clip((c - nu) / gamma, 0.0, 1.0)
    pattern = _canonical_pattern((cs - nu) / gamma, binding=True)
    return ServingPlan(scores.user, x, float(nu), pattern, True, "capped")


def _window_ok(u: np.ndarray, t1: int, t2: int, strict: bool, tol: float) -> bool:
    """窗口条件，u 为降序的 (c−ν)/γ，t₁/t₂ 为 1 起始的位置"""
    m = u.shape[0]
    if strict:
        gt = lambda a, b: a > b
    else:
        gt = lambda a, b: a >= b - tol
    if t1 >= 1 and not gt(u[t1 - 1], 1.0):
        return False
    if not gt(1.0, u[t1]) or not gt(u[t2 - 1], 0.0):
        return False
    if t2 < m and not gt(0.0, u[t2]):
        return False
    return True


def enumerate_patterns(scores: UserScores, cap: float, strict: bool = False,
                       tol: float = 1e-12) -> ServingPlan:
    """
    逐对枚举 0 <= t₁ < t₂ <= M，返回第一组满足窗口条件的解

    Args:
        strict: True 时边界等号不算满足

    Raises:
        NoValidPattern: 所有组合都不满足
    """
    c, gamma = scores.c, scores.gamma
    x = np.clip(c / gamma, 0.0, 1.0)
    order = np.argsort(-c, kind="stable")
    cs = c[order]
    if x.sum() <= cap + 1e-12:
        return ServingPlan(scores.user, x, 0.0, _canonical_pattern(cs / gamma, False), True,
                           "enumerate")
    m = cs.shape[0]
    for t1 in range(m):
        for t2 in range(t1 + 1, m + 1):
            nu = (gamma * (t1 - cap) + cs[t1:t2].sum()) / (t2 - t1)
            u = (cs - nu) / gamma
            if _window_ok(u, t1, t2, strict, tol):
                x = np.zeros(m)
                x[order[:t1]] = 1.0
                x[order[t1:t2]] = u[t1:t2]
                return ServingPlan(scores.user, np.clip(x, 0.0, 1.0), float(nu), (t1, t2), True,
                                   "enumerate")
    raise NoValidPattern(f"用户 {scores.user}: 没有满足窗口条件的 (t₁,t₂)")


def readings_disagree(scores: UserScores, cap: float) -> bool:
    """严格与非严格两种窗口条件读法是否给出不同结果"""
    loose = enumerate_patterns(scores, cap, strict=False)
    try:
        tight = enumerate_patterns(scores, cap, strict=True)
    except NoValidPattern:
        return True
    return not np.allclose(loose.x, tight.x, atol=1e-12)


def _project_halfspace(v: np.ndarray, w: np.ndarray, bound: float,
                       user: int) -> Tuple[np.ndarray, float]:
    """{x ∈ [0,1]^M : wᵀx <= bound} 上的投影 clip(v − τw, 0, 1)，τ >= 0"""
    x = np.clip(v, 0.0, 1.0)
    if w @ x <= bound:
        return x, 0.0
    lowest = float(np.minimum(w, 0.0).sum())
    if bound < lowest - FEASIBILITY_TOL:
        raise InfeasibleLocalSet(f"用户 {user} 的约束 wᵀx <= {bound} 与盒约束不相交")

    def excess(tau: float) -> float:
        return float(w @ np.clip(v - tau * w, 0.0, 1.0)) - bound

    hi = 1.0
    for _ in range(200):
        if excess(hi) <= 0.0:
            break
        hi *= 2.0
    if excess(hi) >= 0.0:
        return np.clip(v - hi * w, 0.0, 1.0), hi
    tau = brentq(excess, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return np.clip(v - tau * w, 0.0, 1.0), float(tau)


def _project_single(v: np.ndarray, local: LocalConstraintSet) -> Optional[Tuple[np.ndarray, float]]:
    """单条 SumCap/SumFloor/SimplexEquality 约束的闭式平移截断投影"""
    if len(local.constraints) != 1:
        return None
    c = local.constraints[0]
    if c.kind == GENERAL_LINEAR:
        if c.A.shape[0] != 1:
            return None
        return _project_halfspace(v, c.A[0], float(c.b[0]), local.user)
    idx = c.item_indices(v.shape[0])
    x = np.clip(v, 0.0, 1.0)
    sub = v[idx]
    current = x[idx].sum()
    if c.kind == SUM_CAP:
        if current <= c.bound:
            return x, 0.0
        tau = _shifted_clip_root(sub, c.bound)
    elif c.kind == SUM_FLOOR:
        if c.bound > idx.shape[0]:
            raise InfeasibleLocalSet(f"SumFloor 下限 {c.bound} 超过物品数 {idx.shape[0]}")
        if current >= c.bound:
            return x, 0.0
        tau = _shifted_clip_root(sub, c.bound)
    else:
        tau = _shifted_clip_root(sub, 1.0)
    x[idx] = np.clip(sub - tau, 0.0, 1.0)
    # 下限约束的乘子为 −τ
    return x, float(-tau if c.kind == SUM_FLOOR else tau)


def _polish(v: np.ndarray, C: np.ndarray, d: np.ndarray, E: np.ndarray, f: np.ndarray,
            active: List[int]) -> Optional[np.ndarray]:
    """
    积极集精修：在猜测的积极行上求等式约束投影，
    逐步加入违反最大的行或去掉乘子最负的行

    Returns:
        精修后的 x，失败时返回 None
    """
    n_eq = E.shape[0]
    active = list(active)
    for _ in range(10 * (C.shape[0] + 1)):
        A = np.vstack([E, C[active]]) if active else E
        b = np.concatenate([f, d[active]]) if active else f
        if A.shape[0]:
            lam = np.linalg.lstsq(A @ A.T, A @ v - b, rcond=None)[0]
            x = v - A.T @ lam
        else:
            lam = np.zeros(0)
            x = v.copy()
        violation = C @ x - d
        worst = int(np.argmax(violation))
        if violation[worst] > FEASIBILITY_TOL and worst not in active:
            active.append(worst)
            continue
        ineq = lam[n_eq:]
        if ineq.size and ineq.min() < -FEASIBILITY_TOL:
            active.pop(int(np.argmin(ineq)))
            continue
        if n_eq and np.max(np.abs(E @ x - f)) > FEASIBILITY_TOL:
            return None
        return x
    return None


def project_polytope(v: np.ndarray, local: LocalConstraintSet) -> np.ndarray:
    """
    v 到 𝒦_u ∩ [0,1]^M 的投影：对偶化后用同一 ADMM 迭代求解，再做积极集精修

    Raises:
        InfeasibleLocalSet: 集合为空
    """
    m = v.shape[0]
    G, h, E, f = local.rows(m)
    if not local_region_is_nonempty(G, h, E, f):
        raise InfeasibleLocalSet(f"用户 {local.user} 的约束集合与盒约束不相交")
    dual = dualize(
        v, 1.0,
        sp.csr_matrix(G), h, [f"g[{k}]" for k in range(G.shape[0])],
        sp.csr_matrix(E), f, [f"[{k}]" for k in range(E.shape[0])],
        [(f"xi[{i}]", f"eta[{i}]") for i in range(m)],
    )
    solution = solve(dual, INNER_CONFIG)
    x_admm = np.clip(dual.stationarity_point(solution.z), 0.0, 1.0)

    C = np.vstack([G, -np.eye(m), np.eye(m)])
    d = np.concatenate([h, np.zeros(m), np.ones(m)])
    active = [k for k in range(C.shape[0]) if abs(C[k] @ x_admm - d[k]) <= 1e-7]
    x = _polish(v, C, d, E, f, active)
    if x is None:
        logger.warning(f"用户 {local.user}: 积极集精修失败，使用 ADMM 结果")
        return x_admm
    return np.clip(x, 0.0, 1.0)


def _is_feasible(x: np.ndarray, local: Optional[LocalConstraintSet]) -> bool:
    if np.any(x < -FEASIBILITY_TOL) or np.any(x > 1 + FEASIBILITY_TOL):
        return False
    if local is None or not local.constraints:
        return True
    G, h, E, f = local.rows(x.shape[0])
    if G.shape[0] and np.any(G @ x - h > 1e-6):
        return False
    return not (E.shape[0] and np.any(np.abs(E @ x - f) > 1e-6))


def recover_general(scores: UserScores, local: Optional[LocalConstraintSet]) -> ServingPlan:
    """
    返回 Π_{𝒦_u}(c_u/γ)

    单条 SumCap/SumFloor/SimplexEquality 用闭式平移截断；
    其余集合走对偶化投影 + 精修。

    Raises:
        InfeasibleLocalSet: 集合为空
    """
    v = scores.target
    if local is None or not local.constraints:
        return ServingPlan(scores.user, np.clip(v, 0.0, 1.0), None, None, True, "box")
    single = _project_single(v, local)
    if single is not None:
        x, tau = single
        method = "shifted-clip"
    else:
        x, tau = project_polytope(v, local), None
        method = "polytope"
    return ServingPlan(scores.user, x, tau, None, _is_feasible(x, local), method)


def recover_user(problem: MooProblem, user: int, mu: Sequence[float],
                 stage2: str = "auto") -> ServingPlan:
    """
    第二阶段：对单个用户选择恢复方式

    stage2="auto" 时整体 SumCap 走断点扫描，"general" 时一律走投影。
    """
    scores = UserScores.from_problem(problem, user, mu)
    local = problem.local_for(user)
    if local is not None and stage2 == "auto":
        cap = local.single(SUM_CAP)
        if cap is not None and cap.items is None:
            return recover_capped(scores, cap.bound)
    plan = recover_general(scores, local)
    if not plan.feasible:
        logger.warning(f"用户 {user} 的投放计划未满足用户级约束")
    return plan


def recover_all(problem: MooProblem, mu: Sequence[float], threads: int = 1,
                stage2: str = "auto") -> List[ServingPlan]:
    """对所有用户恢复投放计划，结果按用户编号排列"""
    users = range(problem.num_users)
    if threads <= 1:
        return [recover_user(problem, u, mu, stage2) for u in users]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda u: recover_user(problem, u, mu, stage2), users))


def plans_to_matrix(plans: Sequence[ServingPlan]) -> np.ndarray:
    return np.vstack([p.x for p in sorted(plans, key=lambda p: p.user)])

