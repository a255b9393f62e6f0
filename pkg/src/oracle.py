"""
暴力参考求解器模块

用于所有推导型测试的独立参考实现，刻意保持朴素：
- solve_primal_dense 原问题的原始积极集法（可行初始点由 linprog 给出）
- project_dense 向用户级约束集合的欧氏投影
- oracle_dual_vector 把参考乘子映射为对偶QP坐标

不与对偶求解器共享任何线性代数代码路径。
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import linprog

try:
    from .model import (DualQP, GENERAL_LINEAR, LocalConstraint, LocalConstraintSet,
                        MooProblem, SUM_CAP)
except ImportError:
    from model import (DualQP, GENERAL_LINEAR, LocalConstraint, LocalConstraintSet,
                       MooProblem, SUM_CAP)

# 配置日志
logger = logging.getLogger(__name__)


class OracleException(Exception):
    """参考求解器相关异常"""
    pass


class TooLarge(OracleException):
    """实例超出参考求解器的规模上限"""
    pass


class Infeasible(OracleException):
    """约束集合为空"""
    pass


@dataclass
class OracleSolution:
    """参考解：x、目标值、积极约束标签与各约束乘子"""
    x: np.ndarray
    objective: float
    active_set: List[str] = field(default_factory=list)
    duals: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0


@dataclass
class _ConstraintSystem:
    """Cx <= d 与 Ex = f，附带标签"""
    C: np.ndarray
    d: np.ndarray
    ineq_labels: List[str]
    E: np.ndarray
    f: np.ndarray
    eq_labels: List[str]


class ActiveSetQP:
    """
    严格凸QP的原始积极集法：min ½γ‖x‖² + gᵀx, s.t. Cx <= d, Ex = f

    Args:
        gamma: 二次项系数（Hessian 为 γI）
        g: 线性项
        system: 约束系统
    """

    STEP_TOL = 1e-12
    MULTIPLIER_TOL = 1e-10

    def __init__(self, gamma: float, g: np.ndarray, system: _ConstraintSystem):
        self.gamma = float(gamma)
        self.g = np.asarray(g, dtype=float)
        self.system = system
        self.n = self.g.shape[0]

    def _feasible_start(self) -> np.ndarray:
        s = self.system
        res = linprog(
            np.zeros(self.n),
            A_ub=s.C if s.C.shape[0] else None,
            b_ub=s.d if s.C.shape[0] else None,
            A_eq=s.E if s.E.shape[0] else None,
            b_eq=s.f if s.E.shape[0] else None,
            bounds=[(None, None)] * self.n,
            method="highs",
        )
        if res.status != 0:
            raise Infeasible(f"约束集合不可行: {res.message}")
        return np.asarray(res.x, dtype=float)

    def _kkt(self, x: np.ndarray, working: List[int]) -> Tuple[np.ndarray, np.ndarray]:
        """求解等式子问题，返回 (步长方向 p, 乘子 λ)"""
        s = self.system
        A = np.vstack([s.E, s.C[working]]) if working else s.E
        m = A.shape[0]
        K = np.zeros((self.n + m, self.n + m))
        K[:self.n, :self.n] = self.gamma * np.eye(self.n)
        K[:self.n, self.n:] = A.T
        K[self.n:, :self.n] = A
        rhs = np.concatenate([-(self.gamma * x + self.g), np.zeros(m)])
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
        return sol[:self.n], sol[self.n:]

    def solve(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[int], int]:
        """
        Returns:
            (x, 不等式乘子, 等式乘子, 工作集, 迭代次数)
        """
        s = self.system
        x = self._feasible_start()
        working: List[int] = []
        n_eq = s.E.shape[0]
        max_iters = 50 * (s.C.shape[0] + n_eq) + 100
        for iteration in range(1, max_iters + 1):
            p, lam = self._kkt(x, working)
            if np.linalg.norm(p) <= self.STEP_TOL * max(1.0, np.linalg.norm(x)):
                ineq = lam[n_eq:]
                if not working or ineq.min() >= -self.MULTIPLIER_TOL:
                    y = np.zeros(s.C.shape[0])
                    y[working] = np.maximum(ineq, 0.0)
                    return x, y, lam[:n_eq], working, iteration
                working.pop(int(np.argmin(ineq)))
                continue
            alpha, blocking = 1.0, None
            Cp = s.C @ p
            for j in np.where(Cp > self.STEP_TOL)[0]:
                if j in working:
                    continue
                ratio = max(0.0, (s.d[j] - s.C[j] @ x) / Cp[j])
                if ratio < alpha:
                    alpha, blocking = ratio, int(j)
            x = x + alpha * p
            if blocking is not None:
                working.append(blocking)
        raise OracleException(f"积极集法在 {max_iters} 次迭代内未收敛")


def _problem_system(problem: MooProblem) -> _ConstraintSystem:
    n_users, n_items = problem.num_users, problem.num_items
    n = problem.size
    rows, bounds, labels = [], [], []
    for k, b in enumerate(problem.budgets):
        rows.append(b.sign * b.weights.ravel())
        bounds.append(b.sign * b.bound)
        labels.append(f"mu[{k}]")
    eq_rows, eq_bounds, eq_labels = [], [], []
    for s in sorted(problem.locals, key=lambda s: s.user):
        offset = s.user * n_items
        for j, c in enumerate(s.constraints):
            G, h, E, f = c.rows(n_items)
            for k in range(G.shape[0]):
                row = np.zeros(n)
                row[offset:offset + n_items] = G[k]
                rows.append(row)
                bounds.append(h[k])
                if c.kind == GENERAL_LINEAR:
                    labels.append(f"lin[{s.user},{j},{k}]")
                else:
                    labels.append(f"{'cap' if c.kind == SUM_CAP else 'floor'}[{s.user},{j}]")
            for k in range(E.shape[0]):
                row = np.zeros(n)
                row[offset:offset + n_items] = E[k]
                eq_rows.append(row)
                eq_bounds.append(f[k])
                eq_labels.append(f"nu[{s.user}]" if j == 0 else f"nu[{s.user},{j}]")
    for u in range(n_users):
        for i in range(n_items):
            row = np.zeros(n)
            row[u * n_items + i] = -1.0
            rows.append(row)
            bounds.append(0.0)
            labels.append(f"xi[{u},{i}]")
    for u in range(n_users):
        for i in range(n_items):
            row = np.zeros(n)
            row[u * n_items + i] = 1.0
            rows.append(row)
            bounds.append(1.0)
            labels.append(f"eta[{u},{i}]")
    E = np.vstack(eq_rows) if eq_rows else np.zeros((0, n))
    return _ConstraintSystem(np.vstack(rows), np.array(bounds), labels,
                             E, np.array(eq_bounds, dtype=float), eq_labels)


def _local_system(local: LocalConstraintSet, dim: int) -> _ConstraintSystem:
    G, h, E, f = local.rows(dim)
    C = np.vstack([G, -np.eye(dim), np.eye(dim)])
    d = np.concatenate([h, np.zeros(dim), np.ones(dim)])
    labels = [f"g[{k}]" for k in range(G.shape[0])]
    labels += [f"xi[{i}]" for i in range(dim)] + [f"eta[{i}]" for i in range(dim)]
    return _ConstraintSystem(C, d, labels, E, f, [f"e[{k}]" for k in range(E.shape[0])])


def _collect(system: _ConstraintSystem, y: np.ndarray, lam_eq: np.ndarray,
             working: List[int]) -> Tuple[List[str], Dict[str, float]]:
    duals = {label: float(v) for label, v in zip(system.ineq_labels, y)}
    duals.update({label: float(v) for label, v in zip(system.eq_labels, lam_eq)})
    active = list(system.eq_labels) + [system.ineq_labels[j] for j in sorted(working)]
    return active, duals


def solve_primal_dense(problem: MooProblem, max_size: int = 200) -> OracleSolution:
    """
    用积极集法精确求解原问题

    Args:
        problem: 问题实例（N·M <= max_size）

    Returns:
        OracleSolution: 解、目标值 −aᵀx + (γ/2)xᵀx、积极集与乘子

    Raises:
        TooLarge: 实例规模超限
        Infeasible: 约束集合为空
    """
    if problem.size > max_size:
        raise TooLarge(f"N·M = {problem.size} 超过参考求解器上限 {max_size}")
    system = _problem_system(problem)
    a = problem.a_vector
    qp = ActiveSetQP(problem.gamma, -a, system)
    x, y, lam_eq, working, iterations = qp.solve()
    active, duals = _collect(system, y, lam_eq, working)
    objective = float(-a @ x + 0.5 * problem.gamma * x @ x)
    logger.debug(f"参考解: 目标={objective:.10g}, 迭代={iterations}, 积极约束={len(active)}")
    return OracleSolution(x, objective, active, duals, iterations)


def project_dense(v: np.ndarray, local: Optional[LocalConstraintSet] = None,
                  max_dim: int = 50) -> np.ndarray:
    """
    v 到 {x: x 满足 local, 0 <= x <= 1} 的欧氏投影

    Raises:
        TooLarge: 维度超过 max_dim
        Infeasible: 集合为空
    """
    v = np.asarray(v, dtype=float)
    if v.shape[0] > max_dim:
        raise TooLarge(f"投影维度 {v.shape[0]} 超过上限 {max_dim}")
    if local is None:
        local = LocalConstraintSet(0, ())
    system = _local_system(local, v.shape[0])
    x, _, _, _, _ = ActiveSetQP(1.0, -v, system).solve()
    return x


def project_capped_dense(v: np.ndarray, cap: float) -> np.ndarray:
    """参考的加帽盒投影（{0<=x<=1, Σx<=cap}）"""
    return project_dense(v, LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=cap),)))


def oracle_dual_vector(solution: OracleSolution, dual: DualQP) -> np.ndarray:
    """
    把参考乘子映射为对偶QP的 z 向量

    等式乘子 λ 拆为 ν₊ = max(λ,0)、ν₋ = max(−λ,0)。
    """
    z = np.zeros(dual.dimension)
    for k, label in enumerate(dual.index_map):
        if label.startswith("nu+") or label.startswith("nu-"):
            value = solution.duals.get("nu" + label[3:], 0.0)
            z[k] = max(value, 0.0) if label.startswith("nu+") else max(-value, 0.0)
        else:
            z[k] = max(solution.duals.get(label, 0.0), 0.0)
    return z

