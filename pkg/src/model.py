"""
MOO问题模型模块

表示带约束的多目标推荐QP实例，并组装其非负对偶QP：
- MooProblem / GlobalBudget / LocalConstraint / LocalConstraintSet 数据类型
- validate 实例校验（返回报告，不抛异常）
- assemble_dual 标准布局（预算 + 单纯形等式 + 盒约束）的对偶QP
- assemble_dual_extended 将用户级线性约束一并对偶化
- primal_from_dual_stationarity 由对偶向量得到驻点 (a + Ãz)/γ
- problem_is_feasible 整体可行性 LP 检查
"""

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

# 配置日志
logger = logging.getLogger(__name__)


class ModelException(Exception):
    """问题模型相关异常"""
    pass


class UnsupportedLayout(ModelException):
    """约束布局不被当前对偶组装方式支持"""
    pass


class DimensionMismatch(ModelException):
    """向量/矩阵维度不匹配"""
    pass


class InvalidProblem(ModelException):
    """实例未通过校验"""
    pass


# 预算方向
LE = "<="
GE = ">="
DIRECTIONS = (LE, GE)

# 用户级约束类型
SUM_CAP = "sum_cap"
SUM_FLOOR = "sum_floor"
SIMPLEX_EQUALITY = "simplex_equality"
GENERAL_LINEAR = "general_linear"
LOCAL_KINDS = (SUM_CAP, SUM_FLOOR, SIMPLEX_EQUALITY, GENERAL_LINEAR)


def _frozen_array(values, dtype=float) -> np.ndarray:
    """复制为只读数组"""
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GlobalBudget:
    """全局预算约束 Σ w_ui x_ui (<= | >=) bound"""
    weights: np.ndarray
    direction: str = LE
    bound: float = 0.0
    label: str = ""
    users: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        weights = np.array(np.atleast_2d(self.weights), dtype=float, copy=True)
        if self.users is not None:
            users = tuple(sorted(int(u) for u in self.users))
            object.__setattr__(self, "users", users)
            # 子集之外的用户权重置零
            outside = np.ones(weights.shape[0], dtype=bool)
            outside[[u for u in users if 0 <= u < weights.shape[0]]] = False
            weights[outside] = 0.0
        object.__setattr__(self, "weights", _frozen_array(weights))
        object.__setattr__(self, "bound", float(self.bound))

    @property
    def sign(self) -> float:
        """<= 为 +1，>= 为 -1（统一写成 sign·wᵀx <= sign·bound）"""
        return 1.0 if self.direction == LE else -1.0

    def members(self, num_users: int) -> Tuple[int, ...]:
        """预算涉及的用户集合"""
        return self.users if self.users is not None else tuple(range(num_users))


@dataclass(frozen=True, eq=False)
class LocalConstraint:
    """
    单条用户级约束

    Args:
        kind: sum_cap | sum_floor | simplex_equality | general_linear
        items: 作用的物品下标子集，None 表示全部物品
        bound: sum_cap 的 K_u 或 sum_floor 的 n₁ᵘ
        A, b: general_linear 的 A_u x_u <= b_u
    """
    kind: str
    items: Optional[Tuple[int, ...]] = None
    bound: float = 0.0
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.items is not None:
            object.__setattr__(self, "items", tuple(int(i) for i in self.items))
        object.__setattr__(self, "bound", float(self.bound))
        if self.A is not None:
            object.__setattr__(self, "A", _frozen_array(np.atleast_2d(self.A)))
        if self.b is not None:
            object.__setattr__(self, "b", _frozen_array(np.atleast_1d(self.b)))

    def item_indices(self, num_items: int) -> np.ndarray:
        if self.items is None:
            return np.arange(num_items)
        return np.asarray(self.items, dtype=int)

    def rows(self, num_items: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """
        转为物品空间的线性行

        Returns:
            (G, h, E, f): G x <= h 与 E x = f
        """
        G = np.zeros((0, num_items))
        h = np.zeros(0)
        E = np.zeros((0, num_items))
        f = np.zeros(0)
        if self.kind == GENERAL_LINEAR:
            G = np.array(self.A, dtype=float)
            h = np.array(self.b, dtype=float)
            return G, h, E, f
        indicator = np.zeros((1, num_items))
        indicator[0, self.item_indices(num_items)] = 1.0
        if self.kind == SUM_CAP:
            return indicator, np.array([self.bound]), E, f
        if self.kind == SUM_FLOOR:
            return -indicator, np.array([-self.bound]), E, f
        if self.kind == SIMPLEX_EQUALITY:
            return G, h, indicator, np.array([1.0])
        raise ModelException(f"未知的用户级约束类型: {self.kind}")


@dataclass(frozen=True, eq=False)
class LocalConstraintSet:
    """某个用户的全部用户级约束，盒约束 [0,1]^M 总是隐含"""
    user: int
    constraints: Tuple[LocalConstraint, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "user", int(self.user))
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def kinds(self) -> Tuple[str, ...]:
        return tuple(c.kind for c in self.constraints)

    def single(self, kind: str) -> Optional[LocalConstraint]:
        """若集合恰由一条给定类型约束组成则返回它"""
        if len(self.constraints) == 1 and self.constraints[0].kind == kind:
            return self.constraints[0]
        return None

    def rows(self, num_items: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """堆叠所有约束的 (G, h, E, f)"""
        parts = [c.rows(num_items) for c in self.constraints]
        if not parts:
            empty = np.zeros((0, num_items))
            return empty, np.zeros(0), empty.copy(), np.zeros(0)
        G = np.vstack([p[0] for p in parts])
        h = np.concatenate([p[1] for p in parts])
        E = np.vstack([p[2] for p in parts])
        f = np.concatenate([p[3] for p in parts])
        return G, h, E, f


@dataclass(frozen=True, eq=False)
class MooProblem:
    """
    多目标优化原问题实例

    最小化 -aᵀx + (γ/2)xᵀx，其中 a = gain + γq（gain 缺省为 p），
    约束为全局预算、用户级约束以及盒约束 0 <= x <= 1。
    """
    p: np.ndarray
    r: np.ndarray
    q: np.ndarray
    gamma: float
    budgets: Tuple[GlobalBudget, ...] = ()
    locals: Tuple[LocalConstraintSet, ...] = ()
    gain: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("p", "r", "q"):
            object.__setattr__(self, name, _frozen_array(np.atleast_2d(getattr(self, name))))
        if self.gain is not None:
            object.__setattr__(self, "gain", _frozen_array(np.atleast_2d(self.gain)))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "locals", tuple(self.locals))

    @property
    def num_users(self) -> int:
        return int(self.p.shape[0])

    @property
    def num_items(self) -> int:
        return int(self.p.shape[1])

    @property
    def size(self) -> int:
        return self.num_users * self.num_items

    @cached_property
    def a(self) -> np.ndarray:
        """a = gain + γq，N×M；实例不可变，缓存即一致"""
        base = self.p if self.gain is None else self.gain
        value = np.asarray(base, dtype=float) + self.gamma * np.asarray(self.q, dtype=float)
        value.setflags(write=False)
        return value

    @property
    def a_vector(self) -> np.ndarray:
        return self.a.ravel()

    @cached_property
    def _locals_by_user(self) -> Dict[int, LocalConstraintSet]:
        return {s.user: s for s in self.locals}

    def local_for(self, user: int) -> Optional[LocalConstraintSet]:
        return self._locals_by_user.get(int(user))

    def restricted_to(self, users: Sequence[int]) -> "MooProblem":
        """按用户子集抽取子问题（预算权重随之截取，边界不变）"""
        idx = np.asarray(list(users), dtype=int)
        remap = {int(u): k for k, u in enumerate(idx)}
        budgets = tuple(
            GlobalBudget(b.weights[idx], b.direction, b.bound, b.label,
                         None if b.users is None else [remap[u] for u in b.users if u in remap])
            for b in self.budgets
        )
        locals_ = tuple(
            LocalConstraintSet(remap[s.user], s.constraints)
            for s in self.locals if s.user in remap
        )
        gain = None if self.gain is None else self.gain[idx]
        return MooProblem(self.p[idx], self.r[idx], self.q[idx], self.gamma, budgets, locals_, gain)


@dataclass
class ValidationIssue:
    """校验问题条目"""
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.location}: {self.message}"


@dataclass
class ValidationReport:
    """校验报告；issues 为空当且仅当实例合法"""
    issues: List[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def add(self, location: str, message: str):
        self.issues.append(ValidationIssue(location, message))

    def messages(self) -> List[str]:
        return [i.message for i in self.issues]

    def __len__(self) -> int:
        return len(self.issues)

    def __iter__(self) -> Iterator[ValidationIssue]:
        return iter(self.issues)


def _check_unit_range(report: ValidationReport, name: str, values: np.ndarray):
    bad = np.argwhere(~((values >= 0.0) & (values <= 1.0)))
    for u, i in bad:
        report.add(f"{name}[{u},{i}]", f"{name} out of [0,1] at ({u},{i})")


def local_region_is_nonempty(G: np.ndarray, h: np.ndarray, E: np.ndarray, f: np.ndarray) -> bool:
    """可行性探测：{Gx<=h, Ex=f} ∩ [0,1]^M 是否非空"""
    n = G.shape[1] if G.size else E.shape[1]
    res = linprog(
        np.zeros(n),
        A_ub=G if G.shape[0] else None,
        b_ub=h if G.shape[0] else None,
        A_eq=E if E.shape[0] else None,
        b_eq=f if E.shape[0] else None,
        bounds=[(0.0, 1.0)] * n,
        method="highs",
    )
    return bool(res.status == 0)


def validate(problem: MooProblem) -> ValidationReport:
    """
    校验实例，报告所有违反的不变量及位置

    Returns:
        ValidationReport: 为空表示实例合法
    """
    report = ValidationReport()
    shape = problem.p.shape
    for name in ("r", "q"):
        if getattr(problem, name).shape != shape:
            report.add(name, f"{name} shape {getattr(problem, name).shape} != p shape {shape}")
    if problem.gain is not None:
        if problem.gain.shape != shape:
            report.add("gain", f"gain shape {problem.gain.shape} != p shape {shape}")
        elif not np.all(np.isfinite(problem.gain)):
            report.add("gain", "gain must be finite")
    if report.issues:
        return report

    for name in ("p", "r", "q"):
        _check_unit_range(report, name, getattr(problem, name))
    if not (np.isfinite(problem.gamma) and problem.gamma > 0):
        report.add("gamma", "gamma must be positive")

    for k, budget in enumerate(problem.budgets):
        loc = f"budgets[{k}]"
        if budget.weights.shape != shape:
            report.add(loc, f"weights shape {budget.weights.shape} != {shape}")
        elif not np.all(np.isfinite(budget.weights)):
            report.add(loc, "weights must be finite")
        if budget.direction not in DIRECTIONS:
            report.add(loc, f"direction must be one of {DIRECTIONS}")
        if not np.isfinite(budget.bound):
            report.add(loc, "bound must be finite")
        if budget.users is not None and (not budget.users or budget.users[0] < 0
                                         or budget.users[-1] >= shape[0]):
            report.add(loc, "users subset is empty or out of range")

    num_users, num_items = shape
    seen = set()
    for s in problem.locals:
        loc = f"locals[user={s.user}]"
        if not 0 <= s.user < num_users:
            report.add(loc, f"user {s.user} out of range")
            continue
        if s.user in seen:
            report.add(loc, "duplicate local constraint set")
        seen.add(s.user)
        structurally_ok = True
        for j, c in enumerate(s.constraints):
            cloc = f"{loc}[{j}]"
            if c.kind not in LOCAL_KINDS:
                report.add(cloc, f"unknown kind {c.kind}")
                structurally_ok = False
                continue
            if c.items is not None:
                if len(c.items) == 0:
                    report.add(cloc, "item subset is empty")
                    structurally_ok = False
                elif min(c.items) < 0 or max(c.items) >= num_items:
                    report.add(cloc, "item subset references items outside the user's row")
                    structurally_ok = False
                elif len(set(c.items)) != len(c.items):
                    report.add(cloc, "item subset has duplicates")
                    structurally_ok = False
            if c.kind == SUM_CAP and not c.bound > 0:
                report.add(cloc, "SumCap requires K_u > 0")
            if c.kind == SUM_FLOOR and c.bound < 0:
                report.add(cloc, "SumFloor requires n1 >= 0")
            if c.kind == GENERAL_LINEAR:
                if c.A is None or c.b is None:
                    report.add(cloc, "GeneralLinear requires A and b")
                    structurally_ok = False
                elif c.A.shape[1] != num_items or c.A.shape[0] != c.b.shape[0]:
                    report.add(cloc, f"GeneralLinear shape mismatch A{c.A.shape} b{c.b.shape}")
                    structurally_ok = False
                elif not (np.all(np.isfinite(c.A)) and np.all(np.isfinite(c.b))):
                    report.add(cloc, "GeneralLinear entries must be finite")
                    structurally_ok = False
        if structurally_ok and s.constraints:
            G, h, E, f = s.rows(num_items)
            if not local_region_is_nonempty(G, h, E, f):
                report.add(loc, "local constraint region does not intersect [0,1]^M")

    if report.issues:
        logger.debug(f"实例校验发现 {len(report)} 个问题")
    return report


class DualQP:
    """
    非负对偶QP：min ½zᵀBz − p̃ᵀz, z >= 0

    B = ÂᵀÂ/γ 按需由稀疏 Â 计算；大规模时只通过 matvec 使用
    B·v = Âᵀ(Âv)/γ，不显式形成 B。
    """

    def __init__(self, p_tilde: np.ndarray, index_map: Sequence[str], B=None,
                 hat_a: Optional[sp.spmatrix] = None, gamma: Optional[float] = None,
                 a: Optional[np.ndarray] = None, s_tilde: Optional[np.ndarray] = None):
        self.p_tilde = _frozen_array(p_tilde)
        self.index_map: Tuple[str, ...] = tuple(index_map)
        if len(self.index_map) != self.p_tilde.shape[0]:
            raise DimensionMismatch("index_map 长度与 p̃ 维度不一致")
        if len(set(self.index_map)) != len(self.index_map):
            raise ModelException("index_map 标签必须唯一")
        if B is None and hat_a is None:
            raise ModelException("需要提供 B 或 Â")
        self._B = B
        self.hat_a = None if hat_a is None else sp.csc_matrix(hat_a)
        self.gamma = None if gamma is None else float(gamma)
        self.a = None if a is None else _frozen_array(a)
        self.s_tilde = None if s_tilde is None else _frozen_array(s_tilde)
        self._positions = {label: k for k, label in enumerate(self.index_map)}

    @classmethod
    def from_matrix(cls, B, p_tilde, index_map: Optional[Sequence[str]] = None) -> "DualQP":
        """直接由 B 与 p̃ 构造（测试与合成基准用）"""
        p_tilde = np.asarray(p_tilde, dtype=float)
        if index_map is None:
            index_map = [f"z[{k}]" for k in range(p_tilde.shape[0])]
        if sp.issparse(B):
            B = sp.csc_matrix(B, dtype=float)
        else:
            B = _frozen_array(B)
        if B.shape != (p_tilde.shape[0], p_tilde.shape[0]):
            raise DimensionMismatch(f"B 形状 {B.shape} 与 p̃ 维度 {p_tilde.shape[0]} 不匹配")
        return cls(p_tilde, index_map, B=B)

    @property
    def dimension(self) -> int:
        return int(self.p_tilde.shape[0])

    @property
    def B(self):
        """B 矩阵（稀疏或稠密），由 Â 惰性计算"""
        if self._B is None:
            self._B = sp.csc_matrix((self.hat_a.T @ self.hat_a) / self.gamma)
        return self._B

    def dense_B(self) -> np.ndarray:
        B = self.B
        return B.toarray() if sp.issparse(B) else np.array(B)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        if self._B is None and self.hat_a is not None:
            return self.hat_a.T @ (self.hat_a @ v) / self.gamma
        return np.asarray(self.B @ v).ravel()

    def objective(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.matvec(z) - self.p_tilde @ z)

    def position(self, label: str) -> int:
        return self._positions[label]

    def block(self, prefix: str) -> np.ndarray:
        """名字以 prefix[ 开头的坐标下标，例如 block('mu')"""
        head = prefix + "["
        return np.array([k for k, label in enumerate(self.index_map) if label.startswith(head)],
                        dtype=int)

    def stationarity_point(self, z: np.ndarray) -> np.ndarray:
        """(a + Âz)/γ，要求由 Â 组装"""
        if self.hat_a is None or self.a is None:
            raise UnsupportedLayout("该对偶QP不含 Â，无法恢复驻点")
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dimension,):
            raise DimensionMismatch(f"对偶向量维度 {z.shape} != ({self.dimension},)")
        return (self.a + self.hat_a @ z) / self.gamma


def dualize(a: np.ndarray, gamma: float, G: sp.spmatrix, h: np.ndarray, ineq_labels: Sequence[str],
            E: sp.spmatrix, f: np.ndarray, eq_labels: Sequence[str],
            box_labels: Sequence[Tuple[str, str]], extra_G: Optional[sp.spmatrix] = None,
            extra_h: Optional[np.ndarray] = None,
            extra_labels: Sequence[str] = ()) -> DualQP:
    """
    通用对偶化：min -aᵀx + (γ/2)xᵀx, s.t. Gx<=h, Ex=f, 0<=x<=1, extra_G x<=extra_h

    坐标顺序为 [G 行 : ν₊ : ν₋ : ξ : η : extra 行]，
    Â 的列依次为 -Gᵀ, -Eᵀ, Eᵀ, I, -I, -extra_Gᵀ，s̃ 依次为 -h, -f, f, 0, -1, -extra_h。
    """
    n = int(a.shape[0])
    G = sp.csr_matrix(G, shape=(G.shape[0], n))
    E = sp.csr_matrix(E, shape=(E.shape[0], n))
    blocks = [-G.T, -E.T, E.T, sp.identity(n, format="csc"), -sp.identity(n, format="csc")]
    s_parts = [-np.asarray(h, dtype=float), -np.asarray(f, dtype=float),
               np.asarray(f, dtype=float), np.zeros(n), -np.ones(n)]
    labels = list(ineq_labels)
    labels += [f"nu+{lab}" for lab in eq_labels]
    labels += [f"nu-{lab}" for lab in eq_labels]
    labels += [lo for lo, _ in box_labels]
    labels += [hi for _, hi in box_labels]
    if extra_G is not None and extra_G.shape[0]:
        extra_G = sp.csr_matrix(extra_G, shape=(extra_G.shape[0], n))
        blocks.append(-extra_G.T)
        s_parts.append(-np.asarray(extra_h, dtype=float))
        labels += list(extra_labels)
    hat_a = sp.hstack([blk for blk in blocks if blk.shape[1]], format="csc")
    s_tilde = np.concatenate(s_parts)
    p_tilde = s_tilde - (hat_a.T @ a) / gamma
    return DualQP(p_tilde, labels, hat_a=hat_a, gamma=gamma, a=a, s_tilde=s_tilde)


def _budget_rows(problem: MooProblem) -> Tuple[sp.csr_matrix, np.ndarray, List[str]]:
    rows = [b.sign * b.weights.ravel() for b in problem.budgets]
    G = sp.csr_matrix(np.vstack(rows)) if rows else sp.csr_matrix((0, problem.size))
    h = np.array([b.sign * b.bound for b in problem.budgets])
    labels = [f"mu[{k}]" for k in range(len(problem.budgets))]
    return G, h, labels


def _box_labels(problem: MooProblem) -> List[Tuple[str, str]]:
    return [(f"xi[{u},{i}]", f"eta[{u},{i}]")
            for u in range(problem.num_users) for i in range(problem.num_items)]


def _lift(user: int, rows: np.ndarray, problem: MooProblem) -> sp.csr_matrix:
    """把用户 u 物品空间的行嵌入到 NM 维"""
    m = problem.num_items
    lifted = sp.lil_matrix((rows.shape[0], problem.size))
    lifted[:, user * m:(user + 1) * m] = rows
    return lifted.tocsr()


def _require_valid(problem: MooProblem):
    report = validate(problem)
    if not report.ok:
        raise InvalidProblem("; ".join(str(i) for i in report.issues[:5]))


def assemble_dual(problem: MooProblem) -> DualQP:
    """
    组装标准布局的对偶QP

    Â = [−r : −M : M : I : −I]（多个预算时依次排列在前），
    p̃ = s̃ − Âᵀa/γ，s̃ = (−R, −1_N, 1_N, 0_NM, −1_NM)。

    Raises:
        UnsupportedLayout: 存在单纯形等式以外的用户级约束
    """
    _require_valid(problem)
    for s in problem.locals:
        if s.constraints and s.single(SIMPLEX_EQUALITY) is None:
            raise UnsupportedLayout(
                f"用户 {s.user} 含有 {s.kinds}，标准布局只对偶化 SimplexEquality；"
                "请使用 assemble_dual_extended 或在 Stage 2 中处理")
    G, h, mu_labels = _budget_rows(problem)
    eq_rows, eq_labels = [], []
    for s in sorted(problem.locals, key=lambda s: s.user):
        if not s.constraints:
            continue
        _, _, E, _ = s.rows(problem.num_items)
        eq_rows.append(_lift(s.user, E, problem))
        eq_labels.append(f"[{s.user}]")
    E = sp.vstack(eq_rows, format="csr") if eq_rows else sp.csr_matrix((0, problem.size))
    f = np.ones(len(eq_labels))
    dual = dualize(problem.a_vector, problem.gamma, G, h, mu_labels, E, f, eq_labels,
                   _box_labels(problem))
    logger.info(f"组装对偶QP: N={problem.num_users}, M={problem.num_items}, d={dual.dimension}")
    return dual


def assemble_dual_extended(problem: MooProblem) -> DualQP:
    """
    组装对偶QP，并把所有用户级线性约束一并对偶化

    SimplexEquality 仍用 ν± 对；SumCap/SumFloor/GeneralLinear 的每一行
    附加在盒约束之后，标签分别为 cap[u,j] / floor[u,j] / lin[u,j,k]。
    """
    _require_valid(problem)
    G, h, mu_labels = _budget_rows(problem)
    eq_rows, eq_labels = [], []
    extra_rows, extra_h, extra_labels = [], [], []
    for s in sorted(problem.locals, key=lambda s: s.user):
        for j, c in enumerate(s.constraints):
            Gc, hc, Ec, fc = c.rows(problem.num_items)
            if c.kind == SIMPLEX_EQUALITY:
                eq_rows.append(_lift(s.user, Ec, problem))
                eq_labels.append(f"[{s.user}]" if j == 0 else f"[{s.user},{j}]")
                continue
            extra_rows.append(_lift(s.user, Gc, problem))
            extra_h.append(hc)
            if c.kind == GENERAL_LINEAR:
                extra_labels += [f"lin[{s.user},{j},{k}]" for k in range(Gc.shape[0])]
            else:
                tag = "cap" if c.kind == SUM_CAP else "floor"
                extra_labels.append(f"{tag}[{s.user},{j}]")
    E = sp.vstack(eq_rows, format="csr") if eq_rows else sp.csr_matrix((0, problem.size))
    f = np.ones(len(eq_labels))
    extra_G = sp.vstack(extra_rows, format="csr") if extra_rows else None
    extra = np.concatenate(extra_h) if extra_h else None
    dual = dualize(problem.a_vector, problem.gamma, G, h, mu_labels, E, f, eq_labels,
                   _box_labels(problem), extra_G, extra, extra_labels)
    logger.info(f"组装扩展对偶QP: d={dual.dimension}, 用户级行数={len(extra_labels)}")
    return dual


def primal_from_dual_stationarity(problem: MooProblem, z: np.ndarray,
                                  dual: Optional[DualQP] = None) -> np.ndarray:
    """
    由对偶向量计算未投影的驻点 x = (a + Ãz)/γ

    Args:
        problem: 问题实例
        z: 对偶向量（非负）
        dual: 已组装的对偶QP，缺省按标准布局组装

    Returns:
        np.ndarray: 长度 NM 的向量
    """
    if dual is None:
        dual = assemble_dual(problem)
    z = np.asarray(z, dtype=float)
    if z.ndim != 1 or z.shape[0] != dual.dimension:
        raise DimensionMismatch(f"对偶向量维度 {z.shape} 与对偶QP维度 {dual.dimension} 不一致")
    if np.any(z < -1e-12):
        raise ModelException("对偶向量必须非负")
    return dual.stationarity_point(z)


def primal_objective(problem: MooProblem, x: np.ndarray) -> float:
    """原问题目标 −aᵀx + (γ/2)xᵀx"""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != problem.size:
        raise DimensionMismatch(f"x 长度 {x.shape[0]} != {problem.size}")
    return float(-problem.a_vector @ x + 0.5 * problem.gamma * x @ x)


def duality_constant(problem: MooProblem) -> float:
    """强对偶关系 P* = −D* + 常数 中的常数 −‖a‖²/(2γ)"""
    a = problem.a_vector
    return float(-(a @ a) / (2.0 * problem.gamma))


def check_feasibility(problem: MooProblem, x: np.ndarray, tol: float = 1e-9) -> List[str]:
    """返回 x 违反的约束标签列表（空列表表示可行）"""
    x = np.asarray(x, dtype=float).reshape(problem.num_users, problem.num_items)
    violated = []
    if np.any(x < -tol) or np.any(x > 1 + tol):
        violated.append("box")
    for k, b in enumerate(problem.budgets):
        value = float(np.sum(b.weights * x))
        if b.sign * (value - b.bound) > tol:
            violated.append(f"mu[{k}]")
    for s in problem.locals:
        G, h, E, f = s.rows(problem.num_items)
        xu = x[s.user]
        if G.shape[0] and np.any(G @ xu - h > tol):
            violated.append(f"local[{s.user}]")
        elif E.shape[0] and np.any(np.abs(E @ xu - f) > tol):
            violated.append(f"local[{s.user}]")
    return violated


def problem_is_feasible(problem: MooProblem) -> bool:
    """
    整体可行性检查：全局预算、用户级约束与 [0,1]^{NM} 是否有公共点

    在 NM 个变量上解一个零目标 LP，约束矩阵按稀疏格式组装。
    """
    N, M = problem.num_users, problem.num_items
    ub_blocks, ub_rhs, eq_blocks, eq_rhs = [], [], [], []
    for b in problem.budgets:
        ub_blocks.append(sp.csr_matrix(b.sign * b.weights.reshape(1, N * M)))
        ub_rhs.append(np.array([b.sign * b.bound]))
    for s in problem.locals:
        G, h, E, f = s.rows(M)
        for rows, rhs, blocks, targets in ((G, h, ub_blocks, ub_rhs), (E, f, eq_blocks, eq_rhs)):
            if rows.shape[0]:
                coo = sp.coo_matrix(rows)
                blocks.append(sp.csr_matrix((coo.data, (coo.row, coo.col + s.user * M)),
                                            shape=(rows.shape[0], N * M)))
                targets.append(rhs)
    res = linprog(
        np.zeros(N * M),
        A_ub=sp.vstack(ub_blocks, format="csr") if ub_blocks else None,
        b_ub=np.concatenate(ub_rhs) if ub_rhs else None,
        A_eq=sp.vstack(eq_blocks, format="csr") if eq_blocks else None,
        b_eq=np.concatenate(eq_rhs) if eq_rhs else None,
        bounds=(0.0, 1.0),
        method="highs",
    )
    return bool(res.status == 0)
