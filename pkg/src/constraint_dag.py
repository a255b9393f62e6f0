"""
约束DAG模块

在约束子集之上建立有向无环图，并决定哪些节点的对偶离线可信、哪些在线重解：
- build_dag 按包含关系与共享元素两条规则连边
- mixture_moments 混合分布的均值与协方差
- attach_moments / attach_time_estimates 为节点挂载统计量与求解耗时估计
- select_stage2 按 w/t(n) + (1−w)·λ_max(Σ/n) <= β 选出可信节点
- split_solve 离线对偶 + 在线分量求解的拼接解
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np
from networkx.utils import UnionFind

try:
    from .dual_solver import SolverConfig, solve
    from .model import (GENERAL_LINEAR, LocalConstraint, LocalConstraintSet, MooProblem,
                        assemble_dual, assemble_dual_extended, primal_objective, SIMPLEX_EQUALITY)
    from .recovery import UserScores, recover_general
except ImportError:
    from dual_solver import SolverConfig, solve
    from model import (GENERAL_LINEAR, LocalConstraint, LocalConstraintSet, MooProblem,
                       assemble_dual, assemble_dual_extended, primal_objective, SIMPLEX_EQUALITY)
    from recovery import UserScores, recover_general

# 配置日志
logger = logging.getLogger(__name__)


class DagException(Exception):
    """约束DAG相关异常"""
    pass


class InconsistentLevel(DagException):
    """层级与子集大小不一致或子集重复"""
    pass


class WeightsNotNormalized(DagException):
    """混合比例非正或和不为 1"""
    pass


class MissingMoments(DagException):
    """节点缺少统计量或耗时估计"""
    pass


ROOT_ID = "root"


@dataclass
class ConstraintNode:
    """DAG 节点：一个约束子集及其统计量"""
    id: str
    level: int
    members: frozenset
    sample_count: Optional[int] = None
    mean: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    solve_time_estimate: Optional[float] = None
    budgets: Tuple[int, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.id,
            "level": self.level,
            "members": sorted(self.members),
            "n": self.sample_count,
            "mean": None if self.mean is None else [float(v) for v in self.mean],
            "cov": None if self.covariance is None else [[float(v) for v in row]
                                                        for row in self.covariance],
            "time": self.solve_time_estimate,
            "budgets": list(self.budgets),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConstraintNode":
        return cls(
            id=str(data["id"]),
            level=int(data["level"]),
            members=frozenset(data["members"]),
            sample_count=data.get("n"),
            mean=None if data.get("mean") is None else np.asarray(data["mean"], dtype=float),
            covariance=None if data.get("cov") is None else np.asarray(data["cov"], dtype=float),
            solve_time_estimate=data.get("time"),
            budgets=tuple(data.get("budgets", ())),
        )


class ConstraintDag:
    """
    约束DAG，节点属性保存在 networkx.DiGraph 的 "node" 字段

    Args:
        graph: 有向图
        root: 根节点 id（不含根时为 None）
    """

    def __init__(self, graph: nx.DiGraph, root: Optional[str] = None):
        self.graph = graph
        self.root = root

    def node(self, node_id: str) -> ConstraintNode:
        return self.graph.nodes[node_id]["node"]

    @property
    def nodes(self) -> List[ConstraintNode]:
        return [self.node(n) for n in self.traversal_order()]

    def edges(self) -> List[Tuple[str, str]]:
        return sorted(self.graph.edges())

    def children(self, node_id: str) -> List[str]:
        return sorted(self.graph.successors(node_id))

    def parents(self, node_id: str) -> List[str]:
        return sorted(self.graph.predecessors(node_id))

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self.graph)

    def traversal_order(self) -> List[str]:
        """从根出发的拓扑序，层级高者优先，同层按 id"""
        return list(nx.lexicographical_topological_sort(
            self.graph, key=lambda n: (-self.graph.nodes[n]["node"].level, n)))

    def depths(self) -> Dict[str, int]:
        """各节点到根的最短边数"""
        if self.root is None:
            raise DagException("DAG 不含根节点，无法计算深度")
        return dict(nx.single_source_shortest_path_length(self.graph, self.root))

    def unreachable(self) -> List[str]:
        if self.root is None:
            return []
        reached = nx.descendants(self.graph, self.root) | {self.root}
        return sorted(set(self.graph.nodes) - reached)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "root": self.root,
            "nodes": [self.node(n).to_dict() for n in self.traversal_order()],
            "edges": [list(e) for e in self.edges()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ConstraintDag":
        graph = nx.DiGraph()
        for item in data["nodes"]:
            node = ConstraintNode.from_dict(item)
            graph.add_node(node.id, node=node)
        for u, v in data["edges"]:
            if u not in graph or v not in graph:
                raise DagException(f"边 {u}->{v} 引用了不存在的节点")
            graph.add_edge(u, v)
        dag = cls(graph, data.get("root"))
        if not dag.is_acyclic():
            raise DagException("DAG 含有环")
        return dag


SubsetSpec = Union[Tuple[int, Iterable], Tuple[int, Iterable, str]]


def build_dag(subsets: Sequence[SubsetSpec], include_root: bool = True,
              root_members: Optional[Iterable] = None) -> ConstraintDag:
    """
    按两条规则在约束子集之间连边

    对层级 ℓ < k 的节点对 (S^k, S'^ℓ)，满足以下任一条件即连边 S^k → S'^ℓ：
    - S' ⊂ S，且没有任何中间层级 ℓ < k' < k 的集合包含 S'；
    - 存在 x ∈ S ∩ S'，x 不属于任何中间层级的集合。

    Args:
        subsets: (level, members) 或 (level, members, id) 列表
        include_root: 是否加入全集根节点
        root_members: 根的元素集合，缺省为所有子集的并

    Returns:
        ConstraintDag

    Raises:
        InconsistentLevel: 层级与集合大小不符或子集重复
    """
    nodes: List[ConstraintNode] = []
    ordinal: Dict[int, int] = {}
    seen: Dict[frozenset, str] = {}
    for spec in subsets:
        level, members = int(spec[0]), frozenset(spec[1])
        if len(members) != level:
            raise InconsistentLevel(f"层级 {level} 与集合大小 {len(members)} 不一致: {sorted(members)}")
        ordinal[level] = ordinal.get(level, 0) + 1
        node_id = str(spec[2]) if len(spec) > 2 else f"S{ordinal[level]}^{level}"
        if members in seen:
            raise InconsistentLevel(f"子集重复: {node_id} 与 {seen[members]}")
        seen[members] = node_id
        nodes.append(ConstraintNode(node_id, level, members))

    root = None
    if include_root:
        universe = frozenset(root_members) if root_members is not None else frozenset().union(
            *[n.members for n in nodes])
        if universe in seen:
            root = seen[universe]
        else:
            nodes.append(ConstraintNode(ROOT_ID, len(universe), universe))
            root = ROOT_ID
        stray = [n.id for n in nodes if not n.members <= universe]
        if stray:
            raise InconsistentLevel(f"节点 {stray} 含有根集合之外的元素")

    by_level: Dict[int, List[ConstraintNode]] = {}
    for node in nodes:
        by_level.setdefault(node.level, []).append(node)
    levels = sorted(by_level)

    graph = nx.DiGraph()
    for node in nodes:
        graph.add_node(node.id, node=node)
    for hi_node in nodes:
        for lo_node in nodes:
            if lo_node.level >= hi_node.level:
                continue
            between = [s for lvl in levels if lo_node.level < lvl < hi_node.level
                       for s in by_level[lvl]]
            contained = lo_node.members < hi_node.members and not any(
                lo_node.members <= s.members for s in between)
            covered = frozenset().union(*[s.members for s in between]) if between else frozenset()
            shared = bool((lo_node.members & hi_node.members) - covered)
            if contained or shared:
                graph.add_edge(hi_node.id, lo_node.id)

    dag = ConstraintDag(graph, root)
    missing = dag.unreachable()
    if missing:
        logger.warning(f"以下节点无法从根到达: {missing}")
    logger.info(f"构建DAG: {graph.number_of_nodes()} 个节点, {graph.number_of_edges()} 条边")
    return dag


def mixture_moments(children: Sequence[Tuple[float, np.ndarray, np.ndarray]]
                    ) -> Tuple[np.ndarray, np.ndarray]:
    """
    混合分布的矩

    μ_p = Σα_iμ_i，Σ_p = Σα_i(Σ_i + (μ_i−μ_p)(μ_i−μ_p)ᵀ)

    Raises:
        WeightsNotNormalized: α 非正或 |Σα − 1| > 1e-12
    """
    if not children:
        raise WeightsNotNormalized("至少需要一个子分布")
    alphas = np.array([c[0] for c in children], dtype=float)
    if np.any(alphas <= 0) or abs(alphas.sum() - 1.0) > 1e-12:
        raise WeightsNotNormalized(f"混合比例必须为正且和为 1: {alphas.tolist()}")
    means = [np.atleast_1d(np.asarray(c[1], dtype=float)) for c in children]
    covs = [np.atleast_2d(np.asarray(c[2], dtype=float)) for c in children]
    mean = sum(a * m for a, m in zip(alphas, means))
    cov = sum(a * (S + np.outer(m - mean, m - mean)) for a, m, S in zip(alphas, means, covs))
    return mean, (cov + cov.T) / 2.0


def pooled_moments(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """样本均值与 1/n 归一的协方差"""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    mean = rows.mean(axis=0)
    centered = rows - mean
    return mean, centered.T @ centered / rows.shape[0]


def attach_moments(dag: ConstraintDag, data: np.ndarray,
                   element_index: Optional[Dict[Any, int]] = None) -> ConstraintDag:
    """
    自底向上为每个节点计算 (n, 均值, 协方差)

    子节点恰好划分父节点时按 α_i = n_i/Σn 混合，否则直接在父节点成员上汇总。

    Args:
        data: 每个元素一行的参数矩阵
        element_index: 元素 → 行号，缺省元素本身即行号
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    index = element_index or {}

    def rows_of(members: frozenset) -> np.ndarray:
        return data[[index.get(e, e) for e in sorted(members)]]

    for node_id in reversed(dag.traversal_order()):
        node = dag.node(node_id)
        kids = [dag.node(c) for c in dag.children(node_id)]
        partition = bool(kids) and sum(len(k.members) for k in kids) == len(node.members) \
            and frozenset().union(*[k.members for k in kids]) == node.members
        node.sample_count = len(node.members)
        if partition and all(k.mean is not None for k in kids):
            total = float(sum(k.sample_count for k in kids))
            node.mean, node.covariance = mixture_moments(
                [(k.sample_count / total, k.mean, k.covariance) for k in kids])
        else:
            node.mean, node.covariance = pooled_moments(rows_of(node.members))
    return dag


@dataclass(frozen=True)
class TimeModel:
    """求解耗时的幂律模型 t(n) = coefficient · n^exponent"""
    coefficient: float = 1e-6
    exponent: float = 2.0

    def __call__(self, n: float) -> float:
        return float(self.coefficient * max(float(n), 1.0) ** self.exponent)

    @classmethod
    def fit(cls, sizes: Sequence[float], seconds: Sequence[float]) -> "TimeModel":
        """对数-对数最小二乘拟合"""
        logs_n = np.log(np.asarray(sizes, dtype=float))
        logs_t = np.log(np.maximum(np.asarray(seconds, dtype=float), 1e-12))
        slope, intercept = np.polyfit(logs_n, logs_t, 1)
        return cls(float(np.exp(intercept)), float(slope))

    @classmethod
    def calibrate(cls, sizes: Sequence[int] = (8, 16, 32, 64), seed: int = 0,
                  config: Optional[SolverConfig] = None) -> "TimeModel":
        """在给定规模的合成投影问题上实测求解时间并拟合"""
        rng = np.random.default_rng(seed)
        seconds = []
        for n in sizes:
            v = rng.uniform(-0.5, 1.5, size=int(n))
            local = LocalConstraintSet(0, (
                LocalConstraint(GENERAL_LINEAR, A=np.ones((1, int(n))), b=np.array([n / 4.0])),
                LocalConstraint(GENERAL_LINEAR, A=-np.ones((1, int(n))), b=np.array([-1.0])),
            ))
            start = time.perf_counter()
            recover_general(UserScores(0, v, 1.0), local)
            seconds.append(time.perf_counter() - start)
        model = cls.fit(sizes, seconds)
        logger.info(f"耗时模型标定: t(n) = {model.coefficient:.3e}·n^{model.exponent:.3f}")
        return model


def attach_time_estimates(dag: ConstraintDag, model: TimeModel,
                          width: int = 1) -> ConstraintDag:
    """t(n_i) 取节点变量数 |members|·width 处的模型值"""
    for node_id in dag.graph.nodes:
        node = dag.node(node_id)
        node.solve_time_estimate = model(len(node.members) * width)
    return dag


def stage2_score(node: ConstraintNode, w: float) -> float:
    """w/t(n) + (1−w)·λ_max(Σ/n)"""
    if node.covariance is None or node.sample_count is None or node.solve_time_estimate is None:
        raise MissingMoments(f"节点 {node.id} 缺少统计量或耗时估计")
    if node.sample_count < 1 or not node.solve_time_estimate > 0:
        raise MissingMoments(f"节点 {node.id} 的样本数或耗时估计非法")
    lam = float(np.linalg.eigvalsh(np.atleast_2d(node.covariance) / node.sample_count)[-1])
    return w / node.solve_time_estimate + (1.0 - w) * lam


def select_stage2(dag: ConstraintDag, w: float, beta: float) -> List[str]:
    """
    从根出发按拓扑序遍历，得分不超过 β 的节点对偶视为可信

    Returns:
        List[str]: 可信节点 id，按遍历顺序

    Raises:
        MissingMoments: 节点缺少统计量或耗时估计
    """
    if not 0.0 <= w <= 1.0:
        raise DagException(f"w 必须在 [0,1] 内: {w}")
    if not beta > 0:
        raise DagException(f"beta 必须为正: {beta}")
    chosen = []
    for node_id in dag.traversal_order():
        score = stage2_score(dag.node(node_id), w)
        logger.debug(f"节点 {node_id}: 得分 {score:.6g}")
        if score <= beta:
            chosen.append(node_id)
    return chosen


def dag_from_problem(problem: MooProblem, include_root: bool = True) -> ConstraintDag:
    """以每个预算覆盖的用户集合为节点构建DAG，相同用户集合的预算合并到一个节点"""
    groups: Dict[frozenset, List[int]] = {}
    for k, budget in enumerate(problem.budgets):
        groups.setdefault(frozenset(budget.members(problem.num_users)), []).append(k)
    specs = sorted(groups.items(), key=lambda item: (-len(item[0]), sorted(item[0])))
    ordinal: Dict[int, int] = {}
    subsets = []
    for members, _ in specs:
        ordinal[len(members)] = ordinal.get(len(members), 0) + 1
        subsets.append((len(members), members, f"S{ordinal[len(members)]}^{len(members)}"))
    dag = build_dag(subsets, include_root=include_root,
                    root_members=range(problem.num_users) if include_root else None)
    ids = {s[1]: s[2] for s in subsets}
    for members, budget_ids in specs:
        dag.node(ids[members]).budgets = tuple(budget_ids)
    return dag


@dataclass
class SplitResult:
    """拆分求解结果"""
    objective: float
    online_time: float
    x: np.ndarray
    trusted: List[str] = field(default_factory=list)
    components: int = 0


def _trusted_nodes(dag: ConstraintDag, split: Union[int, Iterable[str]]) -> Set[str]:
    if isinstance(split, (int, np.integer)):
        if split < 0:
            raise DagException(f"拆分层级不能为负: {split}")
        return {n for n, depth in dag.depths().items() if depth < split}
    trusted = set(split)
    unknown = trusted - set(dag.graph.nodes)
    if unknown:
        raise DagException(f"未知节点: {sorted(unknown)}")
    return trusted


def _component_set(problem: MooProblem, users: List[int],
                   budgets: List[int]) -> LocalConstraintSet:
    """把分量内的不可信预算与用户级约束写成一个拼接向量上的约束集合"""
    m = problem.num_items
    constraints = []
    if budgets:
        rows = np.vstack([problem.budgets[k].sign * problem.budgets[k].weights[users].ravel()
                          for k in budgets])
        bounds = np.array([problem.budgets[k].sign * problem.budgets[k].bound for k in budgets])
        constraints.append(LocalConstraint(GENERAL_LINEAR, A=rows, b=bounds))
    for pos, u in enumerate(users):
        local = problem.local_for(u)
        if local is None:
            continue
        for c in local.constraints:
            offset = pos * m
            if c.kind == GENERAL_LINEAR:
                A = np.zeros((c.A.shape[0], len(users) * m))
                A[:, offset:offset + m] = c.A
                constraints.append(LocalConstraint(GENERAL_LINEAR, A=A, b=c.b))
            else:
                items = tuple(offset + i for i in c.item_indices(m))
                constraints.append(LocalConstraint(c.kind, items=items, bound=c.bound))
    return LocalConstraintSet(users[0], tuple(constraints))


def split_solve(problem: MooProblem, dag: ConstraintDag, split: Union[int, Iterable[str]],
                offline_problem: Optional[MooProblem] = None,
                config: Optional[SolverConfig] = None, time_model: Optional[TimeModel] = None,
                wall_clock: bool = False, threads: int = 1) -> SplitResult:
    """
    离线可信对偶 + 在线分量求解

    可信节点（深度 < split，或给定的节点集合）的预算对偶由离线问题的 ADMM 解给出，
    其余预算按共享用户合并成分量，每个分量在拼接向量上做一次投影求解。

    Args:
        problem: 在线实例
        dag: dag_from_problem 构建的DAG
        split: 拆分层级 k（0 表示全部在线）或可信节点集合
        offline_problem: 估计对偶用的离线实例，缺省为 problem 本身
        time_model: 在线耗时模型，缺省 TimeModel()
        wall_clock: True 时报告实测在线耗时

    Returns:
        SplitResult: 拼接解的目标值与在线耗时
    """
    trusted = _trusted_nodes(dag, split)
    trusted_budgets = sorted(k for n in trusted for k in dag.node(n).budgets)
    mu = np.zeros(len(problem.budgets))
    if trusted_budgets:
        offline = offline_problem if offline_problem is not None else problem
        has_locals = any(s.constraints and s.single(SIMPLEX_EQUALITY) is None
                         for s in offline.locals)
        dual = assemble_dual_extended(offline) if has_locals else assemble_dual(offline)
        solution = solve(dual, config or SolverConfig())
        for k in trusted_budgets:
            mu[k] = solution.z[dual.position(f"mu[{k}]")]

    untrusted = [k for k in range(len(problem.budgets)) if k not in set(trusted_budgets)]
    uf = UnionFind(range(problem.num_users))
    for k in untrusted:
        members = problem.budgets[k].members(problem.num_users)
        if len(members) > 1:
            uf.union(*members)
    groups: Dict[int, List[int]] = {}
    for u in range(problem.num_users):
        groups.setdefault(uf[u], []).append(u)
    components = sorted(groups.values(), key=lambda g: g[0])
    owner = {}
    for k in untrusted:
        owner.setdefault(uf[problem.budgets[k].members(problem.num_users)[0]], []).append(k)

    c_all = problem.a.copy()
    for k in trusted_budgets:
        b = problem.budgets[k]
        c_all -= mu[k] * b.sign * b.weights
    model = time_model or TimeModel()
    m = problem.num_items

    def solve_component(users: List[int]) -> np.ndarray:
        local = _component_set(problem, users, owner.get(uf[users[0]], []))
        scores = UserScores(users[0], c_all[users].ravel(), problem.gamma)
        return recover_general(scores, local).x

    start = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve_component, components))
    else:
        results = [solve_component(users) for users in components]
    measured = time.perf_counter() - start

    x = np.zeros((problem.num_users, m))
    for users, xs in zip(components, results):
        x[users] = xs.reshape(len(users), m)
    online = measured if wall_clock else sum(model(len(users) * m) for users in components)
    objective = primal_objective(problem, x)
    logger.info(f"拆分求解: 可信节点 {len(trusted)}, 在线分量 {len(components)}, 目标 {objective:.8g}")
    return SplitResult(objective, float(online), x, sorted(trusted), len(components))
