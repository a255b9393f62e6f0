"""
实验与运行流程模块

- run_pipeline: 第一阶段（采样、矩匹配、组装对偶、ADMM）+ 第二阶段（逐用户恢复）
- recover_from_duals: 由已有对偶文件批量恢复投放计划
- dag_report: 由实例构建约束DAG、附加统计量并选择第二阶段节点
- exp_split_curve: 二叉树实例上各拆分层级的 MSE / 在线耗时
- exp_variance_table: 四种估计方式下对偶的均值与方差
- RunManifest: 运行清单（命令、配置哈希、种子、时间戳、输出文件、求解摘要）
"""

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

try:
    from .constraint_dag import (ConstraintDag, TimeModel, attach_moments, attach_time_estimates,
                                 dag_from_problem, select_stage2, split_solve)
    from .dual_solver import (DualSolution, InfeasibleProblem, SolverConfig, solve,
                              write_diagnostics_csv)
    from .generators import binary_tree_instance, email_benchmark, resample_tree
    from .instance_file import (BadParams, RunConfig, config_hash, load_duals, mu_from_duals,
                                write_csv, write_duals_csv, write_plans_csv)
    from .model import (SIMPLEX_EQUALITY, DualQP, GlobalBudget, MooProblem, assemble_dual,
                        assemble_dual_extended, check_feasibility, primal_objective,
                        problem_is_feasible)
    from .oracle import TooLarge, solve_primal_dense
    from .recovery import ServingPlan, plans_to_matrix, recover_all
    from .variance import (PopulationMoments, Sample, VarianceReport, apply_estimator,
                           canonical_estimator, dual_variance_study)
except ImportError:
    from constraint_dag import (ConstraintDag, TimeModel, attach_moments, attach_time_estimates,
                                dag_from_problem, select_stage2, split_solve)
    from dual_solver import (DualSolution, InfeasibleProblem, SolverConfig, solve,
                             write_diagnostics_csv)
    from generators import binary_tree_instance, email_benchmark, resample_tree
    from instance_file import (BadParams, RunConfig, config_hash, load_duals, mu_from_duals,
                               write_csv, write_duals_csv, write_plans_csv)
    from model import (SIMPLEX_EQUALITY, DualQP, GlobalBudget, MooProblem, assemble_dual,
                       assemble_dual_extended, check_feasibility, primal_objective,
                       problem_is_feasible)
    from oracle import TooLarge, solve_primal_dense
    from recovery import ServingPlan, plans_to_matrix, recover_all
    from variance import (PopulationMoments, Sample, VarianceReport, apply_estimator,
                          canonical_estimator, dual_variance_study)

# 配置日志
logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MIN_VARIANCE_REPS = 30
SPLIT_CURVE_HEADER = ("split_level", "mse", "online_time_sec")
VARIANCE_TABLE_HEADER = ("estimator", "n", "reps", "mu0_mean", "mu0_var",
                         "mu1_mean", "mu1_var", "oob_fraction")
TABLE_ESTIMATORS = ("raw", "mod1", "mod2", "mod3")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """一次运行的清单，与输出的 CSV 写在同一目录"""
    command: str
    config: Dict[str, Any]
    seed: int
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    outputs: List[str] = field(default_factory=list)
    solver: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def record(self, path) -> str:
        """登记一个输出文件，返回相对清单目录的文件名"""
        name = Path(path).name
        if name not in self.outputs:
            self.outputs.append(name)
        return name

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "outputs": list(self.outputs),
            "solver": self.solver,
            "extra": self.extra,
        }

    def write(self, out_dir) -> Path:
        self.finished_at = _now()
        path = Path(out_dir) / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=float)
            f.write("\n")
        return path


@dataclass
class PipelineResult:
    """两阶段流程的结果"""
    dual: DualQP
    solution: DualSolution
    mu: np.ndarray
    plans: List[ServingPlan]
    x: np.ndarray
    objective: float
    violations: List[str]
    oob_fraction: float
    manifest: RunManifest


def _needs_extended(problem: MooProblem) -> bool:
    return any(s.constraints and s.single(SIMPLEX_EQUALITY) is None for s in problem.locals)


def assemble_for(problem: MooProblem) -> DualQP:
    """含非单纯形用户级约束时使用扩展布局"""
    return assemble_dual_extended(problem) if _needs_extended(problem) else assemble_dual(problem)


def sample_problem(problem: MooProblem, n: int, estimator: str,
                   seed: int) -> Tuple[MooProblem, float]:
    """
    抽取 n 个用户的子问题

    每个预算的权重行按该预算全体成员的矩做矩匹配，边界按抽中成员比例缩放。
    目标系数（gain，缺省为 p）按全体用户的矩做同样的变换，写入子问题的 gain，
    p 本身保持原值；变换后的系数允许越出 [0,1]。

    Returns:
        (子问题, 变换后权重越出 [0,1] 的比例)
    """
    N = problem.num_users
    if not 1 <= n <= N:
        raise BadParams(f"sample_size {n} 超出 [1, {N}]")
    estimator = canonical_estimator(estimator)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(N, size=n, replace=False))
    sub = problem.restricted_to(idx)
    budgets, oob = [], []
    for full, part in zip(problem.budgets, sub.budgets):
        members = list(full.members(N))
        kept = list(part.members(n))
        weights = np.array(part.weights)
        if kept and estimator != "raw":
            pop = PopulationMoments.from_rows(full.weights[members])
            transformed = apply_estimator(estimator, Sample(weights[kept]), pop)
            weights[kept] = transformed.rows
            oob.append(transformed.oob_fraction())
        bound = full.bound * len(kept) / len(members)
        users = part.users if kept and part.users is not None else None
        budgets.append(GlobalBudget(weights, full.direction, bound, full.label, users))
    gain = sub.gain
    if estimator != "raw":
        base = problem.p if problem.gain is None else problem.gain
        transformed = apply_estimator(estimator, Sample(base[idx]), PopulationMoments.from_rows(base))
        gain = transformed.rows
        oob.append(transformed.oob_fraction())
    logger.info(f"采样 {n}/{N} 个用户，估计方式 {estimator}")
    return replace(sub, budgets=tuple(budgets), gain=gain), float(np.mean(oob)) if oob else 0.0


def run_pipeline(problem: MooProblem, run_config: Optional[RunConfig] = None,
                 out_dir=None, command: str = "solve",
                 instance_ref: Optional[str] = None) -> PipelineResult:
    """
    端到端两阶段求解

    Args:
        problem: 已校验的实例
        run_config: 运行配置，sample_size 为空时在全体用户上求解对偶
        out_dir: 输出目录，给出时写 duals.csv、plans.csv、diagnostics.csv（如有）与 manifest.json
        instance_ref: 记录在清单中的实例路径

    Returns:
        PipelineResult: 对偶、投放计划与原问题目标值

    Raises:
        InfeasibleProblem: 实例（或采样子问题）无可行解，此时对偶无界，不进入 ADMM
    """
    run_config = run_config or RunConfig()
    manifest = RunManifest(command, run_config.to_dict(), run_config.seed)
    if instance_ref:
        manifest.extra["instance"] = instance_ref
    manifest.extra["estimator"] = canonical_estimator(run_config.estimator)

    oob = 0.0
    stage1 = problem
    if run_config.sample_size is not None and run_config.sample_size < problem.num_users:
        stage1, oob = sample_problem(problem, run_config.sample_size, run_config.estimator,
                                     run_config.seed)
    for part in ([problem] if stage1 is problem else [problem, stage1]):
        if not problem_is_feasible(part):
            raise InfeasibleProblem(f"实例不可行（{part.num_users} 个用户），对偶无界")
    dual = assemble_for(stage1)
    solver = replace(run_config.solver, threads=run_config.threads)
    solution = solve(dual, solver)
    mu = np.array([solution.z[dual.position(f"mu[{k}]")] for k in range(len(problem.budgets))])

    plans = recover_all(problem, mu, run_config.threads, run_config.stage2)
    x = plans_to_matrix(plans)
    objective = primal_objective(problem, x)
    violations = check_feasibility(problem, x, tol=1e-6)
    if violations:
        logger.warning(f"恢复的投放计划违反约束: {violations}")
    manifest.solver = solution.summary()
    manifest.extra.update({"objective": objective, "violations": violations,
                           "oob_fraction": oob, "sample_size": stage1.num_users})

    if out_dir is not None:
        out_dir = Path(out_dir)
        write_duals_csv(out_dir / "duals.csv", dual.index_map, solution.z, MANIFEST_NAME)
        manifest.record(out_dir / "duals.csv")
        write_plans_csv(out_dir / "plans.csv", plans, problem.num_items, MANIFEST_NAME)
        manifest.record(out_dir / "plans.csv")
        if solution.diagnostics:
            write_diagnostics_csv(solution, out_dir / "diagnostics.csv", MANIFEST_NAME)
            manifest.record(out_dir / "diagnostics.csv")
        manifest.write(out_dir)
    logger.info(f"两阶段求解完成: 目标 {objective:.8g}")
    return PipelineResult(dual, solution, mu, plans, x, objective, violations, oob, manifest)


def recover_from_duals(problem: MooProblem, duals_path, run_config: Optional[RunConfig] = None,
                       out_dir=None) -> Tuple[List[ServingPlan], RunManifest]:
    """由对偶 CSV 中的 mu[k] 批量执行第二阶段"""
    run_config = run_config or RunConfig()
    mu = mu_from_duals(load_duals(duals_path), len(problem.budgets), str(duals_path))
    plans = recover_all(problem, mu, run_config.threads, run_config.stage2)
    manifest = RunManifest("recover", run_config.to_dict(), run_config.seed)
    manifest.extra.update({"duals": str(duals_path),
                           "objective": primal_objective(problem, plans_to_matrix(plans))})
    if out_dir is not None:
        write_plans_csv(Path(out_dir) / "plans.csv", plans, problem.num_items, MANIFEST_NAME)
        manifest.record(Path(out_dir) / "plans.csv")
        manifest.write(out_dir)
    return plans, manifest


def dag_report(problem: MooProblem, w: float = 0.5, beta: Optional[float] = None,
               time_model: Optional[TimeModel] = None,
               include_root: bool = True) -> Tuple[ConstraintDag, List[str]]:
    """
    构建约束DAG，以每个用户的 (p, r) 拼接行附加各节点统计量与耗时估计

    beta 为空时不做选择，返回空列表。
    """
    dag = dag_from_problem(problem, include_root)
    attach_moments(dag, np.hstack([problem.p, problem.r]))
    attach_time_estimates(dag, time_model or TimeModel(), problem.num_items)
    chosen = select_stage2(dag, w, beta) if beta is not None else []
    return dag, chosen


def _reference_solution(problem: MooProblem, config: Optional[SolverConfig]) -> np.ndarray:
    try:
        return np.asarray(solve_primal_dense(problem).x)
    except TooLarge:
        dag = dag_from_problem(problem)
        return split_solve(problem, dag, 0, config=config).x.ravel()


def exp_split_curve(K: int = 6, reps: int = 50, w: float = 0.5, beta: Optional[float] = None,
                    seed: int = 0, config: Optional[SolverConfig] = None,
                    time_model: Optional[TimeModel] = None, wall_clock: bool = False,
                    threads: int = 1) -> List[Tuple[Any, float, float]]:
    """
    在二叉树实例上扫描拆分层级

    第 rep 次重复用种子 seed + rep 生成在线实例，离线对偶来自另一份独立抽样。
    拆分层级 k = 1..K 表示深度 < k 的节点对偶取离线值；beta 给出时追加一行
    split_level = "auto"，可信节点由 select_stage2(w, beta) 选出。

    Returns:
        行 (split_level, mse, online_time_sec)，mse 为相对精确解的逐元素均方误差
    """
    if reps < 1:
        raise BadParams("reps 至少为 1")
    if not 1 <= K <= 10:
        raise BadParams(f"K 必须在 [1, 10] 内: {K}")
    levels: List[Any] = list(range(1, K + 1)) + (["auto"] if beta is not None else [])
    errors = {level: [] for level in levels}
    times = {level: [] for level in levels}
    model = time_model or TimeModel()
    for rep in range(reps):
        online = binary_tree_instance(K, seed=seed + rep)
        offline = resample_tree(online, seed + rep + 1_000_003)
        exact = _reference_solution(online, config)
        dag = dag_from_problem(online)
        for level in levels:
            if level == "auto":
                attach_moments(dag, np.hstack([offline.p, offline.r]))
                attach_time_estimates(dag, model, online.num_items)
                split = select_stage2(dag, w, beta)
            else:
                split = level
            result = split_solve(online, dag, split, offline, config, model, wall_clock, threads)
            errors[level].append(float(np.mean((result.x.ravel() - exact) ** 2)))
            times[level].append(result.online_time)
        logger.debug(f"拆分曲线: 第 {rep + 1}/{reps} 次重复完成")
    rows = [(level, float(np.mean(errors[level])), float(np.mean(times[level])))
            for level in levels]
    logger.info(f"拆分曲线完成: K={K}, reps={reps}")
    return rows


def write_split_curve(rows, path) -> Path:
    write_csv(path, SPLIT_CURVE_HEADER, rows, MANIFEST_NAME)
    return Path(path)


def exp_variance_table(n: int = 200, reps: int = MIN_VARIANCE_REPS, N: int = 2000, M: int = 3,
                       seed: int = 0, population_seed: int = 0, threads: int = 1,
                       config: Optional[SolverConfig] = None,
                       estimators: Sequence[str] = TABLE_ESTIMATORS) -> List[VarianceReport]:
    """
    合成邮件基准上比较 raw/mod1/mod2/mod3 的对偶方差

    四种估计方式共用同一组种子 seed + rep，只有变换不同。

    Raises:
        BadParams: reps < 30
    """
    if reps < MIN_VARIANCE_REPS:
        raise BadParams(f"reps 至少为 {MIN_VARIANCE_REPS}: {reps}")
    benchmark = email_benchmark(N, M, population_seed)
    reports = [dual_variance_study(benchmark, name, n, reps, seed, threads, config)
               for name in estimators]
    return reports


def variance_rows(reports: Sequence[VarianceReport]) -> List[Tuple[Any, ...]]:
    return [(r.estimator, r.n, r.reps, r.mu0_mean, r.mu0_var, r.mu1_mean, r.mu1_var,
             r.oob_fraction) for r in reports]


def write_variance_table(reports: Sequence[VarianceReport], path) -> Path:
    write_csv(path, VARIANCE_TABLE_HEADER, variance_rows(reports), MANIFEST_NAME)
    return Path(path)


PLOT_KINDS = ("split-curve", "variance-table")


def plot_script(kind: str, csv_path: str, output: Optional[str] = None) -> str:
    """生成读取实验 CSV 的 gnuplot 脚本文本"""
    if kind not in PLOT_KINDS:
        raise BadParams(f"未知的图类型: {kind}，可选 {PLOT_KINDS}")
    output = output or str(Path(csv_path).with_suffix(".png"))
    lines = [
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set terminal pngcairo size 800,600",
        f"set output '{output}'",
    ]
    if kind == "split-curve":
        lines += [
            "set xlabel 'online time (s)'",
            "set ylabel 'mean squared error'",
            "set logscale y",
            f"plot '{csv_path}' using 3:2 with linespoints title 'split level', \\",
            f"     '' using 3:2:1 with labels offset 1,1 notitle",
        ]
    else:
        lines += [
            "set style data histograms",
            "set style fill solid 0.6",
            "set ylabel 'variance'",
            f"plot '{csv_path}' using 5:xtic(1) title 'V(mu0)', '' using 7 title 'V(mu1)'",
        ]
    return "\n".join(lines) + "\n"
