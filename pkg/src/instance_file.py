"""
实例与结果文件模块

负责命令行工具读写的所有文档：
- 实例文件（JSON）：N, M, gamma, p/r/q（行优先展开）、budgets、locals
- 运行配置（JSON）：solver / estimator / sample_size / seed / threads / stage2
- 对偶 CSV、投放计划 CSV 与通用 CSV（首行引用运行清单）
"""

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from joblib import cpu_count

try:
    from .dual_solver import InvalidConfig, SolverConfig
    from .model import (DIRECTIONS, GENERAL_LINEAR, LOCAL_KINDS, SIMPLEX_EQUALITY, SUM_CAP,
                        SUM_FLOOR, GlobalBudget, LocalConstraint, LocalConstraintSet, MooProblem)
except ImportError:
    from dual_solver import InvalidConfig, SolverConfig
    from model import (DIRECTIONS, GENERAL_LINEAR, LOCAL_KINDS, SIMPLEX_EQUALITY, SUM_CAP,
                       SUM_FLOOR, GlobalBudget, LocalConstraint, LocalConstraintSet, MooProblem)

# 配置日志
logger = logging.getLogger(__name__)


class HarnessException(Exception):
    """命令行工具相关异常"""
    pass


class BadParams(HarnessException):
    """参数不合法"""
    pass


class InputFileError(HarnessException):
    """输入文件缺失或格式错误"""
    pass


MANIFEST_PREFIX = "# manifest: "


def _read_json(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"文件不存在: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InputFileError(f"{path}: JSON 解析失败: {e}") from e


def write_json(data: Dict[str, Any], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, ensure_ascii=False)
        f.write("\n")


def _matrix(data: Dict[str, Any], key: str, shape: Tuple[int, int], where: str) -> np.ndarray:
    values = np.asarray(data[key], dtype=float)
    if values.size != shape[0] * shape[1]:
        raise InputFileError(f"{where}: {key} 应有 {shape[0] * shape[1]} 个元素，实际 {values.size}")
    return values.reshape(shape)


def _flat(matrix: np.ndarray) -> List[float]:
    return [float(v) for v in np.asarray(matrix, dtype=float).ravel()]


def problem_from_dict(data: Dict[str, Any], where: str = "<instance>") -> MooProblem:
    """由实例文档构造 MooProblem（只做结构检查，取值合法性由 validate 负责）"""
    try:
        N, M = int(data["N"]), int(data["M"])
        shape = (N, M)
        p = _matrix(data, "p", shape, where)
        r = _matrix(data, "r", shape, where)
        q = _matrix(data, "q", shape, where)
        gain = _matrix(data, "gain", shape, where) if data.get("gain") is not None else None
        budgets = []
        for k, item in enumerate(data.get("budgets", [])):
            ref = item.get("weights_ref", "r")
            if ref == "r":
                weights = r
            elif ref == "p":
                weights = p
            elif isinstance(ref, list):
                weights = np.asarray(ref, dtype=float).reshape(shape)
            else:
                raise InputFileError(f"{where}: budgets[{k}] 的 weights_ref 无法识别: {ref!r}")
            direction = item.get("direction", "<=")
            if direction not in DIRECTIONS:
                raise InputFileError(f"{where}: budgets[{k}] 的方向必须为 {DIRECTIONS} 之一")
            budgets.append(GlobalBudget(weights, direction, float(item["bound"]),
                                        item.get("label", ""), item.get("users")))
        grouped: Dict[int, List[LocalConstraint]] = {}
        for k, item in enumerate(data.get("locals", [])):
            kind = item["kind"]
            params = item.get("params", {})
            if kind not in LOCAL_KINDS:
                raise InputFileError(f"{where}: locals[{k}] 的类型无法识别: {kind!r}")
            items = params.get("items")
            if kind == SUM_CAP:
                constraint = LocalConstraint(kind, items=items, bound=params["K"])
            elif kind == SUM_FLOOR:
                constraint = LocalConstraint(kind, items=items, bound=params["n1"])
            elif kind == SIMPLEX_EQUALITY:
                constraint = LocalConstraint(kind, items=items)
            else:
                constraint = LocalConstraint(kind, A=params["A"], b=params["b"])
            grouped.setdefault(int(item["user"]), []).append(constraint)
        locals_ = tuple(LocalConstraintSet(u, tuple(cs)) for u, cs in sorted(grouped.items()))
        return MooProblem(p, r, q, float(data["gamma"]), tuple(budgets), locals_, gain)
    except KeyError as e:
        raise InputFileError(f"{where}: 缺少字段 {e}") from e
    except (TypeError, ValueError) as e:
        raise InputFileError(f"{where}: 字段格式错误: {e}") from e


def _weights_ref(problem: MooProblem, budget: GlobalBudget):
    for name in ("r", "p"):
        ref = getattr(problem, name)
        if budget.users is not None:
            ref = GlobalBudget(ref, users=budget.users).weights
        if np.array_equal(ref, budget.weights):
            return name
    return _flat(budget.weights)


def _local_to_dict(user: int, c: LocalConstraint) -> Dict[str, Any]:
    params: Dict[str, Any] = {}
    if c.items is not None:
        params["items"] = list(c.items)
    if c.kind == SUM_CAP:
        params["K"] = c.bound
    elif c.kind == SUM_FLOOR:
        params["n1"] = c.bound
    elif c.kind == GENERAL_LINEAR:
        params["A"] = [[float(v) for v in row] for row in c.A]
        params["b"] = [float(v) for v in c.b]
    return {"user": user, "kind": c.kind, "params": params}


def problem_to_dict(problem: MooProblem) -> Dict[str, Any]:
    """实例文档；a 不写入文件"""
    data: Dict[str, Any] = {
        "N": problem.num_users,
        "M": problem.num_items,
        "gamma": problem.gamma,
        "p": _flat(problem.p),
        "r": _flat(problem.r),
        "q": _flat(problem.q),
    }
    if problem.gain is not None:
        data["gain"] = _flat(problem.gain)
    budgets = []
    for b in problem.budgets:
        item: Dict[str, Any] = {"weights_ref": _weights_ref(problem, b), "direction": b.direction,
                                "bound": b.bound}
        if b.users is not None:
            item["users"] = list(b.users)
        if b.label:
            item["label"] = b.label
        budgets.append(item)
    data["budgets"] = budgets
    data["locals"] = [_local_to_dict(s.user, c) for s in problem.locals for c in s.constraints]
    return data


def load_instance(path) -> MooProblem:
    """读取实例文件"""
    problem = problem_from_dict(_read_json(path), str(path))
    logger.info(f"读取实例 {path}: N={problem.num_users}, M={problem.num_items}")
    return problem


def save_instance(problem: MooProblem, path):
    write_json(problem_to_dict(problem), path)


STAGE2_MODES = ("auto", "general")


def physical_cores() -> int:
    """本机物理核心数，取不到时为 1"""
    return max(1, int(cpu_count(only_physical_cores=True) or 1))


@dataclass(frozen=True)
class RunConfig:
    """运行配置：内置默认值 < 配置文件 < 命令行参数"""
    solver: SolverConfig = field(default_factory=SolverConfig)
    estimator: str = "raw"
    sample_size: Optional[int] = None
    seed: int = 0
    threads: int = field(default_factory=physical_cores)
    stage2: str = "auto"

    def __post_init__(self):
        if self.sample_size is not None and self.sample_size < 1:
            raise BadParams("sample_size 至少为 1")
        if self.threads < 1:
            raise BadParams("threads 至少为 1")
        if self.stage2 not in STAGE2_MODES:
            raise BadParams(f"stage2 必须为 {STAGE2_MODES} 之一")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        known = {"solver", "estimator", "sample_size", "seed", "threads", "stage2"}
        unknown = set(data) - known
        if unknown:
            raise BadParams(f"配置文件含未知字段: {sorted(unknown)}")
        values = dict(data)
        try:
            values["solver"] = SolverConfig.from_dict(values.get("solver", {}))
        except (InvalidConfig, TypeError) as e:
            raise BadParams(f"solver 配置非法: {e}") from e
        return cls(**values)

    def with_overrides(self, solver: Optional[Dict[str, Any]] = None, **overrides) -> "RunConfig":
        """用命令行参数覆盖（None 表示未指定）"""
        updated = replace(self, **{k: v for k, v in overrides.items() if v is not None})
        if solver:
            try:
                updated = replace(updated, solver=updated.solver.with_overrides(**solver))
            except InvalidConfig as e:
                raise BadParams(f"solver 参数非法: {e}") from e
        return updated

    def to_dict(self) -> Dict[str, Any]:
        return {
            "solver": self.solver.to_dict(),
            "estimator": self.estimator,
            "sample_size": self.sample_size,
            "seed": self.seed,
            "threads": self.threads,
            "stage2": self.stage2,
        }


def load_config(path) -> RunConfig:
    """读取运行配置文件"""
    return RunConfig.from_dict(_read_json(path))


def config_hash(data: Dict[str, Any]) -> str:
    """规范化 JSON 的 sha256"""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def format_value(value) -> str:
    """CSV 数值格式：整数原样，浮点用 repr 保证无损"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]],
              manifest_ref: Optional[str] = "manifest.json"):
    """写 CSV：首行为运行清单引用注释，其后是表头"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if manifest_ref:
            f.write(f"{MANIFEST_PREFIX}{manifest_ref}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def read_csv(path) -> Tuple[Optional[str], List[Dict[str, str]]]:
    """读 CSV，返回 (清单引用, 行字典列表)"""
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"文件不存在: {path}")
    with open(path, "r", newline="", encoding="utf-8") as f:
        lines = f.read().splitlines()
    manifest = None
    if lines and lines[0].startswith(MANIFEST_PREFIX):
        manifest = lines[0][len(MANIFEST_PREFIX):]
        lines = lines[1:]
    return manifest, list(csv.DictReader(lines))


def write_duals_csv(path, index_map: Sequence[str], z: np.ndarray,
                    manifest_ref: Optional[str] = "manifest.json"):
    write_csv(path, ["label", "value"], zip(index_map, z), manifest_ref)


def load_duals(path) -> Dict[str, float]:
    """读取对偶 CSV，返回 标签 → 取值"""
    _, rows = read_csv(path)
    try:
        return {row["label"]: float(row["value"]) for row in rows}
    except (KeyError, ValueError) as e:
        raise InputFileError(f"{path}: 对偶文件格式错误: {e}") from e


def mu_from_duals(duals: Dict[str, float], num_budgets: int, where: str = "<duals>") -> np.ndarray:
    missing = [f"mu[{k}]" for k in range(num_budgets) if f"mu[{k}]" not in duals]
    if missing:
        raise InputFileError(f"{where}: 缺少预算对偶 {missing}")
    return np.array([duals[f"mu[{k}]"] for k in range(num_budgets)])


def write_plans_csv(path, plans, num_items: int, manifest_ref: Optional[str] = "manifest.json"):
    """投放计划 CSV：user, x1..xM, nu, pattern"""
    header = ["user"] + [f"x{i + 1}" for i in range(num_items)] + ["nu", "pattern"]
    rows = []
    for plan in sorted(plans, key=lambda p: p.user):
        pattern = "" if plan.active_pattern is None else f"{plan.active_pattern[0]}:{plan.active_pattern[1]}"
        rows.append([plan.user] + [float(v) for v in plan.x] + [plan.nu, pattern])
    write_csv(path, header, rows, manifest_ref)
