"""
命令行端到端测试

通过 CommandLineInterface.run 执行各子命令，检查输出文件与退出码。
"""

import io
import json
import os
import sys
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli import EXIT_INPUT, EXIT_SOLVER, CommandLineInterface
from constraint_dag import ConstraintDag
from instance_file import physical_cores


class TestCommands(unittest.TestCase):
    """测试子命令"""

    def setUp(self):
        self.cli = CommandLineInterface()
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def run_cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with redirect_stdout(out), redirect_stderr(err):
            code = self.cli.run([str(a) for a in argv])
        return code, out.getvalue(), err.getvalue()

    def gen(self, *params, kind="uniform", name="inst.json"):
        path = self.dir / name
        args = ["gen", "--kind", kind, "-o", path]
        for p in params:
            args += ["--param", p]
        code, _, _ = self.run_cli(*args)
        self.assertEqual(code, 0)
        return path

    def test_gen_and_validate(self):
        path = self.gen("K=2", kind="binary-tree")
        self.assertEqual(json.loads(path.read_text(encoding="utf-8"))["N"], 4)
        code, _, _ = self.run_cli("validate", "--instance", path)
        self.assertEqual(code, 0)

    def test_validate_reports_problems(self):
        path = self.dir / "bad.json"
        path.write_text(json.dumps({"N": 1, "M": 1, "gamma": 1.0, "p": [1.5], "r": [0.0],
                                    "q": [0.0]}), encoding="utf-8")
        code, _, err = self.run_cli("validate", "--instance", path)
        self.assertEqual(code, EXIT_INPUT)
        self.assertIn("1 个问题", err)

    def test_solve_then_recover(self):
        path = self.gen("N=4", "M=2", 'local_kind="cap"', "cap=1.0")
        out_dir = self.dir / "out"
        code, stdout, _ = self.run_cli("solve", "--instance", path, "--out-dir", out_dir,
                                       "--rho", "1.5")
        self.assertEqual(code, 0)
        self.assertIn("mu[0]", stdout)
        manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["command"], "solve")
        self.assertEqual(manifest["config"]["solver"]["rho"], 1.5)

        code, _, _ = self.run_cli("recover", "--instance", path, "--duals", out_dir / "duals.csv",
                                  "--out-dir", self.dir / "again")
        self.assertEqual(code, 0)
        self.assertEqual((out_dir / "plans.csv").read_bytes(),
                         (self.dir / "again" / "plans.csv").read_bytes())

    def test_config_file_and_flag_precedence(self):
        path = self.gen("N=3", "M=2", 'local_kind="cap"', "cap=1.0")
        config = self.dir / "run.json"
        config.write_text(json.dumps({"solver": {"rho": 3.0}, "seed": 4}), encoding="utf-8")
        code, _, _ = self.run_cli("solve", "--instance", path, "--config", config,
                                  "--eps-abs", "1e-7", "--out-dir", self.dir / "out")
        self.assertEqual(code, 0)
        manifest = json.loads((self.dir / "out" / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(manifest["config"]["solver"]["rho"], 3.0)
        self.assertEqual(manifest["config"]["solver"]["eps_abs"], 1e-7)
        self.assertEqual(manifest["seed"], 4)

    def test_threads_precedence(self):
        """线程数：物理核心数 < 配置文件 < --threads"""
        path = self.gen("N=3", "M=2", 'local_kind="cap"', "cap=1.0")
        config = self.dir / "run.json"
        config.write_text(json.dumps({"threads": 3}), encoding="utf-8")
        for extra, expected in (((), physical_cores()), (("--config", config), 3),
                                (("--config", config, "--threads", "2"), 2)):
            with self.subTest(extra=extra):
                out_dir = self.dir / f"out{expected}"
                code, _, _ = self.run_cli("solve", "--instance", path, "--out-dir", out_dir, *extra)
                self.assertEqual(code, 0)
                manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
                self.assertEqual(manifest["config"]["threads"], expected)

    def test_infeasible_instance(self):
        """每个用户必须投放而预算只允许 30%：退出码 2，不进入迭代"""
        path = self.gen("N=2", "M=1", 'local_kind="simplex"')
        code, _, err = self.run_cli("solve", "--instance", path, "--out-dir", self.dir / "out")
        self.assertEqual(code, EXIT_SOLVER)
        self.assertIn("不可行", err)
        self.assertFalse((self.dir / "out" / "duals.csv").exists())

    def test_split_curve_default_reps(self):
        self.assertEqual(self.cli.parser.parse_args(["split-curve"]).reps, 50)

    def test_missing_instance(self):
        missing = self.dir / "nope.json"
        code, _, err = self.run_cli("solve", "--instance", missing)
        self.assertEqual(code, EXIT_INPUT)
        self.assertIn(str(missing), err)

    def test_bad_config_field(self):
        path = self.gen()
        config = self.dir / "run.json"
        config.write_text(json.dumps({"alpha": 1.6}), encoding="utf-8")
        code, _, _ = self.run_cli("solve", "--instance", path, "--config", config)
        self.assertEqual(code, EXIT_INPUT)

    def test_dag(self):
        path = self.gen("K=2", kind="binary-tree")
        code, stdout, _ = self.run_cli("dag", "--instance", path, "--beta", "1e9", "--w", "0",
                                       "--out-dir", self.dir)
        self.assertEqual(code, 0)
        self.assertIn("->", stdout)
        dag = ConstraintDag.from_dict(json.loads((self.dir / "dag.json").read_text(encoding="utf-8")))
        self.assertEqual(len(dag.edges()), 6)
        manifest = json.loads((self.dir / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(len(manifest["extra"]["selected"]), 7)

    def test_split_curve(self):
        code, _, _ = self.run_cli("split-curve", "-K", "2", "--reps", "1", "--out-dir", self.dir)
        self.assertEqual(code, 0)
        lines = (self.dir / "split_curve.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(lines[0], "# manifest: manifest.json")
        self.assertEqual(lines[1], "split_level,mse,online_time_sec")
        self.assertEqual(len(lines), 4)

    def test_experiment_arguments_rejected(self):
        code, _, _ = self.run_cli("split-curve", "--reps", "0", "--out-dir", self.dir)
        self.assertEqual(code, EXIT_INPUT)
        code, _, _ = self.run_cli("variance-table", "--reps", "5", "--out-dir", self.dir)
        self.assertEqual(code, EXIT_INPUT)

    def test_plot_script(self):
        code, stdout, _ = self.run_cli("plot-script", "variance-table", "v.csv")
        self.assertEqual(code, 0)
        self.assertIn("plot 'v.csv'", stdout)


if __name__ == '__main__':
    unittest.main()
