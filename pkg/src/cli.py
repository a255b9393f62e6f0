"""
命令行接口模块

提供完整的命令行参数解析和功能调用接口，支持：
- 生成与校验实例文件
- 两阶段求解（对偶 ADMM + 逐用户恢复）与由对偶文件批量恢复
- 约束DAG构建与第二阶段节点选择
- 拆分曲线与方差对比实验，以及对应的 gnuplot 脚本
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from colorama import Fore, Style, init

try:
    from .constraint_dag import DagException, TimeModel
    from .dual_solver import SolverException
    from .experiments import (PLOT_KINDS, RunManifest, dag_report,
                              exp_split_curve, exp_variance_table, plot_script,
                              recover_from_duals, run_pipeline, variance_rows,
                              write_split_curve, write_variance_table)
    from .generators import KINDS, gen_instance
    from .instance_file import (BadParams, InputFileError, RunConfig, load_config, load_instance,
                                save_instance, write_json)
    from .model import ModelException, validate
    from .oracle import OracleException
    from .recovery import RecoveryException
    from .variance import ESTIMATOR_ALIASES, ESTIMATORS, VarianceException
except ImportError:
    from constraint_dag import DagException, TimeModel
    from dual_solver import SolverException
    from experiments import (PLOT_KINDS, RunManifest, dag_report,
                             exp_split_curve, exp_variance_table, plot_script,
                             recover_from_duals, run_pipeline, variance_rows,
                             write_split_curve, write_variance_table)
    from generators import KINDS, gen_instance
    from instance_file import (BadParams, InputFileError, RunConfig, load_config, load_instance,
                               save_instance, write_json)
    from model import ModelException, validate
    from oracle import OracleException
    from recovery import RecoveryException
    from variance import ESTIMATOR_ALIASES, ESTIMATORS, VarianceException

# 初始化colorama（Windows颜色支持）
init(autoreset=True)

# 配置日志
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_INPUT = 1
EXIT_SOLVER = 2
EXIT_INTERNAL = 3

INPUT_ERRORS = (ModelException, InputFileError, BadParams, DagException,
                json.JSONDecodeError, OSError)
SOLVER_ERRORS = (SolverException, RecoveryException, OracleException, VarianceException)


def _parse_param(text: str):
    """解析 KEY=VALUE，VALUE 按 JSON 解析，失败时保留字符串"""
    if '=' not in text:
        raise argparse.ArgumentTypeError(f"参数格式应为 KEY=VALUE: {text}")
    key, value = text.split('=', 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


class CommandLineInterface:
    """命令行接口类"""

    def __init__(self):
        self.parser: Any = None
        self._setup_parser()

    def _setup_parser(self):
        """设置命令行参数解析器"""
        self.parser = argparse.ArgumentParser(
            description='多目标投放优化：对偶 ADMM 求解与逐用户恢复',
            formatter_class=argparse.RawDescriptionHelpFormatter,
            epilog='''
示例用法:
  %(prog)s gen --kind binary-tree --param K=3 -o tree.json     # 生成二叉树实例
  %(prog)s validate --instance tree.json                       # 校验实例
  %(prog)s solve --instance inst.json --out-dir out            # 两阶段求解
  %(prog)s solve --instance inst.json --config run.json --rho 2  # 配置文件 + 命令行覆盖
  %(prog)s recover --instance inst.json --duals out/duals.csv  # 由对偶文件恢复
  %(prog)s dag --instance tree.json --beta 0.5                 # 构建约束DAG
  %(prog)s split-curve -K 6 --reps 50 --out-dir out            # 拆分曲线实验
  %(prog)s variance-table -n 200 --reps 200 --out-dir out      # 方差对比实验
  %(prog)s plot-script split-curve out/split_curve.csv         # 输出 gnuplot 脚本

参数优先级: 内置默认值 < --config 配置文件 < 命令行参数
退出码: 0 成功, 1 输入错误, 2 求解错误, 3 其他错误
            '''
        )

        # 全局选项
        self.parser.add_argument('-v', '--verbose', action='store_true', help='详细输出模式')

        # 各子命令共用的运行参数
        common = argparse.ArgumentParser(add_help=False)
        common.add_argument('--config', type=str, help='运行配置文件 (JSON)')
        common.add_argument('--seed', type=int, help='随机种子 (默认: 0)')
        common.add_argument('--out-dir', type=str, default='out', help='输出目录 (默认: out)')
        common.add_argument('--threads', type=int, help='工作线程数 (默认: 物理核心数)')
        common.add_argument('--estimator', choices=sorted(set(ESTIMATORS) | set(ESTIMATOR_ALIASES)),
                            help='第一阶段估计方式 (默认: raw)')
        common.add_argument('--rho', type=float, help='ADMM 罚参数 (默认: 1.0)')
        common.add_argument('--eps-abs', type=float, help='绝对容差 (默认: 1e-6)')
        common.add_argument('--eps-rel', type=float, help='相对容差 (默认: 1e-4)')
        common.add_argument('--max-iters', type=int, help='最大迭代次数 (默认: 100000)')
        common.add_argument('--wall-clock', action='store_true', help='报告实测耗时而非模型耗时')

        # 子命令
        subparsers = self.parser.add_subparsers(dest='command', help='可用命令')

        # gen命令
        gen_parser = subparsers.add_parser('gen', parents=[common], help='生成合成实例')
        gen_parser.add_argument('--kind', choices=KINDS, required=True, help='实例类型')
        gen_parser.add_argument('--param', type=_parse_param, action='append', default=[],
                                help='生成参数 KEY=VALUE，可重复，如 N=10 M=3 K=3')
        gen_parser.add_argument('-o', '--output', type=str, help='实例文件路径 (默认: <out-dir>/instance.json)')

        # validate命令
        validate_parser = subparsers.add_parser('validate', parents=[common], help='校验实例文件')
        validate_parser.add_argument('--instance', type=str, required=True, help='实例文件')

        # solve命令
        solve_parser = subparsers.add_parser('solve', parents=[common], help='两阶段求解')
        solve_parser.add_argument('--instance', type=str, required=True, help='实例文件')
        solve_parser.add_argument('--sample-size', type=int, help='第一阶段采样用户数 (默认: 全体)')
        solve_parser.add_argument('--log-every', type=int, help='每隔多少次迭代记录诊断 (默认: 0 不记录)')

        # recover命令
        recover_parser = subparsers.add_parser('recover', parents=[common], help='由对偶文件批量恢复投放计划')
        recover_parser.add_argument('--instance', type=str, required=True, help='实例文件')
        recover_parser.add_argument('--duals', type=str, required=True, help='对偶 CSV (label,value)')

        # dag命令
        dag_parser = subparsers.add_parser('dag', parents=[common], help='构建约束DAG并选择第二阶段节点')
        dag_parser.add_argument('--instance', type=str, required=True, help='实例文件')
        dag_parser.add_argument('--w', type=float, default=0.5, help='耗时与方差的权衡 w (默认: 0.5)')
        dag_parser.add_argument('--beta', type=float, help='选择阈值 β，不给出时只构建DAG')
        dag_parser.add_argument('--no-root', action='store_true', help='不添加全集根节点')
        dag_parser.add_argument('--calibrate', action='store_true', help='实测投影耗时标定耗时模型')

        # split-curve命令
        split_parser = subparsers.add_parser('split-curve', parents=[common], help='拆分层级的 MSE / 在线耗时曲线')
        split_parser.add_argument('-K', type=int, default=6, help='二叉树层数 (默认: 6)')
        split_parser.add_argument('--reps', type=int, default=50, help='重复次数 (默认: 50)')
        split_parser.add_argument('--w', type=float, default=0.5, help='选择得分权重 w (默认: 0.5)')
        split_parser.add_argument('--beta', type=float, help='给出时追加按得分选择的一行')

        # variance-table命令
        var_parser = subparsers.add_parser('variance-table', parents=[common], help='四种估计方式的对偶方差对比')
        var_parser.add_argument('-n', type=int, default=200, help='样本量 (默认: 200)')
        var_parser.add_argument('--reps', type=int, default=30, help='重复次数，至少 30 (默认: 30)')
        var_parser.add_argument('-N', type=int, default=2000, help='总体规模 (默认: 2000)')
        var_parser.add_argument('-M', type=int, default=3, help='物品数 (默认: 3)')
        var_parser.add_argument('--population-seed', type=int, default=0, help='总体生成种子 (默认: 0)')

        # plot-script命令
        plot_parser = subparsers.add_parser('plot-script', help='输出实验 CSV 的 gnuplot 脚本')
        plot_parser.add_argument('kind', choices=PLOT_KINDS, help='实验类型')
        plot_parser.add_argument('csv', type=str, help='实验 CSV 路径')
        plot_parser.add_argument('-o', '--output', type=str, help='图片路径 (默认: 与 CSV 同名 .png)')

    def _print_error(self, message: str):
        """打印错误信息"""
        print(f"{Fore.RED}错误: {message}{Style.RESET_ALL}", file=sys.stderr)

    def _print_success(self, message: str):
        """打印成功信息"""
        print(f"{Fore.GREEN}成功: {message}{Style.RESET_ALL}")

    def _print_info(self, message: str):
        """打印信息"""
        print(f"{Fore.CYAN}信息: {message}{Style.RESET_ALL}")

    def _print_warning(self, message: str):
        """打印警告"""
        print(f"{Fore.YELLOW}警告: {message}{Style.RESET_ALL}")

    def _run_config(self, args) -> RunConfig:
        """默认值 < 配置文件 < 命令行参数"""
        config = load_config(args.config) if getattr(args, 'config', None) else RunConfig()
        solver = {
            'rho': getattr(args, 'rho', None),
            'eps_abs': getattr(args, 'eps_abs', None),
            'eps_rel': getattr(args, 'eps_rel', None),
            'max_iters': getattr(args, 'max_iters', None),
            'log_every': getattr(args, 'log_every', None),
        }
        return config.with_overrides(
            solver=solver,
            seed=getattr(args, 'seed', None),
            threads=getattr(args, 'threads', None),
            estimator=getattr(args, 'estimator', None),
            sample_size=getattr(args, 'sample_size', None),
        )

    def cmd_gen(self, args) -> int:
        """生成实例"""
        config = self._run_config(args)
        params: Dict[str, Any] = dict(args.param)
        problem = gen_instance(args.kind, params, config.seed)
        output = Path(args.output) if args.output else Path(args.out_dir) / 'instance.json'
        save_instance(problem, output)
        self._print_success(f"已生成 {args.kind} 实例: N={problem.num_users}, M={problem.num_items}, "
                            f"预算 {len(problem.budgets)} 条 -> {output}")
        return 0

    def cmd_validate(self, args) -> int:
        """校验实例"""
        report = validate(load_instance(args.instance))
        if report.ok:
            self._print_success(f"{args.instance} 校验通过")
            return 0
        for message in report.messages():
            self._print_warning(message)
        self._print_error(f"{args.instance} 有 {len(report)} 个问题")
        return EXIT_INPUT

    def cmd_solve(self, args) -> int:
        """两阶段求解"""
        config = self._run_config(args)
        problem = load_instance(args.instance)
        result = run_pipeline(problem, config, args.out_dir, 'solve', args.instance)
        summary = result.solution.summary()
        self._print_info(f"对偶求解: {summary['converged']}, 迭代 {summary['iterations']}, "
                         f"r={summary['r_norm']:.3e}, s={summary['s_norm']:.3e}, "
                         f"KKT={summary['kkt_residual']:.3e}")
        for label, value in summary['mu'].items():
            print(f"  {label:<10} {value:.10g}")
        if result.violations:
            self._print_warning(f"投放计划违反约束: {', '.join(result.violations)}")
        self._print_success(f"原问题目标 {result.objective:.10g}，输出目录 {args.out_dir}")
        return 0

    def cmd_recover(self, args) -> int:
        """由对偶文件恢复"""
        config = self._run_config(args)
        problem = load_instance(args.instance)
        plans, manifest = recover_from_duals(problem, args.duals, config, args.out_dir)
        infeasible = [p.user for p in plans if not p.feasible]
        if infeasible:
            self._print_warning(f"以下用户的投放计划未满足用户级约束: {infeasible}")
        self._print_success(f"已恢复 {len(plans)} 个用户，目标 {manifest.extra['objective']:.10g}")
        return 0

    def cmd_dag(self, args) -> int:
        """构建约束DAG"""
        config = self._run_config(args)
        problem = load_instance(args.instance)
        time_model = TimeModel.calibrate(seed=config.seed) if args.calibrate else TimeModel()
        dag, chosen = dag_report(problem, args.w, args.beta, time_model,
                                 include_root=not args.no_root)
        out_dir = Path(args.out_dir)
        write_json(dag.to_dict(), out_dir / 'dag.json')
        manifest = RunManifest('dag', config.to_dict(), config.seed)
        manifest.record(out_dir / 'dag.json')
        manifest.extra.update({'w': args.w, 'beta': args.beta, 'selected': chosen,
                               'time_model': [time_model.coefficient, time_model.exponent]})
        manifest.write(out_dir)

        self._print_info(f"节点 {len(dag.nodes)} 个，边 {len(dag.edges())} 条")
        for parent, child in dag.edges():
            print(f"  {parent} -> {child}")
        if args.beta is not None:
            self._print_info(f"可信节点: {', '.join(chosen) if chosen else '(无)'}")
        self._print_success(f"DAG 已写入 {out_dir / 'dag.json'}")
        return 0

    def cmd_split_curve(self, args) -> int:
        """拆分曲线实验"""
        config = self._run_config(args)
        rows = exp_split_curve(args.K, args.reps, args.w, args.beta, config.seed, config.solver,
                               wall_clock=args.wall_clock, threads=config.threads)
        out_dir = Path(args.out_dir)
        path = write_split_curve(rows, out_dir / 'split_curve.csv')
        manifest = RunManifest('split-curve', config.to_dict(), config.seed)
        manifest.record(path)
        manifest.extra.update({'K': args.K, 'reps': args.reps, 'w': args.w, 'beta': args.beta,
                               'wall_clock': args.wall_clock})
        manifest.write(out_dir)

        print(f"{'split_level':>12} {'mse':>14} {'online_time':>14}")
        for level, mse, seconds in rows:
            print(f"{str(level):>12} {mse:>14.6e} {seconds:>14.6e}")
        self._print_success(f"已写入 {path}")
        return 0

    def cmd_variance_table(self, args) -> int:
        """方差对比实验"""
        config = self._run_config(args)
        reports = exp_variance_table(args.n, args.reps, args.N, args.M, config.seed,
                                     args.population_seed, config.threads, config.solver)
        out_dir = Path(args.out_dir)
        path = write_variance_table(reports, out_dir / 'variance_table.csv')
        manifest = RunManifest('variance-table', config.to_dict(), config.seed)
        manifest.record(path)
        manifest.extra.update({'n': args.n, 'reps': args.reps, 'N': args.N, 'M': args.M,
                               'population_seed': args.population_seed})
        manifest.write(out_dir)

        print(f"{'estimator':>10} {'mu0':>12} {'V(mu0)':>12} {'mu1':>12} {'V(mu1)':>12} {'oob':>8}")
        for row in variance_rows(reports):
            print(f"{row[0]:>10} {row[3]:>12.6g} {row[4]:>12.6g} {row[5]:>12.6g} "
                  f"{row[6]:>12.6g} {row[7]:>8.4f}")
        self._print_success(f"已写入 {path}")
        return 0

    def cmd_plot_script(self, args) -> int:
        """输出 gnuplot 脚本"""
        sys.stdout.write(plot_script(args.kind, args.csv, args.output))
        return 0

    def _exit_code(self, error: Exception) -> int:
        if isinstance(error, INPUT_ERRORS):
            return EXIT_INPUT
        if isinstance(error, SOLVER_ERRORS):
            return EXIT_SOLVER
        return EXIT_INTERNAL

    def run(self, argv: Optional[List[str]] = None) -> int:
        """运行命令行接口"""
        args = None
        try:
            args = self.parser.parse_args(argv)

            # 设置日志级别
            if args.verbose:
                logging.getLogger().setLevel(logging.DEBUG)
            else:
                logging.getLogger().setLevel(logging.WARNING)

            # 检查命令
            if not args.command:
                self.parser.print_help()
                return 1

            # 执行对应命令
            command_map = {
                'gen': self.cmd_gen,
                'validate': self.cmd_validate,
                'solve': self.cmd_solve,
                'recover': self.cmd_recover,
                'dag': self.cmd_dag,
                'split-curve': self.cmd_split_curve,
                'variance-table': self.cmd_variance_table,
                'plot-script': self.cmd_plot_script,
            }

            if args.command in command_map:
                return command_map[args.command](args)
            else:
                self._print_error(f"未知命令: {args.command}")
                return 1

        except KeyboardInterrupt:
            print(f"\n{Fore.YELLOW}操作被用户中断{Style.RESET_ALL}")
            return 1
        except Exception as e:
            code = self._exit_code(e)
            kind = {EXIT_INPUT: "输入错误", EXIT_SOLVER: "求解错误"}.get(code, "程序异常")
            self._print_error(f"{kind}: {e}")
            if args is not None and getattr(args, 'verbose', False):
                import traceback
                traceback.print_exc()
            return code


def main(argv: Optional[List[str]] = None) -> int:
    """主函数"""
    cli = CommandLineInterface()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
