"""
测试用例模块

包含对各个模块导入与命令行解析的基本测试用例。
"""

import unittest
import sys
import os

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))


class TestImports(unittest.TestCase):
    """测试模块导入"""

    def test_import_model(self):
        """测试模型模块导入"""
        try:
            from model import MooProblem, ModelException, assemble_dual
            self.assertTrue(True)
        except ImportError as e:
            self.fail(f"模型模块导入失败: {e}")

    def test_import_dual_solver(self):
        """测试对偶求解模块导入"""
        try:
            from dual_solver import SolverConfig, SolverException, solve
            self.assertTrue(True)
        except ImportError as e:
            self.fail(f"对偶求解模块导入失败: {e}")

    def test_import_recovery(self):
        """测试恢复模块导入"""
        try:
            from recovery import RecoveryException, recover_capped, recover_general
            self.assertTrue(True)
        except ImportError as e:
            self.fail(f"恢复模块导入失败: {e}")

    def test_import_cli(self):
        """测试CLI模块导入"""
        try:
            from cli import CommandLineInterface
            self.assertTrue(True)
        except ImportError as e:
            self.fail(f"CLI模块导入失败: {e}")


class TestCLI(unittest.TestCase):
    """测试命令行接口"""

    def setUp(self):
        from cli import CommandLineInterface
        self.cli = CommandLineInterface()

    def test_parser_creation(self):
        """测试解析器创建"""
        self.assertIsNotNone(self.cli.parser)

    def test_help_command(self):
        """测试帮助命令"""
        try:
            self.cli.parser.parse_args(['--help'])
        except SystemExit:
            # argparse在--help时会调用sys.exit()，这是正常行为
            pass

    def test_gen_command_parsing(self):
        """测试gen命令解析"""
        args = self.cli.parser.parse_args(['gen', '--kind', 'binary-tree', '--param', 'K=3'])
        self.assertEqual(args.command, 'gen')
        self.assertEqual(args.kind, 'binary-tree')
        self.assertEqual(args.param, [('K', 3)])

    def test_solve_command_parsing(self):
        """测试solve命令解析"""
        args = self.cli.parser.parse_args(
            ['solve', '--instance', 'inst.json', '--rho', '2', '--estimator', 'mod1'])
        self.assertEqual(args.command, 'solve')
        self.assertEqual(args.rho, 2.0)
        self.assertEqual(args.estimator, 'mod1')
        self.assertIsNone(args.eps_abs)

    def test_split_curve_parsing(self):
        """测试split-curve命令解析"""
        args = self.cli.parser.parse_args(['split-curve', '-K', '3', '--reps', '5'])
        self.assertEqual(args.K, 3)
        self.assertEqual(args.reps, 5)
        self.assertFalse(args.wall_clock)

    def test_no_command_returns_nonzero(self):
        """测试缺少子命令"""
        self.assertEqual(self.cli.run([]), 1)


if __name__ == '__main__':
    # 运行测试
    unittest.main()
