"""
模型模块测试

覆盖实例校验、对偶组装（标准与扩展布局）以及驻点恢复与目标值辅助函数。
"""

import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from model import (GE, LE, SIMPLEX_EQUALITY, SUM_CAP, SUM_FLOOR, GlobalBudget, LocalConstraint,
                   LocalConstraintSet, MooProblem, InvalidProblem, DimensionMismatch,
                   UnsupportedLayout, assemble_dual, assemble_dual_extended, check_feasibility,
                   duality_constant, primal_from_dual_stationarity, primal_objective,
                   problem_is_feasible, validate)


def simplex_locals(N):
    return tuple(LocalConstraintSet(u, (LocalConstraint(SIMPLEX_EQUALITY),)) for u in range(N))


def random_problem(N=2, M=2, seed=0, gamma=1.0, simplex=True):
    rng = np.random.default_rng(seed)
    p, r, q = rng.random((N, M)), rng.random((N, M)), rng.random((N, M))
    budget = GlobalBudget(r, LE, 0.3 * r.sum())
    return MooProblem(p, r, q, gamma, (budget,), simplex_locals(N) if simplex else ())


class TestValidate(unittest.TestCase):
    """测试实例校验"""

    def test_out_of_range_entry(self):
        """p 越界时报告位置"""
        p = np.array([[0.1, 1.2], [0.3, 0.4]])
        problem = MooProblem(p, np.zeros((2, 2)), np.zeros((2, 2)), 1.0)
        report = validate(problem)
        self.assertFalse(report.ok)
        self.assertIn("p out of [0,1] at (0,1)", report.messages())

    def test_gamma_must_be_positive(self):
        """gamma = 0 被拒绝"""
        problem = MooProblem(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), 0.0)
        self.assertIn("gamma must be positive", validate(problem).messages())

    def test_well_formed_instance(self):
        """合法的 2×2 实例报告为空"""
        report = validate(random_problem())
        self.assertTrue(report.ok)
        self.assertEqual(len(report), 0)

    def test_infeasible_local_region(self):
        """下限超过物品数时可行性探测失败"""
        local = LocalConstraintSet(0, (LocalConstraint(SUM_FLOOR, bound=3.0),))
        problem = MooProblem(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 1.0,
                             locals=(local,))
        self.assertTrue(any("does not intersect" in m for m in validate(problem).messages()))

    def test_item_outside_user_row(self):
        """用户级约束引用了不存在的物品"""
        local = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, items=(0, 5), bound=1.0),))
        problem = MooProblem(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 1.0,
                             locals=(local,))
        self.assertFalse(validate(problem).ok)

    def test_assemble_rejects_invalid(self):
        """非法实例不能组装对偶"""
        problem = MooProblem(np.full((1, 1), 2.0), np.zeros((1, 1)), np.zeros((1, 1)), 1.0)
        with self.assertRaises(InvalidProblem):
            assemble_dual(problem)


class TestAssembleDual(unittest.TestCase):
    """测试标准布局对偶组装"""

    def test_single_user_single_item(self):
        """N=1, M=1 的手算示例"""
        problem = MooProblem(np.array([[0.5]]), np.array([[0.2]]), np.zeros((1, 1)), 1.0,
                             (GlobalBudget(np.array([[0.2]]), LE, 0.1),), simplex_locals(1))
        dual = assemble_dual(problem)
        B = dual.dense_B()
        self.assertEqual(B.shape, (5, 5))
        self.assertAlmostEqual(B[0, 0], 0.04, places=12)
        self.assertAlmostEqual(B[0, 1], 0.2, places=12)
        self.assertAlmostEqual(dual.p_tilde[0], 0.0, places=12)
        self.assertEqual(dual.index_map[:3], ("mu[0]", "nu+[0]", "nu-[0]"))

    def test_symmetric_psd(self):
        """B 对称半正定"""
        B = assemble_dual(random_problem(3, 4, seed=3)).dense_B()
        assert_allclose(B, B.T, atol=1e-14)
        self.assertGreaterEqual(np.linalg.eigvalsh(B).min(), -1e-10)

    def test_matches_naive_gram(self):
        """与独立的朴素 Â 构造逐元素一致"""
        problem = random_problem(2, 2, seed=7, gamma=1.5)
        N, M = 2, 2
        n = N * M
        cols = [-problem.r.ravel()]
        for sign in (-1.0, 1.0):
            for u in range(N):
                col = np.zeros(n)
                col[u * M:(u + 1) * M] = sign
                cols.append(col)
        cols += list(np.eye(n)) + list(-np.eye(n))
        hat_a = np.column_stack(cols)
        s_tilde = np.concatenate([[-problem.budgets[0].bound], -np.ones(N), np.ones(N),
                                  np.zeros(n), -np.ones(n)])
        expected_B = hat_a.T @ hat_a / problem.gamma
        expected_p = s_tilde - hat_a.T @ problem.a_vector / problem.gamma

        dual = assemble_dual(problem)
        self.assertEqual(dual.dimension, 1 + 2 * N + 2 * n)
        assert_allclose(dual.dense_B(), expected_B, atol=1e-12)
        assert_allclose(dual.p_tilde, expected_p, atol=1e-12)

    def test_floor_budget_sign(self):
        """>= 预算的列取 +w，s̃ 取 +bound"""
        w = np.array([[0.4, 0.6]])
        problem = MooProblem(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 1.0,
                             (GlobalBudget(w, GE, 0.5),))
        dual = assemble_dual(problem)
        assert_allclose(dual.hat_a[:, 0].toarray().ravel(), w.ravel())
        self.assertAlmostEqual(dual.s_tilde[0], 0.5)

    def test_unsupported_layout(self):
        """SumCap 不属于标准布局"""
        local = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=1.0),))
        problem = MooProblem(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 1.0,
                             locals=(local,))
        with self.assertRaises(UnsupportedLayout):
            assemble_dual(problem)

    def test_extended_layout_labels(self):
        """扩展布局把 SumCap 行附加在最后"""
        local = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=1.0),))
        problem = MooProblem(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), 1.0,
                             locals=(local,))
        dual = assemble_dual_extended(problem)
        self.assertEqual(dual.index_map[-1], "cap[0,0]")
        self.assertEqual(dual.dimension, 2 * 2 + 1)


class TestStationarity(unittest.TestCase):
    """测试驻点恢复与目标值"""

    def test_zero_duals(self):
        """z = 0 时 x = a/γ"""
        problem = random_problem(2, 3, seed=1, gamma=2.0)
        dual = assemble_dual(problem)
        x = primal_from_dual_stationarity(problem, np.zeros(dual.dimension), dual)
        assert_allclose(x, problem.a_vector / 2.0)

    def test_gamma_scaling(self):
        """固定 a + Ãz 时 γ 加倍 x 减半"""
        base = random_problem(2, 2, seed=2, gamma=1.0)
        z = np.random.default_rng(0).random(assemble_dual(base).dimension)
        gain = base.p + base.q  # a 在两种 γ 下保持一致
        one = MooProblem(base.p, base.r, base.q * 0, 1.0, base.budgets, base.locals, gain)
        two = MooProblem(base.p, base.r, base.q * 0, 2.0, base.budgets, base.locals, gain)
        assert_allclose(primal_from_dual_stationarity(two, z),
                        primal_from_dual_stationarity(one, z) / 2.0)

    def test_dimension_mismatch(self):
        """对偶向量长度错误"""
        problem = random_problem()
        with self.assertRaises(DimensionMismatch):
            primal_from_dual_stationarity(problem, np.zeros(3))

    def test_objective_and_duality_constant(self):
        """x = a/γ 处目标值等于 −‖a‖²/(2γ)"""
        problem = random_problem(2, 2, seed=4, gamma=3.0)
        x = problem.a_vector / problem.gamma
        self.assertAlmostEqual(primal_objective(problem, x), duality_constant(problem))

    def test_check_feasibility(self):
        """违反预算与单纯形等式时给出标签"""
        problem = random_problem(2, 2, seed=5)
        violations = check_feasibility(problem, np.ones(4))
        self.assertIn("mu[0]", violations)
        self.assertIn("local[0]", violations)
        self.assertEqual(check_feasibility(problem, np.zeros(4)), ["local[0]", "local[1]"])


class TestProblemFeasibility(unittest.TestCase):
    """测试整体可行性 LP"""

    def simplex_problem(self, bound, direction=LE):
        r = np.array([[0.1, 0.9], [0.2, 0.8]])
        return MooProblem(np.zeros((2, 2)), r, np.zeros((2, 2)), 1.0,
                          (GlobalBudget(r, direction, bound),), simplex_locals(2))

    def test_simplex_budget(self):
        """每个用户选 r 最小的物品时 Σ r x = 0.3"""
        self.assertTrue(problem_is_feasible(self.simplex_problem(0.5)))
        self.assertTrue(problem_is_feasible(self.simplex_problem(0.3)))
        self.assertFalse(problem_is_feasible(self.simplex_problem(0.2)))

    def test_floor_budget(self):
        """>= 预算超过每个用户最大 r 之和 1.7 时不可行"""
        self.assertTrue(problem_is_feasible(self.simplex_problem(1.7, GE)))
        self.assertFalse(problem_is_feasible(self.simplex_problem(1.8, GE)))

    def test_user_subset_and_cap(self):
        """子集预算只约束成员用户，成员上限合计为 2"""
        r = np.ones((3, 2))
        budget = GlobalBudget(r, GE, 2.0, "floor", users=(0, 1))
        cap = tuple(LocalConstraintSet(u, (LocalConstraint(SUM_CAP, bound=1.0),)) for u in range(3))
        problem = MooProblem(np.zeros((3, 2)), r, np.zeros((3, 2)), 1.0, (budget,), cap)
        self.assertTrue(problem_is_feasible(problem))
        tight = MooProblem(np.zeros((3, 2)), r, np.zeros((3, 2)), 1.0,
                           (GlobalBudget(r, GE, 2.5, "floor", users=(0, 1)),), cap)
        self.assertFalse(problem_is_feasible(tight))


if __name__ == '__main__':
    unittest.main()
