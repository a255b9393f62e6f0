"""
投放计划恢复模块测试

覆盖 SumCap 的断点扫描与逐对枚举、平移截断投影、多面体投影及逐用户分派。
"""

import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from model import (GE, GENERAL_LINEAR, LE, SUM_CAP, SUM_FLOOR, GlobalBudget, LocalConstraint,
                   LocalConstraintSet, MooProblem)
from oracle import project_capped_dense, project_dense
from recovery import (InfeasibleLocalSet, NoValidPattern, RecoveryException, UserScores,
                      enumerate_patterns, plans_to_matrix, project_capped_box, readings_disagree,
                      recover_all, recover_capped, recover_general, recover_user)


def scores(c, gamma=1.0, user=0):
    return UserScores(user, np.asarray(c, dtype=float), gamma)


class TestRecoverCapped(unittest.TestCase):
    """测试 SumCap 下的排序-阈值恢复"""

    def test_binding_cap(self):
        """c = (2, 1, 0.2), K = 1.5"""
        plan = recover_capped(scores([2.0, 1.0, 0.2]), 1.5)
        assert_allclose(plan.x, [1.0, 0.5, 0.0], atol=1e-12)
        self.assertAlmostEqual(plan.nu, 0.5, places=12)
        self.assertEqual(plan.active_pattern, (1, 2))

    def test_slack_cap(self):
        """上限不紧时 ν = 0"""
        plan = recover_capped(scores([0.3, 0.2]), 2.0)
        assert_allclose(plan.x, [0.3, 0.2])
        self.assertEqual(plan.nu, 0.0)

    def test_cap_met_by_saturated_box(self):
        """c = (5,5,5), K = 3 恰好打满"""
        plan = recover_capped(scores([5.0, 5.0, 5.0]), 3.0)
        assert_allclose(plan.x, [1.0, 1.0, 1.0])
        self.assertEqual(plan.nu, 0.0)

    def test_tied_boundary(self):
        """c = (5,5,3), K = 2 的边界情形"""
        plan = recover_capped(scores([5.0, 5.0, 3.0]), 2.0)
        assert_allclose(plan.x, [1.0, 1.0, 0.0], atol=1e-12)
        self.assertAlmostEqual(plan.nu, 3.0, places=10)
        self.assertEqual(plan.active_pattern, (2, 3))

    def test_nonpositive_cap(self):
        with self.assertRaises(RecoveryException):
            recover_capped(scores([1.0]), 0.0)

    def test_matches_oracle_projection(self):
        """1000 组随机 (c, γ, K) 与参考投影一致"""
        rng = np.random.default_rng(0)
        for trial in range(1000):
            m = int(rng.integers(1, 21))
            gamma = float(rng.uniform(0.2, 3.0))
            c = rng.normal(0.5, 1.5, size=m) * gamma
            cap = float(rng.uniform(0.2, m))
            plan = recover_capped(scores(c, gamma), cap)
            with self.subTest(trial=trial):
                assert_allclose(plan.x, project_capped_box(c / gamma, cap), atol=1e-9)
                if m <= 12:
                    assert_allclose(plan.x, project_capped_dense(c / gamma, cap), atol=1e-6)

    def test_scan_equals_literal_enumeration(self):
        """1000 组随机实例上断点扫描与逐对枚举逐元素一致"""
        rng = np.random.default_rng(1)
        for trial in range(1000):
            m = int(rng.integers(1, 13))
            gamma = float(rng.uniform(0.2, 3.0))
            c = rng.normal(0.5, 1.5, size=m) * gamma
            cap = float(rng.uniform(0.2, m))
            with self.subTest(trial=trial):
                fast = recover_capped(scores(c, gamma), cap)
                literal = enumerate_patterns(scores(c, gamma), cap)
                assert_allclose(fast.x, literal.x, atol=1e-6)

    def test_structure_and_closed_form(self):
        """保序、1/分数/0 结构，以及紧约束时 ν 的闭式公式"""
        rng = np.random.default_rng(2)
        for trial in range(200):
            m = int(rng.integers(2, 15))
            gamma = float(rng.uniform(0.2, 3.0))
            c = rng.normal(0.5, 1.5, size=m) * gamma
            cap = float(rng.uniform(0.2, m))
            plan = recover_capped(scores(c, gamma), cap)
            order = np.argsort(-c, kind="stable")
            xs = plan.x[order]
            with self.subTest(trial=trial):
                self.assertTrue(np.all(np.diff(xs) <= 1e-12))
                t1, t2 = plan.active_pattern
                assert_allclose(xs[:t1], 1.0, atol=1e-9)
                assert_allclose(xs[max(t2, t1):], 0.0, atol=1e-9)
                if plan.nu > 0 and t2 > t1:
                    cs = c[order]
                    formula = (gamma * (t1 - cap) + cs[t1:t2].sum()) / (t2 - t1)
                    self.assertAlmostEqual(plan.nu, formula, delta=1e-9)
                    self.assertAlmostEqual(plan.x.sum(), cap, delta=1e-9)


class TestEnumeratePatterns(unittest.TestCase):
    """测试窗口条件的两种读法"""

    def test_non_strict_reading(self):
        plan = enumerate_patterns(scores([5.0, 5.0, 3.0]), 2.0)
        assert_allclose(plan.x, [1.0, 1.0, 0.0], atol=1e-12)
        self.assertGreaterEqual(plan.nu, 3.0 - 1e-12)
        self.assertLessEqual(plan.nu, 4.0 + 1e-12)

    def test_strict_reading_rejects_boundary(self):
        with self.assertRaises(NoValidPattern):
            enumerate_patterns(scores([5.0, 5.0, 3.0]), 2.0, strict=True)
        self.assertTrue(readings_disagree(scores([5.0, 5.0, 3.0]), 2.0))

    def test_readings_agree_in_general_position(self):
        self.assertFalse(readings_disagree(scores([2.0, 1.0, 0.2]), 1.5))


class TestProjections(unittest.TestCase):
    """测试投影"""

    def test_capped_box_idempotent(self):
        v = np.array([0.2, 0.3, 0.1])
        assert_allclose(project_capped_box(v, 1.0), v)

    def test_capped_box_symmetric(self):
        assert_allclose(project_capped_box(np.array([2.0, 2.0]), 1.0), [0.5, 0.5])

    def test_capped_box_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.uniform(-1.0, 2.0, size=6)
            cap = float(rng.uniform(0.5, 4.0))
            assert_allclose(project_capped_box(v, cap), project_capped_dense(v, cap), atol=1e-8)

    def test_box_only(self):
        """只有盒约束且目标在内部时原样返回"""
        plan = recover_general(scores([0.2, 0.4], gamma=2.0), None)
        assert_allclose(plan.x, [0.1, 0.2])
        self.assertEqual(plan.method, "box")

    def test_general_matches_capped(self):
        """SumCap 集合上与 recover_capped 一致"""
        local = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=1.5),))
        plan = recover_general(scores([2.0, 1.0, 0.2]), local)
        assert_allclose(plan.x, recover_capped(scores([2.0, 1.0, 0.2]), 1.5).x, atol=1e-6)

    def test_general_matches_capped_random(self):
        """1000 组随机 (c, γ, K)：一般投影与排序-阈值恢复一致"""
        rng = np.random.default_rng(5)
        for trial in range(1000):
            m = int(rng.integers(1, 21))
            gamma = float(rng.uniform(0.2, 3.0))
            c = rng.normal(0.5, 1.5, size=m) * gamma
            cap = float(rng.uniform(0.2, m))
            local = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=cap),))
            with self.subTest(trial=trial):
                assert_allclose(recover_general(scores(c, gamma), local).x,
                                recover_capped(scores(c, gamma), cap).x, atol=1e-6)

    def test_polytope_matches_capped_random(self):
        """
        上限写成一般线性约束 1ᵀx <= K：单行走半空间投影，
        加一行与盒约束重合的 x₁ <= 1 后走多面体投影，两者都与排序-阈值恢复一致
        """
        rng = np.random.default_rng(6)
        for trial in range(200):
            m = int(rng.integers(2, 13))
            gamma = float(rng.uniform(0.2, 3.0))
            c = rng.normal(0.5, 1.5, size=m) * gamma
            cap = float(rng.uniform(0.2, m))
            expected = recover_capped(scores(c, gamma), cap).x
            single = np.ones((1, m))
            stacked = np.vstack([single, np.eye(m)[:1]])
            for A, b, method in ((single, [cap], "shifted-clip"),
                                 (stacked, [cap, 1.0], "polytope")):
                local = LocalConstraintSet(0, (LocalConstraint(GENERAL_LINEAR, A=A, b=b),))
                with self.subTest(trial=trial, method=method):
                    plan = recover_general(scores(c, gamma), local)
                    self.assertEqual(plan.method, method)
                    assert_allclose(plan.x, expected, atol=1e-6)

    def test_single_halfspace(self):
        """{x₁ >= 0.8}，目标 (0.5, 0.5)"""
        floor = LocalConstraintSet(0, (LocalConstraint(SUM_FLOOR, items=(0,), bound=0.8),))
        assert_allclose(recover_general(scores([0.5, 0.5]), floor).x, [0.8, 0.5], atol=1e-12)
        linear = LocalConstraintSet(0, (LocalConstraint(GENERAL_LINEAR, A=[[-1.0, 0.0]],
                                                        b=[-0.8]),))
        assert_allclose(recover_general(scores([0.5, 0.5]), linear).x, [0.8, 0.5], atol=1e-12)

    def test_polytope_matches_oracle(self):
        """多行一般线性约束的投影与参考投影一致"""
        rng = np.random.default_rng(4)
        for trial in range(10):
            m = 4
            A = rng.normal(size=(3, m))
            x0 = rng.uniform(0.2, 0.8, size=m)
            b = A @ x0 + 0.05
            local = LocalConstraintSet(0, (LocalConstraint(GENERAL_LINEAR, A=A, b=b),
                                           LocalConstraint(SUM_FLOOR, bound=0.5)))
            v = rng.uniform(-1.0, 2.0, size=m)
            plan = recover_general(scores(v), local)
            with self.subTest(trial=trial):
                self.assertTrue(plan.feasible)
                assert_allclose(plan.x, project_dense(v, local), atol=1e-5)

    def test_infeasible_floor(self):
        local = LocalConstraintSet(0, (LocalConstraint(SUM_FLOOR, bound=3.0),))
        with self.assertRaises(InfeasibleLocalSet):
            recover_general(scores([0.5, 0.5]), local)


class TestRecoverUser(unittest.TestCase):
    """测试逐用户恢复"""

    def setUp(self):
        p = np.array([[0.9, 0.6, 0.3], [0.2, 0.8, 0.5]])
        r = np.array([[0.5, 0.1, 0.2], [0.3, 0.3, 0.3]])
        locals_ = (LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=1.0),)),
                   LocalConstraintSet(1, (LocalConstraint(SUM_FLOOR, bound=1.0),)))
        budgets = (GlobalBudget(r, LE, 0.5), GlobalBudget(p, GE, 0.8))
        self.problem = MooProblem(p, r, np.zeros((2, 3)), 1.0, budgets, locals_)

    def test_scores_combine_directions(self):
        """<= 预算减 μw，>= 预算加 μw"""
        s = UserScores.from_problem(self.problem, 0, [0.5, 0.25])
        expected = self.problem.p[0] - 0.5 * self.problem.r[0] + 0.25 * self.problem.p[0]
        assert_allclose(s.c, expected)

    def test_dispatch(self):
        plans = recover_all(self.problem, [0.5, 0.25])
        self.assertEqual(plans[0].method, "capped")
        self.assertEqual(plans[1].method, "shifted-clip")
        general = recover_user(self.problem, 0, [0.5, 0.25], stage2="general")
        self.assertEqual(general.method, "shifted-clip")
        assert_allclose(general.x, plans[0].x, atol=1e-9)
        self.assertEqual(plans_to_matrix(plans).shape, (2, 3))

    def test_threads_preserve_order(self):
        serial = recover_all(self.problem, [0.1, 0.0])
        parallel = recover_all(self.problem, [0.1, 0.0], threads=2)
        assert_allclose(plans_to_matrix(serial), plans_to_matrix(parallel))

    def test_mu_length_checked(self):
        with self.assertRaises(RecoveryException):
            UserScores.from_problem(self.problem, 0, [0.1])


if __name__ == '__main__':
    unittest.main()
