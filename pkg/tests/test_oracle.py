"""
参考求解器测试

参考求解器本身也要先验证：KKT、可行性以及投影的变分不等式。
"""

import unittest
import sys
import os

import numpy as np
from numpy.testing import assert_allclose

# 添加src目录到Python路径
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from model import (GE, LE, SIMPLEX_EQUALITY, SUM_CAP, GlobalBudget, LocalConstraint,
                   LocalConstraintSet, MooProblem, assemble_dual, check_feasibility,
                   duality_constant, primal_from_dual_stationarity)
from oracle import (Infeasible, TooLarge, oracle_dual_vector, project_capped_dense,
                    project_dense, solve_primal_dense)


def feasible_problem(N=3, M=3, seed=0, gamma=1.0):
    """带单纯形等式的实例，预算取在每个用户最小与最大 r 之间"""
    rng = np.random.default_rng(seed)
    p, r, q = rng.random((N, M)), rng.random((N, M)), rng.random((N, M))
    cap = float(np.sum(r.min(axis=1) + 0.5 * (r.max(axis=1) - r.min(axis=1))))
    floor = float(0.2 * p.max(axis=1).sum())
    locals_ = tuple(LocalConstraintSet(u, (LocalConstraint(SIMPLEX_EQUALITY),)) for u in range(N))
    budgets = (GlobalBudget(r, LE, cap), GlobalBudget(p, GE, floor))
    return MooProblem(p, r, q, gamma, budgets, locals_)


class TestSolvePrimalDense(unittest.TestCase):
    """测试原问题参考解"""

    def test_feasible_sweep(self):
        """随机实例的解满足全部约束"""
        for seed in range(10):
            problem = feasible_problem(seed=seed, gamma=0.5 + seed * 0.3)
            solution = solve_primal_dense(problem)
            with self.subTest(seed=seed):
                self.assertEqual(check_feasibility(problem, solution.x, tol=1e-8), [])

    def test_kkt_through_dual_coordinates(self):
        """参考乘子映射到对偶坐标后满足驻点条件与强对偶"""
        for seed in range(5):
            problem = feasible_problem(seed=seed)
            dual = assemble_dual(problem)
            solution = solve_primal_dense(problem)
            z = oracle_dual_vector(solution, dual)
            with self.subTest(seed=seed):
                self.assertTrue(np.all(z >= 0.0))
                assert_allclose(primal_from_dual_stationarity(problem, z, dual), solution.x,
                                atol=1e-6)
                self.assertAlmostEqual(dual.objective(z),
                                       duality_constant(problem) - solution.objective, delta=1e-6)

    def test_unconstrained_interior(self):
        """约束都不紧时 x = a/γ"""
        p = np.array([[0.2, 0.4]])
        problem = MooProblem(p, np.zeros((1, 2)), np.zeros((1, 2)), 2.0)
        solution = solve_primal_dense(problem)
        assert_allclose(solution.x, [0.1, 0.2], atol=1e-10)
        self.assertEqual(solution.active_set, [])

    def test_active_labels(self):
        """紧预算出现在积极集里"""
        p = np.array([[0.9, 0.8]])
        problem = MooProblem(p, p, np.zeros((1, 2)), 1.0, (GlobalBudget(p, LE, 0.5),))
        solution = solve_primal_dense(problem)
        self.assertIn("mu[0]", solution.active_set)
        self.assertGreater(solution.duals["mu[0]"], 0.0)

    def test_infeasible(self):
        r = np.ones((1, 2))
        problem = MooProblem(r, r, np.zeros((1, 2)), 1.0, (GlobalBudget(r, LE, -1.0),))
        with self.assertRaises(Infeasible):
            solve_primal_dense(problem)

    def test_too_large(self):
        problem = feasible_problem(N=5, M=5)
        with self.assertRaises(TooLarge):
            solve_primal_dense(problem, max_size=10)


class TestProjectDense(unittest.TestCase):
    """测试参考投影"""

    def test_box_projection_is_clip(self):
        v = np.array([-0.5, 0.3, 1.7])
        assert_allclose(project_dense(v), [0.0, 0.3, 1.0], atol=1e-12)

    def test_capped_example(self):
        assert_allclose(project_capped_dense(np.array([2.0, 1.0, 0.2]), 1.5), [1.0, 0.5, 0.0],
                        atol=1e-10)

    def test_variational_inequality(self):
        """(v − x)ᵀ(y − x) <= 0 对集合内随机点成立"""
        rng = np.random.default_rng(0)
        simplex = LocalConstraintSet(0, (LocalConstraint(SIMPLEX_EQUALITY),))
        capped = LocalConstraintSet(0, (LocalConstraint(SUM_CAP, bound=1.5),))
        for local in (simplex, capped):
            v = rng.normal(0.3, 1.0, size=5)
            x = project_dense(v, local)
            for _ in range(50):
                y = rng.dirichlet(np.ones(5))
                self.assertLessEqual((v - x) @ (y - x), 1e-8)

    def test_dimension_limit(self):
        with self.assertRaises(TooLarge):
            project_dense(np.zeros(60))


if __name__ == '__main__':
    unittest.main()
