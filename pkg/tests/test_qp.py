import numpy as np
import pytest

from kunmix.qp import QpProblem, QpSolution, kkt_residual, solve_qp

from _oracles import qp_enumeration_oracle


def random_problem(rng, n=None, with_eq=False, n_free=0):
    n = n or int(rng.integers(2, 7))
    a = rng.normal(size=(n + 2, n))
    q = a.T @ a + 0.3 * np.eye(n)
    c = rng.normal(size=n)
    idx = np.arange(n)
    rng.shuffle(idx)
    nonneg = np.sort(idx[: n - n_free]) if n_free else np.arange(n)
    a_eq = b_eq = None
    if with_eq:
        a_eq = np.ones((1, n))
        b_eq = np.array([1.0])
    return QpProblem(q, c, nonneg, a_eq, b_eq)


class TestSolveQpExamples:
    def test_separable_clamp(self):
        p = QpProblem(np.eye(2), np.array([1.0, -1.0]), [0, 1])
        sol = solve_qp(p)
        np.testing.assert_allclose(sol.z, [1.0, 0.0], atol=1e-12)
        assert sol.status == "converged"

    def test_symmetric_simplex(self):
        p = QpProblem(np.eye(2), np.zeros(2), [0, 1], np.ones((1, 2)), np.ones(1))
        sol = solve_qp(p)
        np.testing.assert_allclose(sol.z, [0.5, 0.5], atol=1e-12)

    def test_infeasible_equalities(self):
        p = QpProblem(np.eye(2), np.zeros(2), [0, 1], np.ones((1, 2)), -np.ones(1))
        assert solve_qp(p).status == "infeasible"

    def test_inconsistent_equalities(self):
        a_eq = np.array([[1.0, 1.0], [1.0, 1.0]])
        b_eq = np.array([1.0, 2.0])
        p = QpProblem(np.eye(2), np.zeros(2), [], a_eq, b_eq)
        assert solve_qp(p).status == "infeasible"

    def test_indefinite_rejected(self):
        q = np.diag([1.0, -1.0])
        with pytest.raises(ValueError, match="semidefinite"):
            solve_qp(QpProblem(q, np.zeros(2), [0, 1]))

    def test_fully_unconstrained_exact_solve(self):
        rng = np.random.default_rng(0)
        p = random_problem(rng, n=5, n_free=5)
        sol = solve_qp(p)
        np.testing.assert_allclose(sol.z, np.linalg.solve(p.q, p.c), atol=1e-10)


class TestEnumerationOracle:
    @pytest.mark.parametrize("kind", ["bounds", "free", "equality"])
    def test_matches_brute_force(self, kind):
        rng = np.random.default_rng({"bounds": 10, "free": 11, "equality": 12}[kind])
        for _ in range(60):
            if kind == "bounds":
                p = random_problem(rng)
            elif kind == "free":
                p = random_problem(rng, n_free=int(rng.integers(1, 3)))
            else:
                p = random_problem(rng, with_eq=True)
            sol = solve_qp(p, tol=1e-9, max_iter=200)
            _, obj_ref = qp_enumeration_oracle(p.q, p.c, p.nonneg_idx, p.a_eq, p.b_eq)
            assert sol.status == "converged"
            assert sol.objective == pytest.approx(obj_ref, abs=1e-8)


class TestKktResidual:
    def test_solution_residual_below_tol(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = random_problem(rng, with_eq=bool(rng.integers(2)))
            sol = solve_qp(p, tol=1e-9)
            assert sol.kkt_residual <= 1e-9
            assert kkt_residual(p, sol.z) == sol.kkt_residual

    def test_hand_computed_value(self):
        # z = 0 for min 0.5 z^2 - z: gradient -1, clamped multiplier 0
        p = QpProblem(np.eye(1), np.array([1.0]), [0])
        assert kkt_residual(p, np.zeros(1)) == pytest.approx(1.0)

    def test_infeasible_point(self):
        p = QpProblem(np.eye(2), np.zeros(2), [0, 1])
        assert kkt_residual(p, np.array([-0.1, 0.0])) >= 0.1


class TestSolverProperties:
    def test_objective_trace_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            p = random_problem(rng, with_eq=bool(rng.integers(2)))
            sol = solve_qp(p)
            trace = sol.objective_trace
            if trace.size > 1:
                slack = 1e-12 * np.maximum(1.0, np.abs(trace[:-1]))
                assert np.all(np.diff(trace) <= slack)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            n = 5
            p = random_problem(rng, n=n, with_eq=True)
            perm = rng.permutation(n)
            inv = np.argsort(perm)
            p_perm = QpProblem(
                p.q[np.ix_(perm, perm)],
                p.c[perm],
                np.sort(inv[p.nonneg_idx]),
                p.a_eq[:, perm],
                p.b_eq,
            )
            z = solve_qp(p).z
            z_perm = solve_qp(p_perm).z
            np.testing.assert_allclose(z_perm, z[perm], atol=1e-8)

    def test_no_active_constraints_matches_linear_solve(self):
        rng = np.random.default_rng(4)
        q = np.eye(3)
        c = np.array([1.0, 2.0, 3.0])  # unconstrained optimum is positive
        p = QpProblem(q, c, [0, 1, 2])
        sol = solve_qp(p)
        np.testing.assert_allclose(sol.z, c, atol=1e-10)

    def test_near_psd_accepted(self):
        # tiny negative eigenvalue within the tolerance is shifted, not rejected
        q = np.diag([1.0, 1e-12])
        q[1, 1] = -1e-10
        p = QpProblem(q, np.array([1.0, 0.0]), [0, 1])
        sol = solve_qp(p)
        assert sol.status == "converged"

    def test_schur_matches_joint_path(self):
        # same problem posed with free variables first vs nonneg on all plus
        # equalities disabled: elimination must not change the solution
        rng = np.random.default_rng(5)
        for _ in range(10):
            p = random_problem(rng, n=6, n_free=3)
            sol = solve_qp(p)
            _, obj_ref = qp_enumeration_oracle(p.q, p.c, p.nonneg_idx)
            assert sol.objective == pytest.approx(obj_ref, abs=1e-8)


class TestQpProblemValidation:
    def test_asymmetric_rejected(self):
        q = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError, match="symmetric"):
            QpProblem(q, np.zeros(2), [0])

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            QpProblem(np.eye(2), np.zeros(3), [0])
        with pytest.raises(ValueError):
            QpProblem(np.eye(2), np.zeros(2), [5])
        with pytest.raises(ValueError):
            QpProblem(np.eye(2), np.zeros(2), [0], np.ones((1, 3)), np.ones(1))
        with pytest.raises(ValueError):
            QpProblem(np.eye(2), np.zeros(2), [0], np.ones((1, 2)), None)

    def test_solution_fields(self):
        sol = solve_qp(QpProblem(np.eye(1), np.array([-1.0]), [0]))
        assert isinstance(sol, QpSolution)
        assert sol.iterations >= 0
        np.testing.assert_array_equal(sol.z, [0.0])
        assert sol.objective == pytest.approx(0.0)
