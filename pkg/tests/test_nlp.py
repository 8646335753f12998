"""Augmented-Lagrangian NLP solver on problems with known solutions."""

import numpy as np
import pytest

from cabletow.nlp import (
    NlpProblem,
    SolverOptions,
    finite_diff_check,
    solve,
)


def clipped_quadratic():
    # min (z-3)^2  s.t.  z <= 2  -> z* = 2, multiplier 2
    return NlpProblem(
        n=1,
        objective=lambda z: float((z[0] - 3.0) ** 2),
        gradient=lambda z: np.array([2.0 * (z[0] - 3.0)]),
        x0=np.array([0.0]),
        n_ineq=1,
        ineq_fn=lambda z: np.array([z[0] - 2.0]),
        ineq_jac=lambda z: np.array([[1.0]]),
    )


def equality_qp():
    # min 0.5 z.z  s.t.  z1 + z2 = 1  -> (0.5, 0.5), multiplier -0.5
    return NlpProblem(
        n=2,
        objective=lambda z: 0.5 * float(z @ z),
        gradient=lambda z: z.copy(),
        x0=np.array([3.0, -1.0]),
        n_eq=1,
        eq_fn=lambda z: np.array([z[0] + z[1] - 1.0]),
        eq_jac=lambda z: np.array([[1.0, 1.0]]),
    )


def rosenbrock():
    def f(z):
        return float((1 - z[0]) ** 2 + 100.0 * (z[1] - z[0] ** 2) ** 2)

    def g(z):
        return np.array([
            -2.0 * (1 - z[0]) - 400.0 * z[0] * (z[1] - z[0] ** 2),
            200.0 * (z[1] - z[0] ** 2),
        ])

    return NlpProblem(n=2, objective=f, gradient=g, x0=np.array([-1.2, 1.0]))


def test_clipped_quadratic():
    sol = solve(clipped_quadratic())
    assert sol.converged
    assert sol.z[0] == pytest.approx(2.0, abs=1e-6)
    assert sol.mu_ineq[0] == pytest.approx(2.0, abs=1e-4)


def test_bound_only_quadratic():
    # same problem expressed through a variable bound
    prob = NlpProblem(
        n=1,
        objective=lambda z: float((z[0] - 3.0) ** 2),
        gradient=lambda z: np.array([2.0 * (z[0] - 3.0)]),
        x0=np.array([0.0]),
        upper=np.array([2.0]),
    )
    sol = solve(prob)
    assert sol.converged
    assert sol.z[0] == pytest.approx(2.0, abs=1e-9)


def test_equality_qp_with_multiplier():
    sol = solve(equality_qp())
    assert sol.converged
    assert np.allclose(sol.z, [0.5, 0.5], atol=1e-6)
    assert sol.mu_eq[0] == pytest.approx(-0.5, abs=1e-4)
    assert sol.eq_violation <= 1e-6


def test_rosenbrock_unconstrained():
    sol = solve(rosenbrock(), SolverOptions(tol_kkt=1e-8))
    assert sol.converged
    assert np.allclose(sol.z, [1.0, 1.0], atol=1e-5)
    assert sol.kkt_residual <= 1e-8


def test_initial_guess_projected_into_bounds():
    prob = NlpProblem(
        n=2,
        objective=lambda z: float(z @ z),
        gradient=lambda z: 2.0 * z,
        x0=np.array([10.0, -10.0]),
        lower=np.array([1.0, -3.0]),
        upper=np.array([4.0, -1.0]),
    )
    sol = solve(prob)
    assert sol.converged
    assert np.allclose(sol.z, [1.0, -1.0], atol=1e-8)


def test_nonfinite_initial_point_fails_fast():
    prob = NlpProblem(
        n=1,
        objective=lambda z: float("nan"),
        gradient=lambda z: np.array([0.0]),
        x0=np.array([0.0]),
    )
    sol = solve(prob)
    assert sol.status == "failed"
    assert sol.iterations == 0


def test_dimension_mismatch_raises():
    prob = NlpProblem(
        n=1,
        objective=lambda z: float(z[0] ** 2),
        gradient=lambda z: 2.0 * z,
        x0=np.array([1.0]),
        n_eq=2,
        eq_fn=lambda z: np.array([z[0]]),  # declares 2, returns 1
        eq_jac=lambda z: np.array([[1.0]]),
    )
    with pytest.raises(ValueError):
        solve(prob)


def test_problem_validation():
    with pytest.raises(ValueError):
        NlpProblem(n=2, objective=lambda z: 0.0, x0=np.zeros(3))
    with pytest.raises(ValueError):
        NlpProblem(n=1, objective=lambda z: 0.0, x0=np.zeros(1),
                   lower=np.array([2.0]), upper=np.array([1.0]))
    with pytest.raises(ValueError):
        NlpProblem(n=1, objective=lambda z: 0.0, x0=np.zeros(1),
                   n_eq=1, eq_fn=lambda z: np.zeros(1))  # no jacobian


def test_inequality_complementary_slackness():
    # two inequalities, one active at the solution
    prob = NlpProblem(
        n=2,
        objective=lambda z: float((z[0] - 2.0) ** 2 + (z[1] + 1.0) ** 2),
        gradient=lambda z: np.array([2 * (z[0] - 2.0), 2 * (z[1] + 1.0)]),
        x0=np.zeros(2),
        n_ineq=2,
        ineq_fn=lambda z: np.array([z[0] - 1.0, z[1] - 5.0]),
        ineq_jac=lambda z: np.array([[1.0, 0.0], [0.0, 1.0]]),
    )
    sol = solve(prob)
    assert sol.converged
    assert np.allclose(sol.z, [1.0, -1.0], atol=1e-6)
    ci = prob.ineq_fn(sol.z)
    assert np.all(np.abs(sol.mu_ineq * ci) <= 1e-5)
    assert sol.mu_ineq[1] == pytest.approx(0.0, abs=1e-8)


def test_circle_constrained_linear_objective():
    # min -z1 - z2  s.t.  z1^2 + z2^2 <= 2  -> (1, 1)
    prob = NlpProblem(
        n=2,
        objective=lambda z: float(-z[0] - z[1]),
        gradient=lambda z: np.array([-1.0, -1.0]),
        x0=np.zeros(2),
        n_ineq=1,
        ineq_fn=lambda z: np.array([z @ z - 2.0]),
        ineq_jac=lambda z: 2.0 * z[None, :],
    )
    sol = solve(prob)
    assert sol.converged
    assert np.allclose(sol.z, [1.0, 1.0], atol=1e-5)


def test_vjp_route_matches_dense():
    A = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, -1.0]])

    def make(use_vjp):
        kw = dict(
            n=3,
            objective=lambda z: 0.5 * float(z @ z),
            gradient=lambda z: z.copy(),
            x0=np.array([1.0, 1.0, 1.0]),
            n_eq=2,
            eq_fn=lambda z: A @ z - np.array([1.0, 0.5]),
        )
        if use_vjp:
            kw["eq_vjp"] = lambda z, v: A.T @ v
        else:
            kw["eq_jac"] = lambda z: A
        return NlpProblem(**kw)

    s1, s2 = solve(make(False)), solve(make(True))
    assert s1.converged and s2.converged
    assert np.allclose(s1.z, s2.z, atol=1e-10)


def test_deterministic_iterate_sequence():
    def run():
        return solve(equality_qp())

    a, b = run(), run()
    assert a.z.tobytes() == b.z.tobytes()
    assert a.objective == b.objective
    assert len(a.outer_trace) == len(b.outer_trace)
    for (za, fa, va), (zb, fb, vb) in zip(a.outer_trace, b.outer_trace):
        assert za.tobytes() == zb.tobytes()
        assert fa == fb and va == vb


def test_iteration_cap_reported():
    opts = SolverOptions(max_iter=3, inner_max_iter=2)
    sol = solve(rosenbrock(), opts)
    assert sol.status == "max_iterations"
    assert sol.iterations <= 4


def test_iteration_log_written(tmp_path):
    path = tmp_path / "iters.csv"
    sol = solve(equality_qp(), SolverOptions(log_path=str(path)))
    assert sol.converged
    lines = path.read_text().strip().splitlines()
    assert lines[0].startswith("iteration,objective,violation,step_size")
    assert len(lines) == sol.outer_iterations + 1


def test_finite_diff_check_quadratic():
    prob = equality_qp()
    err = finite_diff_check(prob, np.array([0.3, -0.7]), h=1e-5)
    assert err <= 1e-7


def test_finite_diff_check_flags_wrong_gradient():
    prob = NlpProblem(
        n=2,
        objective=lambda z: float(z @ z),
        gradient=lambda z: 2.0 * z + 0.05,  # deliberately off
        x0=np.zeros(2),
    )
    err = finite_diff_check(prob, np.array([0.2, 0.4]))
    assert err >= 1e-2


def test_finite_diff_check_vjp_route():
    A = np.array([[1.0, -2.0], [3.0, 0.5], [0.0, 1.0]])
    prob = NlpProblem(
        n=2,
        objective=lambda z: float(z @ z),
        gradient=lambda z: 2.0 * z,
        x0=np.zeros(2),
        n_ineq=3,
        ineq_fn=lambda z: A @ z - 1.0,
        ineq_vjp=lambda z, v: A.T @ v,
    )
    assert finite_diff_check(prob, np.array([0.1, 0.2])) <= 1e-7
