"""Tests for the mode-fixed collocation transcription."""

from __future__ import annotations

import numpy as np
import pytest

from cabletow.geometry import box_polygon
from cabletow.model import (
    ModeVector,
    PhysicalParams,
    SystemState,
    robot_position_jacobians,
    robot_positions,
    state_dim,
)
from cabletow.nlp import SolverOptions, finite_diff_check, solve
from cabletow.transcription import (
    PlannerConfig,
    Transcription,
    ego_descriptors,
    transcription_dimensions,
)


def make_transcription(n=2, N=4, n_obs=1, mode=None, l_init=0.9,
                       goal=(1.5, 0.4, 0.3), **cfg_kw):
    params = PhysicalParams.default(n)
    state = SystemState.rest(n, load_pose=(0.0, 0.0, 0.1),
                             cable_angles=tuple(0.2 * (-1) ** i
                                                for i in range(n)),
                             cable_lengths=(l_init,) * n)
    obstacles = [box_polygon((3.0 + o, 0.6), (0.5, 0.5)) for o in range(n_obs)]
    if mode is None:
        mode = ModeVector.all_taut(n)
    cfg = PlannerConfig(horizon=N, **cfg_kw)
    return Transcription(state.to_vector(), np.asarray(goal, dtype=float),
                         obstacles, mode, cfg, params)


def test_config_validation():
    with pytest.raises(ValueError):
        PlannerConfig(horizon=1)
    with pytest.raises(ValueError):
        PlannerConfig(dt=0.0)
    with pytest.raises(ValueError):
        PlannerConfig(q_goal=-1.0)
    with pytest.raises(ValueError):
        PlannerConfig(penetration_penalty=0.0)
    with pytest.raises(ValueError):
        PlannerConfig(sigma=0.0)
    tweaked = PlannerConfig().evolve(dt=0.2)
    assert tweaked.dt == 0.2 and tweaked.horizon == 20


def test_ego_descriptors_by_team_size():
    assert ego_descriptors(1) == [("point", 0), ("load",)]
    assert ego_descriptors(2) == [("segment", 0, 1), ("load",)]
    assert ego_descriptors(3) == [("triangle", 0, 1, 2), ("load",)]
    assert ego_descriptors(4) == [("triangle", 0, 1, 2), ("triangle", 0, 2, 3),
                                  ("load",)]


def test_dimension_formula_matches_construction():
    for n, N, n_obs in [(1, 3, 1), (2, 4, 2), (3, 5, 1), (4, 3, 2)]:
        t = make_transcription(n=n, N=N, n_obs=n_obs)
        dim, n_eq, n_ineq = transcription_dimensions(n, N, [4] * n_obs)
        assert t.dim == dim
        assert t.n_eq == n_eq
        assert t.n_ineq == n_ineq
        z = t.initial_guess()
        assert z.shape == (dim,)
        assert t.eq_fn(z).shape == (n_eq,)
        assert t.ineq_fn(z).shape == (n_ineq,)


def test_dimension_formula_three_robot_case():
    # n = 3, N = 20, two quadrilateral obstacles, hand-expanded counts
    dim, n_eq, n_ineq = transcription_dimensions(3, 20, [4, 4])
    nx = state_dim(3)
    duals_per_knot = (4 + 3 + 1) * 2 + (4 + 4 + 1) * 2
    assert dim == 20 * (nx + 3 * 3) + 20 * duals_per_knot == 1220
    assert n_eq == 19 * nx + 2 * 20 * 2 * 2 == 502
    assert n_ineq == 2 * 20 * 2 * 2 + 2 * 20 * 3 + 20 * 1 == 300


def test_dual_blocks_tile_the_tail_exactly():
    t = make_transcription(n=3, N=3, n_obs=2)
    seen = []
    for k in range(t.N):
        for e in range(t.E):
            for o in range(t.O):
                sl_l, sl_n, ie = t.dual_slices(k, e, o)
                assert sl_l.stop == sl_n.start and sl_n.stop == ie
                seen.extend(range(sl_l.start, ie + 1))
    assert seen == list(range(t.off_D, t.dim))


def test_obstacle_cap_and_mode_length_errors():
    with pytest.raises(ValueError):
        make_transcription(n=2, n_obs=7)
    with pytest.raises(ValueError):
        make_transcription(n=2, mode=ModeVector((1, 0, 1)))
    with pytest.raises(ValueError):
        make_transcription(n=2, goal=(1.0, 2.0))


def test_bounds_encode_the_mode():
    t = make_transcription(n=3, N=3, mode=ModeVector((1, 0, 1)))
    lo, hi = t.bounds()
    params = t.params
    for k in range(t.N):
        xoff = k * t.nx
        for i, delta in enumerate((1, 0, 1)):
            il = xoff + 4 + 2 * i
            it = t.off_T + k * t.n + i
            if delta == 1:
                assert lo[il] == hi[il] == params.cable_length
                assert lo[it] == t.cfg.sigma and hi[it] == t.cfg.tension_max
            else:
                assert lo[il] == params.cable_min_length
                assert hi[il] == params.cable_length
                assert lo[it] == hi[it] == 0.0
    assert np.all(lo[t.off_D:] == 0.0)
    assert np.all(np.isinf(hi[t.off_D:]))


def test_initial_guess_respects_bounds():
    for mode in (ModeVector((1, 1)), ModeVector((0, 0)), ModeVector((1, 0))):
        t = make_transcription(n=2, N=6, mode=mode)
        lo, hi = t.bounds()
        z = t.initial_guess()
        assert np.all(z >= lo - 1e-12)
        assert np.all(z <= hi + 1e-12)


def test_ego_halfspaces_match_materialized_polygons():
    rng = np.random.default_rng(3)
    for n in (1, 2, 3, 4):
        t = make_transcription(n=n, N=2)
        for _ in range(4):
            state = SystemState.rest(
                n, load_pose=rng.uniform(-1, 1, 3),
                cable_angles=rng.uniform(-1.2, 1.2, n),
                cable_lengths=rng.uniform(0.4, 1.0, n)).to_vector()
            P = robot_positions(state, t.params)
            JP = robot_position_jacobians(state, t.params)
            for e in range(t.E):
                G, g, _, _ = t._build_ego(e, state, P, JP)
                row_norms = np.linalg.norm(G, axis=1)
                if np.min(row_norms) < 1e-6:
                    continue
                poly = t.ego_polygon(e, state)
                for v in poly.vertex_array:
                    assert np.max((G @ v - g) / row_norms) <= 1e-8
                probes = rng.uniform(-2.5, 2.5, size=(60, 2))
                for p in probes:
                    margin = float(np.max((G @ p - g) / row_norms))
                    if abs(margin) < 1e-7:
                        continue
                    assert (margin <= 0) == poly.contains(p, tol=0.0)


def test_ego_polygons_cover_their_robots():
    rng = np.random.default_rng(11)
    for n in (1, 2, 3, 4):
        t = make_transcription(n=n, N=2)
        state = SystemState.rest(
            n, load_pose=(0.3, -0.2, 0.4),
            cable_angles=rng.uniform(-1.0, 1.0, n),
            cable_lengths=rng.uniform(0.5, 1.0, n)).to_vector()
        P = robot_positions(state, t.params)
        for e, desc in enumerate(t.egos):
            poly = t.ego_polygon(e, state)
            for i in desc[1:]:
                assert poly.contains(P[i], tol=1e-7)


def test_derivatives_match_finite_differences():
    t = make_transcription(n=2, N=4, n_obs=1)
    rng = np.random.default_rng(7)
    z = t.initial_guess() + rng.uniform(-0.04, 0.04, t.dim)
    worst = finite_diff_check(t.problem(z), z)
    assert worst <= 1e-4


def test_derivatives_match_finite_differences_with_triangles():
    t = make_transcription(n=3, N=3, n_obs=1, mode=ModeVector((1, 0, 1)))
    rng = np.random.default_rng(19)
    z = t.initial_guess() + rng.uniform(-0.03, 0.03, t.dim)
    worst = finite_diff_check(t.problem(z), z)
    assert worst <= 1e-4


def test_sparse_jacobians_match_dense():
    rng = np.random.default_rng(23)
    for n, mode in [(1, None), (2, None), (3, ModeVector((1, 0, 1))),
                    (4, ModeVector((0, 1, 1, 0)))]:
        t = make_transcription(n=n, N=4, n_obs=2, mode=mode)
        for _ in range(3):
            z = t.initial_guess() + rng.uniform(-0.05, 0.05, t.dim)
            assert np.max(np.abs(t.eq_jac_sparse(z).toarray()
                                 - t.eq_jac(z))) < 1e-12
            assert np.max(np.abs(t.ineq_jac_sparse(z).toarray()
                                 - t.ineq_jac(z))) < 1e-12


def test_stationary_all_slack_objective_is_cable_terms_only():
    l_init = 0.8
    t = make_transcription(n=2, N=5, n_obs=0, mode=ModeVector((0, 0)),
                           l_init=l_init, goal=(0.0, 0.0, 0.1))
    z = t.initial_guess()
    expected = t.cfg.l_slack_weight * t.N * t.n * (1.0 - l_init) ** 2
    assert abs(t.objective(z) - expected) < 1e-12
    assert np.max(np.abs(t.eq_fn(z))) < 1e-12
    assert np.all(t.ineq_fn(z) < 0.0)


def test_stationary_all_slack_solve_converges():
    t = make_transcription(n=2, N=5, n_obs=0, mode=ModeVector((0, 0)),
                           l_init=0.8, goal=(0.0, 0.0, 0.1))
    problem = t.problem()
    initial = t.objective(problem.x0)
    sol = solve(problem, SolverOptions(tol_kkt=1e-2, tol_feas=1e-6,
                                       max_iter=15000, inner_max_iter=500))
    assert sol.converged
    assert sol.objective <= initial + 1e-9
    X, U, T, _ = t.split(sol.z)
    assert np.max(np.abs(T)) == 0.0
    assert np.all(X[:, t.l_cols] <= t.params.cable_length + 1e-9)
    assert np.max(np.abs(t.defects(sol.z))) <= 1e-4


def test_all_taut_mode_from_slack_start_is_well_posed():
    t = make_transcription(n=2, N=4, n_obs=0, mode=ModeVector((1, 1)),
                           l_init=0.8, goal=(0.0, 0.0, 0.1))
    lo, hi = t.bounds()
    z = t.initial_guess()
    assert np.all(z >= lo - 1e-12) and np.all(z <= hi + 1e-12)
    # the guess pins lengths to l0 while x_init has 0.8, so the soft
    # initial-state cost is strictly positive but everything stays finite
    assert t.objective(z) >= t.cfg.q_init * 2 * (1.0 - 0.8) ** 2 - 1e-9
    assert np.all(np.isfinite(t.eq_fn(z)))
    assert np.all(np.isfinite(t.gradient(z)))


def test_triangle_orientation_rows_are_feasible_at_start():
    t = make_transcription(n=4, N=3, n_obs=1)
    z = t.initial_guess()
    rows = t.ineq_fn(z)[-t.N * len(t.triangles):]
    assert rows.shape == (t.N * len(t.triangles),)
    assert np.all(rows < 0.0)


def test_certificate_rows_reward_slack_variable():
    t = make_transcription(n=2, N=3, n_obs=1)
    z = t.initial_guess()
    base = t.ineq_fn(z)[:t.N * t.E * t.O].copy()
    z2 = z.copy()
    z2[t.eps_idx] += 0.5
    bumped = t.ineq_fn(z2)[:t.N * t.E * t.O]
    assert np.allclose(base - bumped, 0.5)
