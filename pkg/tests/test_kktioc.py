import json
from dataclasses import replace

import numpy as np
import pytest

from ttdioc.costmodel import (
    ConstantTheta,
    TrigTimeModel,
    TruthProfile,
    TruthTheta,
    omega_table,
    squared_features,
)
from ttdioc.dynamics import SystemModel, rollout
from ttdioc.focp import FocpProblem, no_constraints, recover_multipliers, solve_forward
from ttdioc.kktioc import (
    IocSolution,
    MultiplierSet,
    TtdConfig,
    _wstep_data,
    _fixed_parts,
    _wstep_objective,
    build_normal_system,
    initial_frequency_tuples,
    prepare_bases,
    refine_frequencies,
    segment_basis,
    solve_inner,
    sp_ioc,
    stationarity_residual,
    ttd_ioc,
)
from ttdioc.segments import Dataset, TrajectorySegment


def small_config(**kw):
    base = dict(
        e_count=2,
        omega_start=0.5,
        omega_stop=2.5,
        omega_step=2.0,
        beta_start=0.04,
        beta_stop=0.06,
        beta_step=0.01,
        anchor_value=7.0,
    )
    base.update(kw)
    return TtdConfig(**base)


def synthetic_segment(model, seed=0, n=6, scale=0.3):
    rng = np.random.default_rng(seed)
    U = scale * rng.normal(size=(n, model.m))
    x0 = scale * rng.normal(size=model.n)
    X = rollout(model, x0, U)
    return TrajectorySegment(states=X, inputs=U, t_start=0.7, system=model.kind)


def test_residual_small_for_solved_segment(spring1_model, spring1_features):
    truth = TruthTheta("spring1", TruthProfile("trig"))
    problem = FocpProblem(
        model=spring1_model,
        features=spring1_features,
        theta=truth,
        constraints=no_constraints(),
        x0=np.array([0.8, -0.2]),
        xN=np.zeros(2),
        t0=0.0,
        horizon=25,
    )
    sol = solve_forward(problem)
    seg = TrajectorySegment(sol.states, sol.inputs, 0.0, "spring1")
    r = stationarity_residual(
        spring1_model, spring1_features, no_constraints(), seg, truth, None, sol.upsilon
    )
    assert np.linalg.norm(r) <= 1e-6


def test_zero_segment_zero_residual(spring1_model, spring1_features):
    seg = TrajectorySegment(np.zeros((11, 2)), np.zeros((10, 1)), 0.0, "spring1")
    truth = TruthTheta("spring1", TruthProfile("trig"))
    r = stationarity_residual(
        spring1_model, spring1_features, no_constraints(), seg, truth, None, np.zeros(2)
    )
    assert np.array_equal(r, np.zeros(10))


def test_residual_linear_in_model_and_multipliers(spring1_model, spring1_features):
    seg = synthetic_segment(spring1_model, seed=5, n=8)
    rng = np.random.default_rng(1)
    A = rng.normal(size=(5, 3))
    ups = rng.normal(size=2)
    alpha = 1.7
    r1 = stationarity_residual(
        spring1_model,
        spring1_features,
        no_constraints(),
        seg,
        TrigTimeModel((1.0, 2.0), A),
        None,
        ups,
    )
    r2 = stationarity_residual(
        spring1_model,
        spring1_features,
        no_constraints(),
        seg,
        TrigTimeModel((1.0, 2.0), alpha * A),
        None,
        alpha * ups,
    )
    assert np.max(np.abs(r2 - alpha * r1)) <= 1e-10


@pytest.mark.parametrize("kind", ["spring1", "pendulum2"])
def test_reconstruction_matches_ad(kind):
    model = SystemModel(kind, ts=0.1)
    feats = squared_features(model)
    segs = [synthetic_segment(model, seed=s, n=6) for s in (0, 1)]
    bases = [segment_basis(model, feats, no_constraints(), s) for s in segs]
    anchor = np.array([7.0, 0.0, 0.0])
    ns = build_normal_system(bases, (1.3,), anchor)
    rng = np.random.default_rng(2)
    z = rng.normal(size=ns.layout.size)
    A = ns.layout.coefficients(z, anchor)
    mult = ns.layout.multipliers(z, bases)
    trig = TrigTimeModel((1.3,), A)
    r_pred = ns.J @ z + ns.r0
    row = 0
    for d, b in enumerate(bases):
        r_ad = stationarity_residual(
            model, feats, no_constraints(), b.segment, trig, None, mult.ups[d]
        )
        assert np.max(np.abs(r_pred[row : row + b.n_rows] - r_ad)) <= 1e-10
        row += b.n_rows


def test_zero_segment_contributes_zero_state_feature_columns(
    spring1_model, spring1_features
):
    seg = TrajectorySegment(np.zeros((9, 2)), np.zeros((8, 1)), 0.0, "spring1")
    basis = segment_basis(spring1_model, spring1_features, no_constraints(), seg)
    ns = build_normal_system([basis], (2.0,), np.array([7.0, 0.0, 0.0]))
    lay = ns.layout
    for feature in (1,):  # state feature xdot^2 (feature 1); x^2 is anchored
        for j in range(lay.rows_per_coeff):
            col = ns.J[:, lay.coeff_index(j, feature)]
            assert np.array_equal(col, np.zeros_like(col))


def test_doubling_dataset_doubles_shared_block(spring1_model, spring1_features):
    segs = [synthetic_segment(spring1_model, seed=s, n=7) for s in (3, 4)]
    bases = [
        segment_basis(spring1_model, spring1_features, no_constraints(), s)
        for s in segs
    ]
    anchor = np.array([7.0, 0.0, 0.0])
    ns1 = build_normal_system(bases, (1.1,), anchor)
    ns2 = build_normal_system(bases + bases, (1.1,), anchor)
    na = ns1.layout.n_coeff
    assert np.allclose(ns2.Q[:na, :na], 2.0 * ns1.Q[:na, :na], atol=1e-12)
    assert np.allclose(ns2.c[:na], 2.0 * ns1.c[:na], atol=1e-12)


def test_q_positive_semidefinite(spring1_model, spring1_features, spring1_trig_ds):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    ns = build_normal_system(bases, (0.7, 2.2), np.array([7.0, 0, 0, 0, 0]))
    assert float(np.linalg.eigvalsh(ns.Q)[0]) >= -1e-9


def test_spioc_matches_least_squares_oracle(
    spring1_model, spring1_features, spring1_const_ds
):
    sol = sp_ioc(spring1_const_ds, anchor=7.0, model=spring1_model, features=spring1_features)
    # independent oracle: plain least squares on the stacked linear system
    bases = prepare_bases(spring1_const_ds, spring1_model, spring1_features)
    ns = build_normal_system(bases, (), np.array([7.0]))
    z_ls, *_ = np.linalg.lstsq(ns.J, -ns.r0, rcond=None)
    theta_ls = np.concatenate([[7.0], z_ls[: ns.layout.n_coeff]])
    assert np.max(np.abs(sol.model.coeffs[0] - theta_ls)) <= 1e-8
    # exact recovery of the generating weights
    assert np.allclose(sol.model.coeffs[0], [7.0, 5.0, 2.0], atol=1e-6)
    assert sol.residual_sq <= 1e-8


def test_spioc_rejects_bad_inputs(spring1_const_ds):
    with pytest.raises(ValueError):
        sp_ioc(spring1_const_ds, anchor=0.0)
    empty = Dataset(
        system="spring1",
        ts=0.1,
        horizon=spring1_const_ds.horizon,
        truth=spring1_const_ds.truth,
        seed=0,
        train=(),
        validation=spring1_const_ds.validation,
    )
    with pytest.raises(ValueError):
        sp_ioc(empty, anchor=7.0)


def test_huge_beta_kills_penalized_entries(
    spring1_model, spring1_features, spring1_trig_ds
):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config()
    inner = solve_inner(bases, (2.0, 3.0), 1e6, cfg)
    assert np.array_equal(inner.coeffs[1:, 1:], np.zeros((4, 2)))


def test_anchor_column_exact(spring1_model, spring1_features, spring1_trig_ds):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config()
    inner = solve_inner(bases, (2.0, 3.0), 0.04, cfg)
    assert np.array_equal(inner.coeffs[:, 0], cfg.anchor_vector())


def test_refine_noop_at_truth(spring1_model, spring1_features, spring1_trig_ds):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config(beta_start=0.0, beta_stop=0.0, beta_step=0.0)
    res = refine_frequencies(bases, (2.0, 3.0), 0.0, cfg)
    assert np.max(np.abs(np.array(res.freqs) - [2.0, 3.0])) <= 1e-6
    assert res.residual_sq <= 1e-8


def test_refine_zero_basis_count(spring1_model, spring1_features, spring1_const_ds):
    bases = prepare_bases(spring1_const_ds, spring1_model, spring1_features)
    cfg = small_config(e_count=0)
    res = refine_frequencies(bases, (), 0.0, cfg)
    assert res.freqs == ()
    assert res.rounds == 0


def test_refine_trace_monotone(spring1_model, spring1_features, spring1_trig_ds):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    res = refine_frequencies(bases, (0.5, 2.5), 0.04, small_config())
    assert all(
        later <= earlier * (1.0 + 1e-9) + 1e-15
        for earlier, later in zip(res.trace, res.trace[1:])
    )


def test_constant_model_class_nesting(
    spring1_model, spring1_features, spring1_trig_ds
):
    # a constant weight vector cannot explain time-varying demonstrations
    sp = sp_ioc(spring1_trig_ds, anchor=7.0, model=spring1_model, features=spring1_features)
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    ttd_inner = solve_inner(bases, (2.0, 3.0), 0.0, small_config())
    assert sp.residual_sq > 1e3 * max(ttd_inner.residual_sq, 1e-18)
    assert sp.residual_sq > 1e-4


def test_wstep_gradient_matches_finite_differences(
    spring1_model, spring1_features, spring1_trig_ds
):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config()
    inner = solve_inner(bases, (1.7, 2.6), 0.04, cfg)
    S_list = _wstep_data(bases, inner.coeffs)
    fixed = _fixed_parts(bases, inner.multipliers)
    obj = _wstep_objective(bases, S_list, fixed, 2)
    w0 = np.array([1.7, 2.6])
    _, g = obj(w0)
    h = 1e-6
    for e in range(2):
        wp, wm = w0.copy(), w0.copy()
        wp[e] += h
        wm[e] -= h
        fd = (obj(wp)[0] - obj(wm)[0]) / (2 * h)
        assert abs(g[e] - fd) / max(abs(fd), 1.0) <= 1e-6


def test_lasso_path_monotone_nonzeros(
    spring1_model, spring1_features, spring1_trig_ds
):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config()
    counts = []
    for beta in (0.0, 0.05, 0.5, 5.0, 1e3):
        inner = solve_inner(bases, (2.0, 3.0), beta, cfg)
        counts.append(int(np.count_nonzero(inner.coeffs[1:, 1:])))
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_grid_tuples():
    cfg = small_config(e_count=2)
    assert initial_frequency_tuples(cfg) == [(0.5, 2.5)]
    cfg1 = small_config(e_count=1)
    assert initial_frequency_tuples(cfg1) == [(0.5,), (2.5,)]
    degenerate = small_config(
        e_count=2, omega_start=0.11, omega_stop=0.11, omega_step=0.0
    )
    tuples = initial_frequency_tuples(degenerate)
    assert tuples == [(0.11, 0.12)]
    four = small_config(e_count=4)
    for tup in initial_frequency_tuples(four):
        assert len(tup) == 4
        assert all(b > a for a, b in zip(tup, tup[1:]))
    assert initial_frequency_tuples(small_config(e_count=0)) == [()]


def test_multiplier_sign_validation():
    with pytest.raises(ValueError):
        MultiplierSet(lam=[np.array([[-1.0]])], ups=[np.zeros(2)])


def test_ttd_trace_covers_beta_grid(spring1_model, spring1_features, spring1_trig_ds):
    cfg = small_config(refine_rounds=2, max_rescans=1)
    calls = []

    def fake_validator(model):
        calls.append(model)
        return float(len(calls))  # first beta wins

    sol = ttd_ioc(
        spring1_trig_ds,
        cfg,
        model=spring1_model,
        features=spring1_features,
        validator=fake_validator,
    )
    assert len(sol.trace) == 3
    assert sol.selected_beta == 0.04
    assert [b for b, _, _ in sol.trace] == [0.04, 0.05, 0.06]


def test_ttd_marks_failed_validation(spring1_model, spring1_features, spring1_trig_ds):
    cfg = small_config(beta_stop=0.05, refine_rounds=2, max_rescans=1)
    seen = []

    def flaky(model):
        seen.append(1)
        if len(seen) == 1:
            raise RuntimeError("forward solve failed")
        return 0.5

    sol = ttd_ioc(
        spring1_trig_ds,
        cfg,
        model=spring1_model,
        features=spring1_features,
        validator=flaky,
    )
    assert sol.trace[0][2] == np.inf
    assert sol.selected_beta == 0.05


def test_nonneg_guard_produces_cone_feasible_model(
    spring1_model, spring1_features, spring1_trig_ds
):
    bases = prepare_bases(spring1_trig_ds, spring1_model, spring1_features)
    cfg = small_config()
    free = solve_inner(bases, (0.4, 0.9), 0.3, replace(cfg, nonneg_theta=False))
    guarded = solve_inner(bases, (0.4, 0.9), 0.3, cfg)
    times = np.unique(np.concatenate([b.times for b in bases]))
    th_guarded = omega_table((0.4, 0.9), times) @ guarded.coeffs
    assert float(th_guarded.min()) >= -1e-6
    # constraining cannot improve the objective
    assert guarded.penalized >= free.penalized - 1e-9


def test_solution_persistence_roundtrip(tmp_path, spring1_model, spring1_features, spring1_const_ds):
    sol = sp_ioc(
        spring1_const_ds, anchor=7.0, model=spring1_model, features=spring1_features
    )
    path = tmp_path / "sol.json"
    sol.save(path)
    loaded = IocSolution.load(path)
    assert loaded.model.freqs == sol.model.freqs
    assert np.array_equal(loaded.model.coeffs, sol.model.coeffs)
    assert loaded.selected_beta == sol.selected_beta
    assert loaded.trace == [tuple(t) for t in sol.trace]
    sol.save(tmp_path / "sol2.json")
    assert (tmp_path / "sol.json").read_bytes() == (tmp_path / "sol2.json").read_bytes()
    doc = json.loads(path.read_text())
    assert doc["schema"] == "ttdioc.solution.v1"


def test_stationarity_at_truth_property(spring1_model, spring1_features):
    # small fresh datasets; the full-scale version runs in the acceptance suite
    truth = TruthTheta("spring1", TruthProfile("trig"))
    from ttdioc.focp import generate_demonstrations

    for seed in (0, 1, 2):
        rng = np.random.default_rng(seed)
        segs = generate_demonstrations(
            spring1_model,
            spring1_features,
            truth,
            rng.uniform(-1, 1, size=(2, 2)),
            n_gen=16,
            n=10,
            stride=6,
        )
        total = 0.0
        for seg in segs:
            _, resid = recover_multipliers(
                spring1_model, spring1_features, truth, seg
            )
            total += resid**2
        assert total <= 1e-10
