import numpy as np
import pytest

from ttdioc.duals import Dual
from ttdioc.dynamics import (
    DivergenceError,
    PhysicalParams,
    SystemModel,
    continuous_deriv,
    continuous_matrices,
    discrete_linearization,
    rollout,
    step,
)


@pytest.fixture(scope="module")
def spring1():
    return SystemModel("spring1", PhysicalParams(), ts=0.1)


@pytest.fixture(scope="module")
def spring3():
    return SystemModel("spring3", PhysicalParams(), ts=0.1)


@pytest.fixture(scope="module")
def pendulum2():
    return SystemModel("pendulum2", PhysicalParams(), ts=0.1)


def test_param_validation():
    with pytest.raises(ValueError):
        PhysicalParams(m1=-1.0)
    with pytest.raises(ValueError):
        PhysicalParams(a=2.0, l=1.0)
    with pytest.raises(ValueError):
        SystemModel("cartpole")


def test_spring3_equilibrium(spring3):
    assert np.array_equal(
        continuous_deriv(spring3, np.zeros(6), np.zeros(3)), np.zeros(6)
    )


def test_pendulum_upright_torque_response(pendulum2):
    # at the upright equilibrium with zero rates the link force vanishes, so a
    # torque on joint 1 only accelerates joint 1 by tau / (m l^2)
    p = pendulum2.params
    tau = np.array([0.7, 0.0])
    xdot = continuous_deriv(pendulum2, np.zeros(4), tau)
    assert xdot[1] == pytest.approx(0.7 / (p.m * p.l**2))
    assert xdot[3] == 0.0


def test_pendulum_symmetric_motion_decouples(pendulum2):
    c = 0.21
    x = np.array([c, c, c, c])[np.array([0, 2, 1, 3])]  # phi1=phi2=c, rates c
    x = np.array([c, c, c, c])
    xdot = continuous_deriv(pendulum2, x, np.zeros(2))
    # identical angles and rates make the link force zero: both joints see
    # only gravity, so their accelerations match
    assert xdot[1] == pytest.approx(xdot[3], abs=1e-15)
    p = pendulum2.params
    assert xdot[1] == pytest.approx(p.g / p.l * np.sin(c))


def test_step_fixed_point(spring3):
    assert np.array_equal(step(spring3, np.zeros(6), np.zeros(3)), np.zeros(6))


def test_step_matches_dense_reference(spring1):
    x = np.array([1.0, 0.0])
    u = np.zeros(1)
    coarse = step(spring1, x, u)
    fine_model = SystemModel("spring1", spring1.params, ts=spring1.ts / 1000.0)
    ref = x
    for _ in range(1000):
        ref = step(fine_model, ref, u)
    assert np.max(np.abs(coarse - ref)) <= 1e-7


def test_spring_rollout_superposition(spring3):
    rng = np.random.default_rng(3)
    x1, x2 = rng.normal(size=(2, 6))
    u1, u2 = rng.normal(size=(2, 8, 3))
    a = 0.37
    lhs = rollout(spring3, a * x1 + x2, a * u1 + u2)
    rhs = a * rollout(spring3, x1, u1) + rollout(spring3, x2, u2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_rollout_zero_horizon(spring3):
    x0 = np.ones(6)
    out = rollout(spring3, x0, np.zeros((0, 3)))
    assert out.shape == (1, 6)
    assert np.array_equal(out[0], x0)


def test_rollout_unrolls_step(pendulum2):
    rng = np.random.default_rng(5)
    x0 = 0.1 * rng.normal(size=4)
    U = 0.2 * rng.normal(size=(6, 2))
    X = rollout(pendulum2, x0, U)
    for i in range(6):
        assert np.allclose(X[i + 1], step(pendulum2, X[i], U[i]), atol=1e-14)


def test_rk4_observed_order(spring3, pendulum2):
    rng = np.random.default_rng(7)
    for model, scale in ((spring3, 1.0), (pendulum2, 0.2)):
        for _ in range(3):
            x = scale * rng.normal(size=model.n)
            u = scale * rng.normal(size=model.m)
            errs = []
            for ts in (0.1, 0.05, 0.025):
                m1 = SystemModel(model.kind, model.params, ts=ts)
                m2 = SystemModel(model.kind, model.params, ts=ts / 2.0)
                one = step(m1, x, u)
                two = step(m2, step(m2, x, u), u)
                errs.append(np.linalg.norm(one - two))
            orders = [np.log2(a / b) for a, b in zip(errs, errs[1:])]
            assert min(orders) >= 4.5


def test_energy_conserved_without_damping():
    # margin requires a small step: RK4 dissipates ~(w Ts)^6 per step
    params = PhysicalParams(d1=1e-12, d2=1e-12, d3=1e-12)
    for kind in ("spring1", "spring3"):
        model = SystemModel(kind, params, ts=0.02)
        Ac, _ = continuous_matrices(model)
        pos = np.arange(0, model.n, 2)
        vel = pos + 1
        K = -Ac[np.ix_(vel, pos)]

        def energy(x):
            return 0.5 * float(x[vel] @ x[vel]) + 0.5 * float(x[pos] @ (K @ x[pos]))

        rng = np.random.default_rng(11)
        x = rng.normal(size=model.n)
        e0 = energy(x)
        u = np.zeros(model.m)
        for _ in range(100):
            x = step(model, x, u)
        assert abs(energy(x) - e0) <= 1e-6


def test_divergence_detected(pendulum2):
    x = np.array([3.0, 1e308, 0.0, 0.0])
    with pytest.raises(DivergenceError):
        step(pendulum2, x, np.array([1e308, 0.0]))


def test_step_is_dual_differentiable(spring1):
    z = Dual.seed(np.array([0.4, -0.2, 0.3]))
    out = step(spring1, z[:2], z[2:])
    h = 1e-6
    for j in range(3):
        zp = np.array([0.4, -0.2, 0.3])
        zm = zp.copy()
        zp[j] += h
        zm[j] -= h
        fd = (step(spring1, zp[:2], zp[2:]) - step(spring1, zm[:2], zm[2:])) / (2 * h)
        assert np.allclose(out.dot[:, j], fd, atol=1e-8)


def test_discrete_linearization_exact_for_springs(spring3):
    A, B = discrete_linearization(spring3)
    rng = np.random.default_rng(13)
    x = rng.normal(size=6)
    u = rng.normal(size=3)
    assert np.allclose(step(spring3, x, u), A @ x + B @ u, atol=1e-12)
