import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popmech import autodiff as ad
from popmech.autodiff import Tensor
from popmech.energy import AnalyticEnergy, NonFiniteError, conservative_accel
from popmech.integrator import IntegratorConfig, MechState, diagnostics, rollout, step

from oracles import harmonic_position, path_deviation


def zero_accel(X, t):
    return Tensor(np.zeros(X.shape))


def harmonic(omega):
    return lambda X, t: Tensor(-omega ** 2 * X.data) if not X.requires_grad else X * (-omega ** 2)


def test_config_validation():
    with pytest.raises(ValueError, match="scheme"):
        IntegratorConfig(scheme="rk4")
    with pytest.raises(ValueError, match="dt"):
        IntegratorConfig(dt=0.0)
    with pytest.raises(ValueError, match="substeps"):
        IntegratorConfig(substeps=0)


def test_state_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        MechState(np.zeros((2, 2)), np.zeros((3, 2)))


@pytest.mark.parametrize("scheme", ["damped-velocity-verlet", "semi-implicit-euler"])
def test_free_flight(scheme):
    s, _ = step(MechState([[0.0, 0.0]], [[1.0, 0.0]]), zero_accel, 0.0, 0.5, scheme=scheme)
    np.testing.assert_array_equal(s.X.data, [[0.5, 0.0]])
    assert s.t == 0.5


@pytest.mark.parametrize("scheme", ["damped-velocity-verlet", "semi-implicit-euler"])
def test_damping_factor_per_step(scheme):
    gamma, dt = 50.0, 0.01
    s = MechState(np.zeros((1, 2)), [[3.0, 4.0]])
    for _ in range(5):
        prev = np.linalg.norm(s.V.data)
        s, _ = step(s, zero_accel, gamma, dt, scheme=scheme)
        assert np.linalg.norm(s.V.data) / prev == pytest.approx(np.exp(-gamma * dt), rel=1e-14)


def test_zero_gamma_is_plain_velocity_verlet(rng):
    X, V = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    s, _ = step(MechState(X, V), harmonic(1.3), 0.0, 0.05)
    h, w2 = 0.05, 1.3 ** 2
    v_half = V - 0.5 * h * w2 * X
    x1 = X + h * v_half
    v1 = v_half - 0.5 * h * w2 * x1
    np.testing.assert_array_equal(s.X.data, x1)
    np.testing.assert_allclose(s.V.data, v1, rtol=1e-15, atol=1e-15)


def test_one_new_force_evaluation_per_step(rng):
    calls = []

    def counting(X, t):
        calls.append(t)
        return Tensor(-X.data)

    rollout(MechState(rng.normal(size=(3, 2)), np.zeros((3, 2))), counting, 0.1, dt=0.1, num_intervals=4, substeps=5)
    assert len(calls) == 4 * 5 + 1


def _period_error(dt, omega=2 * np.pi):
    x0 = np.array([[1.0, 0.5]])
    v0 = np.array([[0.0, 1.0]])
    n = int(round((2 * np.pi / omega) / dt))
    traj = rollout(MechState(x0, v0), harmonic(omega), 0.0, dt=dt * n, num_intervals=1, substeps=n)
    exact = harmonic_position(x0, v0, omega, dt * n)
    return np.linalg.norm(traj[-1].X.data - exact), np.linalg.norm(x0)


def test_harmonic_period_return():
    err, scale = _period_error(1e-3)
    assert err <= 5e-3 * scale


def test_second_order_convergence():
    e1, _ = _period_error(1e-2)
    e2, _ = _period_error(5e-3)
    assert 3.5 <= e1 / e2 <= 4.5


def test_energy_drift_over_ten_periods(rng):
    X, V = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
    e = AnalyticEnergy("expectation", "harmonic", omega=2 * np.pi)
    traj = rollout(MechState(X, V), lambda X, t: conservative_accel(e, X, t), 0.0, dt=0.1, num_intervals=100,
                   substeps=100)
    rep = diagnostics(traj, e)
    assert rep.max_rel_drift <= 1e-4


@settings(max_examples=20)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
def test_time_reversible_at_zero_damping(seed, n):
    rng = np.random.default_rng(seed)
    X, V = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    accel = harmonic(1.1)
    fwd = rollout(MechState(X, V), accel, 0.0, dt=0.01 * n, substeps=n)[-1]
    back = rollout(MechState(fwd.X, -fwd.V.data), accel, 0.0, dt=0.01 * n, substeps=n)[-1]
    np.testing.assert_allclose(back.X.data, X, atol=1e-10, rtol=0)
    np.testing.assert_allclose(-back.V.data, V, atol=1e-10, rtol=0)


def test_rollout_zero_intervals_returns_initial_state():
    s = MechState(np.ones((2, 2)), np.zeros((2, 2)))
    assert rollout(s, zero_accel, num_intervals=0) == [s]


def test_ballistic_from_rest():
    g = np.array([[0.0, -9.81]])
    T = 1.3
    traj = rollout(MechState(np.zeros((1, 2)), np.zeros((1, 2))), lambda X, t: Tensor(g), 0.0, dt=T / 4,
                   num_intervals=4, substeps=7)
    assert len(traj) == 5
    # Verlet integrates constant forces exactly
    np.testing.assert_allclose(traj[-1].X.data, 0.5 * g * T ** 2, rtol=1e-12)


def test_inverted_potential_decays_like_gradient_flow(rng):
    x0 = rng.normal(size=(7, 2))
    e = AnalyticEnergy("neg_sq_force", c=5.0)
    traj = rollout(MechState(x0, -10.0 * x0), lambda X, t: conservative_accel(e, X, t), 0.0, dt=0.1, substeps=100)
    ref = x0 * np.exp(-1.0)
    assert np.abs(traj[-1].X.data - ref).max() / np.abs(ref).max() <= 1e-3


def _overdamped_paths(c, x0, gamma=1e3, T=20.0, dt=1e-3):
    c = np.asarray(c, dtype=float)
    accel = lambda X, t: Tensor(-2.0 * c * X.data)
    n = int(round(T / dt))
    v0 = -2.0 * c * x0 / gamma
    traj = rollout(MechState(x0, v0), accel, gamma, dt=dt * 20, num_intervals=n // 20, substeps=20)
    path = np.array([s.X.data[0] for s in traj])
    s = np.linspace(0.0, 2 * T, 8000)[:, None]
    flow = x0[0] * np.exp(-2.0 * c * s / gamma)
    return path, flow


@pytest.mark.parametrize("c", [(5.0, 5.0), (50.0, 250.0)])
def test_overdamped_limit_follows_gradient_descent_path(c):
    path, flow = _overdamped_paths(c, np.array([[1.0, 1.0]]))
    assert path_deviation(path, flow) <= 0.01


def test_rollout_with_times_uses_interval_lengths():
    traj = rollout(MechState([[0.0]], [[1.0]]), zero_accel, 0.0, num_intervals=2, times=[0.0, 0.5, 2.0])
    assert [s.t for s in traj] == [0.0, 0.5, 2.0]
    assert traj[-1].X.data[0, 0] == 2.0
    with pytest.raises(ValueError, match="increasing"):
        rollout(MechState([[0.0]], [[1.0]]), zero_accel, num_intervals=2, times=[0.0, 0.5, 0.5])


def test_negative_gamma_rejected():
    with pytest.raises(ValueError, match="gamma"):
        step(MechState([[0.0]], [[1.0]]), zero_accel, -0.1, 0.1)


def test_nonfinite_state_reports_interval_and_step():
    def blowup(X, t):
        return Tensor(np.full(X.shape, np.inf))

    with pytest.raises(NonFiniteError, match=r"interval 0: .*step 0"):
        rollout(MechState([[0.0]], [[0.0]]), blowup, num_intervals=3, substeps=2)


def test_rollout_is_differentiable_and_checkpoint_matches(rng):
    X0 = rng.normal(size=(4, 2))
    w0 = np.array([0.7, 1.3])

    def run(ck):
        w = Tensor(w0, requires_grad=True)
        g = Tensor(0.5, requires_grad=True)
        accel = lambda X, t: X * (-w)
        traj = rollout(MechState(X0, np.zeros_like(X0)), accel, g, dt=0.2, num_intervals=3, substeps=2,
                       checkpoint=ck, params=[w])
        loss = ad.sum_(traj[-1].X * traj[-1].X) + ad.sum_(traj[2].V)
        return [t.data for t in ad.grad(loss, [w, g])]

    plain, ck = run(False), run(True)
    for p, c in zip(plain, ck):
        np.testing.assert_allclose(c, p, rtol=1e-12, atol=1e-14)

    def loss_of(w):
        traj = rollout(MechState(X0, np.zeros_like(X0)), lambda X, t: X * (-w), 0.5, dt=0.2, num_intervals=3,
                       substeps=2)
        return ad.sum_(traj[-1].X * traj[-1].X)

    assert ad.check_grad(loss_of, [w0]).max_rel_err <= 1e-7


def test_diagnostics_constant_potential_conserves_kinetic(rng):
    e = AnalyticEnergy("expectation", "constant")
    traj = rollout(MechState(rng.normal(size=(5, 2)), rng.normal(size=(5, 2))),
                   lambda X, t: conservative_accel(e, X, t), 0.0, dt=0.1, num_intervals=5)
    rep = diagnostics(traj, e)
    assert np.all(rep.kinetic == rep.kinetic[0])
    assert rep.max_abs_drift == 0.0


def test_diagnostics_damped_free_motion_strictly_decreases(rng):
    e = AnalyticEnergy("expectation", "constant", c=0.0)
    traj = rollout(MechState(rng.normal(size=(5, 2)), rng.normal(size=(5, 2))), zero_accel, 0.3, dt=0.1,
                   num_intervals=6)
    rep = diagnostics(traj, e)
    assert np.all(np.diff(rep.total) < 0)
    assert diagnostics(traj).potential is None
    with pytest.raises(ValueError):
        diagnostics([])
