import numpy as np
import pytest

from conftest import randomized_net, tiny_config
from flowfold.checkpoint import CheckpointRecord
from flowfold.data.features import FeatureMatrix
from flowfold.data.preprocess import PreprocessStats
from flowfold.errors import ConfigError, DivergenceError, ModeError, NonConvergenceError, ShapeError
from flowfold.odeint import SolverConfig, dopri5, dopri5_fixed, generate, unfold, unfold_point_estimate
from flowfold.velocity import init_params

E_INV = np.exp(-1.0)


def _record(net, dim):
    stats = PreprocessStats(np.full(dim, 2.0), np.full(dim, 3.0), 5.0)
    return CheckpointRecord(net=net, stats=stats, train_config={}, epoch=0, monitor="loss",
                            monitor_value=None, rng_digest="")


def test_exponential_decay_accuracy():
    res = dopri5(lambda t, x: -x, np.ones((1, 1)), (0.0, 1.0), SolverConfig(1e-7, 1e-7))
    assert abs(res.state[0, 0] - E_INV) < 1e-6
    assert abs(res.state[0, 0] - E_INV) < 10 * (1e-7 + 1e-7)
    assert res.nfe == 1 + 6 * (res.accepted_steps + res.rejected_steps)


def test_zero_field_single_step():
    x0 = np.random.default_rng(0).normal(size=(7, 3))
    res = dopri5(lambda t, x: np.zeros_like(x), x0)
    np.testing.assert_array_equal(res.state, x0)
    assert res.accepted_steps == 1 and res.rejected_steps == 0 and res.nfe == 7


@pytest.mark.parametrize("tol", [1e-3, 1e-7])
def test_constant_field_is_exact(tol):
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(50, 2))
    x1 = rng.normal(size=(50, 2))
    u = x1 - x0
    res = dopri5(lambda t, x: u, x0, (0.0, 1.0), SolverConfig(tol, tol))
    np.testing.assert_allclose(res.state, x1, rtol=0, atol=1e-12)
    assert res.rejected_steps == 0


def test_fixed_step_global_order_five():
    f = lambda t, x: -x  # noqa: E731
    x0 = np.ones((1, 1))
    errs = [abs(dopri5_fixed(f, x0, (0.0, 1.0), n)[0, 0] - E_INV) for n in (2, 4, 8)]
    for coarse, fine in zip(errs, errs[1:]):
        assert 16 <= coarse / fine <= 64


def test_tolerance_controls_error_and_nfe():
    f = lambda t, x: np.cos(4 * t) * x  # noqa: E731
    exact = np.exp(np.sin(4.0) / 4)
    loose = dopri5(f, np.ones((1, 1)), (0, 1), SolverConfig(1e-3, 1e-3))
    tight = dopri5(f, np.ones((1, 1)), (0, 1), SolverConfig(1e-9, 1e-9))
    assert loose.nfe < tight.nfe
    assert abs(tight.state[0, 0] - exact) < 1e-8
    assert abs(loose.state[0, 0] - exact) > abs(tight.state[0, 0] - exact)


def test_max_steps_carries_partial_state():
    with pytest.raises(NonConvergenceError) as info:
        dopri5(lambda t, x: np.cos(50 * t) * 40 * x, np.ones((1, 1)), (0, 1), SolverConfig(1e-10, 1e-10, max_steps=3))
    assert 0.0 <= info.value.t < 1.0
    assert info.value.state.shape == (1, 1)


def test_nan_field_diverges():
    with pytest.raises(DivergenceError):
        dopri5(lambda t, x: np.full_like(x, np.nan), np.ones((2, 2)))


def test_solver_config_validation():
    for bad in (dict(atol=0.0), dict(rtol=-1.0), dict(max_steps=0), dict(initial_step=-0.1)):
        with pytest.raises(ConfigError):
            SolverConfig(**bad)
    with pytest.raises(ConfigError):
        dopri5(lambda t, x: x, np.ones((1, 1)), (1.0, 0.0))


def test_per_trajectory_mode_matches_solution_and_counts():
    x0 = np.array([[1.0], [2.0], [-3.0]])
    cfg = SolverConfig(1e-8, 1e-8, per_trajectory=True)
    res = dopri5(lambda t, x, rows=None: -x, x0, (0, 1), cfg)
    np.testing.assert_allclose(res.state, x0 * E_INV, rtol=1e-6)
    assert res.trajectories == 3
    assert res.nfe == 3 + 6 * (res.accepted_steps + res.rejected_steps)


def test_generate_with_zero_head_returns_prior_in_physical_units():
    net = init_params(tiny_config(dim=2), 0)
    ckpt = _record(net, 2)
    out, nfe = generate(ckpt, 100, seed=3)
    prior = np.random.default_rng(3).standard_normal((100, 2)).astype(np.float32)
    expected = prior.astype(np.float64) / 5.0 * 3.0 + 2.0
    assert out.space == "physical"
    np.testing.assert_allclose(out.values, expected, rtol=1e-6)
    assert nfe == 7


def test_generate_is_deterministic_and_handles_zero_events():
    net = randomized_net(tiny_config(dim=2), dtype=np.float32)
    ckpt = _record(net, 2)
    a, _ = generate(ckpt, 300, SolverConfig(1e-5, 1e-5), seed=9)
    b, _ = generate(ckpt, 300, SolverConfig(1e-5, 1e-5), seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    empty, _ = generate(ckpt, 0)
    assert empty.values.shape == (0, 2)
    with pytest.raises(ModeError):
        generate(_record(randomized_net(tiny_config(dim=2, conditional=True), dtype=np.float32), 2), 5)


def test_unfold_row_alignment_under_permutation():
    net = randomized_net(tiny_config(dim=2, conditional=True), dtype=np.float32)
    ckpt = _record(net, 2)
    det = np.random.default_rng(4).normal(2, 3, size=(64, 2))
    perm = np.random.default_rng(5).permutation(64)
    base, _ = unfold(ckpt, FeatureMatrix(det), seed=1)
    shuffled, _ = unfold(ckpt, FeatureMatrix(det[perm]), seed=1, row_ids=perm)
    np.testing.assert_array_equal(shuffled.values, base.values[perm])


def test_unfold_errors_and_point_estimate():
    cond = _record(randomized_net(tiny_config(dim=2, conditional=True), dtype=np.float32), 2)
    with pytest.raises(ShapeError):
        unfold(cond, FeatureMatrix(np.zeros((3, 3))))
    with pytest.raises(ModeError):
        unfold(_record(init_params(tiny_config(dim=2), 0), 2), FeatureMatrix(np.zeros((3, 2))))
    det = FeatureMatrix(np.random.default_rng(0).normal(size=(10, 2)))
    est = unfold_point_estimate(cond, det, draws=3, seed=0)
    single = [unfold(cond, det, seed=k)[0].values.astype(np.float64) for k in range(3)]
    np.testing.assert_allclose(est, np.mean(single, axis=0), rtol=1e-12)
