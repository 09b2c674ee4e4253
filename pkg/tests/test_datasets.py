import struct

import numpy as np
import pytest

from flowfold.data import kinematics as kin
from flowfold.data.eventfile import load_events, save_events
from flowfold.data.features import FeatureMatrix
from flowfold.data.mocks import DEFAULTS, FAMILIES, MockSpec, sample_mock
from flowfold.data.preprocess import PreprocessStats, apply_preprocess, fit_preprocess, invert_preprocess
from flowfold.errors import (ConfigError, DegenerateFeatureError, EventFileError, EventValidationError,
                             KinematicsError, StateError)
from flowfold.metrics import wasserstein_1d

# -- mocks ----------------------------------------------------------------------


def test_all_families_sample_and_are_seeded():
    assert len(FAMILIES) == 12
    for fam in FAMILIES:
        a = sample_mock(MockSpec(fam, 2000, seed=3))
        b = sample_mock(MockSpec(fam, 2000, seed=3))
        assert a.values.shape == (2000, 1) and a.space == "physical"
        np.testing.assert_array_equal(a.values, b.values)


def test_mock_validation():
    with pytest.raises(ConfigError):
        sample_mock(MockSpec("laplace", 10))
    with pytest.raises(ConfigError):
        sample_mock(MockSpec("gaussian", 10, params={"width": 1.0}))
    with pytest.raises(ConfigError):
        sample_mock(MockSpec("bimodal-asym", 10, params={"weights": [0.5, 0.4]}))
    with pytest.raises(ConfigError):
        sample_mock(MockSpec("bimodal-asym", 10, params={"widths": [0.5, 0.0]}))


def test_mixture_weights_sum_to_one():
    for fam in FAMILIES:
        mix = MockSpec(fam).mixture()
        if mix is not None:
            assert abs(mix[0].sum() - 1.0) <= 1e-12
            assert np.all(mix[2] > 0)


def test_delta_and_uniform_support():
    d = sample_mock(MockSpec("delta", 1000, params={"loc": 0.3}))
    assert np.all(d.values == np.float32(0.3))
    u = sample_mock(MockSpec("uniform-flat", 100_000, params={"low": -2.0, "high": 3.0}))
    assert u.values.min() >= -2.0 and u.values.max() <= 3.0


def test_cutoff_and_exponential_support():
    c = sample_mock(MockSpec("gauss-cutoff", 50_000))
    assert c.values.min() > DEFAULTS["gauss-cutoff"]["cutoff"] - 1e-6
    e = sample_mock(MockSpec("exponential-decay", 200_000))
    assert e.values.min() >= 0 and e.values.mean() == pytest.approx(1.0, abs=0.01)


def test_bimodal_occupancy_at_one_million():
    x = sample_mock(MockSpec("bimodal-asym", 1_000_000, seed=11)).values[:, 0]
    left = np.mean(x < 0)
    assert abs(left - 0.7) < 0.02 and abs((1 - left) - 0.3) < 0.02


def test_self_consistency_noise_floor():
    for fam in FAMILIES:
        if fam in ("delta", "uniform-flat"):
            continue
        a = sample_mock(MockSpec(fam, 1_000_000, seed=1)).values[:, 0]
        b = sample_mock(MockSpec(fam, 1_000_000, seed=2)).values[:, 0]
        assert wasserstein_1d(a, b) < 3e-3, fam


# -- preprocessing ----------------------------------------------------------------


def test_fit_preprocess_fixtures():
    st = fit_preprocess(FeatureMatrix(np.array([[0.0], [2.0]])))
    assert st.mean[0] == 1.0 and st.std[0] == 1.0 and st.scale == 5.0
    x = np.random.default_rng(0).standard_normal((200_000, 2)) + np.array([3.0, -1.0])
    st = fit_preprocess(FeatureMatrix(x))
    np.testing.assert_allclose(st.mean, [3.0, -1.0], atol=0.01)
    np.testing.assert_allclose(st.std, [1.0, 1.0], atol=0.01)


def test_degenerate_feature_names_index():
    x = np.c_[np.random.default_rng(0).normal(size=50), np.full(50, 2.0)]
    with pytest.raises(DegenerateFeatureError) as info:
        fit_preprocess(FeatureMatrix(x))
    assert info.value.feature == 1
    st = fit_preprocess(FeatureMatrix(x), allow_degenerate=True)
    assert st.std[1] == 1.0


def test_apply_invert_hand_value_and_round_trip():
    st = PreprocessStats(np.array([1.0]), np.array([2.0]), 5.0)
    z = apply_preprocess(FeatureMatrix(np.array([[3.0], [1.0]])), st)
    assert z.space == "standardized"
    np.testing.assert_array_equal(z.values[:, 0], [5.0, 0.0])
    x = np.random.default_rng(1).normal(50, 20, size=(1000, 3))
    st = fit_preprocess(FeatureMatrix(x))
    back = invert_preprocess(apply_preprocess(FeatureMatrix(x), st), st)
    np.testing.assert_allclose(back.values, x.astype(np.float32), rtol=1e-5)
    with pytest.raises(StateError):
        invert_preprocess(FeatureMatrix(x), st)
    with pytest.raises(StateError):
        apply_preprocess(apply_preprocess(FeatureMatrix(x), st), st)


def test_paired_preprocess_uses_truth_stats():
    rng = np.random.default_rng(2)
    t = rng.normal(3, 2, size=(1000, 2))
    paired = FeatureMatrix.pair(FeatureMatrix(t), FeatureMatrix(t + rng.normal(size=t.shape)))
    st = fit_preprocess(paired)
    assert st.n_features == 2
    z = apply_preprocess(paired, st)
    zt, zd = z.split_pairs()
    np.testing.assert_allclose(zt.values, apply_preprocess(FeatureMatrix(t), st).values)
    assert z.paired and zd.n_features == 2


def test_feature_matrix_invariants():
    with pytest.raises(ValueError):
        FeatureMatrix(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 2)), space="latent")
    with pytest.raises(ValueError):
        FeatureMatrix.pair(FeatureMatrix(np.zeros((2, 2))), FeatureMatrix(np.zeros((3, 2))))


# -- kinematics -----------------------------------------------------------------


@pytest.fixture(scope="module")
def events():
    return kin.generate_events(5000, seed=4)


def test_generated_events_satisfy_invariants(events):
    assert events.shape == (5000, 24)
    for name, mass in (("photon", 0.0), ("target", kin.M_P), ("recoil", kin.M_P),
                       ("piplus", kin.M_PI), ("piminus", kin.M_PI)):
        p = events[:, kin.SLOTS[name]]
        assert np.abs(kin.minkowski_sq(p) - mass**2).max() < 1e-4
    s = kin.SLOTS
    initial = events[:, s["photon"]] + events[:, s["target"]]
    final = events[:, s["recoil"]] + events[:, s["piplus"]] + events[:, s["piminus"]]
    assert np.abs(initial - final).max() < 1e-4
    assert np.all(events[:, s["photon"]][:, 2] == 0) and np.all(events[:, s["target"]][:, 2] == 0)
    assert np.all(events[:, kin.DERIVED["t"]] <= 0)
    np.testing.assert_array_equal(kin.generate_events(10, 4), kin.generate_events(10, 4))


def test_projection_and_recoil_round_trip(events):
    f = kin.project_24_to_10(events)
    assert f.shape == (5000, 10) and np.all(np.isfinite(f))
    recoil = kin.infer_recoil_from_features(f)
    assert np.abs(recoil - events[:, kin.SLOTS["recoil"]]).max() < 1e-4
    tampered = events.copy()
    tampered[:, kin.SLOTS["recoil"]] += 0.5
    np.testing.assert_array_equal(kin.project_24_to_10(tampered), f)
    bad = events[:3].copy()
    bad[1, 2] = 1e-3
    with pytest.raises(EventValidationError):
        kin.project_24_to_10(bad)


def test_infer_recoil_fixtures():
    pg, p1 = np.array([8.5, 0.0, 0.0, 8.5]), np.array([kin.M_P, 0.0, 0.0, 0.0])
    zero_pi = np.array([kin.M_PI, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(kin.infer_recoil(pg, p1, np.zeros(4), np.zeros(4)), pg + p1)
    assert np.all(np.isfinite(kin.infer_recoil(pg, p1, zero_pi, zero_pi)))


def test_smeared_recoil_leaves_mass_shell(events):
    f = kin.project_24_to_10(events)
    smeared = kin.smear_events(f, kin.SmearConfig(1.0, 0.01, seed=0))
    dev = np.abs(kin.minkowski_sq(kin.infer_recoil_from_features(smeared)) - kin.M_P**2)
    assert np.median(dev) > 1e-4


def test_smearing_properties():
    x = np.random.default_rng(0).normal(size=(100, 10))
    np.testing.assert_array_equal(kin.smear_events(x, kin.SmearConfig(0.0)), x)
    x[:, 5] = 0.0
    out = kin.smear_events(x, kin.SmearConfig(2.0, seed=1))
    np.testing.assert_array_equal(out[:, 5], 0.0)
    np.testing.assert_array_equal(out[:, :4], x[:, :4])
    ones = np.ones((1_000_000, 10))
    pert = kin.smear_events(ones, kin.SmearConfig(1.0, 0.01, seed=2))[:, 4] - 1.0
    assert abs(pert.std() - 0.01) < 1e-4
    with pytest.raises(EventValidationError):
        kin.smear_events(np.zeros((2, 9)), kin.SmearConfig())
    with pytest.raises(ValueError):
        kin.SmearConfig(sigma_smear=-1.0)


def test_invariant_mass_fixtures():
    m = kin.M_PI
    a = kin.on_shell(np.array([[0.3, 0.0, 0.0]]), m)
    b = kin.on_shell(np.array([[-0.3, 0.0, 0.0]]), m)
    assert kin.invariant_mass(a, b)[0] == pytest.approx(2 * np.sqrt(0.09 + m**2), abs=1e-12)
    z = kin.on_shell(np.zeros((1, 3)), m)
    assert kin.invariant_mass(z, z)[0] == pytest.approx(2 * m, abs=1e-12)
    c = kin.on_shell(np.array([[1.0, 2.0, 3.0]]), m)
    assert kin.invariant_mass(c, c)[0] == pytest.approx(2 * m, abs=1e-9)
    with pytest.raises(KinematicsError):
        kin.invariant_mass(np.array([[0.0, 1.0, 0.0, 0.0]]), np.zeros((1, 4)))


def test_mandelstam_fixtures(events):
    pg = np.array([1.0, 0.0, 0.0, 1.0])
    assert kin.mandelstam_t(pg, pg) == 0.0
    assert kin.mandelstam_t(pg, np.array([1.0, 0.0, 0.0, 0.5])) == pytest.approx(-0.25)
    assert np.all(kin.mandelstam_t_from_features(kin.project_24_to_10(events)) <= 1e-9)


def test_pion_pair_mass_in_generator_window(events):
    m = kin.pion_pair_mass(kin.project_24_to_10(events))
    assert m.min() > 0.4 - 1e-6 and m.max() < 1.2 + 1e-6


# -- event files ----------------------------------------------------------------


def test_event_file_round_trip(tmp_path):
    x = np.random.default_rng(0).normal(size=(123, 10)).astype(np.float32)
    st = fit_preprocess(FeatureMatrix(x))
    for data, stats in ((FeatureMatrix(x), None), (apply_preprocess(FeatureMatrix(x), st), st),
                        (FeatureMatrix.pair(FeatureMatrix(x[:, :5]), FeatureMatrix(x[:, 5:])), None),
                        (FeatureMatrix(np.zeros((0, 10))), None)):
        save_events(tmp_path / "a.ev", data, stats)
        back, bst = load_events(tmp_path / "a.ev")
        np.testing.assert_array_equal(back.values, data.values)
        assert back.space == data.space and back.paired == data.paired
        if stats is not None:
            np.testing.assert_array_equal(bst.mean, stats.mean)
            np.testing.assert_array_equal(bst.std, stats.std)


def test_event_file_errors(tmp_path):
    p = tmp_path / "bad.ev"
    p.write_bytes(b"")
    with pytest.raises(EventFileError):
        load_events(p)
    save_events(p, FeatureMatrix(np.ones((4, 10))))
    blob = p.read_bytes()
    # declared 10 features, rows carry 9 columns
    hdr = struct.Struct("<4sHHIQB")
    magic, ver, flags, nf, ne, hs = hdr.unpack_from(blob)
    nine = hdr.pack(magic, ver, flags, nf, ne, hs) + np.ones((4, 9), "<f4").tobytes()
    p.write_bytes(nine)
    with pytest.raises(EventFileError, match="features") as info:
        load_events(p)
    assert info.value.offset > 0
    p.write_bytes(blob[:-3])
    with pytest.raises(EventFileError):
        load_events(p)
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(EventFileError, match="magic"):
        load_events(p)
    p.write_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])
    with pytest.raises(EventFileError, match="version"):
        load_events(p)
