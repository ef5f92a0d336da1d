import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kinfit import (
    FitError,
    FormatError,
    GammaVariateParams,
    InvalidArgument,
    MeasurementModel,
    ModelSpec,
    NoiseConfig,
    Phantom,
    RateConstants,
    Region,
    SinogramGeometry,
    apply_noise,
    default_frame_schedule,
    default_input_function,
    default_phantom,
    fbp_reconstruct,
    fit_gamma_variate,
    gamma_variate,
    radon_project,
    simulate_acquisition,
    synthesize_dynamic,
)
from kinfit.simulate import GROUND_TRUTH

from oracles import disk_projection, nrmse, ode_tissue


def blob(n=64, sigma=8.0, centre=None):
    c = (n - 1) / 2 if centre is None else centre
    ii, jj = np.mgrid[:n, :n]
    return np.exp(-((ii - c) ** 2 + (jj - c) ** 2) / (2 * sigma**2))


def aa_disk(n, radius, sub=8):
    """Disk of the given radius centred on pixel n//2, antialiased by supersampling."""
    off = (np.arange(sub) + 0.5) / sub - 0.5
    ii, jj = np.mgrid[:n, :n]
    acc = np.zeros((n, n))
    for a in off:
        for b in off:
            acc += (ii + a - n // 2) ** 2 + (jj + b - n // 2) ** 2 <= radius**2
    return acc / sub**2


# --- input function ------------------------------------------------------

def test_gamma_support_and_peak():
    g = GammaVariateParams(100.0, 0.2, 3.0, 0.5)
    assert gamma_variate(np.array([0.0, 0.2]), g).tolist() == [0.0, 0.0]
    t = np.linspace(0.21, 10, 20001)
    v = gamma_variate(t, g)
    assert t[np.argmax(v)] == pytest.approx(g.peak_time, abs=1e-3)
    assert v.max() == pytest.approx(g.peak_value, rel=1e-6)


def test_gamma_fit_round_trip():
    truth = GammaVariateParams(100.0, 0.2, 3.0, 0.5)
    t = np.linspace(0, 10, 40)
    fit = fit_gamma_variate(t, gamma_variate(t, truth))
    np.testing.assert_allclose(fit.as_tuple(), truth.as_tuple(), rtol=1e-4)


def test_gamma_fit_needs_samples():
    with pytest.raises(InvalidArgument):
        fit_gamma_variate([0, 1, 2], [0, 1, 0])
    with pytest.raises((InvalidArgument, FitError)):
        fit_gamma_variate(np.arange(6.0), [-1.0, 0, 1, 2, 1, 0])


# --- phantom -------------------------------------------------------------

def test_default_phantom_layout():
    ph = default_phantom()
    assert ph.shape == (64, 64)
    assert ph.region_labels() == [1, 2, 3, 4]
    sizes = [np.count_nonzero(ph.labels == lab) for lab in ph.region_labels()]
    assert min(sizes) > 200
    for lab, (k, vb) in GROUND_TRUTH.items():
        np.testing.assert_array_equal(ph.regions[lab].k.k, k)
        assert ph.regions[lab].V_b == vb


def test_phantom_validation():
    k = RateConstants(ModelSpec.TWO_CATENARY, GROUND_TRUTH[1][0])
    with pytest.raises(InvalidArgument):
        Phantom(np.array([[0, 2]]), {1: Region(k, 0.1)})
    with pytest.raises(InvalidArgument):
        Region(k, 1.5)
    with pytest.raises(InvalidArgument):
        Phantom(np.array([[1]]), {1: Region(k, 0.1)}, ModelSpec.THREE_RENAL)


def test_phantom_json_round_trip():
    ph = default_phantom(32)
    again = Phantom.from_json(json.dumps(ph.to_dict()))
    np.testing.assert_array_equal(again.labels, ph.labels)
    assert again.regions[3].V_b == ph.regions[3].V_b


def test_phantom_from_shapes():
    d = {"shape": [10, 12], "shapes": [{"type": "rect", "label": 1, "top_left": [2, 3], "size": [4, 5]},
                                       {"label": 2, "center": [7, 7], "radii": [1, 1]}],
         "regions": {"1": {"k": [0.8, 0.6, 0.07, 0.07], "V_b": 0.1},
                     "2": {"k": {"k_fb": 1, "k_bf": 1, "k_mf": 0.2, "k_fm": 0.2}, "V_b": 0.2}}}
    ph = Phantom.from_dict(d)
    assert np.count_nonzero(ph.labels == 1) == 20
    assert np.count_nonzero(ph.labels == 2) == 5


@pytest.mark.parametrize("text,match", [("{", "line 1"), ("[1]", "object"),
                                        ('{"labels": [[1]], "regions": {}}', "label 1"),
                                        ('{"labels": [[1]], "regions": {"1": {"k": [1, 2]}}}', "region 1")])
def test_phantom_json_errors(text, match):
    with pytest.raises(FormatError, match=match):
        Phantom.from_json(text)


# --- synthesis -----------------------------------------------------------

def test_background_only_is_zero(IF, grid):
    ph = Phantom(np.zeros((4, 4), int), {})
    assert not synthesize_dynamic(ph, IF, grid).voxels.any()


def test_single_region_matches_direct_curve(IF, grid):
    k, vb = GROUND_TRUTH[4]
    ph = Phantom(np.ones((3, 3), int), {1: Region(RateConstants(ModelSpec.TWO_CATENARY, k), vb)})
    vox = synthesize_dynamic(ph, IF, grid).voxels
    direct = MeasurementModel(ModelSpec.TWO_CATENARY, IF, grid, vb).predict(k)
    assert all(np.array_equal(vox[i, j], direct) for i in range(3) for j in range(3))


def test_region_tacs_match_ode_oracle(IF, grid):
    ph = default_phantom(32)
    vox = synthesize_dynamic(ph, IF, grid).voxels
    peaks = []
    for lab in ph.region_labels():
        k, vb = GROUND_TRUTH[lab]
        ref = (1 - vb) * ode_tissue(ModelSpec.TWO_CATENARY, k, IF, grid.midpoints).sum(axis=0) + vb * IF(grid.midpoints)
        tacs = vox[ph.labels == lab]
        assert np.all(tacs == tacs[0])
        np.testing.assert_allclose(tacs[0], ref, rtol=1e-6)
        peaks.append(ref.max())
    assert len(set(np.round(peaks, 6))) == 4


# --- tomography ----------------------------------------------------------

def test_zero_image_and_sinogram():
    geom = SinogramGeometry(n_angles=30)
    assert not radon_project(np.zeros((16, 16)), geom).any()
    assert not fbp_reconstruct(np.zeros((30, geom.detectors_for(16))), 16, geom).any()


def test_centered_impulse_hits_central_bin():
    img = np.zeros((33, 33))
    img[16, 16] = 1.0
    geom = SinogramGeometry(n_angles=36)
    sino = radon_project(img, geom)
    assert sino.shape == (36, geom.detectors_for(33))
    assert np.all(np.argmax(sino, axis=1) == sino.shape[1] // 2)


def test_disk_profile_matches_analytic():
    n, R = 128, 40.0
    geom = SinogramGeometry(n_angles=18)
    sino = radon_project(aa_disk(n, R), geom)
    s = np.arange(sino.shape[1]) - sino.shape[1] // 2
    ref = disk_projection(R, s.astype(float))
    assert np.abs(sino - ref).max() < 0.02 * ref.max()


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_radon_linear(a, b):
    rng = np.random.default_rng(3)
    X, Y = rng.uniform(size=(12, 12)), rng.uniform(size=(12, 12))
    geom = SinogramGeometry(n_angles=12)
    lhs = radon_project(a * X + b * Y, geom)
    rhs = a * radon_project(X, geom) + b * radon_project(Y, geom)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + np.abs(rhs).max()))


def test_mass_consistency():
    img = blob(64)
    sino = radon_project(img)
    assert np.abs(sino.sum(axis=1) / img.sum() - 1).max() < 0.01


def test_round_trip_blob():
    img = blob(64)
    rec = fbp_reconstruct(radon_project(img), 64)
    assert nrmse(rec, img) < 0.05


def test_round_trip_disk_mean():
    d = aa_disk(64, 20.0)
    rec = fbp_reconstruct(radon_project(5.0 * d), 64)
    assert rec[d == 1].mean() == pytest.approx(5.0, rel=0.05)
    assert rec.min() >= 0


def test_non_square_image_is_padded():
    sino = radon_project(np.ones((10, 20)), SinogramGeometry(n_angles=4))
    assert sino.shape == (4, SinogramGeometry().detectors_for(20))


def test_geometry_validation():
    with pytest.raises(InvalidArgument):
        SinogramGeometry(n_angles=0)
    with pytest.raises(InvalidArgument):
        SinogramGeometry(n_detectors=10).detectors_for(64)
    with pytest.raises(InvalidArgument):
        fbp_reconstruct(np.zeros((10, 91)), 64)


# --- noise ---------------------------------------------------------------

def test_noise_rejects_negative():
    with pytest.raises(InvalidArgument):
        apply_noise(np.array([[1.0, -1.0]]), NoiseConfig())


def test_zero_sinogram_stays_zero():
    assert not apply_noise(np.zeros((5, 5)), NoiseConfig()).any()


def test_gaussian_snr():
    s = np.random.default_rng(0).uniform(1, 2, size=(1000, 1000))
    cfg = NoiseConfig(count_scale=1e15, gaussian_snr_db=20.0)
    noise = apply_noise(s, cfg, np.random.default_rng(1)) - s
    snr = 10 * np.log10(np.mean(s**2) / np.mean(noise**2))
    assert snr == pytest.approx(20.0, abs=0.2)


def test_poisson_mean():
    s = np.full(10_000, 2.5)
    cfg = NoiseConfig(count_scale=4.0, gaussian_snr_db=400.0)
    out = apply_noise(s, cfg, np.random.default_rng(5))
    se = np.sqrt(2.5 / 4.0 / s.size)
    assert abs(out.mean() - 2.5) < 3 * se


def test_noise_deterministic():
    s = blob(16)
    a = apply_noise(s, NoiseConfig(seed=9))
    b = apply_noise(s, NoiseConfig(seed=9))
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, apply_noise(s, NoiseConfig(seed=10)))


def test_count_scale_default_sets_peak():
    from kinfit import resolve_count_scale

    assert resolve_count_scale(NoiseConfig(), 50.0) == pytest.approx(200.0)
    assert resolve_count_scale(NoiseConfig(count_scale=3.0), 50.0) == 3.0


# --- acquisition ---------------------------------------------------------

def _small():
    labels = np.zeros((24, 24), int)
    ii, jj = np.mgrid[:24, :24]
    labels[(ii - 12) ** 2 + (jj - 12) ** 2 <= 49] = 1
    k, vb = GROUND_TRUTH[1]
    return Phantom(labels, {1: Region(RateConstants(ModelSpec.TWO_CATENARY, k), vb)})


def test_acquisition_without_noise_approximates_clean():
    from kinfit import DynamicImage

    ph, IF, grid = default_phantom(64), default_input_function(), default_frame_schedule()
    tac = MeasurementModel(ModelSpec.TWO_CATENARY, IF, grid, 0.1).predict(GROUND_TRUTH[1][0])
    clean = DynamicImage(blob(64)[:, :, None] * tac[None, None, :], grid)
    (rt,), meta = simulate_acquisition(ph, IF, grid, SinogramGeometry(), None, clean=clean)
    assert "count_scale" not in meta
    for t in range(len(grid)):
        if not clean.voxels[:, :, t].any():
            assert not rt.voxels[:, :, t].any()
            continue
        assert nrmse(rt.voxels[:, :, t], clean.voxels[:, :, t]) < 0.05


def test_acquisition_realizations_differ_but_repeat():
    ph, IF, grid = _small(), default_input_function(), default_frame_schedule()
    geom = SinogramGeometry(n_angles=30)
    a, meta = simulate_acquisition(ph, IF, grid, geom, NoiseConfig(seed=4), 2)
    b, _ = simulate_acquisition(ph, IF, grid, geom, NoiseConfig(seed=4), 2)
    assert meta["count_scale"] > 0
    assert a[0].voxels.tobytes() == b[0].voxels.tobytes()
    assert not np.array_equal(a[0].voxels, a[1].voxels)
    inside = ph.labels == 1
    m0, m1 = a[0].voxels[inside].mean(), a[1].voxels[inside].mean()
    assert m0 == pytest.approx(m1, rel=0.05)
    with pytest.raises(InvalidArgument):
        simulate_acquisition(ph, IF, grid, geom, NoiseConfig(), -1)
