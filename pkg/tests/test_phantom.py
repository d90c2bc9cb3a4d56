import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcsi.model import (
    CompartmentModel,
    ConfigurationError,
    ContrastEncoding,
    STANDARD_COMPARTMENTS,
    SpectralGrid,
    build_dictionary,
    standard_schedule,
)
from mdcsi.phantom import (
    MeasuredDataset,
    NoiseModel,
    NoiseSpec,
    PhantomCompartment,
    PhantomSpec,
    add_noise,
    calibrate_sigma,
    compute_snr,
    forward_project,
    lineshape,
    noise_field,
    standard_phantom,
    rasterize_phantom,
    simulate_signal,
    voxel_normals,
)
from mdcsi.solver import SpectroscopicImage

GRID = SpectralGrid.logarithmic((100, 3000), (2, 300), 40, 40)


@pytest.fixture(scope="module")
def standard_clean():
    grid = SpectralGrid.logarithmic((100, 3000), (2, 300), 50, 50)
    truth = rasterize_phantom(standard_phantom(), grid)
    return forward_project(truth, build_dictionary(standard_schedule(), grid))


def _dataset(data, w=2, h=1, sched=None):
    data = np.asarray(data, dtype=float)
    sched = sched or [ContrastEncoding(float(10 * (k + 1)), 0.0) for k in range(data.shape[0])]
    return MeasuredDataset(data, sched, w, h, np.ones(w * h))


def test_standard_toy_signal():
    s = simulate_signal(STANDARD_COMPARTMENTS, [ContrastEncoding(7.5, 0.0)])
    ref = -sum(math.exp(-7.5 / t2) for t2 in (70, 100, 110))
    assert s[0] == pytest.approx(ref, rel=1e-14)
    assert s[0] == pytest.approx(-2.760231431154573, rel=1e-14)


def test_signal_null_point_and_empty():
    m = CompartmentModel((2.0,), (800.0,), (60.0,))
    sched = [ContrastEncoding(te, 800 * math.log(2)) for te in (5.0, 50.0, 500.0)]
    np.testing.assert_allclose(simulate_signal(m, sched), 0.0, atol=1e-15)
    assert simulate_signal(m, []).size == 0


def test_lineshape_normalized():
    g = lineshape(GRID, 750, 70, 0.03)
    assert np.dot(GRID.weights, g) == pytest.approx(1.0, abs=1e-12)
    q = int(np.argmax(g))
    t1, t2 = GRID.nodes()
    assert abs(math.log10(t1[q] / 750)) < 0.04 and abs(math.log10(t2[q] / 70)) < 0.06


def test_lineshape_outside_grid():
    with pytest.raises(ConfigurationError):
        lineshape(GRID, 5000, 70, 0.03)


def test_rasterize_single_compartment_integrates_to_map():
    amap = np.ones((3, 4))
    spec = PhantomSpec(4, 3, [PhantomCompartment(amap, 1000, 110)])
    img = rasterize_phantom(spec, GRID)
    np.testing.assert_allclose(GRID.weights @ img.values, 1.0, atol=1e-6)


def test_rasterize_standard_phantom_integrals():
    spec = standard_phantom(32, 32)
    img = rasterize_phantom(spec, GRID)
    # each compartment separately integrates to its own map
    for c, comp in enumerate(spec.compartments):
        g = lineshape(GRID, comp.peak_t1, comp.peak_t2, comp.lineshape_sigma_log10)
        np.testing.assert_allclose(GRID.weights @ g * comp.spatial_map.ravel(), comp.spatial_map.ravel(), atol=1e-4)
    total = GRID.weights @ img.values
    np.testing.assert_allclose(total, spec.maps.sum(axis=0).ravel(), atol=1e-4)
    assert [(c.peak_t1, c.peak_t2) for c in spec.compartments] == [(750, 70), (700, 100), (1000, 110)]


def test_rasterize_zero_maps():
    spec = PhantomSpec(3, 3, [PhantomCompartment(np.zeros((3, 3)), 750, 70)])
    assert not np.any(rasterize_phantom(spec, GRID).values)


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(2, 2, [PhantomCompartment(-np.ones((2, 2)), 750, 70)])
    with pytest.raises(ValueError):
        PhantomSpec(2, 2, [PhantomCompartment(np.ones((3, 2)), 750, 70)])
    with pytest.raises(ValueError):
        PhantomSpec(2, 2, [PhantomCompartment(np.ones((2, 2)), 0, 70)])


def test_standard_maps_overlap_and_detail():
    maps = standard_phantom().maps > 0
    assert np.any(maps[0] & maps[1])  # multi-peak voxels exist
    assert np.any(maps[2] & (maps[0] | maps[1]))
    assert maps[2].sum() < maps[0].sum() / 4  # thin structure


def test_forward_project_delta_and_zero():
    d = build_dictionary(standard_schedule(), GRID)
    q = 517
    vals = np.zeros((GRID.size, 2))
    vals[q, 0] = 1.0 / GRID.weights[q]
    ds = forward_project(SpectroscopicImage(vals, GRID, 2, 1), d)
    np.testing.assert_allclose(ds.data[:, 0], d.kernel[:, q] / GRID.weights[q], rtol=1e-15)
    assert not np.any(ds.data[:, 1])
    assert ds.mask.tolist() == [1.0, 0.0]


@settings(max_examples=10, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**32))
def test_forward_project_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    d = build_dictionary(standard_schedule(), GRID)
    F1, F2 = rng.random((GRID.size, 4)), rng.random((GRID.size, 4))
    proj = lambda F: forward_project(SpectroscopicImage(F, GRID, 2, 2, mask=np.ones(4)), d).data  # noqa: E731
    lhs = proj(a * F1 + b * F2)
    rhs = a * proj(F1) + b * proj(F2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * np.abs(rhs).max())


def test_forward_project_grid_mismatch():
    d = build_dictionary(standard_schedule(), SpectralGrid.logarithmic((100, 3000), (2, 300), 10, 10))
    with pytest.raises(ConfigurationError):
        forward_project(SpectroscopicImage(np.zeros((GRID.size, 1)), GRID, 1, 1), d)


def test_noise_sigma_zero():
    ds = _dataset([[1.0, -2.0], [-3.0, 4.0]])
    out = add_noise(ds, NoiseSpec(0.0, 1, NoiseModel.GAUSSIAN_MAGNITUDE))
    np.testing.assert_array_equal(out.data, np.abs(ds.data))
    out = add_noise(ds, NoiseSpec(0.0, 1, NoiseModel.GAUSSIAN))
    np.testing.assert_array_equal(out.data, ds.data)
    out = add_noise(ds, NoiseSpec(0.0, 1, NoiseModel.SIGNED_MAGNITUDE))
    np.testing.assert_array_equal(out.data, ds.data)


def test_noise_deterministic_and_seed_dependent():
    ds = _dataset(np.ones((5, 6)), w=3, h=2)
    a = add_noise(ds, NoiseSpec(0.5, 42)).data
    b = add_noise(ds, NoiseSpec(0.5, 42)).data
    c = add_noise(ds, NoiseSpec(0.5, 43)).data
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_noise_order_independent():
    full = noise_field(7, 4, 10)
    for i in (9, 0, 5):
        np.testing.assert_array_equal(full[:, :, i], voxel_normals(7, i, 8).reshape(2, 4))


def test_noise_streams_are_standard_normal():
    z = noise_field(3, 50, 2000, components=2).ravel()
    assert abs(z.mean()) < 0.01
    assert z.std() == pytest.approx(1.0, abs=0.01)


def test_gaussian_noise_std():
    ds = _dataset(np.zeros((10, 10_000)), w=10_000, h=1)
    out = add_noise(ds, NoiseSpec(2.5, 9, NoiseModel.GAUSSIAN))
    assert np.std(out.data) == pytest.approx(2.5, rel=0.02)


def test_rician_mean_high_snr():
    ds = _dataset(np.full((10, 10_000), 100.0), w=10_000, h=1)
    out = add_noise(ds, NoiseSpec(1.0, 11, NoiseModel.GAUSSIAN_MAGNITUDE))
    assert 100.0 <= out.data.mean() <= 100.02


def test_signed_magnitude_keeps_sign():
    ds = _dataset(np.array([[-50.0, 50.0]] * 3))
    out = add_noise(ds, NoiseSpec(1.0, 5, NoiseModel.SIGNED_MAGNITUDE))
    assert np.all(out.data[:, 0] < 0) and np.all(out.data[:, 1] > 0)


def test_snr_examples():
    ds = _dataset(np.full((3, 2), 10.0))
    np.testing.assert_allclose(compute_snr(ds, 5.0), 2.0)
    np.testing.assert_allclose(compute_snr(ds, 10.0), compute_snr(ds, 5.0) / 2)
    empty = MeasuredDataset(ds.data, ds.schedule, 2, 1, np.zeros(2))
    with pytest.raises(ValueError):
        compute_snr(empty, 1.0)
    with pytest.raises(ValueError):
        compute_snr(ds, 0.0)


def test_standard_snr_calibration(standard_clean):
    sigma = calibrate_sigma(standard_clean, 200.0)
    snr = compute_snr(standard_clean, sigma)
    sched = standard_clean.schedule
    hi, lo = int(np.argmax(snr)), int(np.argmin(snr))
    assert snr[hi] == pytest.approx(200.0, rel=1e-12)
    assert (sched[hi].ti, sched[hi].te) == (0.0, 7.5)
    assert (sched[lo].ti, sched[lo].te) == (400.0, 217.5)
    assert snr[lo] == pytest.approx(3.83, rel=0.02)
    mean_abs = np.abs(standard_clean.data[:, standard_clean.mask > 0]).mean(axis=1)
    assert hi == int(np.argmax(mean_abs))


def test_dataset_validation():
    with pytest.raises(ValueError):
        _dataset([[np.nan, 1.0]])
    with pytest.raises(ValueError):
        MeasuredDataset(np.ones((1, 2)), [ContrastEncoding(1.0, 0.0)], 2, 1, np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        MeasuredDataset(np.ones((1, 3)), [ContrastEncoding(1.0, 0.0)], 2, 1, np.ones(2))
