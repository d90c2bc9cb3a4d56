import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdcsi.model import (
    CompartmentModel,
    ConfigurationError,
    ContrastEncoding,
    Mode,
    SpectralGrid,
    build_dictionary,
    kernel_t1,
    kernel_t1t2,
    kernel_t2,
    log_grid,
    standard_schedule,
    place_compartments,
    product_schedule,
    quadrature_weights,
    t1_baseline_schedule,
    t2_baseline_schedule,
    validate_schedule,
)
from mdcsi.phantom import simulate_signal

pos = st.floats(min_value=1.0, max_value=5000.0, allow_nan=False)
nonneg = st.floats(min_value=0.0, max_value=5000.0, allow_nan=False)


def test_kernel_t2_values():
    assert kernel_t2(0, 100) == 1.0
    assert kernel_t2(100, 100) == pytest.approx(math.exp(-1), rel=1e-15)
    # closed form exp(-217.5/70) evaluated at high precision
    assert kernel_t2(217.5, 70) == pytest.approx(0.0447285688594622, rel=1e-14)


def test_kernel_t1_values():
    assert kernel_t1(0, 750) == -1.0
    assert kernel_t1(1000 * math.log(2), 1000) == pytest.approx(0.0, abs=1e-15)
    assert kernel_t1(2000, 1000) == pytest.approx(0.729329, abs=5e-7)


def test_kernel_t1t2_values():
    assert kernel_t1t2(ContrastEncoding(0, 0), 500, 50) == -1.0
    assert kernel_t1t2(ContrastEncoding(7.5, 0), 750, 70) == pytest.approx(-0.898397321348071, rel=1e-14)
    assert kernel_t1t2(ContrastEncoding(33.0, 300 * math.log(2)), 300, 80) == pytest.approx(0, abs=1e-15)


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_kernels_reject_nonpositive_times(bad):
    with pytest.raises(ValueError):
        kernel_t2(10, bad)
    with pytest.raises(ValueError):
        kernel_t1(10, bad)


def test_kernel_t1t2_requires_ti():
    with pytest.raises(ValueError):
        kernel_t1t2(ContrastEncoding(10.0), 100, 100)


@given(te=nonneg, ti=nonneg, t1=pos, t2=pos)
def test_separability(te, ti, t1, t2):
    enc = ContrastEncoding(te, ti)
    assert kernel_t1t2(enc, t1, t2) == kernel_t1(ti, t1) * kernel_t2(te, t2)


@given(te=st.floats(0.1, 500), dte=st.floats(0.1, 100), t2=st.floats(10, 5000), dt2=st.floats(0.1, 100))
def test_kernel_t2_monotone(te, dte, t2, dt2):
    assert kernel_t2(te + dte, t2) < kernel_t2(te, t2)
    assert kernel_t2(te, t2 + dt2) > kernel_t2(te, t2)


@given(ti=st.floats(0, 3000), dti=st.floats(0.5, 500), t1=st.floats(200, 3000))
def test_kernel_t1_monotone_and_bounded(ti, dti, t1):
    a, b = kernel_t1(ti, t1), kernel_t1(ti + dti, t1)
    assert b > a
    assert -1.0 <= a < 1.0


def test_contrast_encoding_validation():
    with pytest.raises(ValueError):
        ContrastEncoding(-1.0)
    with pytest.raises(ValueError):
        ContrastEncoding(1.0, -5.0)
    with pytest.raises(ValueError):
        ContrastEncoding(float("nan"))


def test_schedule_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        validate_schedule([ContrastEncoding(10, 0), ContrastEncoding(10, 0)])


def test_standard_schedules():
    s = standard_schedule()
    assert len(s) == 105
    assert sorted({e.ti for e in s}) == [0, 100, 200, 400, 700, 1000, 2000]
    tes = sorted({e.te for e in s})
    assert tes[0] == 7.5 and tes[-1] == 217.5 and len(tes) == 15
    assert len(t1_baseline_schedule()) == 7
    t2 = t2_baseline_schedule()
    assert len(t2) == 32 and t2[0].te == 10 and t2[-1].te == 320 and t2[0].ti is None


def test_log_grid():
    g = log_grid(2, 300, 100)
    assert g.size == 100 and g[0] == 2 and g[-1] == 300
    np.testing.assert_allclose(log_grid(1, 100, 3), [1, 10, 100], rtol=1e-14)
    r = np.diff(np.log(log_grid(100, 3000, 100)))
    np.testing.assert_allclose(np.exp(r), 30 ** (1 / 99), rtol=1e-12)


@pytest.mark.parametrize("args", [(0, 10, 5), (10, 10, 5), (10, 5, 5), (1, 10, 1)])
def test_log_grid_errors(args):
    with pytest.raises(ValueError):
        log_grid(*args)


def test_quadrature_weights():
    np.testing.assert_allclose(quadrature_weights([1, math.e, math.e**2]), [0.5, 1.0, 0.5], rtol=1e-14)
    nodes = 3.0 * 1.2 ** np.arange(10)
    w = quadrature_weights(nodes)
    np.testing.assert_allclose(w[1:-1], math.log(1.2), rtol=1e-12)
    np.testing.assert_allclose(w[[0, -1]], math.log(1.2) / 2, rtol=1e-12)
    assert quadrature_weights([42.0]).tolist() == [1.0]


def test_grid_weights_outer_product_t1_major():
    g = SpectralGrid(np.array([1.0, 2.0, 4.0]), np.array([1.0, 3.0]))
    expected = np.outer(quadrature_weights([1, 2, 4]), quadrature_weights([1, 3])).ravel()
    np.testing.assert_array_equal(g.weights, expected)
    t1, t2 = g.nodes()
    assert t1.tolist() == [1, 1, 2, 2, 4, 4] and t2.tolist() == [1, 3] * 3


def test_grid_validation():
    with pytest.raises(ValueError):
        SpectralGrid(np.array([2.0, 1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        SpectralGrid(np.array([1.0, 2.0]), np.array([-1.0]))
    with pytest.raises(ValueError):
        SpectralGrid(np.array([1.0, 2.0]), np.array([1.0]), weights=np.array([1.0, 0.0]))


def test_standard_dictionary_shape():
    grid = SpectralGrid.logarithmic((100, 3000), (2, 300), 100, 100)
    d = build_dictionary(standard_schedule(), grid)
    assert d.kernel.shape == (105, 10_000)
    assert np.all(np.isfinite(d.kernel))
    assert np.all(np.abs(d.kernel) <= grid.weights[None, :] * (1 + 1e-15))


def test_dictionary_origin_row():
    grid = SpectralGrid(np.array([100.0, 200.0]), np.array([10.0, 20.0, 40.0]), weights=np.ones(6))
    d = build_dictionary([ContrastEncoding(0.0, 0.0)], grid)
    assert d.kernel.tolist() == [[-1.0] * 6]


def test_dictionary_entrywise_oracle():
    grid = SpectralGrid(np.array([300.0, 900.0, 2000.0]), np.array([50.0]), None)
    grid2 = SpectralGrid(np.array([300.0, 900.0]), np.array([20.0, 80.0]))
    sched = [ContrastEncoding(10.0, 50.0), ContrastEncoding(40.0, 800.0)]
    for g, mode in ((grid2, Mode.T1T2), (grid, Mode.T1)):
        d = build_dictionary(sched, g, mode)
        t1, t2 = g.nodes()
        for p, enc in enumerate(sched):
            for q in range(g.size):
                if mode is Mode.T1T2:
                    ref = g.weights[q] * kernel_t1t2(enc, t1[q], t2[q])
                else:
                    ref = g.weights[q] * kernel_t1(enc.ti, t1[q])
                assert d.kernel[p, q] == pytest.approx(ref, rel=1e-15)


def test_dictionary_t2_mode_omits_inversion():
    g = SpectralGrid.logarithmic(None, (10, 100), n2=5)
    d = build_dictionary(t2_baseline_schedule(), g, Mode.T2)
    te = np.array([e.te for e in t2_baseline_schedule()])
    np.testing.assert_allclose(d.kernel, g.weights * np.exp(-te[:, None] / g.t2_values[None, :]), rtol=1e-15)


def test_dictionary_mode_mismatch():
    g = SpectralGrid.logarithmic((100, 1000), (10, 100), 4, 4)
    with pytest.raises(ConfigurationError):
        build_dictionary(t2_baseline_schedule(), g, Mode.T2)
    with pytest.raises(ConfigurationError):
        build_dictionary(t2_baseline_schedule(), g, Mode.T1T2)
    with pytest.raises(ConfigurationError):
        build_dictionary([], g)


def test_dictionary_deterministic():
    g = SpectralGrid.logarithmic((100, 3000), (2, 300), 20, 20)
    a = build_dictionary(standard_schedule(), g).kernel
    b = build_dictionary(standard_schedule(), g).kernel
    assert a.tobytes() == b.tobytes()


@settings(max_examples=30, deadline=None)
@given(data=st.data())
def test_dictionary_consistency_with_simulate_signal(data):
    grid = SpectralGrid.logarithmic((100, 3000), (2, 300), 12, 9)
    n = data.draw(st.integers(1, 4))
    idx = data.draw(st.lists(st.integers(0, grid.size - 1), min_size=n, max_size=n, unique=True))
    amps = data.draw(st.lists(st.floats(0.0, 10.0), min_size=n, max_size=n))
    t1, t2 = grid.nodes()
    model = CompartmentModel(tuple(amps), tuple(t1[idx]), tuple(t2[idx]))
    d = build_dictionary(standard_schedule(), grid)
    sig = simulate_signal(model, standard_schedule())
    np.testing.assert_allclose(d.kernel @ place_compartments(model, grid), sig, rtol=1e-12, atol=1e-12)


def test_compartment_model_validation():
    with pytest.raises(ValueError):
        CompartmentModel((), (), ())
    with pytest.raises(ValueError):
        CompartmentModel((1.0,), (0.0,), (10.0,))
    with pytest.raises(ValueError):
        CompartmentModel((-1.0,), (10.0,), (10.0,))


def test_product_schedule_order():
    s = product_schedule([0, 100], [10, 20])
    assert [(e.ti, e.te) for e in s] == [(0, 10), (0, 20), (100, 10), (100, 20)]
