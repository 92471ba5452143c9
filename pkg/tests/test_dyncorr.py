import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatdfc.dyncorr import (
    DynCorrSeries,
    WindowSpec,
    dyncorr_matrix,
    heat_dyncorr,
    make_params,
    total_variation,
    upper_edges,
    window_offsets,
    window_weights,
    windowed_corr,
)
from heatdfc.errors import ZeroVariance
from heatdfc.signal import RoiMatrix, mirror_reflect, rescale_unit, time_grid
from heatdfc.spectral import HeatKernelParams, basis_matrix


def direct_weighted_pearson(xs, ys, w):
    """Textbook weighted Pearson, written out term by term."""
    mx = sum(wi * xi for wi, xi in zip(w, xs))
    my = sum(wi * yi for wi, yi in zip(w, ys))
    cov = sum(wi * (xi - mx) * (yi - my) for wi, xi, yi in zip(w, xs, ys))
    vx = sum(wi * (xi - mx) ** 2 for wi, xi in zip(w, xs))
    vy = sum(wi * (yi - my) ** 2 for wi, yi in zip(w, ys))
    return cov / math.sqrt(vx * vy)


def smooth_subject(rng, n_time=120, n_regions=4, degree=8):
    grid = time_grid(n_time)
    coef = rng.normal(size=(degree + 1, n_regions))
    return RoiMatrix(basis_matrix(grid, degree) @ coef, "smooth")


# ---- windows -------------------------------------------------------------


def test_square_weights():
    np.testing.assert_array_equal(window_weights(WindowSpec("square", 4)), [0.25] * 4)


@given(st.integers(2, 40), st.floats(0.5, 6.0))
def test_tapered_weights_normalized_and_symmetric(m, bw):
    w = window_weights(WindowSpec("tapered", m, bw))
    assert abs(w.sum() - 1.0) <= 1e-12
    np.testing.assert_allclose(w, w[::-1], atol=1e-15)
    assert np.all(w >= 0)


def test_tapered_weights_direct_convolution():
    m, bw = 15, 3.0
    half = math.ceil(3 * bw)
    gauss = [math.exp(-(k * k) / (2 * bw * bw)) for k in range(-half, half + 1)]
    total = sum(gauss)
    gauss = [g / total for g in gauss]
    support = m + 2 * half
    expected = [0.0] * support
    for a in range(m):
        for b, g in enumerate(gauss):
            expected[a + b] += g / m
    total = sum(expected)
    expected = [e / total for e in expected]
    w = window_weights(WindowSpec("tapered", m, bw))
    assert w.size == 33
    np.testing.assert_allclose(w, expected, atol=1e-15)
    assert np.all(w > 0)
    peak = int(np.argmax(w))
    assert np.all(np.diff(w[: peak + 1]) >= 0) and np.all(np.diff(w[peak:]) <= 0)


def test_window_offsets_span():
    # W_i = [floor(i - m/2 + 1), floor(i + m/2)]
    for m in (4, 5, 15, 33):
        off = window_offsets(m)
        assert off[0] == math.floor(-m / 2 + 1)
        assert off[-1] == math.floor(m / 2)
        assert off.size == m


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec("square", 1)
    with pytest.raises(ValueError):
        WindowSpec("round", 5)


# ---- windowed correlation ------------------------------------------------


def test_windowed_identical_and_negated(rng):
    x = rng.normal(size=30)
    cx = mirror_reflect(x)
    spec = WindowSpec("square", 8)
    assert windowed_corr(cx, cx, spec, 10) == pytest.approx(1.0, abs=1e-12)
    assert windowed_corr(cx, mirror_reflect(-x + 7), spec, 10) == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("kind", ["square", "tapered"])
def test_windowed_matches_brute_force(rng, kind):
    x, y = rng.normal(size=(2, 25))
    cx, cy = mirror_reflect(x), mirror_reflect(y)
    spec = WindowSpec(kind, 8, 2.0)
    w = window_weights(spec)
    for i in range(50):
        idx = [(i + o) % 50 for o in window_offsets(w.size)]
        xs = [cx.values[j] for j in idx]
        ys = [cy.values[j] for j in idx]
        assert windowed_corr(cx, cy, spec, i) == pytest.approx(direct_weighted_pearson(xs, ys, w), abs=1e-12)


def test_windowed_circular_indexing(rng):
    x, y = rng.normal(size=(2, 17))
    cx, cy = mirror_reflect(x), mirror_reflect(y)
    spec = WindowSpec("tapered", 6, 3.0)
    for i in range(34):
        assert windowed_corr(cx, cy, spec, i) == windowed_corr(cx, cy, spec, i + 34)


def test_windowed_constant_window_raises():
    x = np.r_[np.zeros(10), np.arange(10.0)]
    cx = mirror_reflect(x)
    cy = mirror_reflect(np.arange(20.0))
    with pytest.raises(ZeroVariance):
        windowed_corr(cx, cy, WindowSpec("square", 4), 4)


# ---- heat kernel correlation ---------------------------------------------


def test_heat_identical_pair_is_one(rng):
    x = rescale_unit(rng.normal(size=100))
    rho = heat_dyncorr(x, x, HeatKernelParams.from_fwhm(15, 100), clamp=False)
    np.testing.assert_allclose(rho, 1.0, atol=1e-9)


def test_heat_constant_partner_raises(rng):
    x = rng.normal(size=50)
    with pytest.raises(ZeroVariance) as info:
        heat_dyncorr(x, np.full(50, 0.3), HeatKernelParams.from_fwhm(10, 50))
    assert info.value.where is not None


def test_heat_negated_pair(rng):
    x = rng.normal(size=80)
    rho = heat_dyncorr(x, 5 - 2 * x, HeatKernelParams.from_fwhm(12, 80), clamp=False)
    np.testing.assert_allclose(rho, -1.0, atol=1e-9)


# ---- full matrices -------------------------------------------------------


@pytest.mark.parametrize("method", ["sw", "tsw", "heat"])
def test_two_regions_reduce_to_pair_estimator(rng, method):
    roi = RoiMatrix(rng.normal(size=(60, 2)), "p2")
    series = dyncorr_matrix(roi, method, fwhm_tr=10)
    scaled = roi.rescaled().values
    params = make_params(method, 60, 10)
    if method == "heat":
        expected = heat_dyncorr(scaled[:, 0], scaled[:, 1], params)
    else:
        cx, cy = mirror_reflect(scaled[:, 0]), mirror_reflect(scaled[:, 1])
        expected = [windowed_corr(cx, cy, params, i) for i in range(60)]
    assert series.values.shape == (60, 1)
    np.testing.assert_allclose(series.values[:, 0], expected, atol=1e-10)


@pytest.mark.parametrize("method", ["sw", "tsw", "heat"])
def test_matrices_symmetric_unit_diagonal(rng, method):
    series = dyncorr_matrix(RoiMatrix(rng.normal(size=(50, 5))), method, fwhm_tr=8)
    assert np.all(np.abs(series.values) <= 1.0)
    for j in (0, 17, 49):
        c = series.matrix(j)
        np.testing.assert_array_equal(c, c.T)
        np.testing.assert_array_equal(np.diag(c), 1.0)


@pytest.mark.parametrize("method", ["sw", "tsw", "heat"])
def test_duplicate_region_is_perfectly_correlated(rng, method):
    data = rng.normal(size=(70, 3))
    data[:, 2] = data[:, 0]
    series = dyncorr_matrix(RoiMatrix(data), method, fwhm_tr=10)
    edge = [tuple(e) for e in series.edges].index((0, 2))
    np.testing.assert_allclose(series.values[:, edge], 1.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.01, 100),
    st.floats(-1e3, 1e3),
    st.sampled_from(["sw", "tsw", "heat"]),
)
def test_affine_invariance(seed, scale, shift, method):
    data = np.random.default_rng(seed).normal(size=(40, 3))
    base = dyncorr_matrix(RoiMatrix(data), method, fwhm_tr=8).values
    moved = data.copy()
    moved[:, 1] = scale * moved[:, 1] + shift
    out = dyncorr_matrix(RoiMatrix(moved), method, fwhm_tr=8).values
    np.testing.assert_allclose(out, base, atol=1e-10)


@pytest.mark.parametrize("method", ["sw", "tsw", "heat"])
def test_clamping_inactive_on_smooth_signals(rng, method):
    series = dyncorr_matrix(smooth_subject(rng), method, fwhm_tr=15, clamp=False)
    assert series.clamped_fraction < 1e-3


def test_zero_variance_is_tagged_with_subject_and_edges():
    data = np.random.default_rng(1).normal(size=(40, 3))
    data[:25, 1] = 0.5
    with pytest.raises(ZeroVariance, match="subj-x") as info:
        dyncorr_matrix(RoiMatrix(data, "subj-x"), "sw", fwhm_tr=6)
    assert "1-2" in info.value.where["edges"]


def test_edge_subset(rng):
    roi = RoiMatrix(rng.normal(size=(40, 5)))
    full = dyncorr_matrix(roi, "heat", fwhm_tr=8)
    part = dyncorr_matrix(roi, "heat", fwhm_tr=8, edges=[(1, 3), (0, 4)])
    cols = [[tuple(e) for e in full.edges].index(p) for p in [(1, 3), (0, 4)]]
    np.testing.assert_array_equal(part.values, full.values[:, cols])


def test_upper_edges_order():
    assert [tuple(e) for e in upper_edges(4)] == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_total_variation():
    np.testing.assert_array_equal(total_variation(np.array([[0.0], [1.0], [0.5]])), [1.5])


# ---- persistence ---------------------------------------------------------


@pytest.mark.parametrize("suffix", [".csv", ".bin"])
def test_series_roundtrip(tmp_path, rng, suffix):
    series = dyncorr_matrix(RoiMatrix(rng.normal(size=(30, 4)), "s1"), "tsw", fwhm_tr=6)
    path = tmp_path / f"s1{suffix}"
    if suffix == ".bin":
        series.to_binary(path)
        assert path.stat().st_size == 30 * 6 * 8
    else:
        series.to_csv(path)
        assert path.read_text().splitlines()[0].startswith("t,e_1_2,e_1_3")
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    assert meta["T"] == 30 and meta["p"] == 4 and meta["method"] == "tsw"
    assert meta["edges"][0] == [1, 2]
    back = DynCorrSeries.load(path)
    np.testing.assert_array_equal(back.values, series.values)
    np.testing.assert_array_equal(back.edges, series.edges)
    assert back.subject_id == "s1"
