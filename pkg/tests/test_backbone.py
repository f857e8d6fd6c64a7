import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftscope.backbone import (correlate, decompose, find_extrema, fit_power_law, gradient_alignment,
                                 noise_floor, pairwise_cosines, pearson, switch_direction, switch_pairs,
                                 update_alignment)
from driftscope.checkpoint import DriftMatrix, Trajectory
from driftscope.pca import uncentered_svd


def _drift(rows):
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return DriftMatrix(0, np.arange(1, len(rows) + 1), rows)


def test_decompose_examples():
    v = np.array([1.0, 0.0, 0.0])
    dec = decompose(_drift([[5, 0, 0], [3, 4, 0], [0, 2, 1], [0, 0, 0]]), v)
    np.testing.assert_allclose(dec.coords, [5, 3, 0, 0])
    np.testing.assert_allclose(dec.residual_norms, [0, 4, math.sqrt(5), 0])
    np.testing.assert_allclose(dec.fractions, [1, 0.36, 0, 0])


def test_decompose_errors():
    with pytest.raises(ValueError):
        decompose(_drift([[1, 2]]), [1.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        decompose(_drift([[1, 2]]), [1.0, 1.0])
    with pytest.raises(ValueError):
        decompose(DriftMatrix(0, np.array([1]), np.ones((1, 2)), row_normalized=True), [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 300), st.floats(1e-6, 1e6))
def test_pythagorean_and_orthogonality(seed, D, scale):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((5, D)) * scale
    v = rng.standard_normal(D)
    v /= np.linalg.norm(v)
    dec, r = decompose(_drift(X), v, return_residuals=True)
    assert dec.pythagorean_error().max() <= 1e-9
    assert np.all(np.abs(r @ v) <= 1e-10 * np.maximum(dec.residual_norms, 1e-300))
    assert np.all((dec.fractions >= 0) & (dec.fractions <= 1))


@pytest.mark.parametrize("gamma", [1.5, -1.4, -0.2, 0.7, 2.1])
def test_power_law_exact(gamma):
    t = np.arange(100, 1001, 50, dtype=np.float64)
    fit = fit_power_law(t, 2.0 * t ** gamma)
    assert fit.gamma == pytest.approx(gamma, abs=1e-10)
    assert fit.coefficient == pytest.approx(2.0, abs=1e-9)
    assert fit.r2 == 1.0


def test_power_law_constant_and_errors():
    t = np.arange(1, 10, dtype=np.float64)
    fit = fit_power_law(t, np.full(t.size, 3.0))
    assert fit.gamma == pytest.approx(0.0, abs=1e-15) and fit.r2 == 1.0
    with pytest.raises(ValueError):
        fit_power_law([1, 2, 3], [1, 0, -1])
    with pytest.raises(ValueError):
        fit_power_law([5, 5, 5], [1, 2, 3])


def test_power_law_noise_matches_independent_regression():
    rng = np.random.default_rng(0)
    t = np.arange(40, 2001, 40, dtype=np.float64)
    y = 0.3 * t ** 0.8 * np.exp(rng.normal(0, 0.1, t.size))
    y[3] = 0.0  # dropped
    fit = fit_power_law(t, y, (100, 1500))
    use = (t >= 100) & (t <= 1500) & (y > 0)
    A = np.vstack([np.log(t[use]), np.ones(use.sum())]).T
    (slope, icept), *_ = np.linalg.lstsq(A, np.log(y[use]), rcond=None)
    assert fit.gamma == pytest.approx(slope, abs=1e-12)
    assert math.log(fit.coefficient) == pytest.approx(icept, abs=1e-11)
    assert 0 <= fit.r2 <= 1 and fit.n == use.sum()


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 100), st.floats(0.1, 100), st.integers(0, 2**32 - 1))
def test_power_law_rescaling(cy, ct, seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(10, 500, 25)
    y = t ** 0.5 * np.exp(rng.normal(0, 0.2, t.size))
    base = fit_power_law(t, y)
    ys = fit_power_law(t, cy * y)
    assert ys.gamma == pytest.approx(base.gamma, abs=1e-9)
    assert ys.coefficient == pytest.approx(cy * base.coefficient, rel=1e-9)
    ts = fit_power_law(ct * t, y)
    assert ts.gamma == pytest.approx(base.gamma, abs=1e-9)


def _traj(points, spacing=200):
    return Trajectory(np.arange(len(points)) * spacing, np.asarray(points, dtype=np.float64))


def test_update_alignment_monotone_and_reversal():
    v = np.eye(4)[0]
    fwd = _traj([t * v for t in range(6)])
    al = update_alignment(fwd, v, 200)
    np.testing.assert_allclose(al.signed, 1.0)
    assert al.noise_floor == 0.5
    turn = _traj([-t * v for t in range(4)] + [(-3 + t) * v for t in range(1, 5)])
    al = update_alignment(turn, v, 200)
    assert al.signed[0] < 0 < al.signed[-1]
    assert al.sign_changes() == [800]
    with pytest.raises(ValueError):
        update_alignment(fwd, v, 300)
    with pytest.raises(ValueError):
        update_alignment(_traj([v, v, 2 * v]), v, 200)


def test_update_alignment_random_walk_near_floor():
    rng = np.random.default_rng(0)
    D = 4000
    v = rng.standard_normal(D)
    v /= np.linalg.norm(v)
    pts = np.cumsum(rng.standard_normal((60, D)), axis=0)
    al = update_alignment(_traj(pts), v, 200)
    assert al.mean_abs < 3 * noise_floor(D)


def test_gradient_alignment():
    v = np.eye(3)[2]
    al = gradient_alignment([v, np.eye(3)[0]], v)
    np.testing.assert_allclose(al.absolute, [1.0, 0.0])
    with pytest.raises(ValueError):
        gradient_alignment([np.zeros(3)], v)
    rng = np.random.default_rng(1)
    D = 10_000
    w = rng.standard_normal(D)
    w /= np.linalg.norm(w)
    g = rng.standard_normal((200, D))
    mean = gradient_alignment(g, w).mean_abs
    assert mean == pytest.approx(math.sqrt(2 / math.pi) / math.sqrt(D), rel=0.5)


def _spectrum(dim=10):
    rng = np.random.default_rng(3)
    X = rng.standard_normal((8, dim)) * np.array([10, 5, 3, 2, 1.5, 1, 0.5, 0.2, 0.1, 0.05])[:dim]
    return uncentered_svd(X)


def test_switch_direction_examples():
    spec = _spectrum()
    v1, v2 = spec.vectors[0], spec.vectors[1]
    base = np.zeros(10)
    sw = switch_direction(base + v2, base, v1, spec)
    assert sw.overlap == pytest.approx(0, abs=1e-12) and sw.residual_capture == pytest.approx(1, abs=1e-12)
    assert abs(sw.transverse @ v1) <= 1e-10
    sw = switch_direction(base + v1, base, v1, spec)
    assert sw.degenerate and sw.overlap == pytest.approx(1.0)
    sw = switch_direction(base + (v1 + v2) / np.sqrt(2), base, v1, spec)
    assert sw.overlap == pytest.approx(1 / np.sqrt(2), abs=1e-12)
    assert sw.residual_capture == pytest.approx(1, abs=1e-12)
    with pytest.raises(ValueError):
        switch_direction(base, base, v1, spec)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_switch_energy_budget(seed):
    spec = _spectrum()
    d = np.random.default_rng(seed).standard_normal(10)
    sw = switch_direction(d, np.zeros(10), spec.vectors[0], spec)
    total = sw.residual_capture + sw.pc1_capture + sw.tail_capture
    assert total == pytest.approx(1.0, abs=1e-10)


def test_switch_truncated_spectrum():
    spec = uncentered_svd(np.random.default_rng(0).standard_normal((3, 10)))
    sw = switch_direction(np.ones(10), np.zeros(10), spec.vectors[0], spec)
    assert sw.truncated and sw.components_used == 2


def test_pairwise_and_extrema():
    c = pairwise_cosines([[1, 0], [0, 2], [1, 1]])
    np.testing.assert_allclose(np.diag(c), 1)
    assert c[0, 2] == pytest.approx(1 / np.sqrt(2))
    steps = np.arange(0, 400, 20)
    y = np.array([.1, .2, .3, .8, .3, .2, .1, .1, .05, .1, .2, .3, .3, .2, .1, .0, .1, .2, .2, .2])
    peaks, troughs = find_extrema(steps, y)
    assert 60 in peaks and 160 in troughs and 300 in troughs
    assert switch_pairs(peaks, troughs)[0] == (60, 160)
    flat_peaks, flat_troughs = find_extrema(steps, np.full(steps.size, 0.5))
    assert flat_peaks == [] and flat_troughs == []


def _pearson_fraction(xs, ys):
    xs = [Fraction(x) for x in xs]
    ys = [Fraction(y) for y in ys]
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    sxx = sum((a - mx) ** 2 for a in xs)
    syy = sum((b - my) ** 2 for b in ys)
    return float(sxy) / math.sqrt(float(sxx) * float(syy))


def test_pearson():
    x = np.arange(10.0)
    assert pearson(x, 2 * x + 1) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError):
        pearson(x, np.ones(10))
    with pytest.raises(ValueError):
        pearson([1, 2], [3, 4])
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        assert pearson(a, b) == pytest.approx(_pearson_fraction(a, b), abs=1e-12)


def test_correlate_window():
    steps = np.arange(0, 200, 10)
    xs = np.sin(steps / 30.0)
    rep = correlate(steps, xs, 3 * xs, (50, 150))
    assert rep.n == 11 and rep.r == pytest.approx(1.0)
