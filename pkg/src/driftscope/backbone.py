"""Backbone/residual decomposition and the analyses built on it.

Given a unit backbone direction ``v`` and raw drifts ``x(t) = theta(t) - theta(anchor)``:

    a(t)   = <x(t), v>            signed backbone coordinate
    r(t)   = x(t) - a(t) v        residual, orthogonal to v
    f_b(t) = a(t)^2 / |x(t)|^2    backbone fraction
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from driftscope.checkpoint import Checkpoint, DriftMatrix, Trajectory, TrunkSelector, as_trajectory, flatten_trunk
from driftscope.pca import TrajectorySpectrum

UNIT_TOL = 1e-8


def _check_unit(v, dim: int | None = None) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    if dim is not None and v.size != dim:
        raise ValueError(f"direction has dimension {v.size}, expected {dim}")
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"direction must be unit norm (got {n:.12g})")
    return v


@dataclass
class BackboneDecomposition:
    steps: np.ndarray
    coords: np.ndarray
    residual_norms: np.ndarray
    drift_norms: np.ndarray
    fractions: np.ndarray
    anchor_step: int = 0

    def pythagorean_error(self) -> np.ndarray:
        """Relative violation of ``a^2 + |r|^2 = |x|^2`` per row."""
        lhs = self.coords ** 2 + self.residual_norms ** 2
        rhs = self.drift_norms ** 2
        scale = np.where(rhs > 0, rhs, 1.0)
        return np.abs(lhs - rhs) / scale


def decompose(drift: DriftMatrix, v_b, return_residuals: bool = False):
    """Split each raw drift row into backbone coordinate and residual."""
    if drift.row_normalized:
        raise ValueError("decompose needs raw (un-normalized) drift rows")
    v = _check_unit(v_b, drift.dim)
    x = drift.rows
    a = x @ v
    r = x - np.outer(a, v)
    # second projection pass: keeps <r, v> at rounding level of |r|, not |x|
    c = r @ v
    r -= np.outer(c, v)
    a = a + c
    r_norm = np.linalg.norm(r, axis=1)
    x_norm = np.linalg.norm(x, axis=1)
    sq = x_norm ** 2
    fb = np.divide(a ** 2, sq, out=np.zeros_like(a), where=sq > 0)
    out = BackboneDecomposition(
        steps=drift.steps.copy(),
        coords=a,
        residual_norms=r_norm,
        drift_norms=x_norm,
        fractions=np.clip(fb, 0.0, 1.0),
        anchor_step=drift.anchor_step,
    )
    if return_residuals:
        return out, r
    return out


# -- power laws --------------------------------------------------------------

@dataclass
class PowerLawFit:
    window: tuple[float, float]
    gamma: float
    coefficient: float
    r2: float
    n: int


def fit_power_law(steps, values, window: tuple[float, float] | None = None) -> PowerLawFit:
    """Least-squares line through ``(log t, log value)`` on the window.

    Only samples with ``t > 0`` and ``value > 0`` inside ``[lo, hi]`` are
    used; callers fitting ``|a(t)|`` pass the absolute values.
    """
    t = np.asarray(steps, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.shape != y.shape:
        raise ValueError("steps and values differ in length")
    lo, hi = window if window is not None else (t.min(), t.max())
    use = (t >= lo) & (t <= hi) & (t > 0) & (y > 0) & np.isfinite(y)
    if use.sum() < 3:
        raise ValueError(f"need >= 3 positive samples in [{lo}, {hi}], have {int(use.sum())}")
    lx, ly = np.log(t[use]), np.log(y[use])
    mx, my = lx.mean(), ly.mean()
    dx, dy = lx - mx, ly - my
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("all steps in the window are equal")
    slope = float(dx @ dy) / sxx
    intercept = my - slope * mx
    resid = ly - (intercept + slope * lx)
    ss_res = float(resid @ resid)
    ss_tot = float(dy @ dy)
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return PowerLawFit((float(lo), float(hi)), slope, math.exp(intercept), r2, int(use.sum()))


# -- alignment ---------------------------------------------------------------

@dataclass
class AlignmentSeries:
    steps: np.ndarray
    signed: np.ndarray
    noise_floor: float
    label: str = ""

    @property
    def absolute(self) -> np.ndarray:
        return np.abs(self.signed)

    @property
    def mean_abs(self) -> float:
        return float(np.mean(np.abs(self.signed)))

    def sign_changes(self) -> list[int]:
        """Steps at which the signed cosine changes sign (reported at the later step)."""
        s = np.sign(self.signed)
        flips = np.flatnonzero((s[:-1] * s[1:]) < 0) + 1
        return [int(self.steps[i]) for i in flips]


def noise_floor(dim: int) -> float:
    """Typical |cos| between a random direction and a fixed unit vector in R^dim."""
    return 1.0 / math.sqrt(dim)


def update_alignment(ckpts, v_b, interval: int, sel: TrunkSelector | None = None) -> AlignmentSeries:
    """Signed cosine between ``u(t) = theta(t) - theta(t - interval)`` and the backbone."""
    traj = as_trajectory(ckpts, sel)
    v = _check_unit(v_b, traj.dim)
    if interval <= 0:
        raise ValueError("interval must be positive")
    steps = traj.steps
    present = set(steps.tolist())
    ends = [int(s) for s in steps if s - interval >= steps[0]]
    if not ends:
        raise ValueError(f"no checkpoint pairs {interval} steps apart")
    missing = [s for s in ends if s - interval not in present]
    if missing:
        raise ValueError(f"missing checkpoints at steps {[s - interval for s in missing]}")
    cos = []
    for s in ends:
        u = traj.at(s) - traj.at(s - interval)
        n = float(np.linalg.norm(u))
        if n == 0.0:
            raise ValueError(f"zero-norm update ending at step {s}")
        cos.append(float(u @ v) / n)
    return AlignmentSeries(np.array(ends), np.clip(np.array(cos), -1.0, 1.0), noise_floor(traj.dim),
                           label=f"update/{interval}")


def gradient_alignment(grads, v_b, steps=None) -> AlignmentSeries:
    """Cosine between each per-batch gradient and the backbone."""
    g = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    v = _check_unit(v_b, g.shape[1])
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero gradient vector")
    cos = np.clip((g @ v) / norms, -1.0, 1.0)
    idx = np.arange(g.shape[0]) if steps is None else np.asarray(steps)
    return AlignmentSeries(idx, cos, noise_floor(g.shape[1]), label="gradient")


# -- switching directions ----------------------------------------------------

@dataclass
class SwitchAnalysis:
    peak_step: int
    trough_step: int
    direction: np.ndarray
    signed_overlap: float
    transverse: np.ndarray | None
    residual_capture: float  # E_{2:6}
    pc1_capture: float
    tail_capture: float
    components_used: int
    truncated: bool
    degenerate: bool

    @property
    def overlap(self) -> float:
        return abs(self.signed_overlap)

    @property
    def backbone_share(self) -> float:
        return self.signed_overlap ** 2


def switch_direction(peak, trough, v_b, spectrum: TrajectorySpectrum, sel: TrunkSelector | None = None,
                     peak_step: int | None = None, trough_step: int | None = None,
                     first: int = 2, last: int = 6) -> SwitchAnalysis:
    """Unit peak-minus-trough displacement, its backbone overlap and residual-PC capture.

    ``peak``/``trough`` may be checkpoints or already-flattened vectors.
    """
    pv = _flat(peak, sel)
    tv = _flat(trough, sel)
    if peak_step is None:
        peak_step = peak.step if isinstance(peak, Checkpoint) else -1
    if trough_step is None:
        trough_step = trough.step if isinstance(trough, Checkpoint) else -1
    v = _check_unit(v_b, pv.size)
    d = pv - tv
    n = float(np.linalg.norm(d))
    if n == 0.0:
        raise ValueError("peak and trough parameters are identical")
    vsw = d / n
    ov = float(vsw @ v)
    perp = vsw - ov * v
    perp -= float(perp @ v) * v
    pn = float(np.linalg.norm(perp))
    vecs = spectrum.vectors
    if vecs.shape[1] != pv.size:
        raise ValueError("spectrum vectors have the wrong dimension")
    avail = vecs.shape[0]
    hi = min(last, avail)
    truncated = hi < last
    if pn < 1e-12:
        return SwitchAnalysis(int(peak_step), int(trough_step), vsw, ov, None, math.nan, math.nan, math.nan,
                              max(0, hi - first + 1), truncated, True)
    perp /= pn
    proj = vecs[:hi] @ perp
    e26 = float(np.sum(proj[first - 1:hi] ** 2))
    pc1 = float(proj[0] ** 2)
    tail_vec = perp - vecs[:hi].T @ proj
    tail = float(tail_vec @ tail_vec)
    return SwitchAnalysis(int(peak_step), int(trough_step), vsw, ov, perp, min(1.0, e26), pc1, tail,
                          max(0, hi - first + 1), truncated, False)


def _flat(obj, sel) -> np.ndarray:
    if isinstance(obj, Checkpoint):
        return flatten_trunk(obj, sel)
    return np.asarray(obj, dtype=np.float64).ravel()


def pairwise_cosines(directions) -> np.ndarray:
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.clip(d @ d.T, -1.0, 1.0)


def find_extrema(steps, values, radius: int = 3, prominence: float = 0.05):
    """Peaks and troughs of a noisy evaluation series.

    A sample is a peak when it is the largest value within ``radius``
    evaluations on either side and rises at least ``prominence`` above the
    lowest of those neighbours; troughs mirror this.
    """
    s = np.asarray(steps)
    y = np.asarray(values, dtype=np.float64)
    peaks, troughs = [], []
    for i in range(y.size):
        lo, hi = max(0, i - radius), min(y.size, i + radius + 1)
        nb = np.concatenate([y[lo:i], y[i + 1:hi]])
        if nb.size == 0:
            continue
        if y[i] > nb.max() and y[i] - nb.min() >= prominence:
            peaks.append(int(s[i]))
        elif y[i] < nb.min() and nb.max() - y[i] >= prominence:
            troughs.append(int(s[i]))
    return peaks, troughs


def switch_pairs(peaks, troughs) -> list[tuple[int, int]]:
    """Pair each peak with the first trough after it."""
    out = []
    for p in peaks:
        later = [t for t in troughs if t > p]
        if later:
            out.append((p, later[0]))
    return out


# -- correlation -------------------------------------------------------------

@dataclass
class CorrelationReport:
    window: tuple[float, float]
    r: float
    n: int


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("series differ in length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 paired samples")
    dx = x - math.fsum(x) / x.size
    dy = y - math.fsum(y) / y.size
    sxx = math.fsum(dx * dx)
    syy = math.fsum(dy * dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("zero variance series")
    r = math.fsum(dx * dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def correlate(steps, xs, ys, window: tuple[float, float] | None = None) -> CorrelationReport:
    s = np.asarray(steps, dtype=np.float64)
    lo, hi = window if window is not None else (s.min(), s.max())
    use = (s >= lo) & (s <= hi)
    x = np.asarray(xs, dtype=np.float64)[use]
    y = np.asarray(ys, dtype=np.float64)[use]
    return CorrelationReport((float(lo), float(hi)), pearson(x, y), int(use.sum()))


def drift_norm(traj: Trajectory, start: int, end: int) -> float:
    return float(np.linalg.norm(traj.at(end) - traj.at(start)))
