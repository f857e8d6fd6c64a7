"""Uncentered PCA of drift matrices, rolling-window backbones and phase backbones.

Drift matrices are short and wide (T checkpoints, D parameters with T << D),
so the SVD goes through the T x T Gram matrix and never touches a D x D
object.  No mean is subtracted: the monotone drift away from the anchor is
exactly what the leading component is meant to capture.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from driftscope._parallel import parallel_map
from driftscope.checkpoint import DriftMatrix, TrunkSelector, as_trajectory

DROP_RATIO = 1e-12
DEGENERATE_RTOL = 1e-9
CUM_TOL = 1e-12


@dataclass
class TrajectorySpectrum:
    singular_values: np.ndarray
    vectors: np.ndarray  # (p, D), rows are unit right singular vectors
    fractions: np.ndarray
    k95: int
    k99: int
    left_vectors: np.ndarray | None = None  # (T, p)
    pc1_unstable: bool = False

    @property
    def rho1(self) -> float:
        return float(self.fractions[0])

    @property
    def backbone(self) -> np.ndarray:
        return self.vectors[0]

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.fractions)

    def summary(self) -> dict:
        return {
            "rho1": self.rho1,
            "rho2": float(self.fractions[1]) if self.fractions.size > 1 else 0.0,
            "k95": self.k95,
            "k99": self.k99,
            "n_components": int(self.singular_values.size),
            "pc1_unstable": self.pc1_unstable,
        }


def variance_fraction(sigma, k: int) -> float:
    """Share of total squared drift carried by component ``k`` (1-based)."""
    s = np.asarray(sigma, dtype=np.float64)
    total = float(np.sum(s * s))
    if total == 0.0:
        raise ValueError("all singular values are zero")
    if not 1 <= k <= s.size:
        raise IndexError(f"component {k} out of range 1..{s.size}")
    return float(s[k - 1] ** 2 / total)


def components_for(fractions, level: float) -> int:
    """Smallest k whose cumulative variance fraction reaches ``level``."""
    cum = np.cumsum(fractions)
    hit = np.flatnonzero(cum >= level - CUM_TOL)
    return int(hit[0]) + 1 if hit.size else int(len(fractions))


def uncentered_svd(X, top_k: int | None = None) -> TrajectorySpectrum:
    """SVD of a drift matrix through its Gram matrix.

    The leading subspace comes from the eigendecomposition of ``X X^T``;
    one Rayleigh-Ritz pass (orthonormalize ``X^T U`` and take the SVD of the
    small projected matrix) then restores full float64 accuracy for the
    trailing components.  Components below ``1e-12 * sigma_1`` are dropped.
    Each ``v_k`` is signed so the last drift row projects non-negatively.
    """
    rows = X.rows if isinstance(X, DriftMatrix) else np.asarray(X, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError("drift matrix must be 2-D")
    T = rows.shape[0]
    if T < 2:
        raise ValueError(f"need at least 2 drift rows, got {T}")
    if top_k is not None and not 1 <= top_k <= T:
        raise ValueError(f"top_k must be in 1..{T}")

    gram = rows @ rows.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0.0:
        raise ValueError("drift matrix is all zeros")
    keep = np.sqrt(np.clip(evals, 0.0, None)) >= DROP_RATIO * math.sqrt(evals[0])
    basis, _ = np.linalg.qr(rows.T @ evecs[:, keep])
    u_small, sigma, wt = np.linalg.svd(rows @ basis, full_matrices=False)
    vecs = wt @ basis.T

    keep = sigma >= DROP_RATIO * sigma[0]
    sigma, vecs, u_small = sigma[keep], vecs[keep], u_small[:, keep]

    last = rows[-1]
    for k in range(sigma.size):
        proj = float(last @ vecs[k])
        if proj == 0.0:
            proj = float(vecs[k][np.argmax(np.abs(vecs[k]))])
        if proj < 0.0:
            vecs[k] = -vecs[k]
            u_small[:, k] = -u_small[:, k]

    sq = sigma * sigma
    fractions = sq / sq.sum()
    unstable = sigma.size > 1 and (sigma[0] - sigma[1]) <= DEGENERATE_RTOL * sigma[0]
    p = sigma.size if top_k is None else min(top_k, sigma.size)
    return TrajectorySpectrum(
        singular_values=sigma,
        vectors=np.ascontiguousarray(vecs[:p]),
        fractions=fractions,
        k95=components_for(fractions, 0.95),
        k99=components_for(fractions, 0.99),
        left_vectors=np.ascontiguousarray(u_small[:, :p]),
        pc1_unstable=bool(unstable),
    )


@dataclass
class RollingBackboneSeries:
    width: int
    stride: int
    row_normalized: bool
    starts: np.ndarray
    ends: np.ndarray
    centers: np.ndarray
    directions: np.ndarray  # (n_windows, D)
    pc1_fractions: np.ndarray
    unstable: np.ndarray
    adjacent: np.ndarray  # rho(t) between window i and i+1, length n_windows - 1
    global_alignment: np.ndarray | None = None  # c(w) against a reference backbone

    def alignment_to(self, v) -> np.ndarray:
        return np.abs(self.directions @ np.asarray(v, dtype=np.float64))

    def summary(self) -> dict:
        out = {
            "width": self.width,
            "stride": self.stride,
            "n_windows": int(self.centers.size),
            "rho_mean": float(self.adjacent.mean()) if self.adjacent.size else None,
            "rho_min": float(self.adjacent.min()) if self.adjacent.size else None,
            "rho_max": float(self.adjacent.max()) if self.adjacent.size else None,
            "center_at_min": int(self.centers[int(np.argmin(self.adjacent))]) if self.adjacent.size else None,
        }
        if self.global_alignment is not None:
            out["c_mean"] = float(self.global_alignment.mean())
        return out


def rolling_backbones(ckpts, width: int = 10, stride: int = 1, row_normalize: bool = True,
                      reference=None, sel: TrunkSelector | None = None,
                      threads: int | None = None) -> RollingBackboneSeries:
    """PC1 of every ``width``-checkpoint window, re-anchored at the window start."""
    traj = as_trajectory(ckpts, sel)
    n = len(traj)
    if width < 3:
        raise ValueError("window width must be at least 3 checkpoints")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n < width + 1:
        raise ValueError(f"window of {width} checkpoints needs at least {width + 1}, have {n}")

    starts = list(range(0, n - width + 1, stride))

    def one(i):
        drift = _rows_from(traj.params[i:i + width], row_normalize)
        spec = uncentered_svd(drift, top_k=1)
        return spec.vectors[0], spec.rho1, spec.pc1_unstable

    results = parallel_map(one, starts, threads=threads)
    dirs = np.stack([r[0] for r in results])
    adjacent = np.abs(np.einsum("ij,ij->i", dirs[:-1], dirs[1:]))
    s = traj.steps
    first = np.array([s[i] for i in starts])
    last = np.array([s[i + width - 1] for i in starts])
    series = RollingBackboneSeries(
        width=width,
        stride=stride,
        row_normalized=row_normalize,
        starts=first,
        ends=last,
        centers=(first + last) // 2,
        directions=dirs,
        pc1_fractions=np.array([r[1] for r in results]),
        unstable=np.array([r[2] for r in results]),
        adjacent=np.clip(adjacent, 0.0, 1.0),
    )
    if reference is not None:
        series.global_alignment = np.clip(series.alignment_to(_unit(reference)), 0.0, 1.0)
    return series


def _rows_from(block: np.ndarray, row_normalize: bool) -> np.ndarray:
    rows = block[1:] - block[0]
    if row_normalize:
        norms = np.linalg.norm(rows, axis=1)
        nz = norms > 0
        rows[nz] /= norms[nz, None]
    return rows


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero reference vector")
    return v / n


@dataclass
class PhaseBackbones:
    early: tuple[int, int]
    late: tuple[int, int]
    v_early: np.ndarray
    v_late: np.ndarray
    rho1_early: float
    rho1_late: float
    overlap: float
    centers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    align_early: np.ndarray = field(default_factory=lambda: np.zeros(0))
    align_late: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        return {
            "early": list(self.early),
            "late": list(self.late),
            "rho1_early": self.rho1_early,
            "rho1_late": self.rho1_late,
            "overlap": self.overlap,
            "angle_deg": math.degrees(math.acos(min(1.0, self.overlap))),
        }


def phase_backbone(ckpts, interval: tuple[int, int], row_normalize: bool = True,
                   sel: TrunkSelector | None = None) -> TrajectorySpectrum:
    """Spectrum of the drift over ``[lo, hi]``, anchored at the interval's first checkpoint."""
    traj = as_trajectory(ckpts, sel)
    lo, hi = interval
    sub = traj.window(lo, hi)
    if len(sub) < 3:
        raise ValueError(
            f"interval [{lo}, {hi}] holds {len(sub)} checkpoints; need an anchor plus at least 2"
        )
    return uncentered_svd(sub.drift(int(sub.steps[0]), row_normalize))


def phase_backbones(ckpts, early: tuple[int, int], late: tuple[int, int], row_normalize: bool = True,
                    rolling: RollingBackboneSeries | None = None,
                    sel: TrunkSelector | None = None) -> PhaseBackbones:
    traj = as_trajectory(ckpts, sel)
    spec_e = phase_backbone(traj, early, row_normalize)
    spec_l = phase_backbone(traj, late, row_normalize)
    v_e, v_l = spec_e.backbone, spec_l.backbone
    out = PhaseBackbones(
        early=(int(early[0]), int(early[1])),
        late=(int(late[0]), int(late[1])),
        v_early=v_e,
        v_late=v_l,
        rho1_early=spec_e.rho1,
        rho1_late=spec_l.rho1,
        overlap=float(min(1.0, abs(v_e @ v_l))),
    )
    if rolling is not None:
        out.centers = rolling.centers
        out.align_early = np.clip(rolling.alignment_to(v_e), 0.0, 1.0)
        out.align_late = np.clip(rolling.alignment_to(v_l), 0.0, 1.0)
    return out
