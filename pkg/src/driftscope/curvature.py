"""Matrix-free empirical-Fisher quotients along chosen directions.

For per-batch gradients stacked as rows of ``G`` (M x D) the quotient along a
unit direction is ``q(v) = |G v|^2 / M``: one matrix-vector product, no
D x D matrix.  Anisotropy compares ``q(v_b)`` with the mean quotient over
random directions orthogonal to ``v_b`` and to each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

UNIT_TOL = 1e-8
DIVISOR_FLOOR = 1e-15
MAX_REDRAWS = 100


@dataclass
class GradientMatrix:
    rows: np.ndarray
    step: int | None = None

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if self.rows.shape[0] < 1:
            raise ValueError("gradient matrix needs at least one row")

    @property
    def n_batches(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class RayleighResult:
    label: str
    quotient: float
    random_quotients: np.ndarray
    alpha: float
    degenerate: bool = False
    note: str = ""

    @property
    def random_mean(self) -> float:
        return float(np.mean(self.random_quotients))


def _rows(G) -> np.ndarray:
    return G.rows if isinstance(G, GradientMatrix) else np.atleast_2d(np.asarray(G, dtype=np.float64))


def rayleigh(G, v) -> float:
    """Empirical Fisher quotient ``(1/M) sum_i <g_i, v>^2``."""
    g = _rows(G)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != g.shape[1]:
        raise ValueError(f"direction has dimension {v.size}, gradients have {g.shape[1]}")
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > UNIT_TOL:
        raise ValueError(f"direction must be unit norm (got {n:.12g})")
    gv = g @ v
    return float(gv @ gv) / g.shape[0]


def random_orthogonal_directions(v_b, k: int, seed) -> np.ndarray:
    """``k`` Gaussian directions, Gram-Schmidt orthonormalized against ``v_b`` and each other."""
    v = np.asarray(v_b, dtype=np.float64).ravel()
    d = v.size
    if k < 1:
        raise ValueError("K must be >= 1")
    if k >= d:
        raise ValueError(f"K must be < D ({d})")
    rng = np.random.default_rng(seed)
    basis = [v / np.linalg.norm(v)]
    out = []
    failures = 0
    while len(out) < k:
        z = rng.standard_normal(d)
        zn = float(np.linalg.norm(z))
        for _ in range(2):
            for b in basis:
                z -= float(z @ b) * b
        n = float(np.linalg.norm(z))
        if n <= 1e-8 * zn:
            failures += 1
            if failures >= MAX_REDRAWS:
                raise RuntimeError(f"Gram-Schmidt broke down {failures} times")
            continue
        z /= n
        basis.append(z)
        out.append(z)
    return np.stack(out)


def anisotropy(G, v_b, k: int = 10, seed=0, label: str = "backbone") -> RayleighResult:
    """``alpha = q(v_b) / mean_j q(w_j)`` over ``k`` random orthogonal ``w_j``."""
    q_b = rayleigh(G, v_b)
    dirs = random_orthogonal_directions(v_b, k, seed)
    g = _rows(G)
    proj = g @ dirs.T
    q_rand = np.einsum("ij,ij->j", proj, proj) / g.shape[0]
    mean = float(np.mean(q_rand))
    if mean < DIVISOR_FLOOR:
        return RayleighResult(label, q_b, q_rand, math.inf if q_b > 0 else math.nan, True,
                              "divisor below 1e-15")
    return RayleighResult(label, q_b, q_rand, q_b / mean)


def gradient_matrix(grad_fn: Callable[[object], np.ndarray], batches: Iterable, step: int | None = None) -> GradientMatrix:
    """Stack ``grad_fn(batch)`` for each batch; parameters are never updated."""
    rows = []
    for i, b in enumerate(batches):
        g = np.asarray(grad_fn(b), dtype=np.float64).ravel()
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for batch {i}")
        rows.append(g)
    if not rows:
        raise ValueError("no batches")
    return GradientMatrix(np.stack(rows), step)


def collect_gradients(ckpt, cfg, n_batches: int, batch_size: int | None = None, lam: float | None = None,
                      seed: int | None = None, sel=None) -> GradientMatrix:
    """Per-batch trunk gradients of the composite loss at a transformer checkpoint.

    Batches come from the run's ``grad-probe`` stream (offset by the step),
    so the training data order is untouched.
    """
    from driftscope.checkpoint import Checkpoint, TrunkSelector, flatten_trunk
    from driftscope.trainer.task import MarkovCorpus, generate_batch, stream
    from driftscope.trainer.train import loss_and_grads, params_from_checkpoint

    if n_batches < 1:
        raise ValueError("need at least one gradient batch")
    sel = sel or TrunkSelector()
    params = params_from_checkpoint(ckpt, cfg)
    corpus = MarkovCorpus(cfg.task)
    rng = stream((cfg.seed if seed is None else seed) + 1_000_003 * ckpt.step, "grad-probe")
    lam = cfg.lambda_at(ckpt.step) if lam is None else lam
    bs = batch_size or cfg.batch_size

    def grad_fn(batch):
        _, _, g = loss_and_grads(params, cfg.model, batch, lam, ckpt.step)
        return flatten_trunk(Checkpoint(ckpt.step, g), sel)

    batches = (generate_batch(cfg.task, corpus, rng, bs, cfg.model.seq_len, "train") for _ in range(n_batches))
    return gradient_matrix(grad_fn, batches, ckpt.step)
