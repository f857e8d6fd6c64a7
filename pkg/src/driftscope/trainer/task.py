"""Synthetic training data: Markov-chain "story" text plus codeword retrieval probes.

Vocabulary layout (defaults for V = 256)::

    [0, 192)    story tokens, emitted by a sparse random Markov chain
    [192, 224)  codewords
    [224, 254)  values
    254         KEY marker
    255         QUERY marker

A probe sequence is story text with ``KEY c v`` planted early and
``QUERY c v`` planted ``gap`` story tokens later; the model is scored on
predicting ``v`` from the second ``c``.  Training gaps and OOD gaps come from
disjoint ranges.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass

import numpy as np

PROBE_OVERHEAD = 6  # KEY c v ... QUERY c v


@dataclass(frozen=True)
class TaskConfig:
    p_probe: float = 0.10
    n_story: int = 192
    codewords: tuple[int, int] = (192, 224)
    values: tuple[int, int] = (224, 254)
    key_token: int = 254
    query_token: int = 255
    train_gap: tuple[int, int] = (2, 24)
    ood_gap: tuple[int, int] = (32, 56)
    corpus_seed: int = 1234
    branching: int = 8

    def __post_init__(self):
        object.__setattr__(self, "codewords", tuple(self.codewords))
        object.__setattr__(self, "values", tuple(self.values))
        object.__setattr__(self, "train_gap", tuple(self.train_gap))
        object.__setattr__(self, "ood_gap", tuple(self.ood_gap))
        if not 0.0 <= self.p_probe <= 1.0:
            raise ValueError("p_probe must be in [0, 1]")
        for lo, hi in (self.train_gap, self.ood_gap):
            if lo < 0 or hi < lo:
                raise ValueError("gap ranges must satisfy 0 <= lo <= hi")
        a, b = self.train_gap
        c, d = self.ood_gap
        if not (b < c or d < a):
            raise ValueError("OOD gap range must be disjoint from the training gap range")
        if self.branching < 1 or self.branching > self.n_story:
            raise ValueError("branching must be in 1..n_story")

    @property
    def vocab_needed(self) -> int:
        return max(self.n_story, self.codewords[1], self.values[1], self.key_token + 1, self.query_token + 1)

    @property
    def chance(self) -> float:
        return 1.0 / (self.values[1] - self.values[0])

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, label: str) -> np.random.Generator:
    """Independent RNG stream derived from the master seed and a fixed label."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return np.random.default_rng(ss)


class MarkovCorpus:
    """Sparse random first-order chain over the story tokens."""

    def __init__(self, task: TaskConfig):
        rng = np.random.default_rng(task.corpus_seed)
        n, k = task.n_story, task.branching
        self.successors = np.stack([rng.choice(n, size=k, replace=False) for _ in range(n)])
        probs = rng.dirichlet(np.ones(k), size=n)
        self.cumprobs = np.cumsum(probs, axis=1)
        self.cumprobs[:, -1] = 1.0
        self.n_story = n

    def sample(self, rng: np.random.Generator, n_seqs: int, length: int) -> np.ndarray:
        out = np.empty((n_seqs, length), dtype=np.int64)
        state = rng.integers(0, self.n_story, size=n_seqs)
        out[:, 0] = state
        for j in range(1, length):
            u = rng.random(n_seqs)
            pick = (u[:, None] > self.cumprobs[state]).sum(axis=1)
            state = self.successors[state, np.minimum(pick, self.successors.shape[1] - 1)]
            out[:, j] = state
        return out

    def entropy_rate(self) -> float:
        """Per-token conditional entropy of the chain under its stationary distribution (nats)."""
        probs = np.diff(np.concatenate([np.zeros((self.n_story, 1)), self.cumprobs], axis=1), axis=1)
        P = np.zeros((self.n_story, self.n_story))
        for s in range(self.n_story):
            P[s, self.successors[s]] += probs[s]
        w, vecs = np.linalg.eig(P.T)
        pi = np.real(vecs[:, np.argmin(np.abs(w - 1))])
        pi = np.abs(pi) / np.abs(pi).sum()
        h = -np.sum(probs * np.log(np.where(probs > 0, probs, 1.0)), axis=1)
        return float(pi @ h)


@dataclass
class Batch:
    inputs: np.ndarray      # (B, S)
    targets: np.ndarray     # (B, S)
    is_probe: np.ndarray    # (B,) bool
    probe_pos: np.ndarray   # (B,) scored input position, -1 for LM sequences
    gaps: np.ndarray        # (B,) gap used, -1 for LM sequences

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def probe_mask(self) -> np.ndarray:
        m = np.zeros(self.inputs.shape, dtype=bool)
        rows = np.flatnonzero(self.is_probe)
        m[rows, self.probe_pos[rows]] = True
        return m

    def loss_weights(self, lam: float, dtype=np.float64):
        """Per-position CE weights for ``L_LM + lam * L_probe`` and the two term weights."""
        B, S = self.inputs.shape
        lm = np.zeros((B, S), dtype=dtype)
        pr = np.zeros((B, S), dtype=dtype)
        n_lm = int((~self.is_probe).sum())
        n_pr = int(self.is_probe.sum())
        if n_lm:
            lm[~self.is_probe] = 1.0 / (n_lm * S)
        if n_pr:
            rows = np.flatnonzero(self.is_probe)
            pr[rows, self.probe_pos[rows]] = 1.0 / n_pr
        return lm + lam * pr, lm, pr


def generate_batch(task: TaskConfig, corpus: MarkovCorpus, rng: np.random.Generator, n_seqs: int,
                   seq_len: int, mode: str = "train") -> Batch:
    """Draw a batch.

    ``train`` mixes LM and probe sequences at ``p_probe``; ``eval-id`` and
    ``eval-ood`` return probe-only batches with gaps from the training or
    OOD range; ``eval-lm`` returns plain story text.
    """
    if mode not in ("train", "eval-id", "eval-ood", "eval-lm"):
        raise ValueError(f"unknown batch mode {mode!r}")
    for lo, hi in (task.train_gap, task.ood_gap):
        if hi + PROBE_OVERHEAD - 1 > seq_len:
            raise ValueError(f"gap {hi} does not fit in sequence length {seq_len}")
    toks = corpus.sample(rng, n_seqs, seq_len + 1)
    if mode == "train":
        is_probe = rng.random(n_seqs) < task.p_probe
        gap_range = task.train_gap
    elif mode == "eval-lm":
        is_probe = np.zeros(n_seqs, dtype=bool)
        gap_range = task.train_gap
    else:
        is_probe = np.ones(n_seqs, dtype=bool)
        gap_range = task.train_gap if mode == "eval-id" else task.ood_gap
    probe_pos = np.full(n_seqs, -1, dtype=np.int64)
    gaps = np.full(n_seqs, -1, dtype=np.int64)
    rows = np.flatnonzero(is_probe)
    if rows.size:
        g = rng.integers(gap_range[0], gap_range[1] + 1, size=rows.size)
        start = rng.integers(0, seq_len + 1 - PROBE_OVERHEAD - g + 1)
        code = rng.integers(task.codewords[0], task.codewords[1], size=rows.size)
        val = rng.integers(task.values[0], task.values[1], size=rows.size)
        q = start + 3 + g
        toks[rows, start] = task.key_token
        toks[rows, start + 1] = code
        toks[rows, start + 2] = val
        toks[rows, q] = task.query_token
        toks[rows, q + 1] = code
        toks[rows, q + 2] = val
        probe_pos[rows] = q + 1
        gaps[rows] = g
    return Batch(toks[:, :-1].copy(), toks[:, 1:].copy(), is_probe, probe_pos, gaps)
