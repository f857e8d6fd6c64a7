"""Shared builders for synthetic checkpoints and tiny training configs."""

import numpy as np

from driftscope.checkpoint import Checkpoint
from driftscope.trainer.model import ModelConfig
from driftscope.trainer.optim import OptimizerConfig
from driftscope.trainer.task import TaskConfig
from driftscope.trainer.train import RunConfig

TRUNK_NAME = "blocks.0.mlp.w_up"


def trunk_checkpoints(points, steps=None, extra=True):
    """One checkpoint per row of ``points``, stored in a single trunk tensor."""
    points = np.asarray(points, dtype=np.float32)
    steps = range(len(points)) if steps is None else steps
    out = []
    for s, p in zip(steps, points):
        tensors = {TRUNK_NAME: p.reshape(1, -1)}
        if extra:
            tensors["tok_emb"] = np.full((2, 2), float(s), dtype=np.float32)
        out.append(Checkpoint(int(s), tensors))
    return out


def tiny_config(**kw) -> RunConfig:
    model = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=256, seq_len=64)
    base = dict(model=model, task=TaskConfig(), optim=OptimizerConfig(), total_steps=20, ckpt_every=5,
                batch_size=4, seed=3, eval_lm_seqs=4, eval_id_seqs=8, eval_ood_seqs=8, eval_chunk=8)
    base.update(kw)
    return RunConfig(**base)


def finite_difference_check(n_coords=600, h=1e-5, seed=0):
    """Central differences against the analytic backward pass on a 2-layer d_model=16 model.

    Returns a dict with the max relative error, the checked (analytic, fd)
    pairs, the parameter kinds covered, and the largest |analytic| and |fd|
    on the key-bias block, whose true gradient is 0.
    """
    from driftscope.trainer.model import backward, forward, init_params

    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, vocab_size=24, seq_len=8, init_std=0.3)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, np.float64)
    for k, p in params.items():
        if not k.endswith(("w_qkv", "w_o", "w_up", "w_down", "emb")):
            p += 0.2 * rng.standard_normal(p.shape)
    B, S = 3, 8
    tokens = rng.integers(0, cfg.vocab_size, size=(B, S))
    targets = rng.integers(0, cfg.vocab_size, size=(B, S))
    weights = np.full((B, S), 1.0 / (2 * S))
    weights[2] = 0.0
    weights[2, 5] = 2.0  # a probe row with lambda = 2

    def loss():
        return forward(params, cfg, tokens, targets, weights)[1]

    grads = backward(params, cfg, forward(params, cfg, tokens, targets, weights)[2])
    names = sorted(params)
    per = max(1, n_coords // len(names))
    worst, pairs, kinds = 0.0, [], set()
    kb_an, kb_fd = 0.0, 0.0
    d = cfg.d_model
    for name in names:
        flat = params[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(per, flat.size), replace=False)
        if name.endswith("b_qkv"):
            idx = np.unique(np.concatenate([idx, np.arange(d, d + 4)]))
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            fd = (lp - lm) / (2 * h)
            an = gflat[i]
            if name.endswith("b_qkv") and d <= i < 2 * d:
                # softmax is shift invariant, so the key bias has zero gradient
                kb_an, kb_fd = max(kb_an, abs(an)), max(kb_fd, abs(fd))
                continue
            denom = max(abs(fd), abs(an))
            if denom > 0:
                worst = max(worst, abs(fd - an) / denom)
            pairs.append((an, fd))
            kinds.add(name.split(".")[-1] if "." in name else name)
    return {"max_rel": worst, "pairs": np.array(pairs), "kinds": kinds, "key_bias_an": kb_an,
            "key_bias_fd": kb_fd}


# one (number, title, passed, detail) tuple per acceptance criterion run this session
ACCEPTANCE: list[tuple[int, str, bool, str]] = []
