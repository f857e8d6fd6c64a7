"""Decoder-only pre-LN transformer in numpy with a hand-written backward pass.

Parameters live in a flat ``name -> array`` dict so they map one-to-one onto
checkpoint tensors.  Names::

    tok_emb (V, d)            tied with the output projection
    pos_emb (S, d)
    blocks.{i}.ln1.g / .b     (d,)
    blocks.{i}.attn.w_qkv     (d, 3d)   blocks.{i}.attn.b_qkv (3d,)
    blocks.{i}.attn.w_o       (d, d)    blocks.{i}.attn.b_o   (d,)
    blocks.{i}.ln2.g / .b     (d,)
    blocks.{i}.mlp.w_up       (d, d_ff) blocks.{i}.mlp.b_up   (d_ff,)
    blocks.{i}.mlp.w_down     (d_ff, d) blocks.{i}.mlp.b_down (d,)
    ln_f.g / .b               (d,)

The loss is a weighted sum of per-position cross-entropies; the weights
carry both the LM averaging and the probe term with its lambda factor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 256
    seq_len: int = 64
    init_std: float = 0.02

    def __post_init__(self):
        for k in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "seq_len"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def trunk_size(self) -> int:
        d, f = self.d_model, self.d_ff
        return self.n_layers * (3 * d * d + d * d + d * f + f * d)

    @property
    def n_params(self) -> int:
        d, f = self.d_model, self.d_ff
        per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d)
        return self.vocab_size * d + self.seq_len * d + self.n_layers * per_block + 2 * d

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w_up": (d, f), p + "mlp.b_up": (f,),
            p + "mlp.w_down": (f, d), p + "mlp.b_down": (d,),
        })
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Gaussian weights (std ``init_std``), zero biases, unit layer-norm gains."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif leaf.startswith("b") or name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.standard_normal(shape) * cfg.init_std
        params[name] = arr.astype(dtype)
    return params


def is_decayed(name: str) -> bool:
    """Weight decay applies to trunk weight matrices only."""
    return name.endswith((".w_qkv", ".w_o", ".w_up", ".w_down"))


# -- primitives --------------------------------------------------------------

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    d = xhat.shape[-1]
    dxhat = dy * g
    dg = (dy * xhat).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _causal_mask(s: int) -> np.ndarray:
    return np.triu(np.ones((s, s), dtype=bool), k=1)


# -- forward / backward ------------------------------------------------------

def forward(params, cfg: ModelConfig, tokens, targets=None, weights=None):
    """Run the model.

    Returns ``(logits, loss, cache)``; ``loss`` is ``sum(weights * CE)`` and
    is ``None`` when no targets are given.
    """
    tokens = np.asarray(tokens)
    B, S = tokens.shape
    if S > cfg.seq_len:
        raise ValueError(f"sequence length {S} exceeds model seq_len {cfg.seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    scale = 1.0 / math.sqrt(hd)
    mask = _causal_mask(S)

    x = params["tok_emb"][tokens] + params["pos_emb"][:S]
    caches = []
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        h1, ln1 = _layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = h1 @ params[p + "attn.w_qkv"] + params[p + "attn.b_qkv"]
        q, k, v = np.split(qkv, 3, axis=-1)
        q = q.reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        k = k.reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        v = v.reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        att = (q @ k.transpose(0, 1, 3, 2)) * scale
        att = np.where(mask, -np.inf, att)
        att = att - att.max(axis=-1, keepdims=True)
        pr = np.exp(att)
        pr /= pr.sum(axis=-1, keepdims=True)
        y = (pr @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
        x = x + y @ params[p + "attn.w_o"] + params[p + "attn.b_o"]
        h2, ln2 = _layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "mlp.w_up"] + params[p + "mlp.b_up"]
        a, t = _gelu(u)
        x = x + a @ params[p + "mlp.w_down"] + params[p + "mlp.b_down"]
        caches.append((h1, ln1, q, k, v, pr, y, h2, ln2, u, a, t))
    hf, lnf = _layernorm(x, params["ln_f.g"], params["ln_f.b"])
    logits = hf @ params["tok_emb"].T

    cache = {"tokens": tokens, "blocks": caches, "hf": hf, "lnf": lnf}
    if targets is None:
        return logits, None, cache

    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    tgt = np.asarray(targets)
    ce = lse - np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
    w = np.asarray(weights, dtype=logits.dtype)
    loss = float((w * ce).sum(dtype=np.float64))
    cache.update({"z": z, "lse": lse, "targets": tgt, "weights": w, "ce": ce})
    return logits, loss, cache


def backward(params, cfg: ModelConfig, cache) -> dict[str, np.ndarray]:
    """Gradients of ``sum(weights * CE)`` for every parameter."""
    tokens = cache["tokens"]
    B, S = tokens.shape
    d, H = cfg.d_model, cfg.n_heads
    hd = d // H
    scale = 1.0 / math.sqrt(hd)
    grads = {}

    probs = np.exp(cache["z"] - cache["lse"][..., None])
    dlogits = probs
    np.put_along_axis(dlogits, cache["targets"][..., None],
                      np.take_along_axis(dlogits, cache["targets"][..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= cache["weights"][..., None]

    emb = params["tok_emb"]
    hf = cache["hf"]
    grads["tok_emb"] = dlogits.reshape(-1, cfg.vocab_size).T @ hf.reshape(-1, d)
    dhf = dlogits @ emb
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layernorm_back(dhf, params["ln_f.g"], cache["lnf"])

    for i in reversed(range(cfg.n_layers)):
        p = f"blocks.{i}."
        h1, ln1, q, k, v, pr, y, h2, ln2, u, a, t = cache["blocks"][i]
        # MLP
        grads[p + "mlp.b_down"] = dx.reshape(-1, d).sum(axis=0)
        grads[p + "mlp.w_down"] = a.reshape(-1, cfg.d_ff).T @ dx.reshape(-1, d)
        da = dx @ params[p + "mlp.w_down"].T
        du = _gelu_back(da, u, t)
        grads[p + "mlp.b_up"] = du.reshape(-1, cfg.d_ff).sum(axis=0)
        grads[p + "mlp.w_up"] = h2.reshape(-1, d).T @ du.reshape(-1, cfg.d_ff)
        dh2 = du @ params[p + "mlp.w_up"].T
        dln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_back(dh2, params[p + "ln2.g"], ln2)
        dx = dx + dln
        # attention
        grads[p + "attn.b_o"] = dx.reshape(-1, d).sum(axis=0)
        grads[p + "attn.w_o"] = y.reshape(-1, d).T @ dx.reshape(-1, d)
        dy = (dx @ params[p + "attn.w_o"].T).reshape(B, S, H, hd).transpose(0, 2, 1, 3)
        dpr = dy @ v.transpose(0, 1, 3, 2)
        dv = pr.transpose(0, 1, 3, 2) @ dy
        datt = pr * (dpr - (dpr * pr).sum(axis=-1, keepdims=True))
        datt *= scale
        dq = datt @ k
        dk = datt.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([g.transpose(0, 2, 1, 3).reshape(B, S, d) for g in (dq, dk, dv)], axis=-1)
        grads[p + "attn.b_qkv"] = dqkv.reshape(-1, 3 * d).sum(axis=0)
        grads[p + "attn.w_qkv"] = h1.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        dh1 = dqkv @ params[p + "attn.w_qkv"].T
        dln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_back(dh1, params[p + "ln1.g"], ln1)
        dx = dx + dln

    grads["pos_emb"] = np.zeros_like(params["pos_emb"])
    grads["pos_emb"][:S] = dx.sum(axis=0)
    onehot = np.zeros((B * S, cfg.vocab_size), dtype=dx.dtype)
    onehot[np.arange(B * S), tokens.ravel()] = 1.0
    grads["tok_emb"] = grads["tok_emb"] + onehot.T @ dx.reshape(-1, d)
    return {name: grads[name].astype(params[name].dtype, copy=False) for name in params}
