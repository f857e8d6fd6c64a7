"""Training loop, evaluation and the reheating protocol.

Every source of randomness is a separate stream derived from the master seed
by a fixed label (``init``, ``train-data``, ``eval``, ...), so evaluation or
gradient probing never perturbs the training data order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from driftscope.checkpoint import Checkpoint, TrunkSelector, checkpoint_path, flatten_trunk, write_checkpoint
from driftscope.trainer.model import ModelConfig, backward, forward, init_params
from driftscope.trainer.optim import (OptimizerConfig, OptimizerState, clip_grads, fresh_state, lr_at,
                                      optimizer_step)
from driftscope.trainer.task import Batch, MarkovCorpus, TaskConfig, generate_batch, stream

log = logging.getLogger(__name__)

EVAL_COLUMNS = ("step", "val_loss", "p_id", "p_ood", "lambda", "lr")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, what: str, batch_id: int = 0):
        super().__init__(f"non-finite {what} at step {step} (batch {batch_id})")
        self.step = step
        self.what = what
        self.batch_id = batch_id


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    total_steps: int = 2000
    ckpt_every: int = 40
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 42
    lambda_init: float = 2.0
    lambda_switch_frac: float | None = 0.4
    eval_lm_seqs: int = 32
    eval_id_seqs: int = 128
    eval_ood_seqs: int = 512
    eval_chunk: int = 128
    precision: str = "float32"

    def __post_init__(self):
        if self.total_steps < 1 or self.ckpt_every < 1:
            raise ValueError("total_steps and ckpt_every must be >= 1")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.task.vocab_needed > self.model.vocab_size:
            raise ValueError(f"task needs vocab {self.task.vocab_needed}, model has {self.model.vocab_size}")
        if self.lambda_switch_frac is not None and not 0.0 < self.lambda_switch_frac <= 1.0:
            raise ValueError("lambda_switch_frac must be in (0, 1]")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def switch_step(self) -> int | None:
        if self.lambda_switch_frac is None:
            return None
        return int(round(self.lambda_switch_frac * self.total_steps))

    def lambda_at(self, step: int) -> float:
        s = self.switch_step
        if s is not None and step >= s:
            return 2.0 * self.lambda_init
        return self.lambda_init

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        task = TaskConfig(**d.pop("task", {}))
        optim = OptimizerConfig(**d.pop("optim", {}))
        return cls(model=model, task=task, optim=optim, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: OptimizerState
    step: int = 0
    rng: np.random.Generator | None = None
    lam: float = 0.0


@dataclass
class EvalRecord:
    step: int
    val_loss: float
    p_id: float
    p_ood: float
    lam: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.step)] + [f"{x:.17g}" for x in (self.val_loss, self.p_id, self.p_ood, self.lam, self.lr)]


@dataclass
class EvalSets:
    lm: Batch
    ood: Batch
    ident: Batch


def make_eval_sets(cfg: RunConfig, corpus: MarkovCorpus) -> EvalSets:
    rng = stream(cfg.seed, "eval")
    S = cfg.model.seq_len
    lm = generate_batch(cfg.task, corpus, rng, cfg.eval_lm_seqs, S, "eval-lm")
    ood = generate_batch(cfg.task, corpus, rng, cfg.eval_ood_seqs, S, "eval-ood")
    ident = generate_batch(cfg.task, corpus, rng, cfg.eval_id_seqs, S, "eval-id")
    return EvalSets(lm, ood, ident)


def _chunks(batch: Batch, size: int):
    for i in range(0, batch.size, size):
        yield batch.inputs[i:i + size], batch.targets[i:i + size], batch.probe_pos[i:i + size]


def lm_loss(params, cfg: RunConfig, batch: Batch) -> float:
    total, count = 0.0, 0
    for x, y, _ in _chunks(batch, cfg.eval_chunk):
        w = np.ones(x.shape)
        _, loss, _ = forward(params, cfg.model, x, y, w)
        total += loss
        count += x.size
    return total / count


def probe_accuracy(params, cfg: RunConfig, batch: Batch) -> float:
    if batch.size == 0:
        return math.nan
    hits = 0
    for x, y, pos in _chunks(batch, cfg.eval_chunk):
        logits, _, _ = forward(params, cfg.model, x)
        rows = np.arange(x.shape[0])
        pred = logits[rows, pos].argmax(axis=-1)
        hits += int((pred == y[rows, pos]).sum())
    return hits / batch.size


def evaluate(params, cfg: RunConfig, sets: EvalSets, step: int, lam: float, lr: float) -> EvalRecord:
    return EvalRecord(
        step=int(step),
        val_loss=lm_loss(params, cfg, sets.lm),
        p_id=probe_accuracy(params, cfg, sets.ident),
        p_ood=probe_accuracy(params, cfg, sets.ood),
        lam=float(lam),
        lr=float(lr),
    )


def loss_and_grads(params, cfg: ModelConfig, batch: Batch, lam: float, step: int = 0):
    """Composite loss ``L_LM + lam * L_probe``, its two terms, and the gradients."""
    dtype = next(iter(params.values())).dtype
    w, w_lm, w_pr = batch.loss_weights(lam, dtype=np.float64)
    _, loss, cache = forward(params, cfg, batch.inputs, batch.targets, w.astype(dtype))
    ce = cache["ce"].astype(np.float64)
    terms = {"lm": float((w_lm * ce).sum()), "probe": float((w_pr * ce).sum())}
    if not math.isfinite(loss):
        raise TrainingDiverged(step, "loss")
    grads = backward(params, cfg, cache)
    return loss, terms, grads


def init_state(cfg: RunConfig) -> TrainState:
    params = init_params(cfg.model, stream(cfg.seed, "init"), cfg.dtype)
    return TrainState(params, fresh_state(cfg.optim, params), 0, stream(cfg.seed, "train-data"),
                      cfg.lambda_at(0))


def to_checkpoint(params, step: int) -> Checkpoint:
    return Checkpoint(step, {k: params[k] for k in sorted(params)})


def params_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig) -> dict[str, np.ndarray]:
    from driftscope.trainer.model import param_shapes

    shapes = param_shapes(cfg.model)
    if set(shapes) != set(ckpt.tensors):
        raise ValueError("checkpoint tensors do not match the model configuration")
    out = {}
    for name, shape in shapes.items():
        arr = ckpt.tensors[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape}, model expects {shape}")
        out[name] = arr.astype(cfg.dtype)
    return out


def train_step(state: TrainState, cfg: RunConfig, corpus: MarkovCorpus, lr: float):
    """One optimizer step on freshly drawn data; returns (loss, terms, pre-clip grad norm)."""
    step = state.step + 1
    lam = cfg.lambda_at(step)
    grads, loss, terms = None, 0.0, {"lm": 0.0, "probe": 0.0}
    for micro in range(cfg.grad_accum):
        batch = generate_batch(cfg.task, corpus, state.rng, cfg.batch_size, cfg.model.seq_len, "train")
        try:
            l, t, g = loss_and_grads(state.params, cfg.model, batch, lam, step)
        except TrainingDiverged as exc:
            exc.batch_id = micro
            raise
        loss += l / cfg.grad_accum
        terms = {k: terms[k] + t[k] / cfg.grad_accum for k in terms}
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    if cfg.grad_accum > 1:
        grads = {k: v / cfg.grad_accum for k, v in grads.items()}
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged(step, "gradient")
    grads, gnorm = clip_grads(grads, cfg.optim.clip)
    optimizer_step(cfg.optim, state.params, grads, state.opt, lr)
    state.step = step
    state.lam = lam
    return loss, terms, gnorm


def write_eval_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_eval_csv(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(int(row["step"]), float(row["val_loss"]), float(row["p_id"]),
                                  float(row["p_ood"]), float(row["lambda"]), float(row["lr"])))
    return out


def train(cfg: RunConfig, out_dir, progress: bool = False) -> list[EvalRecord]:
    """Train from scratch, writing config.json, checkpoints and eval.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    corpus = MarkovCorpus(cfg.task)
    sets = make_eval_sets(cfg, corpus)
    state = init_state(cfg)
    records = []

    def checkpoint(lr):
        write_checkpoint(to_checkpoint(state.params, state.step), checkpoint_path(out, state.step))
        rec = evaluate(state.params, cfg, sets, state.step, cfg.lambda_at(state.step), lr)
        records.append(rec)
        write_eval_csv(records, out / "eval.csv")
        if progress:
            log.info("step %5d  val %.4f  p_id %.3f  p_ood %.3f", rec.step, rec.val_loss, rec.p_id, rec.p_ood)

    checkpoint(0.0)
    for step in range(1, cfg.total_steps + 1):
        lr = lr_at(cfg.optim, step, cfg.total_steps)
        try:
            train_step(state, cfg, corpus, lr)
        except TrainingDiverged as exc:
            diag = {"step": exc.step, "what": exc.what, "batch": exc.batch_id, "lr": lr,
                    "lambda": cfg.lambda_at(exc.step)}
            (out / "divergence.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
            raise
        if step % cfg.ckpt_every == 0 or step == cfg.total_steps:
            checkpoint(lr)
    return records


# -- reheating ---------------------------------------------------------------

@dataclass
class ReheatTrace:
    lr: float
    records: list[EvalRecord]
    steps: np.ndarray
    coords: np.ndarray
    residual_norms: np.ndarray

    @property
    def peak_p_ood(self) -> float:
        return max(r.p_ood for r in self.records)

    def peak_residual_index(self) -> int:
        """Index of the evaluation where |r| has moved furthest from its start."""
        return int(np.argmax(np.abs(self.residual_norms - self.residual_norms[0])))

    def relative_changes(self, i: int | None = None) -> tuple[float, float]:
        """(|a| change, |r| change) relative to their start values, at index ``i``."""
        i = self.peak_residual_index() if i is None else i
        a0, r0 = abs(self.coords[0]), self.residual_norms[0]
        da = abs(abs(self.coords[i]) - a0) / a0 if a0 > 0 else math.inf
        dr = abs(self.residual_norms[i] - r0) / r0 if r0 > 0 else math.inf
        return da, dr


def reheat(ckpt: Checkpoint, cfg: RunConfig, lam: float, steps: int, lrs, seed: int = 0,
           eval_every: int | None = None, optim: OptimizerConfig | None = None,
           backbone=None, anchor=None, sel: TrunkSelector | None = None) -> list[ReheatTrace]:
    """Resume from ``ckpt`` with zeroed optimizer buffers and a new probe weight.

    Each learning rate gets a cosine schedule (no warmup) over ``steps`` and
    the same data stream.  When ``backbone`` (unit vector) and ``anchor``
    (flattened parameters) are given, the backbone coordinate and residual
    norm of ``theta - anchor`` are recorded at every evaluation.
    """
    if lam <= 0:
        raise ValueError("reheat lambda must be > 0")
    if steps < 1:
        raise ValueError("reheat needs at least one step")
    optim = optim or cfg.optim
    eval_every = eval_every or max(1, steps // 20)
    sel = sel or TrunkSelector()
    base = params_from_checkpoint(ckpt, cfg)
    corpus = MarkovCorpus(cfg.task)
    sets = make_eval_sets(cfg, corpus)
    track = backbone is not None and anchor is not None
    if track:
        v = np.asarray(backbone, dtype=np.float64)
        th0 = np.asarray(anchor, dtype=np.float64)

    traces = []
    for lr0 in lrs:
        ocfg = optim.with_lr(float(lr0))
        params = {k: p.copy() for k, p in base.items()}
        state = TrainState(params, fresh_state(ocfg, params), 0, stream(seed, "reheat-data"), lam)
        run_cfg = replace(cfg, optim=ocfg, lambda_init=lam, lambda_switch_frac=None, total_steps=steps)
        recs, ts, coords, rnorms = [], [], [], []

        def record(lr):
            recs.append(evaluate(state.params, cfg, sets, state.step, lam, lr))
            if track:
                x = flatten_trunk(to_checkpoint(state.params, 0), sel) - th0
                a = float(x @ v)
                ts.append(state.step)
                coords.append(a)
                rnorms.append(float(np.linalg.norm(x - a * v)))

        record(0.0)
        for step in range(1, steps + 1):
            lr = lr_at(ocfg, step, steps, warmup=0)
            train_step(state, run_cfg, corpus, lr)
            if step % eval_every == 0 or step == steps:
                record(lr)
        traces.append(ReheatTrace(float(lr0), recs, np.array(ts), np.array(coords), np.array(rnorms)))
    return traces
