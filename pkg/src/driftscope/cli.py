"""Command-line entry point: ``driftscope train | analyze ... | rayleigh | reheat``.

Analysis reports go to ``<run>/analysis/``.  JSON reports carry the flags
under ``"flags"``; CSV reports start with a ``# flags: {...}`` comment line.
Every command records its outputs and argv in ``<run>/manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import shutil
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from driftscope import __version__
from driftscope.backbone import (correlate, decompose, find_extrema, fit_power_law, gradient_alignment,
                                 pairwise_cosines, switch_direction, switch_pairs, update_alignment)
from driftscope.checkpoint import (Trajectory, TrunkSelector, checkpoint_path, list_checkpoints, load_checkpoints,
                                   read_checkpoint, read_direction, write_direction)
from driftscope.curvature import anisotropy, collect_gradients
from driftscope.pca import phase_backbones, rolling_backbones, uncentered_svd
from driftscope.trainer.optim import KINDS, OptimizerConfig
from driftscope.trainer.model import ModelConfig
from driftscope.trainer.task import TaskConfig
from driftscope.trainer.train import RunConfig, read_eval_csv, reheat, train, write_eval_csv

log = logging.getLogger("driftscope")

LOCK_NAME = ".driftscope.lock"


class UsageError(Exception):
    """Bad flag combination; exits with status 2."""


class CommandError(Exception):
    """Command could not produce its outputs; exits with status 1."""


# -- small parsers -----------------------------------------------------------

def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(float(x)) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    if hi < lo:
        raise argparse.ArgumentTypeError(f"window {text!r} has HI < LO")
    return lo, hi


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    return f"{float(x):.17g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def _flags(args) -> dict:
    skip = {"func", "command", "verbose", "force"}
    return _jsonable({k: v for k, v in sorted(vars(args).items()) if k not in skip})


# -- run directory plumbing --------------------------------------------------

class RunDir:
    """A run directory with its lock, manifest and output bookkeeping."""

    def __init__(self, path, force: bool = False):
        self.path = Path(path)
        self.force = force
        self.outputs: list[str] = []
        self._lock = None

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.path / LOCK_NAME), timeout=0)
        try:
            self._lock.acquire()
        except Timeout:
            raise CommandError(f"{self.path} is locked by another driftscope command") from None
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def target(self, rel: str) -> Path:
        p = self.path / rel
        if p.exists() and not self.force:
            raise CommandError(f"{p} exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(rel)
        return p

    def write_json(self, rel: str, flags: dict, result: dict) -> Path:
        p = self.target(rel)
        p.write_text(json.dumps({"flags": flags, "result": _jsonable(result)}, indent=2, sort_keys=True) + "\n")
        return p

    def write_csv(self, rel: str, flags: dict, header, rows) -> Path:
        p = self.target(rel)
        buf = io.StringIO()
        buf.write("# flags: " + json.dumps(flags, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        p.write_text(buf.getvalue())
        return p

    def update_manifest(self, argv) -> None:
        mpath = self.path / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        cfg = self.path / "config.json"
        outputs = manifest.get("outputs", {})
        for rel in self.outputs:
            outputs[rel] = {"argv": list(argv)}
        manifest.update({
            "run_id": self.path.resolve().name,
            "config_hash": hashlib.sha256(cfg.read_bytes()).hexdigest() if cfg.exists() else None,
            "checkpoints": [p.name for _, p in list_checkpoints(self.path)],
            "outputs": {k: outputs[k] for k in sorted(outputs) if (self.path / k).exists()},
            "version": __version__,
        })
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_config(run: Path) -> RunConfig:
    p = run / "config.json"
    if not p.exists():
        raise CommandError(f"{run} has no config.json")
    return RunConfig.from_dict(json.loads(p.read_text()))


def _selector(args) -> TrunkSelector:
    sel = TrunkSelector()
    return sel if args.block is None else sel.for_block(args.block)


def _trajectory(run: Path, sel: TrunkSelector) -> Trajectory:
    found = list_checkpoints(run)
    if len(found) < 2:
        raise CommandError(f"{run} needs at least 2 checkpoints, found {len(found)}")
    return Trajectory.from_checkpoints(load_checkpoints([p for _, p in found]), sel)


def _stem(args, base: str) -> str:
    parts = [base]
    if getattr(args, "block", None) is not None:
        parts.append(f"block{args.block}")
    if getattr(args, "tag", None):
        parts.append(args.tag)
    return "analysis/" + "_".join(parts)


def _backbone(args, traj: Trajectory) -> tuple[np.ndarray, str]:
    """Global PC1 (from --anchor, honouring --backbone-normalize) or a direction file."""
    spec = args.backbone
    if spec == "global":
        drift = _drift(traj, args.anchor, args.backbone_normalize)
        return uncentered_svd(drift, top_k=1).backbone, "global"
    v = read_direction(spec)
    if v.size != traj.dim:
        raise CommandError(f"direction {spec} has dimension {v.size}, trajectory has {traj.dim}")
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise CommandError(f"direction {spec} is zero")
    return v / n, Path(spec).stem


def _drift(traj: Trajectory, anchor: int, row_normalize: bool, window=None):
    if window is not None:
        traj = traj.window(*window)
    try:
        traj.index(anchor)
    except KeyError:
        raise CommandError(f"anchor step {anchor} not among the checkpoints") from None
    if len(traj) < 2:
        raise CommandError("window holds fewer than 2 checkpoints")
    return traj.drift(anchor, row_normalize)


# -- train -------------------------------------------------------------------

def _optimizer_from_args(args) -> OptimizerConfig:
    kind = args.optimizer
    momentum = args.momentum
    if kind == "sgd" and momentum:
        kind = "sgd-momentum"
    if kind == "adamw" and momentum is not None:
        raise UsageError("--momentum is not used by adamw")
    if kind in ("sgd-momentum", "sgdw-nesterov") and momentum is None:
        momentum = 0.9
    if kind != "adamw" and (args.beta1 is not None or args.beta2 is not None or args.eps is not None):
        raise UsageError("--beta1/--beta2/--eps only apply to adamw")
    defaults = OptimizerConfig()
    try:
        return OptimizerConfig(
            kind=kind,
            lr=args.lr if args.lr is not None else defaults.lr,
            warmup_frac=args.warmup_frac,
            min_lr_frac=args.min_lr_frac,
            beta1=args.beta1 if args.beta1 is not None else defaults.beta1,
            beta2=args.beta2 if args.beta2 is not None else defaults.beta2,
            eps=args.eps if args.eps is not None else defaults.eps,
            weight_decay=args.wd if args.wd is not None else defaults.weight_decay,
            decay=args.decay,
            momentum=momentum or 0.0,
            clip=args.clip,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def config_from_args(args) -> RunConfig:
    if args.switch_frac is not None and args.switch_frac.lower() == "none":
        switch = None
    else:
        switch = float(args.switch_frac) if args.switch_frac is not None else 0.4
    try:
        model = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, d_ff=args.d_ff,
                            vocab_size=args.vocab, seq_len=args.seq_len)
        task = TaskConfig(p_probe=args.p_probe, corpus_seed=args.corpus_seed)
        return RunConfig(model=model, task=task, optim=_optimizer_from_args(args), total_steps=args.steps,
                         ckpt_every=args.ckpt_every, batch_size=args.batch_size, grad_accum=args.grad_accum,
                         seed=args.seed, lambda_init=args.lambda_init, lambda_switch_frac=switch,
                         eval_ood_seqs=args.eval_ood, precision=args.precision)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args, argv):
    cfg = config_from_args(args)
    out = Path(args.out)
    if out.exists() and any(p.name != LOCK_NAME for p in out.iterdir()):
        if not args.force:
            raise CommandError(f"{out} is not empty; pass --force to overwrite")
    with RunDir(out, force=True) as rd:
        for p in out.iterdir():
            if p.name == LOCK_NAME:
                continue
            shutil.rmtree(p) if p.is_dir() else p.unlink()
        records = train(cfg, out, progress=args.verbose)
        rd.outputs += ["config.json", "eval.csv"]
        rd.update_manifest(argv)
    last = records[-1]
    print(f"{out}: {len(records)} checkpoints, final val_loss {last.val_loss:.4f}, p_ood {last.p_ood:.3f}")


# -- analyze -----------------------------------------------------------------

def cmd_pca(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    drift = _drift(traj, args.anchor, args.row_normalize, args.window)
    spec = uncentered_svd(drift, args.top_k)
    flags = _flags(args)
    stem = _stem(args, "pca")
    with RunDir(run, args.force) as rd:
        summary = dict(spec.summary(), dim=traj.dim, rows=drift.shape[0], label=traj.label,
                       anchor=args.anchor, row_normalized=args.row_normalize,
                       drift_norm_final=float(np.linalg.norm(traj.drift(args.anchor).rows[-1])))
        rd.write_json(stem + ".json", flags, summary)
        cum = spec.cumulative()
        rd.write_csv(stem + "_spectrum.csv", flags, ["k", "sigma", "rho", "cumulative"],
                     [(k + 1, s, r, c) for k, (s, r, c) in enumerate(zip(spec.singular_values, spec.fractions, cum))])
        write_direction(spec.backbone, rd.target(stem + "_backbone.vec"))
        rd.update_manifest(argv)
    print(json.dumps(_jsonable(spec.summary()), sort_keys=True))


def cmd_rolling(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    ref, ref_label = _backbone(args, traj)
    series = rolling_backbones(traj, args.width, args.stride, args.row_normalize, reference=ref)
    flags = _flags(args)
    stem = _stem(args, "rolling")
    rows = []
    for i, c in enumerate(series.centers):
        adj = series.adjacent[i] if i < series.adjacent.size else None
        rows.append((c, series.starts[i], series.ends[i], series.pc1_fractions[i], adj,
                     series.global_alignment[i], series.unstable[i]))
    with RunDir(run, args.force) as rd:
        rd.write_csv(stem + ".csv", flags, ["center", "start", "end", "pc1_fraction", "rho_adjacent",
                                            "c_global", "unstable"], rows)
        rd.write_json(stem + ".json", flags, dict(series.summary(), reference=ref_label))
        rd.update_manifest(argv)
    print(json.dumps(_jsonable(series.summary()), sort_keys=True))


def cmd_phases(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    try:
        rolling = rolling_backbones(traj, args.width, args.stride, args.row_normalize)
    except ValueError:
        rolling = None
    try:
        pb = phase_backbones(traj, args.early, args.late, args.row_normalize, rolling)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    flags = _flags(args)
    stem = _stem(args, "phases")
    summary = pb.summary()
    if rolling is not None:
        summary["min_adjacent_rho"] = float(rolling.adjacent.min())
    with RunDir(run, args.force) as rd:
        rd.write_json(stem + ".json", flags, summary)
        if rolling is not None:
            rd.write_csv(stem + ".csv", flags, ["center", "A_E", "A_L"],
                         zip(pb.centers, pb.align_early, pb.align_late))
        write_direction(pb.v_early, rd.target(stem + "_early.vec"))
        write_direction(pb.v_late, rd.target(stem + "_late.vec"))
        rd.update_manifest(argv)
    print(json.dumps(_jsonable(summary), sort_keys=True))


def _decomposition(args, traj):
    v, label = _backbone(args, traj)
    dec = decompose(_drift(traj, args.anchor, False), v)
    return dec, v, label


def cmd_decompose(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    dec, _, label = _decomposition(args, traj)
    flags = _flags(args)
    with RunDir(run, args.force) as rd:
        rd.write_csv(_stem(args, "decompose") + ".csv", flags, ["step", "a", "r_norm", "f_b"],
                     zip(dec.steps, dec.coords, dec.residual_norms, dec.fractions))
        rd.update_manifest(argv)
    print(f"{dec.steps.size} rows against backbone {label}; max Pythagorean error "
          f"{float(dec.pythagorean_error().max()):.3g}")


def cmd_powerlaw(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    dec, _, _ = _decomposition(args, traj)
    values = np.abs(dec.coords) if args.series == "a" else dec.residual_norms
    rows, failed = [], []
    for w in args.window:
        try:
            fit = fit_power_law(dec.steps, values, w)
            rows.append((w[0], w[1], fit.gamma, fit.coefficient, fit.r2, fit.n))
        except ValueError as exc:
            failed.append(f"window {w[0]},{w[1]}: {exc}")
    flags = _flags(args)
    with RunDir(run, args.force) as rd:
        if rows:
            rd.write_csv(_stem(args, f"powerlaw_{args.series}") + ".csv", flags,
                         ["window_lo", "window_hi", "gamma", "C", "R2", "n"], rows)
        rd.update_manifest(argv)
    for r in rows:
        print(f"[{r[0]}, {r[1]}] gamma={r[2]:.6g} C={r[3]:.6g} R2={r[4]:.6f}")
    if failed:
        raise CommandError("; ".join(failed))


def cmd_align(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    v, label = _backbone(args, traj)
    interval = args.interval or int(traj.steps[1] - traj.steps[0])
    try:
        series = update_alignment(traj, v, interval)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    flags = _flags(args)
    stem = _stem(args, "align")
    summary = {"backbone": label, "interval": interval, "mean_abs_update": series.mean_abs,
               "noise_floor": series.noise_floor, "sign_changes": series.sign_changes()}
    grad_rows = []
    if args.grad_batches:
        cfg = load_config(run)
        sel = _selector(args)
        gs = []
        for step in args.grad_steps or [int(traj.steps[-1])]:
            ckpt = read_checkpoint(_ckpt_path(run, step))
            G = collect_gradients(ckpt, cfg, args.grad_batches, seed=args.seed, sel=sel)
            ga = gradient_alignment(G.rows, v)
            gs.append(ga.absolute)
            grad_rows += [(step, i, c, abs(c), ga.noise_floor) for i, c in enumerate(ga.signed)]
        summary["mean_abs_gradient"] = float(np.mean(np.concatenate(gs)))
    with RunDir(run, args.force) as rd:
        rd.write_csv(stem + ".csv", flags, ["step", "signed_cos", "abs_cos", "noise_floor"],
                     [(s, c, abs(c), series.noise_floor) for s, c in zip(series.steps, series.signed)])
        if grad_rows:
            rd.write_csv(stem + "_gradients.csv", flags,
                         ["step", "batch", "signed_cos", "abs_cos", "noise_floor"], grad_rows)
        rd.write_json(stem + ".json", flags, summary)
        rd.update_manifest(argv)
    print(json.dumps(_jsonable(summary), sort_keys=True))


def cmd_switch(args, argv):
    run = Path(args.run)
    sel = _selector(args)
    traj = _trajectory(run, sel)
    v, label = _backbone(args, traj)
    spectrum = uncentered_svd(_drift(traj, args.anchor, args.backbone_normalize))
    if args.peaks or args.troughs:
        if not (args.peaks and args.troughs) or len(args.peaks) != len(args.troughs):
            raise UsageError("--peaks and --troughs must be given together with equal lengths")
        pairs = list(zip(args.peaks, args.troughs))
    else:
        evals = read_eval_csv(run / "eval.csv")
        peaks, troughs = find_extrema([r.step for r in evals], [r.p_ood for r in evals],
                                      args.radius, args.prominence)
        pairs = switch_pairs(peaks, troughs)
    if not pairs:
        raise CommandError("no peak/trough pairs found; pass --peaks/--troughs to override")
    rows, dirs, failed = [], [], []
    for p, t in pairs:
        try:
            sw = switch_direction(traj.at(p), traj.at(t), v, spectrum, peak_step=p, trough_step=t)
        except (KeyError, ValueError) as exc:
            failed.append(f"pair {p},{t}: {exc}")
            continue
        rows.append((p, t, sw.overlap, sw.signed_overlap, sw.residual_capture, sw.components_used,
                     sw.truncated, sw.degenerate))
        dirs.append(sw.direction)
    flags = _flags(args)
    stem = _stem(args, "switch")
    with RunDir(run, args.force) as rd:
        if rows:
            rd.write_csv(stem + ".csv", flags, ["peak", "trough", "overlap", "signed_overlap", "E26",
                                                "components", "truncated", "degenerate"], rows)
            rd.write_json(stem + ".json", flags, {"backbone": label, "pairs": [r[:2] for r in rows],
                                                  "pairwise_cosines": pairwise_cosines(dirs)})
        rd.update_manifest(argv)
    for r in rows:
        print(f"peak {r[0]} trough {r[1]}: overlap {r[2]:.4f} E26 {r[4]:.4f}")
    if failed:
        raise CommandError("; ".join(failed))


def cmd_correlate(args, argv):
    run = Path(args.run)
    traj = _trajectory(run, _selector(args))
    dec, _, _ = _decomposition(args, traj)
    evals = {r.step: r.p_ood for r in read_eval_csv(run / "eval.csv")}
    steps = [s for s in dec.steps if s in evals]
    xs = [evals[s] for s in steps]
    ys = [dec.residual_norms[i] for i, s in enumerate(dec.steps) if s in evals]
    rows, failed = [], []
    for w in args.window:
        try:
            rep = correlate(steps, xs, ys, w)
            rows.append((w[0], w[1], rep.r, rep.n))
        except ValueError as exc:
            failed.append(f"window {w[0]},{w[1]}: {exc}")
    flags = _flags(args)
    with RunDir(run, args.force) as rd:
        if rows:
            rd.write_csv(_stem(args, "correlate") + ".csv", flags, ["window_lo", "window_hi", "r", "n"], rows)
        rd.update_manifest(argv)
    for r in rows:
        print(f"[{r[0]}, {r[1]}] r={r[2]:.6f} n={r[3]}")
    if failed:
        raise CommandError("; ".join(failed))


# -- rayleigh ----------------------------------------------------------------

def _ckpt_path(run: Path, step: int) -> Path:
    p = checkpoint_path(run, step)
    if not p.exists():
        raise CommandError(f"no checkpoint at step {step} in {run}")
    return p


def cmd_rayleigh(args, argv):
    if args.K < 1:
        raise UsageError("--K must be >= 1")
    if args.M < 1:
        raise UsageError("--M must be >= 1")
    run = Path(args.run)
    cfg = load_config(run)
    sel = _selector(args)
    dirs = []
    for path in args.dir:
        v = read_direction(path)
        n = float(np.linalg.norm(v))
        if n == 0.0:
            raise CommandError(f"direction {path} is zero")
        dirs.append((Path(path).stem, v / n))
    steps = args.steps or [s for s, _ in list_checkpoints(run)]
    rows, failed = [], []
    for step in steps:
        try:
            ckpt = read_checkpoint(_ckpt_path(run, step))
            G = collect_gradients(ckpt, cfg, args.M, args.batch_size, seed=args.seed, sel=sel)
        except (CommandError, ValueError, FloatingPointError) as exc:
            failed.append(f"step {step}: {exc}")
            continue
        for label, v in dirs:
            if v.size != G.dim:
                raise CommandError(f"direction {label} has dimension {v.size}, gradients have {G.dim}")
            res = anisotropy(G, v, args.K, args.seed, label)
            rows.append((step, label, res.quotient, res.alpha, args.K, args.M, args.seed))
    flags = _flags(args)
    with RunDir(run, args.force) as rd:
        if rows:
            rd.write_csv(_stem(args, "rayleigh") + ".csv", flags,
                         ["step", "direction_label", "q", "alpha", "K", "M", "seed"],
                         rows)
        rd.update_manifest(argv)
    for r in rows:
        print(f"step {r[0]} {r[1]}: q={r[2]:.6g} alpha={r[3]:.6g}")
    if failed:
        raise CommandError("; ".join(failed))


# -- reheat ------------------------------------------------------------------

def cmd_reheat(args, argv):
    src = Path(getattr(args, "from"))
    if not src.exists():
        raise CommandError(f"source checkpoint {src} not found")
    run = src.parent
    cfg = load_config(Path(args.config).parent if args.config else run)
    ckpt = read_checkpoint(src)
    sel = TrunkSelector()
    backbone = anchor = None
    if args.backbone:
        anchor_path = Path(args.anchor_ckpt) if args.anchor_ckpt else checkpoint_path(run, 0)
        if not anchor_path.exists():
            raise CommandError(f"anchor checkpoint {anchor_path} not found")
        from driftscope.checkpoint import flatten_trunk
        anchor = flatten_trunk(read_checkpoint(anchor_path), sel)
        backbone = read_direction(args.backbone)
        if backbone.size != anchor.size:
            raise CommandError(f"backbone has dimension {backbone.size}, trunk has {anchor.size}")
        backbone = backbone / np.linalg.norm(backbone)
    try:
        traces = reheat(ckpt, cfg, args.lambda_new, args.steps, args.lrs, seed=args.seed,
                        eval_every=args.eval_every, backbone=backbone, anchor=anchor, sel=sel)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    flags = _flags(args)
    with RunDir(out, args.force) as rd:
        for tr in traces:
            sub = f"lr_{tr.lr:g}"
            write_eval_csv(tr.records, rd.target(f"{sub}/eval.csv"))
            if backbone is not None:
                rd.write_csv(f"{sub}/track.csv", flags, ["step", "a", "r_norm"],
                             zip(tr.steps, tr.coords, tr.residual_norms))
        rd.write_json("reheat.json", flags, {
            "source": str(src), "source_step": ckpt.step, "lambda": args.lambda_new,
            "runs": [{"lr": tr.lr, "p_ood_start": tr.records[0].p_ood, "p_ood_peak": tr.peak_p_ood,
                      "p_ood_final": tr.records[-1].p_ood} for tr in traces]})
        rd.update_manifest(argv)
    for tr in traces:
        print(f"lr {tr.lr:g}: p_ood {tr.records[0].p_ood:.3f} -> peak {tr.peak_p_ood:.3f}, "
              f"final {tr.records[-1].p_ood:.3f}")


# -- parser ------------------------------------------------------------------

def _add_run(p, backbone=False, normalize=True):
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--block", type=int, default=None, help="restrict to one transformer block")
    p.add_argument("--tag", default=None, help="suffix for output file names")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if normalize:
        p.add_argument("--row-normalize", action="store_true", help="unit-normalize drift rows")
    if backbone:
        p.add_argument("--backbone", default="global", help="'global' or a direction file")
        p.add_argument("--anchor", type=int, default=0, help="anchor step for drifts")
        p.add_argument("--backbone-normalize", action="store_true",
                       help="row-normalize drifts when computing the global backbone")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a desk-scale model and write checkpoints")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.add_argument("--optimizer", choices=KINDS, default="adamw")
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--beta1", type=float, default=None)
    t.add_argument("--beta2", type=float, default=None)
    t.add_argument("--eps", type=float, default=None)
    t.add_argument("--wd", type=float, default=None, help="weight decay")
    t.add_argument("--decay", choices=("decoupled", "l2"), default=None)
    t.add_argument("--momentum", type=float, default=None)
    t.add_argument("--clip", type=float, default=1.0)
    t.add_argument("--warmup-frac", type=float, default=0.15)
    t.add_argument("--min-lr-frac", type=float, default=0.1)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--ckpt-every", type=int, default=40)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--grad-accum", type=int, default=1)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--lambda", dest="lambda_init", type=float, default=2.0)
    t.add_argument("--switch-frac", default=None, help="fraction of steps at which lambda doubles, or 'none'")
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--d-model", type=int, default=64)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--d-ff", type=int, default=128)
    t.add_argument("--vocab", type=int, default=256)
    t.add_argument("--seq-len", type=int, default=64)
    t.add_argument("--p-probe", type=float, default=0.10)
    t.add_argument("--corpus-seed", type=int, default=1234)
    t.add_argument("--eval-ood", type=int, default=512)
    t.add_argument("--precision", choices=("float32", "float64"), default="float32")
    t.set_defaults(func=cmd_train)

    an = sub.add_parser("analyze", help="trajectory analyses over a run directory")
    asub = an.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("pca", help="uncentered PCA of the drift matrix")
    _add_run(p)
    p.add_argument("--anchor", type=int, required=True)
    p.add_argument("--window", type=_window, default=None)
    p.add_argument("--top-k", type=int, default=None)
    p.set_defaults(func=cmd_pca)

    p = asub.add_parser("rolling", help="rolling-window backbones")
    _add_run(p, backbone=True)
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_rolling)

    p = asub.add_parser("phases", help="early/late phase backbones")
    _add_run(p)
    p.add_argument("--early", type=_window, required=True)
    p.add_argument("--late", type=_window, required=True)
    p.add_argument("--width", type=int, default=10)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_phases)

    p = asub.add_parser("decompose", help="backbone coordinate and residual per checkpoint")
    _add_run(p, backbone=True, normalize=False)
    p.set_defaults(func=cmd_decompose)

    p = asub.add_parser("powerlaw", help="power-law fits of |a(t)| or |r(t)|")
    _add_run(p, backbone=True, normalize=False)
    p.add_argument("--series", choices=("a", "r"), default="a")
    p.add_argument("--window", type=_window, action="append", required=True)
    p.set_defaults(func=cmd_powerlaw)

    p = asub.add_parser("align", help="update (and optionally gradient) alignment with the backbone")
    _add_run(p, backbone=True, normalize=False)
    p.add_argument("--interval", type=int, default=None, help="update interval in steps")
    p.add_argument("--grad-batches", type=int, default=0)
    p.add_argument("--grad-steps", type=_ints, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_align)

    p = asub.add_parser("switch", help="switching directions between p_ood peaks and troughs")
    _add_run(p, backbone=True, normalize=False)
    p.add_argument("--peaks", type=_ints, default=None)
    p.add_argument("--troughs", type=_ints, default=None)
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--prominence", type=float, default=0.05)
    p.set_defaults(func=cmd_switch)

    p = asub.add_parser("correlate", help="Pearson r between p_ood and |r(t)|")
    _add_run(p, backbone=True, normalize=False)
    p.add_argument("--window", type=_window, action="append", required=True)
    p.set_defaults(func=cmd_correlate)

    r = sub.add_parser("rayleigh", help="empirical Fisher quotients along direction files")
    r.add_argument("--run", required=True)
    r.add_argument("--dir", action="append", required=True, help="direction file (repeatable)")
    r.add_argument("--K", type=int, default=10)
    r.add_argument("--M", type=int, default=32)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=_ints, default=None)
    r.add_argument("--batch-size", type=int, default=None)
    r.add_argument("--block", type=int, default=None)
    r.add_argument("--tag", default=None)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_rayleigh)

    h = sub.add_parser("reheat", help="resume a checkpoint with fresh optimizer state and a new lambda")
    h.add_argument("--from", required=True, help="source checkpoint file")
    h.add_argument("--out", required=True)
    h.add_argument("--lrs", type=_floats, required=True)
    h.add_argument("--lambda", dest="lambda_new", type=float, required=True)
    h.add_argument("--steps", type=int, default=400)
    h.add_argument("--eval-every", type=int, default=None)
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--config", default=None, help="config.json (defaults to the source run's)")
    h.add_argument("--backbone", default=None, help="direction file to track a(t), |r(t)| against")
    h.add_argument("--anchor-ckpt", default=None, help="anchor checkpoint for tracking (default step 0)")
    h.add_argument("--force", action="store_true")
    h.set_defaults(func=cmd_reheat)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args, ["driftscope", *argv])
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"driftscope: error: {exc}", file=sys.stderr)
        return 2
    except (CommandError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"driftscope: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
