"""Checkpoint files, trunk selection and drift-matrix assembly.

Checkpoint layout (little-endian, no padding)::

    b"DSCK" | u32 version=1 | u64 step | u32 n_tensors
    per tensor: u32 name_len | utf-8 name | u32 rank | u64 dims[rank]
    payloads: float32 data for every tensor, in header order

Parameters are stored at 32 bits; everything derived from them (flattened
trunk vectors, drifts) is carried in float64.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from driftscope._parallel import parallel_map

MAGIC = b"DSCK"
VERSION = 1

DIRECTION_MAGIC = b"DVEC"
DIRECTION_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint content or file."""


@dataclass
class Checkpoint:
    step: int
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.step) < 0:
            raise CheckpointError(f"step must be >= 0, got {self.step}")
        self.step = int(self.step)
        tensors = {}
        for name, arr in self.tensors.items():
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"invalid tensor name {name!r}")
            tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)
        self.tensors = tensors

    @classmethod
    def from_flat(cls, step: int, items: Mapping[str, tuple[Sequence[int], Sequence[float]]]) -> "Checkpoint":
        """Build from ``name -> (shape, flat data)`` pairs, checking sizes."""
        tensors = {}
        for name, (shape, data) in items.items():
            data = np.asarray(data, dtype=np.float32).ravel()
            shape = tuple(int(s) for s in shape)
            if int(np.prod(shape, dtype=np.int64)) != data.size:
                raise CheckpointError(
                    f"tensor {name!r}: shape {shape} needs {int(np.prod(shape))} values, got {data.size}"
                )
            tensors[name] = data.reshape(shape)
        return cls(step, tensors)

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def same_layout(self, other: "Checkpoint") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(self.tensors[k].shape == other.tensors[k].shape for k in self.tensors)


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    if not ckpt.tensors:
        raise CheckpointError("no tensors")
    header = [MAGIC, struct.pack("<IQI", VERSION, ckpt.step, len(ckpt.tensors))]
    payload = []
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)))
        header.append(raw)
        header.append(struct.pack("<I", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(header))
        fh.write(b"".join(payload))


def read_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    try:
        version, step, count = struct.unpack_from("<IQI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 4 + 16
        specs = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            specs.append((name, dims))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc

    tensors = {}
    for name, dims in specs:
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        n = int(np.prod(dims, dtype=np.int64))
        end = off + 4 * n
        if end > len(buf):
            raise CheckpointError(f"{path}: payload for {name!r} truncated")
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(dims)
        off = end
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return Checkpoint(step, tensors)


def checkpoint_path(run_dir, step: int) -> Path:
    return Path(run_dir) / f"ckpt_{int(step)}.dsck"


def list_checkpoints(run_dir) -> list[tuple[int, Path]]:
    """(step, path) pairs for every checkpoint in a run directory, by step."""
    found = []
    for p in Path(run_dir).glob("ckpt_*.dsck"):
        m = re.fullmatch(r"ckpt_(\d+)\.dsck", p.name)
        if m:
            found.append((int(m.group(1)), p))
    return sorted(found)


def load_checkpoints(paths: Iterable, threads: int | None = None) -> list[Checkpoint]:
    return parallel_map(read_checkpoint, list(paths), threads=threads)


# -- direction vectors -------------------------------------------------------

def write_direction(vec, path) -> None:
    vec = np.ascontiguousarray(vec, dtype="<f8").ravel()
    with open(path, "wb") as fh:
        fh.write(DIRECTION_MAGIC + struct.pack("<IQ", DIRECTION_VERSION, vec.size))
        fh.write(vec.tobytes())


def read_direction(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != DIRECTION_MAGIC:
        raise CheckpointError(f"{path}: not a direction file")
    version, dim = struct.unpack_from("<IQ", buf, 4)
    if version != DIRECTION_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(buf) != 16 + 8 * dim:
        raise CheckpointError(f"{path}: expected {dim} values, file size {len(buf)}")
    return np.frombuffer(buf, dtype="<f8", offset=16).astype(np.float64)


# -- trunk selection ---------------------------------------------------------

TRUNK_PATTERNS = (
    r"blocks\.\d+\.attn\.w_qkv",
    r"blocks\.\d+\.attn\.w_o",
    r"blocks\.\d+\.mlp\.w_up",
    r"blocks\.\d+\.mlp\.w_down",
)


@dataclass(frozen=True)
class TrunkSelector:
    """Picks the trunk weight matrices out of a checkpoint.

    The default patterns match attention QKV/output and MLP up/down weights;
    embeddings, biases and layer-norm parameters never match.  ``blocks``
    restricts the selection to the given block indices (per-block PCA).
    """

    patterns: tuple[str, ...] = TRUNK_PATTERNS
    block_pattern: str = r"^blocks\.(\d+)\."
    blocks: frozenset[int] | None = None

    def block_of(self, name: str) -> int | None:
        m = re.match(self.block_pattern, name)
        return int(m.group(1)) if m else None

    def matches(self, name: str) -> bool:
        if not any(re.fullmatch(p, name) for p in self.patterns):
            return False
        if self.blocks is not None:
            return self.block_of(name) in self.blocks
        return True

    def select(self, names: Iterable[str]) -> list[str]:
        return sorted(n for n in names if self.matches(n))

    def for_block(self, block: int) -> "TrunkSelector":
        return TrunkSelector(self.patterns, self.block_pattern, frozenset({int(block)}))

    def label(self) -> str:
        if self.blocks is None:
            return "trunk"
        return "block" + "+".join(str(b) for b in sorted(self.blocks))


def flatten_trunk(ckpt: Checkpoint, sel: TrunkSelector | None = None) -> np.ndarray:
    sel = sel or TrunkSelector()
    names = sel.select(ckpt.tensors)
    if not names:
        raise CheckpointError(f"selector {sel.label()} matches no tensors in checkpoint {ckpt.step}")
    return np.concatenate([ckpt.tensors[n].astype(np.float64).ravel() for n in names])


# -- trajectories and drift --------------------------------------------------

@dataclass
class DriftMatrix:
    anchor_step: int
    steps: np.ndarray
    rows: np.ndarray
    row_normalized: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows.shape

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class Trajectory:
    """Flattened parameter vectors (float64) for an ascending list of steps."""

    steps: np.ndarray
    params: np.ndarray
    label: str = "trunk"

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[0] != self.steps.size:
            raise ValueError("params must be (n_steps, D)")
        if np.any(np.diff(self.steps) <= 0):
            raise ValueError("steps must be strictly ascending")

    @classmethod
    def from_checkpoints(cls, ckpts: Sequence[Checkpoint], sel: TrunkSelector | None = None,
                         threads: int | None = None) -> "Trajectory":
        sel = sel or TrunkSelector()
        if not ckpts:
            raise ValueError("no checkpoints")
        ckpts = sorted(ckpts, key=lambda c: c.step)
        first = ckpts[0]
        for c in ckpts[1:]:
            if not c.same_layout(first):
                raise CheckpointError(f"checkpoint {c.step} has a different tensor layout than {first.step}")
        rows = parallel_map(lambda c: flatten_trunk(c, sel), ckpts, threads=threads)
        return cls(np.array([c.step for c in ckpts]), np.stack(rows), sel.label())

    def __len__(self) -> int:
        return int(self.steps.size)

    @property
    def dim(self) -> int:
        return self.params.shape[1]

    def index(self, step: int) -> int:
        hit = np.flatnonzero(self.steps == int(step))
        if hit.size == 0:
            raise KeyError(f"no checkpoint at step {step}")
        return int(hit[0])

    def at(self, step: int) -> np.ndarray:
        return self.params[self.index(step)]

    def window(self, lo: int, hi: int) -> "Trajectory":
        keep = (self.steps >= lo) & (self.steps <= hi)
        return Trajectory(self.steps[keep], self.params[keep], self.label)

    def drift(self, anchor: int, row_normalize: bool = False) -> DriftMatrix:
        """Rows ``theta(t) - theta(anchor)`` for every non-anchor step, in step order."""
        try:
            i = self.index(anchor)
        except KeyError:
            raise CheckpointError(f"anchor step {anchor} not among checkpoints") from None
        keep = np.arange(len(self)) != i
        if keep.sum() < 1:
            raise CheckpointError("drift needs at least one checkpoint besides the anchor")
        rows = self.params[keep] - self.params[i]
        if row_normalize:
            norms = np.linalg.norm(rows, axis=1)
            nz = norms > 0
            rows[nz] /= norms[nz, None]
        return DriftMatrix(int(anchor), self.steps[keep].copy(), rows, bool(row_normalize))


def build_drift_matrix(ckpts: Sequence[Checkpoint], anchor: int, sel: TrunkSelector | None = None,
                       row_normalize: bool = False) -> DriftMatrix:
    return Trajectory.from_checkpoints(ckpts, sel).drift(anchor, row_normalize)


def as_trajectory(obj, sel: TrunkSelector | None = None) -> Trajectory:
    if isinstance(obj, Trajectory):
        return obj
    return Trajectory.from_checkpoints(list(obj), sel)
