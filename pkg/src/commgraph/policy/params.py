"""Policy parameter container, initialization, and the checkpoint format.

Tensors are stored as float32 (matching the on-disk format, so a save/load
round trip is bitwise exact); all forward/backward math upcasts to float64.

Checkpoint layout, all little-endian:

    bytes 0..7    magic ``CGPOLICY``
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..15  uint32 length of the JSON header
    header        JSON: dims, dropout, tensor names/shapes in declared order
    payload       raw float32 tensor data, C order, in declared order
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from ..validation import DimensionMismatchError, check_positive

MAGIC = b"CGPOLICY"
FORMAT_VERSION = 1

# (field name, shape expressed in terms of (d, d_h, d_ff))
TENSOR_SPECS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("w_in", ("d", "d_h")),
    ("b_in", ("d_h",)),
    ("w_q", ("d_h", "d_h")),
    ("b_q", ("d_h",)),
    ("w_k", ("d_h", "d_h")),
    ("b_k", ("d_h",)),
    ("w_v", ("d_h", "d_h")),
    ("b_v", ("d_h",)),
    ("w_o", ("d_h", "d_h")),
    ("b_o", ("d_h",)),
    ("w_ff1", ("d_h", "d_ff")),
    ("b_ff1", ("d_ff",)),
    ("w_ff2", ("d_ff", "d_h")),
    ("b_ff2", ("d_h",)),
    ("ln1_gain", ("d_h",)),
    ("ln1_bias", ("d_h",)),
    ("ln2_gain", ("d_h",)),
    ("ln2_bias", ("d_h",)),
)

TENSOR_NAMES = tuple(name for name, _ in TENSOR_SPECS)


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class MalformedCheckpointError(CheckpointError):
    """The file is not a valid policy checkpoint (bad magic, truncation, ...)."""


class CheckpointVersionError(CheckpointError):
    """The file uses an unsupported format version."""


def _shape_for(dims: dict[str, int], spec: tuple[str, ...]) -> tuple[int, ...]:
    return tuple(dims[axis] for axis in spec)


@dataclass
class PolicyParameters:
    """All weights of the one-layer single-head encoder and edge head."""

    embed_dim: int
    hidden_dim: int
    ff_dim: int
    dropout: float
    w_in: np.ndarray
    b_in: np.ndarray
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray
    w_ff1: np.ndarray
    b_ff1: np.ndarray
    w_ff2: np.ndarray
    b_ff2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    version: int = FORMAT_VERSION

    def __post_init__(self) -> None:
        check_positive(self.embed_dim, "embed_dim")
        check_positive(self.hidden_dim, "hidden_dim")
        check_positive(self.ff_dim, "ff_dim")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        dims = self._dims()
        for name, spec in TENSOR_SPECS:
            arr = getattr(self, name)
            expected = _shape_for(dims, spec)
            if arr.shape != expected:
                raise DimensionMismatchError(
                    f"tensor {name} has shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name} contains non-finite values")

    def _dims(self) -> dict[str, int]:
        return {"d": self.embed_dim, "d_h": self.hidden_dim, "d_ff": self.ff_dim}

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        """(name, array) pairs in the declared serialization order."""
        return [(name, getattr(self, name)) for name in TENSOR_NAMES]

    def copy(self, dtype=None) -> "PolicyParameters":
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in TENSOR_NAMES:
            arr = kwargs[name]
            kwargs[name] = arr.astype(dtype) if dtype is not None else arr.copy()
        return PolicyParameters(**kwargs)


def init_params(embed_dim: int, hidden_dim: int = 128, ff_dim: int | None = None,
                dropout: float = 0.3,
                rng: np.random.Generator | int | None = None) -> PolicyParameters:
    """Seeded initialization: symmetric uniform fan-in scaling per matrix.

    Weight matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start
    at zero. The output layer-norm gain starts at 1/sqrt(d_h) so the pairwise
    state inner products (the unscaled edge logits) begin at O(1): normalized
    rows have norm sqrt(d_h), and gain-1 initialization would start every
    edge probability deep inside sigmoid saturation, where the near-zero
    Bernoulli variance kills the training signal.
    """
    if ff_dim is None:
        ff_dim = 4 * hidden_dim
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dims = {"d": embed_dim, "d_h": hidden_dim, "d_ff": ff_dim}

    tensors: dict[str, np.ndarray] = {}
    for name, spec in TENSOR_SPECS:
        shape = _shape_for(dims, spec)
        if name.startswith("w_"):
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        elif name == "ln2_gain":
            arr = np.full(shape, 1.0 / np.sqrt(hidden_dim))
        elif name == "ln1_gain":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(np.float32)
    return PolicyParameters(embed_dim=embed_dim, hidden_dim=hidden_dim,
                            ff_dim=ff_dim, dropout=dropout, **tensors)


def save_params(params: PolicyParameters, path: str | Path) -> None:
    """Write the versioned binary checkpoint described in the module docstring."""
    header = {
        "version": FORMAT_VERSION,
        "embed_dim": params.embed_dim,
        "hidden_dim": params.hidden_dim,
        "ff_dim": params.ff_dim,
        "dropout": params.dropout,
        "tensors": [[name, list(getattr(params, name).shape)]
                    for name in TENSOR_NAMES],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in TENSOR_NAMES:
            fh.write(np.ascontiguousarray(
                getattr(params, name), dtype="<f4").tobytes())


def load_params(path: str | Path) -> PolicyParameters:
    """Read a checkpoint; raises on bad magic, version, truncation, or dims."""
    with open(path, "rb") as fh:
        blob = fh.read()

    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise MalformedCheckpointError(f"{path}: not a policy checkpoint")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported "
            f"(expected {FORMAT_VERSION})")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC) + 4)
    offset = len(MAGIC) + 8
    if len(blob) < offset + header_len:
        raise MalformedCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedCheckpointError(f"{path}: unreadable header: {exc}") from exc
    offset += header_len

    try:
        dims = {"d": int(header["embed_dim"]), "d_h": int(header["hidden_dim"]),
                "d_ff": int(header["ff_dim"])}
        dropout = float(header["dropout"])
        declared = {name: tuple(shape) for name, shape in header["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpointError(f"{path}: incomplete header: {exc}") from exc
    if set(declared) != set(TENSOR_NAMES):
        raise MalformedCheckpointError(f"{path}: unexpected tensor inventory")

    tensors: dict[str, np.ndarray] = {}
    for name, spec in TENSOR_SPECS:
        expected = _shape_for(dims, spec)
        if declared[name] != expected:
            raise DimensionMismatchError(
                f"{path}: tensor {name} declared as {declared[name]}, "
                f"dims imply {expected}")
        nbytes = int(np.prod(expected)) * 4
        if len(blob) < offset + nbytes:
            raise MalformedCheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(blob[offset:offset + nbytes], dtype="<f4")
        tensors[name] = arr.reshape(expected).astype(np.float32, copy=True)
        offset += nbytes
    if offset != len(blob):
        raise MalformedCheckpointError(f"{path}: trailing bytes after payload")

    return PolicyParameters(embed_dim=dims["d"], hidden_dim=dims["d_h"],
                            ff_dim=dims["d_ff"], dropout=dropout, **tensors)
