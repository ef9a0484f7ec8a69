"""Dense float32 matrices, the QPTN binary format and the model manifest.

QPTN layout (all integers little-endian)::

    offset  size  field
    0       4     magic  b"QPTN"
    4       4     version  u32 = 1
    8       4     ndim     u32 = 2
    12      8     dim0     u64 (rows)
    20      8     dim1     u64 (cols)
    28      4*n   payload  float32 LE, row-major

Weight orientation: a layer's weight ``W`` is stored ``d_in x d_out`` so that
its output is ``X @ W`` for activations ``X`` of shape ``tokens x d_in``.
Each *column* of ``W`` is one independent reconstruction problem.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TruncatedFileError, ValidationError

MAGIC = b"QPTN"
VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")
_DISK_DTYPE = np.dtype("<f4")

ACTIVATIONS = ("identity", "relu")


class DenseMatrix:
    """Immutable row-major float32 matrix.

    ``DenseMatrix(2, 2, [1, 2, 3, 4])`` builds ``[[1, 2], [3, 4]]``. The
    object supports ``np.asarray`` and exposes a read-only view via
    :attr:`values`.
    """

    __slots__ = ("_values",)

    def __init__(self, rows: int, cols: int, data) -> None:
        arr = np.array(data, dtype=np.float32).reshape(-1)
        if arr.size != rows * cols:
            raise ShapeError(f"data has {arr.size} entries, expected {rows}x{cols}={rows * cols}")
        self._values = _freeze(arr.reshape(rows, cols))

    @classmethod
    def from_array(cls, a) -> "DenseMatrix":
        a = np.asarray(a)
        if a.ndim != 2:
            raise ShapeError(f"expected a 2-D array, got ndim={a.ndim}")
        out = cls.__new__(cls)
        out._values = _freeze(np.array(a, dtype=np.float32, order="C"))
        return out

    @property
    def rows(self) -> int:
        return self._values.shape[0]

    @property
    def cols(self) -> int:
        return self._values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self._values.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._values
        return self._values.astype(dtype)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._values, other._values)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"DenseMatrix({self.rows}, {self.cols}, {self._values.reshape(-1).tolist()!r})"


def _freeze(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValidationError("matrix contains non-finite values")
    arr.setflags(write=False)
    return arr


def as_matrix(m) -> DenseMatrix:
    return m if isinstance(m, DenseMatrix) else DenseMatrix.from_array(m)


def encode_tensor(m) -> bytes:
    m = as_matrix(m)
    header = _HEADER.pack(MAGIC, VERSION, 2, m.rows, m.cols)
    return header + m.values.astype(_DISK_DTYPE, copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> DenseMatrix:
    if len(buf) < _HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise FormatError("bad magic")
        raise TruncatedFileError(f"header truncated ({len(buf)} bytes)")
    magic, version, ndim, rows, cols = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if ndim != 2:
        raise FormatError(f"only 2-D tensors are supported, got ndim={ndim}")
    expected = rows * cols * 4
    payload = memoryview(buf)[_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedFileError(f"payload truncated: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise FormatError(f"{len(payload) - expected} trailing bytes after payload")
    arr = np.frombuffer(payload, dtype=_DISK_DTYPE).astype(np.float32).reshape(rows, cols)
    return DenseMatrix.from_array(arr)


def read_tensor(path) -> DenseMatrix:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


def write_tensor(path, m) -> None:
    payload = encode_tensor(m)
    with open(path, "wb") as f:
        f.write(payload)


def matmul(a, b) -> DenseMatrix:
    """Matrix product with float64 accumulation, rounded back to float32."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    if a64.ndim != 2 or b64.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a64.shape[1] != b64.shape[0]:
        raise ShapeError(f"cannot multiply {a64.shape} by {b64.shape}")
    return DenseMatrix.from_array(a64 @ b64)


# -- manifest ---------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    name: str
    rows: int
    cols: int
    weight_file: str
    activation: str = "identity"
    prune: bool = True

    def to_json(self) -> dict:
        out = {
            "name": self.name,
            "rows": self.rows,
            "cols": self.cols,
            "weight_file": self.weight_file,
            "activation": self.activation,
        }
        if not self.prune:
            out["prune"] = False
        return out


@dataclass(frozen=True)
class ModelManifest:
    """Ordered chain of dense layers. ``weight_file`` paths are relative to ``base_dir``."""

    layers: tuple[LayerSpec, ...]
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self) -> None:
        validate_manifest(self)

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def weight_path(self, layer: LayerSpec) -> Path:
        p = Path(layer.weight_file)
        return p if p.is_absolute() else self.base_dir / p

    def to_json(self) -> dict:
        return {"layers": [layer.to_json() for layer in self.layers]}


def validate_manifest(manifest: ModelManifest) -> None:
    if not manifest.layers:
        raise ConfigError("manifest has no layers")
    seen = set()
    for layer in manifest.layers:
        if layer.name in seen:
            raise ConfigError(f"duplicate layer name {layer.name!r}")
        seen.add(layer.name)
        if layer.rows < 1 or layer.cols < 1:
            raise ConfigError(f"layer {layer.name!r} has non-positive dims")
        if layer.activation not in ACTIVATIONS:
            raise ConfigError(f"layer {layer.name!r}: unknown activation {layer.activation!r}")
    for a, b in zip(manifest.layers, manifest.layers[1:]):
        if a.cols != b.rows:
            raise ConfigError(f"layer {a.name!r} outputs {a.cols} features but {b.name!r} expects {b.rows}")


def load_manifest(path) -> ModelManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from None
    try:
        layers = tuple(
            LayerSpec(
                name=str(d["name"]),
                rows=int(d["rows"]),
                cols=int(d["cols"]),
                weight_file=str(d["weight_file"]),
                activation=d.get("activation", "identity"),
                prune=bool(d.get("prune", True)),
            )
            for d in doc["layers"]
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed manifest ({e})") from None
    return ModelManifest(layers, base_dir=path.parent)


def save_manifest(path, manifest: ModelManifest) -> None:
    text = json.dumps(manifest.to_json(), indent=2) + "\n"
    Path(path).write_text(text)


def load_layer_weights(manifest: ModelManifest, layer: LayerSpec) -> DenseMatrix:
    w = read_tensor(manifest.weight_path(layer))
    if w.shape != (layer.rows, layer.cols):
        raise ShapeError(f"{layer.name}: weight file is {w.shape}, manifest says {(layer.rows, layer.cols)}")
    return w


def apply_activation(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return x
    if activation == "relu":
        return np.maximum(x, 0, dtype=x.dtype)
    raise ConfigError(f"unknown activation {activation!r}")


def iter_row_chunks(x: np.ndarray, chunk: int | None) -> Iterator[np.ndarray]:
    """Split ``x`` into consecutive row blocks of ``chunk`` rows (last may be short)."""
    if not chunk or chunk >= x.shape[0]:
        yield x
        return
    for start in range(0, x.shape[0], chunk):
        yield x[start : start + chunk]

