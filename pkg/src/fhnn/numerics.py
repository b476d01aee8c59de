"""Dense float64 linear algebra, parameter containers, Adam, and a
finite-difference gradient oracle.

Matrices throughout the package are plain 2-D C-contiguous ``float64``
numpy arrays (row-major).  Every trainable array lives in a :class:`Param`
that pairs the value with a same-shaped gradient buffer; a :class:`ParamSet`
is an ordered registry of params.  Iteration order is insertion order and is
load-bearing: Adam state and checkpoint files depend on it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Incompatible matrix shapes."""


class NonFiniteError(FloatingPointError):
    """A public operation produced or received NaN/Inf."""


def as_matrix(a, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 array, optionally checking the shape."""
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape and finiteness checks."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("matmul produced non-finite entries")
    return out


@dataclass
class Param:
    """A named trainable matrix with an accumulate-into gradient buffer.

    ``value`` and ``grad`` must only ever be mutated in place (``+=``,
    ``[...] =``); rebinding would detach the array from every structure
    holding a view of it.
    """

    name: str
    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def new(cls, name: str, value) -> "Param":
        v = as_matrix(value)
        return cls(name=name, value=v, grad=np.zeros_like(v))


class ParamSet:
    """Ordered registry of :class:`Param` objects with unique names."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name!r}")
        p = Param.new(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self)

    def zero_grads(self) -> None:
        for p in self:
            p.grad[...] = 0.0

    def copy_values(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Copy values in place; names and shapes must match exactly."""
        if set(values) != set(self._params):
            missing = set(self._params) - set(values)
            extra = set(values) - set(self._params)
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for p in self:
            src = values[p.name]
            if src.shape != p.value.shape:
                raise ShapeError(f"{p.name}: shape {src.shape} != {p.value.shape}")
            p.value[...] = src


@dataclass
class AdamState:
    """Adam moments keyed by parameter name, plus hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0.0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def adam_step(params: ParamSet, state: AdamState) -> None:
    """One Adam update with bias correction.  Gradients are left untouched;
    the caller zeroes them between batches."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.value)
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        if m.shape != p.value.shape:
            raise ShapeError(f"Adam state for {p.name}: shape {m.shape} != {p.value.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.all(np.isfinite(p.value)):
            raise NonFiniteError(f"Adam update produced non-finite values in {p.name}")


def grad_global_norm(params: ParamSet) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global_norm(params: ParamSet, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.
    Returns the pre-clip norm."""
    norm = grad_global_norm(params)
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
    return norm


def finite_diff_grad(loss_fn, params: ParamSet, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn(params)`` per scalar entry.

    ``loss_fn`` must be deterministic and side-effect free.  Parameter values
    are restored bit-exactly afterwards.
    """
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    grads: dict[str, np.ndarray] = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(params))
            flat[i] = orig - eps
            f_minus = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss while perturbing {p.name}[{i}]")
            g.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[p.name] = g
    return grads


# ---------------------------------------------------------------------------
# Checkpoint container: versioned binary file of (name, rows, cols, float64
# row-major values) records in ParamSet order, preceded by a JSON metadata
# block.  Round-trips bit-exactly; little-endian on every platform.

_MAGIC = b"FHNNCKPT"
_VERSION = 1


def save_checkpoint(path, params: ParamSet, config: dict | None = None) -> None:
    meta = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            rows, cols = p.value.shape
            fh.write(struct.pack("<III", len(name), rows, cols))
            fh.write(name)
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = json.loads(fh.read(meta_len).decode("utf-8"))
        (n_params,) = struct.unpack("<I", fh.read(4))
        params = ParamSet()
        for _ in range(n_params):
            name_len, rows, cols = struct.unpack("<III", fh.read(12))
            name = fh.read(name_len).decode("utf-8")
            buf = fh.read(rows * cols * 8)
            value = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(rows, cols)
            params.add(name, value)
    return params, config
