"""A small reverse-mode automatic differentiation core on top of numpy.

Every operation returns a :class:`Tensor` holding its forward value and, when
any input requires gradients, a closure that pushes the output gradient back to
its inputs.  :meth:`Tensor.backward` replays the recorded graph in reverse
topological order.  All arithmetic is float64.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from softgm.errors import CheckpointError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "no_grad",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "leaky_relu",
    "tanh",
    "exp",
    "log",
    "square",
    "masked_softmax",
    "mean_pool",
    "reduce_sum",
    "reduce_mean",
    "concat",
    "gather_rows",
    "reshape",
    "transpose",
    "minimum",
    "clip",
    "ParamStore",
    "Adam",
    "adam_step",
    "global_norm",
    "save_checkpoint",
    "load_checkpoint",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed after propagation
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(value, parents, backward) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericalError("operation produced non-finite values")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), backward)


def neg(a) -> Tensor:
    a = constant(a)
    return _make(-a.value, (a,), lambda g: a._accumulate(-g))


def matmul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.value, b.value)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.value.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape)
            b._accumulate(gb)

    return _make(out, (a, b), backward)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = constant(a)
    pos = a.value > 0
    scale = np.where(pos, 1.0, slope)
    return _make(a.value * scale, (a,), lambda g: a._accumulate(g * scale))


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.value)
    return _make(y, (a,), lambda g: a._accumulate(g * (1.0 - y * y)))


def exp(a) -> Tensor:
    a = constant(a)
    y = np.exp(a.value)
    return _make(y, (a,), lambda g: a._accumulate(g * y))


def log(a) -> Tensor:
    a = constant(a)
    return _make(np.log(a.value), (a,), lambda g: a._accumulate(g / a.value))


def square(a) -> Tensor:
    a = constant(a)
    return _make(a.value * a.value, (a,), lambda g: a._accumulate(2.0 * g * a.value))


def masked_softmax(a, mask, axis: int = -1) -> Tensor:
    """Softmax over entries where ``mask`` is true; masked entries are exactly zero.

    A slice with no unmasked entry produces all zeros.
    """
    a = constant(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    neg_inf = np.where(mask, a.value, -np.inf)
    peak = np.max(neg_inf, axis=axis, keepdims=True)
    empty = ~np.isfinite(peak)
    if empty.any():
        logger.debug("masked_softmax: %d fully masked slices set to zero", int(empty.sum()))
        peak = np.where(empty, 0.0, peak)
    e = np.where(mask, np.exp(np.where(mask, a.value - peak, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (g - dot))

    return _make(y, (a,), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(y, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def mean_pool(a, axis: int = -2) -> Tensor:
    return reduce_mean(a, axis=axis)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    try:
        y = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(y, tensors, backward)


def gather_rows(a, index) -> Tensor:
    """``a[index]`` along the first axis; ``index`` may be any integer array."""
    a = constant(a)
    index = np.asarray(index, dtype=int)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.value[index], (a,), backward)


def _getitem(a, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _make(a.value[index], (a,), backward)


def reshape(a, shape) -> Tensor:
    a = constant(a)
    try:
        y = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _make(y, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes) -> Tensor:
    a = constant(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: a._accumulate(np.transpose(g, inverse)))


def minimum(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "minimum")
    take_a = a.value <= b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(take_a, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(take_a, 0.0, g), b.shape))

    return _make(np.minimum(a.value, b.value), (a, b), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = constant(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: a._accumulate(np.where(inside, g, 0.0)))


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Named trainable tensors with a fixed iteration order."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self):
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def tensors(self) -> list:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in self}

    def snapshot(self) -> dict:
        return {n: t.value.copy() for n, t in self}

    def restore(self, snap: dict):
        if set(snap) != set(self._params):
            raise CheckpointError("snapshot parameter names do not match the store")
        for n, t in self:
            value = np.asarray(snap[n], dtype=np.float64)
            if value.shape != t.shape:
                raise CheckpointError(f"shape mismatch for {n}: {value.shape} vs {t.shape}")
            t.value = value.copy()

    def n_values(self) -> int:
        return int(sum(t.value.size for t in self._params.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, t in self:
            h.update(n.encode())
            h.update(t.value.astype("<f8").tobytes())
        return h.hexdigest()


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


class Adam:
    """Adam with global-norm clipping and per-parameter learning rates."""

    def __init__(self, params: ParamStore, lr=1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params}
        self.v = {n: np.zeros_like(p.value) for n, p in params}

    def _lr_for(self, name: str) -> float:
        if callable(self.lr):
            return self.lr(name)
        if isinstance(self.lr, dict):
            return self.lr[name]
        return self.lr

    def step(self, grads: dict | None = None) -> dict:
        if grads is None:
            grads = self.params.grads()
        norm = global_norm(grads.values())
        if not math.isfinite(norm):
            logger.warning("non-finite gradient norm; update skipped")
            return {"grad_norm": norm, "skipped": True, "scale": 0.0}
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value = p.value - self._lr_for(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return {"grad_norm": norm, "skipped": False, "scale": scale}

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def adam_step(params: ParamStore, grads: dict, lr, clip_norm: float | None,
              optimizer: Adam | None = None) -> tuple[Adam, dict]:
    """Functional entry point: one clipped Adam update (creates the optimiser on first use)."""
    if optimizer is None:
        optimizer = Adam(params, lr=lr, clip_norm=clip_norm)
    else:
        optimizer.lr = lr
        optimizer.clip_norm = clip_norm
    stats = optimizer.step(grads)
    return optimizer, stats


# ---------------------------------------------------------------------------
# checkpoint format: manifest.json + params.f64 (little-endian float64, tensors back to back)

MANIFEST = "manifest.json"
PAYLOAD = "params.f64"


def save_checkpoint(directory, params: ParamStore, hyperparameters: dict | None = None,
                    config_hash: str | None = None, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in params:
        flat = np.ascontiguousarray(t.value, dtype="<f8").ravel()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "count": int(flat.size)})
        offset += int(flat.size)
        chunks.append(flat.tobytes())
    payload = b"".join(chunks)
    manifest = {
        "format": "softgm-checkpoint/1",
        "dtype": "float64",
        "byte_order": "little",
        "tensors": entries,
        "hyperparameters": hyperparameters or {},
        "config_hash": config_hash,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        manifest.update(extra)
    (directory / PAYLOAD).write_bytes(payload)
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory, params: ParamStore | None = None) -> tuple[dict, dict]:
    """Read a checkpoint; returns (arrays by name, manifest) and fills ``params`` if given."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    payload = (directory / PAYLOAD).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError(f"checkpoint payload at {directory} is corrupt (hash mismatch)")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    for e in manifest["tensors"]:
        arrays[e["name"]] = flat[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
    if params is not None:
        params.restore(arrays)
    return arrays, manifest
