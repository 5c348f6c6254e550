"""Small dense numeric kernel: activations, losses, SGD, and a reverse-mode tape.

Every value is a float64 ``numpy.ndarray``. Operations accept plain arrays or
:class:`Node` objects; when any argument is a ``Node`` the result is a ``Node``
recorded on the same :class:`GradTape`, so the forward code of a layer is
written once and reused for inference and training.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np

DTYPE = np.float64
PROB_FLOOR = 1e-12

ParameterStore = Dict[str, np.ndarray]


class DimensionError(ValueError):
    pass


class Node:
    """A value living on a tape. ``grad`` is filled by :meth:`GradTape.backward`."""

    __slots__ = ("value", "grad", "tape")

    def __init__(self, value: np.ndarray, tape: "GradTape"):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class GradTape:
    """Ordered record of primitive ops with their backward closures."""

    def __init__(self):
        self._ops: list = []
        self._params: Dict[str, Node] = {}

    def watch(self, value) -> Node:
        return Node(np.asarray(value, dtype=DTYPE), self)

    def param(self, store: Mapping[str, np.ndarray], name: str) -> Node:
        node = self._params.get(name)
        if node is None:
            node = Node(store[name], self)
            self._params[name] = node
        return node

    def params(self, store: Mapping[str, np.ndarray]) -> Dict[str, Node]:
        return {name: self.param(store, name) for name in store}

    def record(self, value: np.ndarray, backward: Callable[[np.ndarray], None]) -> Node:
        out = Node(value, self)
        self._ops.append((out, backward))
        return out

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Node) -> None:
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._ops):
            if out.grad is not None:
                fn(out.grad)

    def gradients(self, store: Mapping[str, np.ndarray]) -> ParameterStore:
        """Gradients for every entry of ``store``; untouched entries get zeros."""
        grads = {}
        for name, value in store.items():
            node = self._params.get(name)
            if node is None or node.grad is None:
                grads[name] = np.zeros_like(value)
            else:
                grads[name] = node.grad
        return grads


def _val(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs) -> Optional[GradTape]:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _acc(x, g):
    if isinstance(x, Node):
        # grads are never mutated in place, so views may be stored as-is
        if x.grad is None:
            x.grad = g
        else:
            x.grad = x.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b):
    va, vb = _val(a), _val(b)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        _acc(a, _unbroadcast(g, va.shape))
        _acc(b, _unbroadcast(g, vb.shape))

    return tape.record(out, back)


def sub(a, b):
    va, vb = _val(a), _val(b)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        _acc(a, _unbroadcast(g, va.shape))
        _acc(b, _unbroadcast(-g, vb.shape))

    return tape.record(out, back)


def mul(a, b):
    va, vb = _val(a), _val(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        _acc(a, _unbroadcast(g * vb, va.shape))
        _acc(b, _unbroadcast(g * va, vb.shape))

    return tape.record(out, back)


def scale(a, c: float):
    va = _val(a)
    out = va * c
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(a, g * c))


def matmul(a, b):
    va, vb = _val(a), _val(b)
    if va.shape[-1] != vb.shape[0]:
        raise DimensionError(f"matmul shapes {va.shape} and {vb.shape} do not conform")
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(a, Node):
            _acc(a, g @ vb.T if vb.ndim == 2 else np.multiply.outer(g, vb))
        if isinstance(b, Node):
            if va.ndim == 1:
                _acc(b, np.multiply.outer(va, g))
            else:
                _acc(b, va.T @ g)

    return tape.record(out, back)


def transpose(a):
    va = _val(a)
    out = va.T
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(a, g.T))


def as_row(x):
    """View a vector as a 1-row matrix."""
    vx = _val(x)
    out = vx[None, :]
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(x, g[0]))


def affine(x, W, b):
    """``W @ x + b`` for a vector ``x``, or row-wise ``x @ W.T + b`` for a matrix."""
    vx, vW, vb = _val(x), _val(W), _val(b)
    if vW.ndim != 2 or vb.shape != (vW.shape[0],) or vx.shape[-1] != vW.shape[1]:
        raise DimensionError(
            f"affine: x{tuple(vx.shape)} W{tuple(vW.shape)} b{tuple(vb.shape)} do not conform"
        )
    out = vx @ vW.T + vb
    tape = _tape_of(x, W, b)
    if tape is None:
        return out

    def back(g):
        if isinstance(x, Node):
            _acc(x, g @ vW)
        if isinstance(W, Node):
            _acc(W, np.multiply.outer(g, vx) if vx.ndim == 1 else g.T @ vx)
        if isinstance(b, Node):
            _acc(b, g if g.ndim == 1 else g.sum(axis=0))

    return tape.record(out, back)


def relu(x):
    vx = _val(x)
    mask = vx > 0
    out = vx * mask
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(x, g * mask))


def sigmoid(x):
    vx = _val(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * vx))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(x, g * out * (1.0 - out)))


def softmax(x, axis: int = -1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    vx = _val(x)
    if vx.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(vx - vx.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        _acc(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return tape.record(out, back)


def concat(xs: Sequence, axis: int = -1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        for x, gi in zip(xs, np.split(g, bounds, axis=axis)):
            _acc(x, gi)

    return tape.record(out, back)


def total(x, axis=None):
    vx = _val(x)
    out = vx.sum(axis=axis)
    tape = _tape_of(x)
    if tape is None:
        return out

    def back(g):
        if axis is None:
            _acc(x, np.broadcast_to(g, vx.shape).copy())
        else:
            _acc(x, np.broadcast_to(np.expand_dims(g, axis), vx.shape).copy())

    return tape.record(out, back)


def mean_rows(x, weights: np.ndarray):
    """``weights @ x`` with constant ``weights`` (pooling matrix)."""
    vx = _val(x)
    out = weights @ vx
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(x, weights.T @ g))


def take_rows(table, idx: np.ndarray):
    """Row gather ``table[idx]``; the backward pass scatter-adds."""
    vt = _val(table)
    out = vt[idx]
    tape = _tape_of(table)
    if tape is None:
        return out

    def back(g):
        full = np.zeros_like(vt)
        np.add.at(full, idx, g)
        _acc(table, full)

    return tape.record(out, back)


def segment_sum(x, segments: np.ndarray, n_segments: int):
    """Sum rows of ``x`` into ``n_segments`` buckets given by ``segments``."""
    vx = _val(x)
    out = np.zeros((n_segments,) + vx.shape[1:], dtype=DTYPE)
    np.add.at(out, segments, vx)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, lambda g: _acc(x, g[segments]))


def dropout(x, rate: float, rng: Optional[np.random.Generator]):
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    vx = _val(x)
    keep = (rng.random(vx.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(pred, gold: int) -> float:
    """``-ln pred[gold]`` with the probability floored at 1e-12."""
    p = np.asarray(_val(pred), dtype=DTYPE)
    if not 0 <= gold < p.shape[-1]:
        raise IndexError(f"gold class {gold} out of range for {p.shape[-1]} classes")
    return -math.log(max(float(p[gold]), PROB_FLOOR))


def softmax_cross_entropy(logits, gold):
    """Mean of ``-log softmax(logits)[gold]`` over rows; fused for a clean gradient.

    ``logits`` is a vector with an int ``gold`` or a matrix with an int array.
    """
    vz = _val(logits)
    z = vz if vz.ndim == 2 else vz[None, :]
    gold = np.atleast_1d(np.asarray(gold))
    if gold.min() < 0 or gold.max() >= z.shape[1]:
        raise IndexError(f"gold class out of range for {z.shape[1]} classes")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    logp = shifted[rows, gold] - logsum
    out = np.asarray(-logp.mean())
    tape = _tape_of(logits)
    if tape is None:
        return out

    def back(g):
        p = np.exp(shifted - logsum[:, None])
        p[rows, gold] -= 1.0
        p *= g / z.shape[0]
        _acc(logits, p if vz.ndim == 2 else p[0])

    return tape.record(out, back)


def sigmoid_binary_cross_entropy(logits, targets: np.ndarray):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    vz = _val(logits)
    # log(1 + exp(-|z|)) form avoids overflow
    loss = np.maximum(vz, 0) - vz * targets + np.log1p(np.exp(-np.abs(vz)))
    out = np.asarray(loss.mean())
    tape = _tape_of(logits)
    if tape is None:
        return out

    def back(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * vz))
        _acc(logits, (p - targets) * (g / vz.size))

    return tape.record(out, back)


# ---------------------------------------------------------------------------
# parameters


def init_gaussian(rng: np.random.Generator, shapes: Mapping[str, tuple], std: float = 0.01,
                  zero_bias: bool = True) -> ParameterStore:
    """Gaussian(0, std) init; names starting with ``b_`` are zeroed when ``zero_bias``."""
    store = {}
    for name, shape in shapes.items():
        if zero_bias and name.startswith("b_"):
            store[name] = np.zeros(shape, dtype=DTYPE)
        else:
            store[name] = rng.normal(0.0, std, size=shape).astype(DTYPE)
    return store


def init_scaled(rng: np.random.Generator, shapes: Mapping[str, tuple],
                tables: Sequence[str] = (), table_std: float = 0.5,
                gain: float = 1.0) -> ParameterStore:
    """Fan-in scaled init: matrices get std ``sqrt(gain / fan_in)`` with fan-in the
    last axis, lookup ``tables`` get ``table_std`` and ``b_`` vectors are zero."""
    store = {}
    for name, shape in shapes.items():
        if name.startswith("b_"):
            store[name] = np.zeros(shape, dtype=DTYPE)
            continue
        std = table_std if name in tables else np.sqrt(gain / shape[-1])
        store[name] = rng.normal(0.0, std, size=shape).astype(DTYPE)
    return store


def _check_same_layout(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]):
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise KeyError(f"parameter name mismatch: {missing}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise DimensionError(
                f"parameter {name!r}: shape {a[name].shape} vs gradient {b[name].shape}"
            )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for _, g in sorted(grads.items())))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> ParameterStore:
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             lr: float = 0.1, l2: float = 0.0, clip: Optional[float] = None) -> ParameterStore:
    """Return ``w - lr * (g + l2 * w)`` for every tensor, ``g`` optionally norm-clipped."""
    _check_same_layout(params, grads)
    if clip is not None:
        grads = clip_by_global_norm(grads, clip)
    if lr == 0.0:
        return {k: v.copy() for k, v in params.items()}
    return {k: w - lr * (grads[k] + l2 * w) if l2 else w - lr * grads[k]
            for k, w in params.items()}


def finite_diff_check(loss_fn: Callable[[Mapping[str, np.ndarray]], tuple],
                      params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      max_coords: int = 20, rng: Optional[np.random.Generator] = None,
                      names: Optional[Iterable[str]] = None, floor: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn(params)`` must return ``(loss_value, grads)`` and be deterministic.
    Up to ``max_coords`` coordinates are sampled per tensor. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``. The floor sits above the roundoff of a
    central difference on an O(1) loss (about 1e-10 absolute at eps=1e-6), so
    two near-zero gradients cannot produce a spurious large ratio.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    _, analytic = loss_fn(base)
    worst = 0.0
    for name in (names if names is not None else sorted(base)):
        w = base[name]
        flat = w.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        ga = np.asarray(analytic[name]).reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = float(loss_fn(base)[0])
            flat[c] = orig - eps
            fm = float(loss_fn(base)[0])
            flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            a = float(ga[c])
            denom = max(abs(a), abs(num), floor)
            worst = max(worst, abs(a - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CKPT_HEADER = b"ENROLL-CKPT v1\n"


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    """Write named tensors in sorted-name order, little-endian doubles."""
    chunks = [CKPT_HEADER, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, expected_shapes: Optional[Mapping[str, tuple]] = None) -> ParameterStore:
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_HEADER):
        raise ValueError(f"{path}: not an ENROLL-CKPT v1 file")
    pos = len(CKPT_HEADER)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * n
        params[name] = arr
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in params:
                raise DimensionError(f"checkpoint {path} lacks parameter {name!r}")
            if tuple(params[name].shape) != tuple(shape):
                raise DimensionError(
                    f"checkpoint parameter {name!r} has shape {params[name].shape}, "
                    f"configured {tuple(shape)}"
                )
        extra = set(params) - set(expected_shapes)
        if extra:
            raise DimensionError(f"checkpoint has unexpected parameters {sorted(extra)}")
    return params
