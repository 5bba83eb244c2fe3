"""Dense-tensor engine with reverse-mode gradients, Adam and checkpoints.

Computations run on float32 by default (float64 is used by the gradient
checker); all kernels are plain single-threaded numpy, so identical inputs
reproduce bit-identical outputs. Logits passed through the masked softmax
are clipped to +/-50 to survive extreme reward exponents.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOGIT_CLIP = 50.0


class NumericsError(ValueError):
    """Shape mismatch or invalid numeric state."""


class MaskError(NumericsError):
    """A softmax row had no unmasked entry."""


class GradientError(NumericsError):
    """A gradient was NaN or infinite; names the parameter."""


class Tensor:
    """Array node in a backward-traversable computation graph."""

    __slots__ = ("values", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, values: np.ndarray, parents: tuple = (),
                 backward_fn: Optional[Callable] = None,
                 requires_grad: bool = False, name: str = ""):
        self.values = np.asarray(values)
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, grad={'yes' if self.grad is not None else 'no'})"


def leaf(values: np.ndarray, name: str = "") -> Tensor:
    return Tensor(np.asarray(values), requires_grad=True, name=name)


def constant(values, dtype=None) -> Tensor:
    arr = np.asarray(values)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def backward(loss: Tensor):
    """Accumulate gradients of a scalar loss into every reachable node."""
    if loss.values.size != 1:
        raise NumericsError(f"backward needs a scalar, got shape {loss.values.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    for node in topo:
        node.grad = np.zeros_like(node.values)
    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def _accumulate(node: Tensor, grad: np.ndarray):
    if node.requires_grad and node.grad is not None:
        node.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- primitive operations -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values @ b.values
    except ValueError as exc:
        raise NumericsError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from exc
    out = Tensor(values, parents=(a, b))

    def backward_fn(g):
        av, bv = a.values, b.values
        if av.ndim == 2 and bv.ndim == 2:
            _accumulate(a, g @ bv.T)
            _accumulate(b, av.T @ g)
        elif av.ndim == 2 and bv.ndim == 1:
            _accumulate(a, np.outer(g, bv))
            _accumulate(b, av.T @ g)
        elif av.ndim == 1 and bv.ndim == 2:
            _accumulate(a, g @ bv.T)
            _accumulate(b, np.outer(av, g))
        else:  # 1D @ 1D
            _accumulate(a, g * bv)
            _accumulate(b, g * av)

    out.backward_fn = backward_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError as exc:
        raise NumericsError(f"add: incompatible shapes {a.shape} + {b.shape}") from exc
    out = Tensor(values, parents=(a, b))

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.values.shape))
        _accumulate(b, _unbroadcast(g, b.values.shape))

    out.backward_fn = backward_fn
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values * b.values
    except ValueError as exc:
        raise NumericsError(f"mul: incompatible shapes {a.shape} * {b.shape}") from exc
    out = Tensor(values, parents=(a, b))

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.values.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.values.shape))

    out.backward_fn = backward_fn
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values, parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, -g)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0), parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, g * (a.values > 0))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values, parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, 2.0 * g * a.values)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise NumericsError("log: non-positive input")
    out = Tensor(np.log(a.values), parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, g / a.values)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = np.concatenate([t.values for t in tensors], axis=axis)
    out = Tensor(values, parents=tuple(tensors))
    sizes = [t.values.shape[axis] for t in tensors]

    def backward_fn(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + size)
            _accumulate(t, g[tuple(index)])
            offset += size

    out.backward_fn = backward_fn
    return out


def gather_rows(a: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    out = Tensor(a.values[rows], parents=(a,))

    def backward_fn(g):
        if a.requires_grad and a.grad is not None:
            np.add.at(a.grad, rows, g)

    out.backward_fn = backward_fn
    return out


def gather_pairs(a: Tensor, rows, cols) -> Tensor:
    """Pick entries a[rows[k], cols[k]] from a 2D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.values.ndim != 2:
        raise NumericsError(f"gather_pairs: need 2D input, got {a.shape}")
    out = Tensor(a.values[rows, cols], parents=(a,))

    def backward_fn(g):
        if a.requires_grad and a.grad is not None:
            np.add.at(a.grad, (rows, cols), g)

    out.backward_fn = backward_fn
    return out


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise NumericsError(f"transpose: need 2D input, got {a.shape}")
    out = Tensor(a.values.T, parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, g.T)
    return out


def row_l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalize each row of a 2D tensor to unit L2 norm."""
    if a.values.ndim != 2:
        raise NumericsError(f"row_l2_normalize: need 2D input, got {a.shape}")
    norms = np.sqrt((a.values * a.values).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps).astype(a.values.dtype)
    values = a.values / norms
    out = Tensor(values, parents=(a,))

    def backward_fn(g):
        dot = (g * values).sum(axis=1, keepdims=True)
        _accumulate(a, (g - values * dot) / norms)

    out.backward_fn = backward_fn
    return out


def mean(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.values.mean(dtype=np.float64)).astype(a.values.dtype),
                 parents=(a,))
    out.backward_fn = lambda g: _accumulate(
        a, np.full_like(a.values, float(g) / a.values.size))
    return out


def sum_(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.values.sum(dtype=np.float64)).astype(a.values.dtype),
                 parents=(a,))
    out.backward_fn = lambda g: _accumulate(a, np.full_like(a.values, float(g)))
    return out


def masked_log_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-softmax over unmasked entries; masked entries get -inf.

    Accepts (K,) or (B, K) logits with a boolean mask of the same shape.
    Logits are clipped to +/-LOGIT_CLIP before normalization. Rows with no
    unmasked entry raise MaskError.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.values.shape:
        raise NumericsError(
            f"masked_log_softmax: mask shape {mask.shape} != logits {logits.shape}")
    squeeze = logits.values.ndim == 1
    lv = logits.values[None, :] if squeeze else logits.values
    mv = mask[None, :] if squeeze else mask
    bad = ~mv.any(axis=1)
    if bad.any():
        raise MaskError(f"all-masked softmax row(s): {np.flatnonzero(bad).tolist()}")
    clipped = np.clip(lv, -LOGIT_CLIP, LOGIT_CLIP)
    neg_inf = np.array(-np.inf, dtype=lv.dtype)
    masked_vals = np.where(mv, clipped, neg_inf)
    row_max = masked_vals.max(axis=1, keepdims=True)
    shifted = np.where(mv, clipped - row_max, neg_inf)
    expd = np.where(mv, np.exp(np.where(mv, shifted, 0)), 0)
    lse = np.log(expd.sum(axis=1, keepdims=True))
    values = np.where(mv, shifted - lse, neg_inf)
    softmax = np.where(mv, expd / expd.sum(axis=1, keepdims=True), 0)
    pass_through = mv & (np.abs(lv) < LOGIT_CLIP)
    if squeeze:
        values = values[0]
    out = Tensor(values.astype(logits.values.dtype, copy=False), parents=(logits,))

    def backward_fn(g):
        gv = g[None, :] if squeeze else g
        gz = np.where(mv, gv, 0)
        grad = gz - softmax * gz.sum(axis=1, keepdims=True)
        grad = np.where(pass_through, grad, 0)
        _accumulate(logits, grad[0] if squeeze else grad)

    out.backward_fn = backward_fn
    return out


# -- parameters and optimizer --------------------------------------------------


class ParamStore:
    """Named parameters with per-parameter Adam state and group labels."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, np.ndarray] = {}
        self._groups: dict[str, str] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.version = 0  # bumped on any parameter mutation

    def add(self, name: str, values: np.ndarray, group: str = "default") -> np.ndarray:
        if name in self._params:
            raise NumericsError(f"duplicate parameter name {name!r}")
        arr = np.ascontiguousarray(values, dtype=self.dtype)
        self._params[name] = arr
        self._groups[name] = group
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def group(self, name: str) -> str:
        return self._groups[name]

    def set_values(self, name: str, values: np.ndarray):
        arr = np.ascontiguousarray(values, dtype=self.dtype)
        if arr.shape != self._params[name].shape:
            raise NumericsError(
                f"shape mismatch for {name!r}: {arr.shape} vs {self._params[name].shape}")
        self._params[name] = arr
        self.version += 1

    def leaves(self) -> dict[str, Tensor]:
        """Fresh graph leaves over the current parameter arrays."""
        return {name: leaf(self._params[name], name=name) for name in self.names()}

    def as_arrays(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def state_hash(self, names: Optional[Iterable[str]] = None) -> int:
        """Order-stable hash of parameter bytes, for isolation checks."""
        import hashlib
        digest = hashlib.sha256()
        for name in sorted(names) if names is not None else self.names():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self._params[name]).tobytes())
        return int.from_bytes(digest.digest()[:8], "little")


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with bias correction.

    `lr` is a float or a {group: lr} mapping so the partition-function
    parameter can learn faster than the policy weights. Aborts before
    touching anything if any gradient is non-finite.
    """
    for name, grad in grads.items():
        if name not in store:
            raise NumericsError(f"unknown parameter {name!r}")
        if not np.all(np.isfinite(grad)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    store.step_count += 1
    store.version += 1
    t = store.step_count
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, grad in grads.items():
        grad = np.asarray(grad, dtype=store.dtype)
        if isinstance(lr, dict):
            group = store.group(name)
            if group in lr:
                rate = lr[group]
            elif "default" in lr:
                rate = lr["default"]
            else:
                raise NumericsError(f"no learning rate for group {group!r}")
        else:
            rate = lr
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1 - beta1) * grad
        v *= beta2
        v += (1 - beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        store._params[name] -= (np.asarray(rate, dtype=store.dtype)
                                * m_hat / (np.sqrt(v_hat) + eps))


def grad_check(fn: Callable[[dict[str, Tensor]], Tensor], store: ParamStore,
               h: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    `fn` must be a pure deterministic function from parameter leaves to a
    scalar Tensor. Errors are measured relative to the largest gradient
    magnitude so uniformly tiny gradients do not blow up the ratio.
    """
    if not (1e-5 <= h <= 1e-2):
        raise NumericsError(f"step size {h} outside [1e-5, 1e-2]")
    leaves = store.leaves()
    loss = fn(leaves)
    backward(loss)
    analytic = {name: (leaves[name].grad.copy() if leaves[name].grad is not None
                       else np.zeros_like(store[name]))
                for name in store.names()}

    def value_at() -> float:
        return float(fn(store.leaves()).values)

    worst = 0.0
    scale = max((float(np.max(np.abs(g))) for g in analytic.values()), default=0.0)
    for name in store.names():
        arr = store[name]
        numeric = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + h
            up = value_at()
            flat[k] = original - h
            down = value_at()
            flat[k] = original
            num_flat[k] = (up - down) / (2 * h)
        scale = max(scale, float(np.max(np.abs(numeric))) if numeric.size else 0.0)
        diff = np.abs(analytic[name].astype(np.float64) - numeric)
        if diff.size:
            worst = max(worst, float(diff.max()))
    return worst / max(scale, 1e-12)


# -- checkpoints ----------------------------------------------------------------

_MAGIC = b"SYNF"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    metadata: Optional[dict[str, str]] = None):
    """Versioned little-endian float32 checkpoint, byte-stable across runs."""
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(struct.pack("<I", _VERSION))
        handle.write(struct.pack("<I", len(meta)))
        handle.write(meta)
        handle.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode()
            handle.write(struct.pack("<H", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                handle.write(struct.pack("<I", dim))
            handle.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as handle:
        if handle.read(4) != _MAGIC:
            raise NumericsError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", handle.read(4))
        if version != _VERSION:
            raise NumericsError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", handle.read(4))
        metadata = json.loads(handle.read(meta_len).decode())
        (count,) = struct.unpack("<I", handle.read(4))
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", handle.read(2))
            name = handle.read(name_len).decode()
            (ndim,) = struct.unpack("<B", handle.read(1))
            shape = tuple(struct.unpack("<I", handle.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(handle.read(size * 4), dtype="<f4").reshape(shape)
            arrays[name] = data.copy()
    return arrays, metadata
