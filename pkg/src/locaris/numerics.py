"""Dense-tensor math with reverse-mode automatic differentiation.

Design: a Tensor wraps a float64 numpy array; primitives compute forward
values eagerly and, when a Tape is active and any input requires gradients,
append a node (output, inputs, backward rule) to the tape. grad() replays the
tape strictly in reverse, accumulating gradients additively for shared
inputs. There is no graph retention beyond the tape list, no higher-order
differentiation, and no implicit broadcasting surprises: every backward rule
reduces gradients back to its input's exact shape.

AdamW (decoupled weight decay), global-norm gradient clipping, a central
finite-difference oracle, and the binary checkpoint format live here too so
the model/training modules stay free of raw math.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import NoTape, NonFinite, NotScalar, SchemaError, ShapeMismatch

# When True, every primitive asserts its output is finite. Off by default:
# it costs a full pass over each output; property tests switch it on.
CHECK_FINITE = False

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """float64 array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Recorded primitive applications, replayed in reverse by grad().

    A tape is single-use: grad() consumes it, releasing every recorded
    activation immediately (the node list would otherwise keep whole step
    graphs alive through reference cycles until a generational GC pass).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    """Wrap a primitive result; record on the active tape when needed."""
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFinite("primitive produced NaN/Inf")
    out = Tensor(out_data)
    tape = _TAPE_STACK[-1] if _TAPE_STACK else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape numpy broadcast it up from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.data, b.data
    if A.ndim < 1 or B.ndim < 1:
        raise ShapeMismatch("matmul needs at least 1-D operands")
    try:
        out = A @ B
    except ValueError as exc:
        raise ShapeMismatch(f"matmul {A.shape} @ {B.shape}: {exc}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                # One big GEMM instead of a batched loop.
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
        return ga, gb

    return _finish(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}: {exc}") from None

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeMismatch(f"sub {a.shape} - {b.shape}: {exc}") from None

    def backward(g):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}: {exc}") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _finish(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c if a.requires_grad else None,)

    return _finish(a.data * c, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        return (g * mask if a.requires_grad else None,)

    return _finish(a.data * mask, (a,), backward)


def silu(a: Tensor) -> Tensor:
    x = a.data
    # Stable logistic: never exponentiates a positive argument.
    z = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0, z) / (1.0 + z)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (g * s * (1.0 + x * (1.0 - s)),)

    return _finish(x * s, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _finish(out, (a,), backward)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    d = x.shape[-1]
    if gain.data.shape != (d,):
        raise ShapeMismatch(f"rms_norm gain shape {gain.data.shape} != ({d},)")
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    y = x * inv

    def backward(g):
        ga = gg = None
        gw = g * gain.data
        if a.requires_grad:
            ga = inv * gw - (inv**3 / d) * x * (gw * x).sum(axis=-1, keepdims=True)
        if gain.requires_grad:
            gg = (g * y).reshape(-1, d).sum(axis=0)
        return ga, gg

    return _finish(y * gain.data, (a, gain), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise ShapeMismatch(f"ids outside table of {table.data.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return _finish(out, (table,), backward)


def rope_rotate(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over contiguous half-pairs of the last axis.

    a: (..., L, dh) with dh even; cos/sin: (L, dh/2), applied per position.
    """
    x = a.data
    dh = x.shape[-1]
    if dh % 2 != 0 or cos.shape != (x.shape[-2], dh // 2):
        raise ShapeMismatch(f"rope tables {cos.shape} incompatible with input {x.shape}")
    x1, x2 = x[..., : dh // 2], x[..., dh // 2 :]
    out = np.concatenate((x1 * cos - x2 * sin, x2 * cos + x1 * sin), axis=-1)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        g1, g2 = g[..., : dh // 2], g[..., dh // 2 :]
        return (np.concatenate((g1 * cos + g2 * sin, g2 * cos - g1 * sin), axis=-1),)

    return _finish(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def backward(g):
        return (g.reshape(old) if a.requires_grad else None,)

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape {old} -> {shape}: {exc}") from None
    return _finish(out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, ax1, ax2) if a.requires_grad else None,)

    return _finish(np.swapaxes(a.data, ax1, ax2).copy(), (a,), backward)


def take_per_row(a: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = a[i, idx[i], :] for a (B, L, d); used for last-token pooling."""
    x = a.data
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 3 or idx.shape != (x.shape[0],):
        raise ShapeMismatch(f"take_per_row on {x.shape} with idx {idx.shape}")
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise ShapeMismatch("take_per_row index out of range")
    rows = np.arange(x.shape[0])
    out = x[rows, idx]

    def backward(g):
        if not a.requires_grad:
            return (None,)
        ga = np.zeros_like(x)
        ga[rows, idx] = g
        return (ga,)

    return _finish(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.full(a.data.shape, float(g)) if a.requires_grad else None,)

    return _finish(np.asarray(a.data.sum()), (a,), backward)


# ---------------------------------------------------------------------------
# Reverse-mode gradient
# ---------------------------------------------------------------------------


def grad(loss: Tensor, params: Optional[Sequence[Tensor]] = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every requires_grad leaf on its tape.

    Returns a mapping id(tensor) -> gradient array and also writes each
    parameter's .grad. Leaves passed in `params` but absent from the tape get
    explicit zeros (a loss independent of a leaf has zero gradient).
    """
    tape = loss._tape
    if tape is None:
        raise NoTape("loss was not produced under an active Tape")
    if tape._consumed:
        raise NoTape("this tape was already consumed by a previous grad() call")
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(out) for out, _, _ in tape._nodes}
    for out, inputs, backward in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    # What remains in `grads` belongs to leaves (tensors never produced by a node).
    leaf_grads = {k: v for k, v in grads.items() if k not in produced}
    if params is not None:
        for p in params:
            if id(p) not in leaf_grads:
                leaf_grads[id(p)] = np.zeros_like(p.data)
            p.grad = leaf_grads[id(p)]
    tape._nodes.clear()
    tape._consumed = True
    return leaf_grads


# ---------------------------------------------------------------------------
# AdamW and gradient clipping
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Per-parameter moments plus hyperparameters; t counts completed steps."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, params: Sequence[Tensor], **hyper) -> "AdamWState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(
    params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState
) -> tuple[Sequence[Tensor], AdamWState]:
    """One AdamW update in place; decoupled weight decay applied separately."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeMismatch("params/grads/state lengths differ")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay != 0.0:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_global_norm(
    grads: Sequence[np.ndarray], max_norm: float
) -> tuple[list[np.ndarray], float]:
    """Scale all gradients by max_norm/total_norm when the total exceeds it."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        grads = [g * factor for g in grads]
    return list(grads), total


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Checks every coordinate when the total parameter count is at most 10^4,
    otherwise a seeded uniform subset of max_coords coordinates. f is called
    with no arguments and must be deterministic.
    """
    with Tape():
        loss = f()
        grad(loss, params)
    analytic = [p.grad.copy() for p in params]

    total = sum(p.size for p in params)
    coords: list[tuple[int, int]] = []
    if total <= 10_000:
        for i, p in enumerate(params):
            coords.extend((i, j) for j in range(p.size))
    else:
        rng = np.random.default_rng(seed)
        sizes = np.array([p.size for p in params])
        cum = np.cumsum(sizes)
        for flat in rng.choice(total, size=min(max_coords, total), replace=False):
            i = int(np.searchsorted(cum, flat, side="right"))
            j = int(flat - (cum[i - 1] if i > 0 else 0))
            coords.append((i, j))

    worst = 0.0
    for i, j in coords:
        p = params[i]
        original = p.data.flat[j]
        p.data.flat[j] = original + h
        plus = float(f().data)
        p.data.flat[j] = original - h
        minus = float(f().data)
        p.data.flat[j] = original
        numeric = (plus - minus) / (2.0 * h)
        rel = abs(analytic[i].flat[j] - numeric) / max(1e-12, abs(numeric))
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: magic, version, count, then per tensor
# name_len + name + rank + extents + float32 little-endian data.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LCRS"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name in sorted(tensors):
            data = tensors[name]
            arr = np.ascontiguousarray(
                data.data if isinstance(data, Tensor) else data, dtype="<f4"
            )
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as float64 arrays keyed by tensor name."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        out[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise SchemaError(f"{path}: {len(blob) - offset} trailing bytes")
    return out
