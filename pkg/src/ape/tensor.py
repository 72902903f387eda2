"""Minimal dense numeric kernel with reverse-mode gradients.

Covers exactly the operations the alignment heads and the contrastive
objective need: affine maps, GELU, masked mean pooling, row normalization
and table-row gathering. Values are stored as contiguous row-major float32
(float64 in the test precision mode); there is no broadcasting beyond the
bias add, so every shape is explicit and auditable.

Gradients are recorded on a ``Tape``: each executed op appends one backward
closure, and ``Tape.backward`` replays the closures in exact reverse
execution order, accumulating into ``Tensor.grad``. Backward never mutates
forward values.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import DataError, DimensionError, NumericError

_DTYPE = {"value": np.float32}

# GELU tanh-approximation constants
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def active_dtype():
    return _DTYPE["value"]


@contextlib.contextmanager
def precision(dtype):
    """Switch the storage dtype for tensors created inside the block.

    ``precision(np.float64)`` is the 64-bit test mode used to drive
    finite-difference checks below float32 noise.
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    prev = _DTYPE["value"]
    _DTYPE["value"] = dtype
    try:
        yield
    finally:
        _DTYPE["value"] = prev


class Tensor:
    """Contiguous row-major float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.ascontiguousarray(data, dtype=active_dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(self.data))[0])
            raise NumericError(
                f"non-finite value in tensor {self.name or self.shape} at index {bad}"
            )
        return self

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, name={self.name!r})"


class Tape:
    """Ordered record of executed ops; backward replays them in reverse."""

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]):
        self._steps.append(backward_fn)

    def __len__(self):
        return len(self._steps)

    def backward(self, root: Tensor | None = None, seed: np.ndarray | None = None):
        """Run all recorded backward closures in reverse execution order.

        ``root`` receives the seed gradient (ones if not given); pass
        ``root=None`` when the caller has already seeded output gradients.
        """
        if root is not None:
            if seed is None:
                seed = np.ones_like(root.data)
            root.accumulate_grad(np.asarray(seed, dtype=root.data.dtype))
        for fn in reversed(self._steps):
            fn()


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def affine(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """``y = x @ w + b`` for x of shape (B, D_in) or (B, T, D_in).

    The same weights apply to every row / token position; bias add is the
    only broadcast in the kernel.
    """
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError(
            f"affine expects 2-d weights and 1-d bias, got {w.data.shape} and {b.data.shape}"
        )
    d_in, d_out = w.data.shape
    if x.data.ndim not in (2, 3) or x.data.shape[-1] != d_in:
        raise DimensionError(
            f"affine input shape {x.data.shape} incompatible with weight shape {w.data.shape}"
        )
    if b.data.shape[0] != d_out:
        raise DimensionError(
            f"affine bias shape {b.data.shape} incompatible with weight shape {w.data.shape}"
        )
    out = Tensor(x.data @ w.data + b.data)
    out.requires_grad = _needs_grad(x, w, b)
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(-1, d_out)
            x2 = x.data.reshape(-1, d_in)
            if x.requires_grad:
                x.accumulate_grad((g @ w.data.T).reshape(x.data.shape))
            if w.requires_grad:
                w.accumulate_grad(x2.T @ g2)
            if b.requires_grad:
                b.accumulate_grad(g2.sum(axis=0))
        tape.record(backward)
    return out


def gelu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    out = Tensor(0.5 * xd * (1.0 + t))
    out.requires_grad = x.requires_grad
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            sech2 = 1.0 - t * t
            local = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            x.accumulate_grad(g * local)
        tape.record(backward)
    return out


def masked_mean(x: Tensor, mask: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Mean over valid sequence positions: (B, T, D) x (B, T) -> (B, D).

    Every row must have at least one valid position; an all-masked row is an
    error, never a silent zero.
    """
    if x.data.ndim != 3:
        raise DimensionError(f"masked_mean expects (B, T, D), got {x.data.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape[:2]:
        raise DimensionError(
            f"mask shape {mask.shape} does not match sequence shape {x.data.shape[:2]}"
        )
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        row = int(np.argmin(counts))
        raise DataError(f"row {row} has an all-masked sequence; pooling is undefined")
    m = mask.astype(x.data.dtype)
    inv = (1.0 / counts).astype(x.data.dtype)
    out = Tensor(np.einsum("btd,bt->bd", x.data, m) * inv[:, None])
    out.requires_grad = x.requires_grad
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            x.accumulate_grad(g[:, None, :] * m[:, :, None] * inv[:, None, None])
        tape.record(backward)
    return out


def normalize_rows(x: Tensor, tape: Tape | None = None) -> Tensor:
    """L2-normalize each row of a (B, D) tensor."""
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows expects (B, D), got {x.data.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1))
    if np.any(norms == 0):
        row = int(np.argmin(norms))
        raise NumericError(f"row {row} has zero norm; cannot normalize")
    inv = (1.0 / norms).astype(x.data.dtype)
    y = x.data * inv[:, None]
    out = Tensor(y)
    out.requires_grad = x.requires_grad
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            proj = np.sum(y * g, axis=1, keepdims=True)
            x.accumulate_grad((g - y * proj) * inv[:, None])
        tape.record(backward)
    return out


def embedding_mean(
    table: Tensor,
    flat_ids: np.ndarray,
    offsets: np.ndarray,
    tape: Tape | None = None,
) -> Tensor:
    """Per-row mean of table rows selected by a ragged id list.

    ``flat_ids`` concatenates all rows' ids; ``offsets`` has length B+1 and
    delimits each row's slice. Every row must select at least one id.
    """
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-d, got {table.data.shape}")
    flat_ids = np.asarray(flat_ids, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts <= 0):
        row = int(np.argmin(counts))
        raise DataError(f"row {row} selects no table rows; pooling is undefined")
    if flat_ids.size and (flat_ids.min() < 0 or flat_ids.max() >= table.data.shape[0]):
        raise DimensionError(
            f"token id out of range for table with {table.data.shape[0]} rows"
        )
    gathered = table.data[flat_ids]
    sums = np.add.reduceat(gathered, offsets[:-1], axis=0)
    inv = (1.0 / counts).astype(table.data.dtype)
    out = Tensor(sums * inv[:, None])
    out.requires_grad = table.requires_grad
    if tape is not None and out.requires_grad:
        def backward():
            g = out.grad
            if g is None:
                return
            contrib = np.repeat(g * inv[:, None], counts, axis=0)
            dt = np.zeros_like(table.data)
            np.add.at(dt, flat_ids, contrib)
            table.accumulate_grad(dt)
        tape.record(backward)
    return out


def finite_difference_check(
    loss_fn: Callable[[Tape | None], Tensor],
    params: Sequence[Tensor],
    eps: float,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(tape)`` must rebuild the scalar loss from the current parameter
    values; it is called once with a tape for the analytic gradients and then
    twice per parameter entry with ``tape=None`` for the central differences.
    Relative error per entry is ``|analytic - central| / (|central| + 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = loss_fn(tape)
    if loss.data.size != 1:
        raise DimensionError(f"loss must be scalar, got shape {loss.data.shape}")
    tape.backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {p.name or p.shape}")
        flat = p.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(None).data.reshape(()))
            flat[i] = orig - eps
            f_minus = float(loss_fn(None).data.reshape(()))
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(float(aflat[i]) - central) / (abs(central) + 1e-8)
            if err > worst:
                worst = err
    return worst
