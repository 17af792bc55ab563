"""Dense float64 matrices with tape-based reverse-mode differentiation.

Only the handful of operations the set network needs are provided.  Every
value is a 2-D ``float64`` array wrapped in :class:`Matrix`; operations are
recorded on the active :class:`Tape` (if any) and :func:`backward` walks the
tape in reverse, accumulating gradients into the leaf parameters.

Example::

    params = ParamStore()
    w = params.add("w", rng.normal(size=(3, 2)))
    with Tape():
        loss = total(square(matmul(x, w)))
    backward(loss)          # w.grad now holds d loss / d w
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from collections.abc import Callable, Iterator
from pathlib import Path

import numpy as np

__all__ = [
    "Adam",
    "DimensionError",
    "Matrix",
    "NumericalError",
    "ParamStore",
    "Segments",
    "StateError",
    "Tape",
    "add",
    "backward",
    "concat_cols",
    "expand",
    "load_checkpoint",
    "matmul",
    "mul",
    "positive_probability",
    "relu",
    "save_checkpoint",
    "segment_pool",
    "square",
    "total",
    "weighted_bce",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StateError(RuntimeError):
    """An operation was called in the wrong order (e.g. backward without a tape)."""


class NumericalError(ArithmeticError):
    """A NaN or infinity appeared where a finite value is required."""


_local = threading.local()
_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle finiteness assertions on every op output (on in the test suite)."""
    global _check_finite
    _check_finite = bool(enabled)


def _active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class Matrix:
    """A 2-D float64 value, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Matrix needs 2 dims, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on a {self.shape} matrix")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Matrix{label}({self.rows}x{self.cols})"


class Tape:
    """Records differentiable operations executed inside its ``with`` block."""

    def __init__(self):
        self._records: list[tuple[Matrix, Callable[[np.ndarray], None]]] = []
        self._freed = False
        self._previous: Tape | None = None

    def __enter__(self) -> Tape:
        self._previous = _active_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._previous

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Matrix, grad_fn: Callable[[np.ndarray], None]) -> None:
        if self._freed:
            raise StateError("tape already consumed by backward()")
        out._tape = self
        self._records.append((out, grad_fn))

    def backward(self, loss: Matrix) -> None:
        if self._freed:
            raise StateError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, grad_fn in reversed(self._records):
            if out.grad is not None:
                grad_fn(out.grad)
                out.grad = None
            out._tape = None
        self._records.clear()
        self._freed = True


def backward(loss: Matrix) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` and free the tape."""
    tape = loss._tape
    if tape is None:
        raise StateError("loss was not produced by a recorded forward pass")
    tape.backward(loss)


def _accumulate(node: Matrix, g: np.ndarray, fresh: bool = False) -> None:
    """Add ``g`` into ``node.grad``; ``fresh`` arrays are owned by nobody else
    and may be adopted without a copy."""
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = g if fresh else g.copy()
    else:
        node.grad += g


def _result(data: np.ndarray, inputs: tuple[Matrix, ...], grad_fn) -> Matrix:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced")
    needs = any(m.requires_grad for m in inputs)
    out = Matrix.__new__(Matrix)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    out._tape = None
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, grad_fn)
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g, fresh=True)

    return _result(a.data @ b.data, (a, b), grad_fn)


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; ``b`` may also be a single row broadcast over ``a``'s rows."""
    if a.shape == b.shape:
        row_broadcast = False
    elif b.rows == 1 and b.cols == a.cols:
        row_broadcast = True
    else:
        raise DimensionError(f"add {a.shape} + {b.shape}")

    def grad_fn(g):
        # out.grad is dropped after this call, so `a` may adopt it
        _accumulate(a, g, fresh=True)
        if b.requires_grad:
            if row_broadcast:
                _accumulate(b, g.sum(axis=0, keepdims=True), fresh=True)
            else:
                _accumulate(b, g)

    return _result(a.data + b.data, (a, b), grad_fn)


def mul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise DimensionError(f"mul {a.shape} * {b.shape}")

    def grad_fn(g):
        if a.requires_grad:
            _accumulate(a, g * b.data, fresh=True)
        if b.requires_grad:
            _accumulate(b, g * a.data, fresh=True)

    return _result(a.data * b.data, (a, b), grad_fn)


def square(a: Matrix) -> Matrix:
    def grad_fn(g):
        _accumulate(a, 2.0 * a.data * g, fresh=True)

    return _result(a.data * a.data, (a,), grad_fn)


def relu(a: Matrix) -> Matrix:
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        _accumulate(a, g * (out > 0), fresh=True)

    return _result(out, (a,), grad_fn)


def total(a: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""

    def grad_fn(g):
        _accumulate(a, np.full(a.shape, g[0, 0]), fresh=True)

    return _result(np.array([[a.data.sum()]]), (a,), grad_fn)


def concat_cols(a: Matrix, b: Matrix) -> Matrix:
    if a.rows != b.rows:
        raise DimensionError(f"concat_cols {a.shape} | {b.shape}")
    split = a.cols

    def grad_fn(g):
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _result(np.hstack([a.data, b.data]), (a, b), grad_fn)


class Segments:
    """Contiguous row groups of a packed matrix: group ``i`` is rows
    ``offsets[i]:offsets[i] + counts[i]``."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
            raise DimensionError("segments need at least one group, each non-empty")
        self.counts = counts
        self.offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.ids = np.repeat(np.arange(counts.size), counts)

    def __len__(self) -> int:
        return self.counts.size

    @property
    def total_rows(self) -> int:
        return int(self.counts.sum())


def segment_pool(a: Matrix, seg: Segments, kind: str = "mean") -> Matrix:
    """Reduce each segment of rows to one row by mean, sum or max."""
    if a.rows != seg.total_rows:
        raise DimensionError(f"segment_pool over {a.rows} rows, segments cover {seg.total_rows}")
    if kind == "sum":
        data = np.add.reduceat(a.data, seg.offsets, axis=0)

        def grad_fn(g):
            _accumulate(a, g[seg.ids], fresh=True)

    elif kind == "mean":
        data = np.add.reduceat(a.data, seg.offsets, axis=0) / seg.counts[:, None]

        def grad_fn(g):
            _accumulate(a, (g / seg.counts[:, None])[seg.ids], fresh=True)

    elif kind == "max":
        data = np.maximum.reduceat(a.data, seg.offsets, axis=0)

        def grad_fn(g):
            # route each group's gradient to the first row attaining the max
            hit = a.data == data[seg.ids]
            rows = np.arange(a.rows)[:, None]
            first = np.minimum.reduceat(np.where(hit, rows, a.rows), seg.offsets, axis=0)
            ga = np.zeros_like(a.data)
            cols = np.broadcast_to(np.arange(a.cols), first.shape)
            ga[first, cols] = g
            _accumulate(a, ga)

    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return _result(data, (a,), grad_fn)


def expand(a: Matrix, seg: Segments) -> Matrix:
    """Repeat row ``i`` of ``a`` once for every row of segment ``i``."""
    if a.rows != len(seg):
        raise DimensionError(f"expand {a.rows} rows to {len(seg)} segments")

    def grad_fn(g):
        _accumulate(a, np.add.reduceat(g, seg.offsets, axis=0), fresh=True)

    return _result(a.data[seg.ids], (a,), grad_fn)


PROB_CLAMP = 1e-12


def positive_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax probability of column 1 for a (B, 2) logit array."""
    z = np.asarray(logits, dtype=np.float64)
    d = z[:, 0] - z[:, 1]
    # 1 / (1 + e^d) without overflow
    out = np.empty_like(d)
    pos = d >= 0
    e = np.exp(-d[pos])
    out[pos] = e / (1.0 + e)
    out[~pos] = 1.0 / (1.0 + np.exp(d[~pos]))
    return out


def weighted_bce(logits: Matrix, labels, pos_weight: float = 1.0) -> Matrix:
    """Mean class-weighted binary cross-entropy of a 2-way softmax.

    Per instance: ``-(w * y * log p + (1 - y) * log(1 - p))`` with ``p`` the
    positive-class softmax probability, clamped to ``[1e-12, 1 - 1e-12]``.
    The published objective prints the negative term as ``(1 - y)(1 - log p)``;
    that is taken as a typo for ordinary cross-entropy.
    """
    if logits.cols != 2:
        raise DimensionError(f"expected (B, 2) logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != logits.rows:
        raise DimensionError(f"{y.size} labels for {logits.rows} logits")
    p_raw = positive_probability(logits.data)
    p = np.clip(p_raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = -(pos_weight * y * np.log(p) + (1.0 - y) * np.log1p(-p))
    batch = y.size

    def grad_fn(g):
        inside = (p_raw > PROB_CLAMP) & (p_raw < 1.0 - PROB_CLAMP)
        dl_dp = (-pos_weight * y / p + (1.0 - y) / (1.0 - p)) * inside
        dz1 = dl_dp * p_raw * (1.0 - p_raw) * (g[0, 0] / batch)
        _accumulate(logits, np.stack([-dz1, dz1], axis=1), fresh=True)

    return _result(np.array([[per.mean()]]), (logits,), grad_fn)


class ParamStore:
    """Named trainable matrices with same-shaped gradient buffers."""

    def __init__(self):
        self._params: dict[str, Matrix] = {}
        self._penalized: set[str] = set()

    def add(self, name: str, value, penalize: bool = True) -> Matrix:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        m = Matrix(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = m
        if penalize:
            self._penalized.add(name)
        return m

    def __getitem__(self, name: str) -> Matrix:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def penalized(self, name: str) -> bool:
        return name in self._penalized

    def zero_grad(self) -> None:
        for m in self._params.values():
            m.grad = np.zeros_like(m.data)

    def state(self) -> dict[str, np.ndarray]:
        return {k: m.data.copy() for k, m in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, m in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != m.shape:
                raise DimensionError(f"{k}: stored {arr.shape}, expected {m.shape}")
            m.data = arr.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, m in self._params.items():
            h.update(k.encode())
            h.update(struct.pack("<2q", *m.shape))
            h.update(np.ascontiguousarray(m.data, dtype="<f8").tobytes())
        return h.hexdigest()


class Adam:
    """Adam with an additive l1 subgradient ``l1 * sign(w)`` on penalized weights."""

    def __init__(self, lr: float = 1e-3, l1: float = 0.0, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if l1 < 0:
            raise ValueError("l1 coefficient must be non-negative")
        self.lr, self.l1 = lr, l1
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.l1 and params.penalized(name):
                g = g + self.l1 * np.sign(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = np.zeros_like(p.data)


_MAGIC = b"METAOCC-CKPT 1\n"


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Write parameters as a JSON header line followed by raw little-endian float64."""
    header = {
        "meta": meta or {},
        "params": [[k, list(m.shape)] for k, m in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, m in params.items():
            fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (name -> array, meta) from a file written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise StateError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    pos = end + 1
    arrays = {}
    for name, shape in header["params"]:
        n = shape[0] * shape[1]
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(raw):
        raise StateError(f"{path}: {len(raw) - pos} trailing bytes")
    return arrays, header["meta"]
