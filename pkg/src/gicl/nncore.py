"""Minimal dense 2-D tensor math with reverse-mode gradients.

Exactly the operator set the graph encoder and its losses need, nothing
more: affine maps, ReLU, grouped row means, row normalization, dropout,
row gather, row-wise dots, softmax cross-entropy, and a segmented listwise
softmax loss. Every op appends its output node to a Tape; backward() walks
the tape in reverse creation order, which is a valid topological order by
construction.

Values are stored in the dtype of their inputs (float32 by default,
float64 for gradient checking); reductions always accumulate in float64
before casting back. Any op producing a non-finite value raises
immediately.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

Array = np.ndarray


class Tensor2:
    """A 2-D value node. Leaf tensors hold parameters or constants."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data: Array, requires_grad: bool = False, name: str = ""):
        if data.ndim != 2:
            raise ValueError(f"Tensor2 requires 2-D data, got shape {data.shape}")
        self.data = data
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor2, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.name = name

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
            raise ValueError(f"item() needs a 1x1 tensor, got shape {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor2{tag}(shape={self.shape}, dtype={self.data.dtype})"


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str = "") -> Tensor2:
    """Make a leaf tensor; 1-D input becomes a single row."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return Tensor2(arr, requires_grad=requires_grad, name=name)


class Tape:
    """Ordered record of op outputs for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Tensor2] = []

    def record(self, out: Tensor2, parents: tuple[Tensor2, ...], backward: Callable[[], None]) -> Tensor2:
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("op produced a non-finite value")
        out._parents = parents
        out._backward = backward
        self.nodes.append(out)
        return out


def backward(tape: Tape, loss: Tensor2, params: "ParamSet | None" = None) -> dict[str, Array] | None:
    """Reverse-mode gradient accumulation seeded with d(loss)/d(loss)=1.

    Zeroes stale gradients on every tensor reachable from the tape, then
    applies each node's backward rule in reverse creation order. When a
    ParamSet is given, returns {name: gradient} for every entry (zeros for
    parameters the loss never touched).
    """
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar (1x1) tensor")
    if loss not in tape.nodes:
        raise ValueError("loss was not produced on this tape")

    involved: set[int] = set()
    for node in tape.nodes:
        involved.add(id(node))
        for parent in node._parents:
            involved.add(id(parent))
            parent.grad = None
        node.grad = None
    for node in tape.nodes:
        node.grad = np.zeros_like(node.data)
        for parent in node._parents:
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)

    loss.grad = np.ones_like(loss.data)
    seen_loss = False
    for node in reversed(tape.nodes):
        if node is loss:
            seen_loss = True
        if not seen_loss:
            continue
        if node._backward is not None:
            node._backward()

    if params is None:
        return None
    out: dict[str, Array] = {}
    for name, p in params.tensors.items():
        out[name] = p.grad if (p.grad is not None and id(p) in involved) else np.zeros_like(p.data)
        if p.grad is None:
            p.grad = out[name]
    return out


# ---------------------------------------------------------------------------
# primitives


def _accum(t: Tensor2, g: Array) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g.astype(t.data.dtype, copy=False)


def linear(tape: Tape, x: Tensor2, w: Tensor2, b: Tensor2 | None = None) -> Tensor2:
    """x @ w, plus a row-broadcast bias when given."""
    if x.cols != w.rows:
        raise ValueError(f"linear: x has {x.cols} cols but w has {w.rows} rows")
    if b is not None and (b.rows != 1 or b.cols != w.cols):
        raise ValueError(f"linear: bias shape {b.shape} does not match output width {w.cols}")
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    out = Tensor2(y)

    def back() -> None:
        g = out.grad
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        if b is not None:
            _accum(b, g.sum(axis=0, dtype=np.float64).reshape(1, -1))

    parents = (x, w) if b is None else (x, w, b)
    return tape.record(out, parents, back)


def matmul(tape: Tape, x: Tensor2, w: Tensor2) -> Tensor2:
    return linear(tape, x, w)


def add(tape: Tape, a: Tensor2, b: Tensor2) -> Tensor2:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor2(a.data + b.data)

    def back() -> None:
        _accum(a, out.grad)
        _accum(b, out.grad)

    return tape.record(out, (a, b), back)


def relu(tape: Tape, x: Tensor2) -> Tensor2:
    out = Tensor2(np.maximum(x.data, 0))

    def back() -> None:
        _accum(x, out.grad * (x.data > 0))

    return tape.record(out, (x,), back)


def scale(tape: Tape, x: Tensor2, alpha: float) -> Tensor2:
    out = Tensor2(x.data * x.data.dtype.type(alpha))

    def back() -> None:
        _accum(x, out.grad * x.data.dtype.type(alpha))

    return tape.record(out, (x,), back)


class RowAggregator:
    """Precomputed sparse mean-over-group operator, reusable across calls.

    Row g of the output is the mean of the input rows listed in group g;
    an empty group contributes an all-zero row.
    """

    def __init__(self, groups: Sequence[Sequence[int]], n_in: int):
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        for g, members in enumerate(groups):
            members = list(members)
            for m in members:
                if not 0 <= m < n_in:
                    raise IndexError(f"group {g}: row index {m} out of range for {n_in} rows")
                rows.append(g)
                cols.append(m)
                vals.append(1.0 / len(members))
        self.n_groups = len(groups)
        self.n_in = n_in
        self.matrix = sp.csr_matrix(
            (np.array(vals, dtype=np.float64), (rows, cols)), shape=(self.n_groups, n_in)
        )
        self.matrix_t = self.matrix.T.tocsr()

    @classmethod
    def from_csr(cls, offsets: Array, targets: Array) -> "RowAggregator":
        n = len(offsets) - 1
        groups = [targets[offsets[i]:offsets[i + 1]] for i in range(n)]
        return cls(groups, n_in=n)


def mean_rows(tape: Tape, x: Tensor2, groups: Sequence[Sequence[int]] | RowAggregator) -> Tensor2:
    """Group-wise row means; empty groups yield zero rows."""
    agg = groups if isinstance(groups, RowAggregator) else RowAggregator(groups, n_in=x.rows)
    if agg.n_in != x.rows:
        raise ValueError(f"mean_rows: aggregator expects {agg.n_in} rows, got {x.rows}")
    out = Tensor2((agg.matrix @ x.data.astype(np.float64)).astype(x.data.dtype))

    def back() -> None:
        _accum(x, (agg.matrix_t @ out.grad.astype(np.float64)).astype(x.data.dtype))

    return tape.record(out, (x,), back)


def l2_normalize_rows(tape: Tape, x: Tensor2) -> Tensor2:
    """Rows rescaled to unit Euclidean norm; zero rows pass through as zero."""
    sq = np.sum(x.data.astype(np.float64) ** 2, axis=1, keepdims=True)
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0)
    y = (x.data.astype(np.float64) / safe).astype(x.data.dtype)
    out = Tensor2(y)

    def back() -> None:
        g = out.grad.astype(np.float64)
        yd = y.astype(np.float64)
        proj = np.sum(g * yd, axis=1, keepdims=True)
        _accum(x, ((g - yd * proj) / safe).astype(x.data.dtype))

    return tape.record(out, (x,), back)


def dropout(tape: Tape, x: Tensor2, rate: float, rng: np.random.Generator) -> Tensor2:
    """Inverted dropout; identity when rate is 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        mask = None
        out = Tensor2(x.data.copy())
    else:
        mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1 - rate)
        out = Tensor2(x.data * mask)

    def back() -> None:
        _accum(x, out.grad if mask is None else out.grad * mask)

    return tape.record(out, (x,), back)


def gather_rows(tape: Tape, x: Tensor2, ids: Sequence[int]) -> Tensor2:
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError("gather_rows: row index out of range")
    out = Tensor2(x.data[idx])

    def back() -> None:
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        _accum(x, g)

    return tape.record(out, (x,), back)


def rowwise_dot(tape: Tape, a: Tensor2, b: Tensor2) -> Tensor2:
    """Per-row inner products: output column vector of shape (rows, 1)."""
    if a.shape != b.shape:
        raise ValueError(f"rowwise_dot: shape mismatch {a.shape} vs {b.shape}")
    d = np.sum(a.data.astype(np.float64) * b.data.astype(np.float64), axis=1, keepdims=True)
    out = Tensor2(d.astype(a.data.dtype))

    def back() -> None:
        _accum(a, out.grad * b.data)
        _accum(b, out.grad * a.data)

    return tape.record(out, (a, b), back)


def softmax_xent(tape: Tape, logits: Tensor2, targets: Sequence[int]) -> Tensor2:
    """Mean of -log softmax(logits)[target] over rows, max-subtracted."""
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (logits.rows,):
        raise ValueError(f"softmax_xent: expected {logits.rows} targets, got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.cols):
        raise ValueError("softmax_xent: target class index out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    n = logits.rows
    loss = -logp[np.arange(n), t].sum() / n
    out = Tensor2(np.array([[loss]], dtype=logits.data.dtype))
    probs = ez / denom

    def back() -> None:
        g = float(out.grad[0, 0])
        delta = probs.copy()
        delta[np.arange(n), t] -= 1.0
        _accum(logits, (g / n) * delta.astype(np.float64))

    return tape.record(out, (logits,), back)


def listwise_xent(
    tape: Tape,
    scores: Tensor2,
    segments: Sequence[tuple[int, int]],
    weights: Array,
) -> Tensor2:
    """Weighted softmax cross-entropy within each segment of a score column.

    Each segment [start, stop) is one candidate list; the softmax runs over
    that segment and every candidate with weight w > 0 contributes
    w * (-log softmax(score)). The total is divided by the sum of weights.
    """
    if scores.cols != 1:
        raise ValueError("listwise_xent expects a column vector of scores")
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != scores.rows:
        raise ValueError(f"listwise_xent: {scores.rows} scores but {w.shape[0]} weights")

    s = scores.data.astype(np.float64).reshape(-1)
    grad_s = np.zeros_like(s)
    total = 0.0
    total_w = 0.0
    for start, stop in segments:
        seg = s[start:stop]
        m = seg.max()
        e = np.exp(seg - m)
        lse = m + np.log(e.sum())
        p = e / e.sum()
        wseg = w[start:stop]
        total += float(np.dot(wseg, lse - seg))
        total_w += float(wseg.sum())
        grad_s[start:stop] = wseg.sum() * p - wseg
    if total_w <= 0:
        raise ValueError("listwise_xent: total positive weight must be > 0")
    loss = total / total_w
    out = Tensor2(np.array([[loss]], dtype=scores.data.dtype))

    def back() -> None:
        g = float(out.grad[0, 0])
        _accum(scores, (g / total_w) * grad_s.reshape(-1, 1))

    return tape.record(out, (scores,), back)


def sum_all(tape: Tape, x: Tensor2) -> Tensor2:
    """Sum of every entry, as a 1x1 tensor (float64 accumulation)."""
    out = Tensor2(np.array([[x.data.sum(dtype=np.float64)]], dtype=x.data.dtype))

    def back() -> None:
        _accum(x, np.full_like(x.data, out.grad[0, 0]))

    return tape.record(out, (x,), back)


def combine_scalars(tape: Tape, a: Tensor2, b: Tensor2, wa: float, wb: float) -> Tensor2:
    """wa*a + wb*b for two scalar tensors."""
    if a.data.size != 1 or b.data.size != 1:
        raise ValueError("combine_scalars expects 1x1 tensors")
    dt = a.data.dtype
    out = Tensor2(dt.type(wa) * a.data + dt.type(wb) * b.data)

    def back() -> None:
        _accum(a, out.grad * dt.type(wa))
        _accum(b, out.grad * dt.type(wb))

    return tape.record(out, (a, b), back)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamSet:
    """Named trainable tensors with per-parameter Adam state."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor2] = {}
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.step = 0

    def add(self, name: str, values: Array) -> Tensor2:
        if name in self.tensors:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor2(np.array(values, dtype=self.dtype), requires_grad=True, name=name)
        self.tensors[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor2:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ParamSet":
        dup = ParamSet(dtype=self.dtype)
        for name, t in self.tensors.items():
            dup.add(name, t.data.copy())
            dup.m[name] = self.m[name].copy()
            dup.v[name] = self.v[name].copy()
        dup.step = self.step
        return dup

    def save(self, path) -> None:
        """JSON header line followed by raw little-endian float32 payloads."""
        names = self.names()
        header = {
            "names": names,
            "shapes": {n: list(self.tensors[n].shape) for n in names},
            "step": self.step,
            "dtype": "f32le",
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for n in names:
                fh.write(self.tensors[n].data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ParamSet":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            params = cls(dtype=dtype)
            for n in header["names"]:
                rows, cols = header["shapes"][n]
                raw = fh.read(rows * cols * 4)
                if len(raw) != rows * cols * 4:
                    raise ValueError(f"parameter file truncated while reading {n!r}")
                params.add(n, np.frombuffer(raw, dtype="<f4").reshape(rows, cols))
            params.step = int(header["step"])
        return params


def adam_step(
    params: ParamSet,
    grads: dict[str, Array],
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update with bias correction."""
    params.step += 1
    t = params.step
    for name, p in params.tensors.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)
