"""A small reverse-mode autodiff engine over dense 2-D float matrices.

Only the primitives the bipartite GNN needs are provided. Each operation
returns a :class:`Tensor` that remembers its parents and a closure that
pushes the output gradient back to them; :meth:`Tensor.backward` orders
the recorded graph topologically (the tape) and replays it in reverse.

Broadcasting is limited to adding a 1 x c bias row to an r x c matrix.
Tensors default to float64; float32 data is kept as float32 and operations
preserve the dtype of their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Segments", "AdamState",
    "matmul", "add", "add_bias", "scale", "concat_cols", "relu", "relu_sum", "take_rows",
    "take_cols", "slice_rows", "pick", "segment_aggregate", "scatter_elements", "softmax",
    "mse_loss", "softmax_cross_entropy", "sum_all",
    "adam_step", "clip_grad_norm", "tape_dump",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Optional[Callable] = None, op: str = "leaf"):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(-1, 1)
        elif data.ndim != 2:
            raise ValueError(f"tensors are 2-D, got {data.ndim}-D data")
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned: g is a fresh array nobody else references, so it can be kept as is
        if self.grad is None:
            self.grad = g if owned else np.array(g, copy=True)
        else:
            self.grad += g

    def tape(self) -> list["Tensor"]:
        """Nodes reachable from this tensor, parents before children."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(self.tape()):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                # intermediate gradients are dropped once propagated
                node.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- index helper


class Segments:
    """A fixed assignment of E rows to ``n_segments`` groups.

    Used both as the target ids of a segment reduction and as the row index
    of a gather (whose backward is a segment sum). Sparse operators are
    built lazily and cached.
    """

    def __init__(self, ids, n_segments: int):
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= n_segments):
            raise IndexError(f"segment id out of range [0, {n_segments})")
        self.ids = ids
        self.n_segments = int(n_segments)
        self.counts = np.bincount(ids, minlength=n_segments)
        self._operators = {}
        self._sorted = None

    def __len__(self) -> int:
        return self.ids.size

    def operator(self, kind: str, dtype=np.float64) -> sp.csr_matrix:
        """Sparse n_segments x E matrix summing (``"sum"``) or averaging (``"mean"``) rows."""
        key = (kind, np.dtype(dtype))
        if key not in self._operators:
            e = self.ids.size
            if kind == "mean":
                weights = 1.0 / np.maximum(self.counts, 1)[self.ids]
            elif kind == "sum":
                weights = np.ones(e)
            else:
                raise ValueError(f"unknown segment operator {kind!r}")
            # CSR arrays straight from the sorted layout; skips a COO round trip per dropout mask
            order = self.sorted_layout()[0]
            indptr = np.concatenate([[0], np.cumsum(self.counts)])
            self._operators[key] = sp.csr_matrix(
                (weights[order].astype(dtype), order, indptr), shape=(self.n_segments, e))
        return self._operators[key]

    def sorted_layout(self):
        """(order, starts, nonempty) with rows grouped by segment, ascending row id inside."""
        if self._sorted is None:
            order = np.argsort(self.ids, kind="stable")
            nonempty = np.flatnonzero(self.counts)
            offsets = np.concatenate([[0], np.cumsum(self.counts)[:-1]])
            self._sorted = (order, offsets[nonempty], nonempty)
        return self._sorted


def _segments(idx, n: int) -> Segments:
    if isinstance(idx, Segments):
        if idx.n_segments != n:
            raise IndexError(f"index built for {idx.n_segments} rows, tensor has {n}")
        return idx
    return Segments(idx, n)


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accumulate(a.data.T @ g, owned=True)

    return _result(out, (a, b), backward, "matmul")


def add(*tensors: Tensor) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    tensors = [_as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise ValueError(f"add shape mismatch: {[t.shape for t in tensors]}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def backward(g):
        # the incoming gradient is handed over (uncopied) to one input only
        handed = False
        for t in tensors:
            if t.requires_grad:
                t._accumulate(g, owned=not handed)
                handed = True

    return _result(out, tensors, backward, "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x c row to every row of an r x c matrix."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if bias.shape != (1, x.shape[1]):
        raise ValueError(f"bias shape {bias.shape} does not fit {x.shape}")

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True), owned=True)
        if x.requires_grad:
            x._accumulate(g, owned=True)

    return _result(x.data + bias.data, (x, bias), backward, "add_bias")


def scale(x: Tensor, factor: float) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: x._accumulate(g * factor, owned=True), "scale")


def concat_cols(*tensors: Tensor) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1:
        raise ValueError(f"concat_cols row mismatch: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return _result(out, tensors, backward, "concat_cols")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    active = x.data > 0
    return _result(x.data * active, (x,),
                   lambda g: x._accumulate(g * active, owned=True), "relu")


def relu_sum(parts: Sequence[Tensor], bias: Optional[Tensor] = None) -> Tensor:
    """Fused ``relu(parts[0] + ... + parts[-1] + bias)``, one output allocation."""
    parts = [_as_tensor(p) for p in parts]
    if len({p.shape for p in parts}) != 1:
        raise ValueError(f"relu_sum shape mismatch: {[p.shape for p in parts]}")
    out = parts[0].data.copy()
    for p in parts[1:]:
        out += p.data
    if bias is not None:
        if bias.shape != (1, out.shape[1]):
            raise ValueError(f"bias shape {bias.shape} does not fit {out.shape}")
        out += bias.data
    np.maximum(out, 0.0, out=out)
    inputs = parts + ([bias] if bias is not None else [])

    def backward(g):
        g = g * (out > 0)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0, keepdims=True), owned=True)
        handed = False
        for p in parts:
            if p.requires_grad:
                p._accumulate(g, owned=not handed)
                handed = True

    return _result(out, inputs, backward, "relu_sum")


def take_rows(x: Tensor, index: Union[np.ndarray, Segments]) -> Tensor:
    """Gather rows ``x[index]``; the backward pass scatter-adds."""
    x = _as_tensor(x)
    seg = _segments(index, x.shape[0])
    out = x.data[seg.ids]
    return _result(out, (x,), lambda g: x._accumulate(seg.operator("sum", g.dtype) @ g, owned=True),
                   "take_rows")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row block ``x[start:stop]`` (used to split weight matrices)."""
    x = _as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        x._accumulate(full, owned=True)

    return _result(x.data[start:stop], (x,), backward, "slice_rows")


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        x._accumulate(full)

    return _result(x.data[:, start:stop], (x,), backward, "take_cols")


def pick(x: Tensor, rows, cols) -> Tensor:
    """Elements ``x[rows[k], cols[k]]`` as an N x 1 column."""
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g[:, 0])
        x._accumulate(full)

    return _result(x.data[rows, cols].reshape(-1, 1), (x,), backward, "pick")


def scatter_elements(values: Tensor, rows, cols, base: np.ndarray) -> Tensor:
    """Copy of constant ``base`` with ``base[rows[k], cols[k]] = values[k]``.

    Positions must be distinct.
    """
    values = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = np.array(base, dtype=values.data.dtype, copy=True)
    out[rows, cols] = values.data[:, 0]
    return _result(out, (values,), lambda g: values._accumulate(g[rows, cols].reshape(-1, 1)),
                   "scatter_elements")


def segment_aggregate(messages: Tensor, targets: Union[np.ndarray, Segments],
                      n_segments: int, mode: str = "mean") -> Tensor:
    """Reduce message rows per target segment (``mean``, ``sum`` or ``max``).

    Empty segments produce zero rows. For ``max`` the gradient goes to the
    lowest-index row among ties.
    """
    messages = _as_tensor(messages)
    seg = targets if isinstance(targets, Segments) else Segments(targets, n_segments)
    if seg.n_segments != n_segments:
        raise IndexError(f"segments built for {seg.n_segments} targets, asked for {n_segments}")
    if len(seg) != messages.shape[0]:
        raise ValueError(f"{len(seg)} target ids for {messages.shape[0]} messages")
    if mode in ("sum", "mean"):
        mat = seg.operator(mode, messages.data.dtype)
        out = np.asarray(mat @ messages.data)
        return _result(out, (messages,), lambda g: messages._accumulate(np.asarray(mat.T @ g), owned=True),
                       f"segment_{mode}")
    if mode != "max":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    d = messages.shape[1]
    out = np.zeros((n_segments, d), dtype=messages.data.dtype)
    order, starts, nonempty = seg.sorted_layout()
    if order.size == 0:
        return _result(out, (messages,), lambda g: None, "segment_max")
    xs = messages.data[order]
    seg_max = np.maximum.reduceat(xs, starts, axis=0)
    hit = xs == np.repeat(seg_max, seg.counts[nonempty], axis=0)
    pos = np.where(hit, np.arange(order.size)[:, None], order.size)
    arg = order[np.minimum.reduceat(pos, starts, axis=0)]
    out[nonempty] = seg_max
    cols = np.broadcast_to(np.arange(d), arg.shape)

    def backward(g):
        full = np.zeros_like(messages.data)
        # each message row belongs to one segment, so (arg, col) pairs are unique
        full[arg, cols] = g[nonempty]
        messages._accumulate(full)

    return _result(out, (messages,), backward, "segment_max")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _result(x.data.sum().reshape(1, 1), (x,),
                   lambda g: x._accumulate(np.full_like(x.data, g[0, 0])), "sum_all")


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = _as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    target = target.reshape(pred.shape) if target.size == pred.data.size else target
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    if pred.data.size == 0:
        raise ValueError("mse_loss of an empty tensor")
    diff = pred.data - target
    n = diff.size
    return _result(np.array([[np.mean(diff * diff)]], dtype=pred.data.dtype), (pred,),
                   lambda g: pred._accumulate(g[0, 0] * 2.0 * diff / n), "mse_loss")


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if k < 2:
        raise ValueError("softmax_cross_entropy needs at least 2 classes")
    if targets.size != n:
        raise ValueError(f"{targets.size} targets for {n} rows")
    if n == 0:
        raise ValueError("softmax_cross_entropy of an empty tensor")
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"class id out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsumexp - z[np.arange(n), targets])

    def backward(g):
        grad = softmax(logits.data)
        grad[np.arange(n), targets] -= 1.0
        logits._accumulate(g[0, 0] * grad / n)

    return _result(np.array([[loss]], dtype=logits.data.dtype), (logits,), backward,
                   "softmax_cross_entropy")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p)
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]], max_norm: float) -> float:
    """Rescale ``grads`` in place to global L2 norm <= ``max_norm``; return the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
    if total > max_norm:
        factor = max_norm / total
        for g in grads:
            if g is not None:
                g *= factor
    return total


def tape_dump(output: Tensor) -> list[dict]:
    """JSON-ready listing of the recorded operations leading to ``output``."""
    nodes = output.tape()
    ids = {id(t): k for k, t in enumerate(nodes)}
    return [
        {"id": ids[id(t)], "op": t.op, "shape": list(t.shape),
         "inputs": [ids[id(p)] for p in t.parents if id(p) in ids]}
        for t in nodes
    ]
