"""Minimal reverse-mode autodiff over dense float64 arrays.

The engine is a Wengert-list tape: every operation appends one record, so
reverse creation order is already a topological order and backward
accumulation is bit-deterministic.  It supports exactly what the rest of
the package needs: linear layers, tanh/relu, log-softmax, cross-entropy,
and the elementwise algebra used by the consolidation penalty.
"""

from __future__ import annotations

from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import AlignmentError, InputError, UsageError


def _as_array(data, *, name: str = "tensor") -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


class ParamSet:
    """Ordered, named collection of float64 arrays.

    Entries are kept in lexicographic name order, so flattening and tape
    traversal are reproducible.  The arrays are copied on construction and
    frozen (read-only); every operation on ParamSets returns a new one.
    """

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
        names = [name for name, _ in items]
        if len(set(names)) != len(names):
            raise InputError("duplicate parameter names")
        items.sort(key=lambda kv: kv[0])
        self._names: tuple[str, ...] = tuple(name for name, _ in items)
        arrays = []
        for name, value in items:
            arr = _as_array(value, name=name).copy()
            arr.flags.writeable = False
            arrays.append(arr)
        self._arrays: tuple[np.ndarray, ...] = tuple(arrays)

    @classmethod
    def _from_sorted(cls, names: tuple[str, ...], arrays: list[np.ndarray]) -> "ParamSet":
        """Fast path: names already sorted/unique, arrays fresh float64."""
        ps = object.__new__(cls)
        ps._names = names
        for arr in arrays:
            arr.flags.writeable = False
        ps._arrays = tuple(arrays)
        return ps

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __contains__(self, name: str) -> bool:
        return name in set(self._names)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            idx = self._names.index(name)
        except ValueError:
            raise KeyError(name) from None
        return self._arrays[idx]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self._names, self._arrays)

    def shapes(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, arr.shape) for name, arr in self.items())

    def aligned_with(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes()

    def require_aligned(self, other: "ParamSet", *, context: str = "operands") -> None:
        if not self.aligned_with(other):
            mine, theirs = dict(self.shapes()), dict(other.shapes())
            for name in sorted(set(mine) | set(theirs)):
                if mine.get(name) != theirs.get(name):
                    raise AlignmentError(
                        f"{context} misaligned at entry {name!r}: "
                        f"{mine.get(name)} vs {theirs.get(name)}"
                    )
            raise AlignmentError(f"{context} misaligned")

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet._from_sorted(
            self._names, [np.asarray(fn(arr), dtype=np.float64).copy() for arr in self._arrays]
        )

    def zip_map(self, other: "ParamSet", fn) -> "ParamSet":
        self.require_aligned(other)
        return ParamSet._from_sorted(
            self._names,
            [np.asarray(fn(a, b), dtype=np.float64).copy() for a, b in zip(self._arrays, other._arrays)],
        )

    def to_vector(self) -> np.ndarray:
        """Flatten in canonical (lexicographic) order."""
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([arr.ravel() for arr in self._arrays])

    def with_vector(self, vec: np.ndarray) -> "ParamSet":
        """Inverse of to_vector against this set's layout."""
        vec = np.asarray(vec, dtype=np.float64)
        total = sum(arr.size for arr in self._arrays)
        if vec.shape != (total,):
            raise AlignmentError(f"vector length {vec.shape} does not match layout ({total},)")
        out, off = [], 0
        for arr in self._arrays:
            out.append(vec[off : off + arr.size].reshape(arr.shape).copy())
            off += arr.size
        return ParamSet._from_sorted(self._names, out)

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        unknown = set(updates) - set(self._names)
        if unknown:
            raise KeyError(f"unknown entries: {sorted(unknown)}")
        arrays = []
        for name, arr in self.items():
            if name in updates:
                new = _as_array(updates[name], name=name)
                if new.shape != arr.shape:
                    raise AlignmentError(f"replacement for {name!r} has shape {new.shape}, expected {arr.shape}")
                arrays.append(new.copy())
            else:
                arrays.append(arr)
        return ParamSet._from_sorted(self._names, arrays)

    def equal_bits(self, other: "ParamSet") -> bool:
        """True iff layouts match and every value is bit-identical."""
        if self.shapes() != other.shapes():
            return False
        return all(
            a.tobytes() == b.tobytes() for a, b in zip(self._arrays, other._arrays)
        )

    def allclose(self, other: "ParamSet", *, atol: float = 0.0, rtol: float = 0.0) -> bool:
        if self.shapes() != other.shapes():
            return False
        return all(
            np.allclose(a, b, atol=atol, rtol=rtol) for a, b in zip(self._arrays, other._arrays)
        )

    def max_abs_diff(self, other: "ParamSet") -> float:
        self.require_aligned(other)
        diffs = [float(np.max(np.abs(a - b))) if a.size else 0.0 for a, b in zip(self._arrays, other._arrays)]
        return max(diffs, default=0.0)

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{a.shape}" for n, a in self.items())
        return f"ParamSet({inner})"


class Tensor:
    """A node on a GradTape holding a float64 array value."""

    __slots__ = ("data", "tape", "index")

    def __init__(self, data: np.ndarray, tape: "GradTape", index: int):
        self.data = data
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node={self.index})"


class GradTape:
    """Records one forward pass; replays it in reverse for gradients.

    A tape is confined to one logical thread.  Multiple backward() calls
    are allowed (each is an independent accumulation), which is what lets
    Fisher estimation reuse a single forward pass across classes.
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._watched: dict[str, int] = {}
        self._watched_shapes: dict[str, tuple[int, ...]] = {}

    def _node(self, value: np.ndarray, parents: tuple[int, ...] = (), vjp: Callable | None = None) -> Tensor:
        idx = len(self._values)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Tensor(value, self, idx)

    def constant(self, data) -> Tensor:
        """Leaf that receives no gradient (inputs, labels-as-arrays, ...)."""
        return self._node(_as_array(data))

    def param(self, name: str, data) -> Tensor:
        """Named leaf whose gradient is collected by backward()."""
        if name in self._watched:
            raise UsageError(f"parameter {name!r} already watched on this tape")
        node = self._node(_as_array(data, name=name))
        self._watched[name] = node.index
        self._watched_shapes[name] = node.data.shape
        return node

    def watch(self, params: ParamSet) -> dict[str, Tensor]:
        """Register every entry of a ParamSet; returns name -> leaf node."""
        return {name: self.param(name, arr) for name, arr in params.items()}

    def _check(self, t: Tensor) -> Tensor:
        if not isinstance(t, Tensor):
            raise UsageError("expected a Tensor recorded on a GradTape")
        if t.tape is not self:
            raise UsageError("tensor belongs to a different tape")
        return t

    def lift(self, value) -> Tensor:
        """Wrap raw array data as a constant on this tape; pass Tensors through."""
        if isinstance(value, Tensor):
            return self._check(value)
        return self.constant(value)

    def backward(self, loss: Tensor) -> ParamSet:
        """Accumulate d(loss)/d(param) for every watched parameter.

        Returns a ParamSet aligned with the watched set; entries the loss
        does not depend on come back as zeros.
        """
        self._check(loss)
        if loss.data.shape != ():
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss.index] = np.ones(())
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            vjp = self._vjps[idx]
            if vjp is None:
                continue
            for parent, contrib in zip(self._parents[idx], vjp(g)):
                if grads[parent] is None:
                    grads[parent] = np.array(contrib, dtype=np.float64)
                else:
                    grads[parent] = grads[parent] + contrib
        names = tuple(sorted(self._watched))
        out = []
        for name in names:
            g = grads[self._watched[name]]
            out.append(np.zeros(self._watched_shapes[name]) if g is None else np.asarray(g))
        return ParamSet._from_sorted(names, out)


def backward(tape: GradTape, loss: Tensor) -> ParamSet:
    """Gradient of a taped scalar loss w.r.t. every watched parameter."""
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Operations.  Each takes Tensors (raw arrays are lifted onto the same tape)
# and records exactly one node.


def _binary_tape(a, b) -> GradTape:
    for operand in (a, b):
        if isinstance(operand, Tensor):
            return operand.tape
    raise UsageError("at least one operand must be a taped Tensor")


def forward_linear(x, weight, bias) -> Tensor:
    """Affine map: out[b, j] = sum_i x[b, i] * weight[i, j] + bias[j]."""
    tape = _binary_tape(x, weight)
    x, weight, bias = tape.lift(x), tape.lift(weight), tape.lift(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise AlignmentError(
            f"forward_linear expects (batch,d_in),(d_in,d_out),(d_out,), got "
            f"{x.data.shape}, {weight.data.shape}, {bias.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise AlignmentError(
            f"forward_linear shape mismatch: {x.data.shape} x {weight.data.shape} + {bias.data.shape}"
        )
    xv, wv = x.data, weight.data
    out = xv @ wv + bias.data

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return tape._node(out, (x.index, weight.index, bias.index), vjp)


def head_logits(x, rows: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Per-class affine rows: out[b, j] = x[b] . w_j + b_j.

    Rows are (weight vector, bias scalar) pairs, one per class, so each
    class keeps its own named parameter entries.
    """
    if not rows:
        raise UsageError("head_logits needs at least one class row")
    tape = rows[0][0].tape
    x = tape.lift(x)
    ws = [tape._check(w) for w, _ in rows]
    bs = [tape._check(b) for _, b in rows]
    W = np.stack([w.data for w in ws])        # (C, d)
    bvec = np.array([b.data for b in bs])     # (C,)
    if x.data.ndim != 2 or x.data.shape[1] != W.shape[1]:
        raise AlignmentError(f"head_logits: input {x.data.shape} vs rows of dim {W.shape[1]}")
    xv = x.data
    out = xv @ W.T + bvec

    parents = (x.index,) + tuple(i for w, b in zip(ws, bs) for i in (w.index, b.index))

    def vjp(g):
        contribs = [g @ W]
        for j in range(len(ws)):
            contribs.append(g[:, j] @ xv)
            contribs.append(g[:, j].sum())
        return tuple(contribs)

    return tape._node(out, parents, vjp)


def tanh(x: Tensor) -> Tensor:
    tape = x.tape
    out = np.tanh(x.data)
    return tape._node(out, (x.index,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    tape = x.tape
    mask = x.data > 0
    return tape._node(np.where(mask, x.data, 0.0), (x.index,), lambda g: (g * mask,))


def log_prob(logits) -> Tensor:
    """Row-wise log-softmax, stabilized by max subtraction."""
    tape = logits.tape if isinstance(logits, Tensor) else None
    if tape is None:
        raise UsageError("log_prob expects a taped Tensor")
    x = logits.data
    if x.ndim != 2:
        raise AlignmentError(f"log_prob expects (batch, K) logits, got {x.shape}")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return tape._node(out, (logits.index,), vjp)


def pick_scalar(x: Tensor, row: int, col: int) -> Tensor:
    """Select one element as a scalar node (per-class log-likelihood hook)."""
    tape = x.tape
    val = np.asarray(x.data[row, col])

    def vjp(g):
        out = np.zeros_like(x.data)
        out[row, col] = g
        return (out,)

    return tape._node(val, (x.index,), vjp)


def nll_mean(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of the given label per row."""
    tape = log_probs.tape
    lp = log_probs.data
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != lp.shape[0]:
        raise InputError(f"labels must be one index per row, got {labels.shape} for {lp.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= lp.shape[1]):
        raise InputError(f"label out of range [0, {lp.shape[1]})")
    batch = lp.shape[0]
    rows = np.arange(batch)
    out = np.asarray(-lp[rows, labels].sum() / batch)

    def vjp(g):
        grad = np.zeros_like(lp)
        grad[rows, labels] = -g / batch
        return (grad,)

    return tape._node(out, (log_probs.index,), vjp)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    return nll_mean(log_prob(logits), labels)


def row_normalize_scale(x: Tensor, scale: float) -> Tensor:
    """y_i = scale * x_i / ||x_i||, with zero rows mapped to zero."""
    tape = x.tape
    xv = x.data
    norms = np.linalg.norm(xv, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    out = scale * xv / safe

    def vjp(g):
        unit = xv / safe
        proj = (g * unit).sum(axis=1, keepdims=True)
        grad = scale / safe * (g - unit * proj)
        return (np.where(norms > 0.0, grad, 0.0),)

    return tape._node(out, (x.index,), vjp)


def add(a, b) -> Tensor:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.data.shape != b.data.shape:
        raise AlignmentError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    return tape._node(a.data + b.data, (a.index, b.index), lambda g: (g, g))


def sub(a, b) -> Tensor:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.data.shape != b.data.shape:
        raise AlignmentError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
    return tape._node(a.data - b.data, (a.index, b.index), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    tape = _binary_tape(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.data.shape != b.data.shape:
        raise AlignmentError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
    av, bv = a.data, b.data
    return tape._node(av * bv, (a.index, b.index), lambda g: (g * bv, g * av))


def scale(x: Tensor, s: float) -> Tensor:
    tape = x.tape
    s = float(s)
    return tape._node(x.data * s, (x.index,), lambda g: (g * s,))


def tsum(x: Tensor) -> Tensor:
    tape = x.tape
    shape = x.data.shape
    return tape._node(np.asarray(x.data.sum()), (x.index,), lambda g: (np.broadcast_to(g, shape).copy(),))
