"""Rank-4 tensor reverse-mode autodiff over float64 NCHW arrays.

Every value is a (batch, channels, height, width) numpy array.  Operations
record their inputs and a backward closure at forward time; ``backward()``
walks the recorded graph once in reverse topological order and accumulates
gradients into every tensor that requires them.  There is no broadcasting:
elementwise ops demand exact shape equality, and the only implicit shape
logic lives inside ``conv2d`` itself.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _as_data(x: "Tensor | Parameter") -> np.ndarray:
    return x.tensor.data if isinstance(x, Parameter) else x.data


def _as_tensor(x: "Tensor | Parameter") -> "Tensor":
    return x.tensor if isinstance(x, Parameter) else x


class Tensor:
    """A rank-4 float64 array plus the tape hooks needed for backward().

    ``_backward`` maps the output gradient to ``(parent, parent_grad)``
    pairs; gradient arrays are never mutated in place, so closures may
    hand out shared or broadcast views safely.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray | Sequence,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], Iterable] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (NCHW), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, trainable tensor; the name keys checkpoints and L2 filtering."""

    __slots__ = ("tensor", "name")

    def __init__(self, data: np.ndarray | Sequence, name: str):
        self.tensor = Tensor(data, requires_grad=True)
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64)

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def scalar(value: float, requires_grad: bool = False) -> Tensor:
    """A (1,1,1,1) constant, the shape backward() accepts as a loss."""
    return Tensor(np.full((1, 1, 1, 1), float(value)), requires_grad=requires_grad)


def fan_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)) for conv kernels."""
    out_ch, in_ch, kh, kw = shape
    bound = math.sqrt(6.0 / (in_ch * kh * kw + out_ch * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


def he_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Uniform(-b, b) with b = sqrt(6 / fan_in), variance-preserving under ReLU."""
    out_ch, in_ch, kh, kw = shape
    bound = math.sqrt(6.0 / (in_ch * kh * kw))
    return rng.uniform(-bound, bound, size=shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative post-order over the requires_grad subgraph only.
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad of every requires_grad ancestor.

    Repeated calls without zeroing add to existing grads.  Within one call a
    fresh buffer per node keeps shared subexpressions from double-counting.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward() starts from a scalar (1,1,1,1), got {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("backward() on a tensor that does not require grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones((1, 1, 1, 1))}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            if pg is None or not parent.requires_grad:
                continue
            held = pending.get(id(parent))
            pending[id(parent)] = pg if held is None else held + pg


def conv2d(
    x: Tensor | Parameter,
    kernel: Tensor | Parameter,
    bias: Tensor | Parameter,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with square kernel, zero padding, shared bias.

    kernel: (out_ch, in_ch, k, k); bias: (1, out_ch, 1, 1); output spatial
    size is floor((H + 2*padding - k) / stride) + 1 per axis.
    """
    xt, kt, bt = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    kd = kt.data
    if kd.shape[2] != kd.shape[3]:
        raise ShapeError(f"kernel must be square, got {kd.shape}")
    out_ch, in_ch, k, _ = kd.shape
    if xt.data.shape[1] != in_ch:
        raise ShapeError(f"input has {xt.data.shape[1]} channels, kernel expects {in_ch}")
    if bt.data.shape != (1, out_ch, 1, 1):
        raise ShapeError(f"bias must be (1,{out_ch},1,1), got {bt.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad stride/padding ({stride}, {padding})")
    batch, _, h, w = xt.data.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"kernel {k} larger than padded input ({h}x{w}, pad {padding})")

    padded = np.pad(xt.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = win.shape[2], win.shape[3]
    # im2col + matmul: (B*Ho*Wo, C*k*k) @ (C*k*k, O)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * h_out * w_out, in_ch * k * k
    )
    out = cols @ kd.reshape(out_ch, -1).T
    out = out.reshape(batch, h_out, w_out, out_ch).transpose(0, 3, 1, 2) + bt.data

    requires = xt.requires_grad or kt.requires_grad or bt.requires_grad

    def back(g: np.ndarray):
        grads = []
        if bt.requires_grad:
            grads.append((bt, g.sum(axis=(0, 2, 3)).reshape(1, out_ch, 1, 1)))
        gmat = None
        if kt.requires_grad:
            gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_ch)
            grads.append((kt, (gmat.T @ cols).reshape(out_ch, in_ch, k, k)))
        if xt.requires_grad:
            dpad = np.zeros_like(padded)
            for u in range(k):
                for v in range(k):
                    # d(out[b,o,i,j])/d(padded[b,c,i*s+u,j*s+v]) = kernel[o,c,u,v]
                    contrib = np.tensordot(g, kd[:, :, u, v], axes=([1], [0]))
                    dpad[:, :, u : u + stride * h_out : stride,
                         v : v + stride * w_out : stride] += contrib.transpose(0, 3, 1, 2)
            if padding:
                grads.append((xt, dpad[:, :, padding:-padding, padding:-padding]))
            else:
                grads.append((xt, dpad))
        return grads

    return Tensor(out, requires, (xt, kt, bt), back if requires else None)


def relu(x: Tensor | Parameter) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    xt = _as_tensor(x)
    mask = xt.data > 0

    def back(g: np.ndarray):
        return [(xt, g * mask)]

    return Tensor(np.where(mask, xt.data, 0.0), xt.requires_grad, (xt,),
                  back if xt.requires_grad else None)


def add(a: Tensor | Parameter, b: Tensor | Parameter) -> Tensor:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    at, bt = _as_tensor(a), _as_tensor(b)
    if at.data.shape != bt.data.shape:
        raise ShapeError(f"add() shape mismatch: {at.data.shape} vs {bt.data.shape}")

    def back(g: np.ndarray):
        return [(at, g), (bt, g)]

    requires = at.requires_grad or bt.requires_grad
    return Tensor(at.data + bt.data, requires, (at, bt), back if requires else None)


def scale(x: Tensor | Parameter, c: float) -> Tensor:
    """Multiply by a python constant."""
    xt = _as_tensor(x)
    c = float(c)

    def back(g: np.ndarray):
        return [(xt, g * c)]

    return Tensor(xt.data * c, xt.requires_grad, (xt,),
                  back if xt.requires_grad else None)


def concat_channels(a: Tensor | Parameter, b: Tensor | Parameter) -> Tensor:
    """Concatenate along the channel axis; other axes must agree."""
    at, bt = _as_tensor(a), _as_tensor(b)
    sa, sb = at.data.shape, bt.data.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise ShapeError(f"concat_channels() non-channel axes differ: {sa} vs {sb}")
    split = sa[1]

    def back(g: np.ndarray):
        return [(at, g[:, :split]), (bt, g[:, split:])]

    requires = at.requires_grad or bt.requires_grad
    return Tensor(np.concatenate([at.data, bt.data], axis=1), requires, (at, bt),
                  back if requires else None)


def slice_channels(x: Tensor | Parameter, start: int, stop: int) -> Tensor:
    """The channel range [start, stop) as a new tensor."""
    xt = _as_tensor(x)
    channels = xt.data.shape[1]
    if not (0 <= start < stop <= channels):
        raise ShapeError(f"slice [{start}:{stop}) outside {channels} channels")

    def back(g: np.ndarray):
        dx = np.zeros_like(xt.data)
        dx[:, start:stop] = g
        return [(xt, dx)]

    return Tensor(xt.data[:, start:stop].copy(), xt.requires_grad, (xt,),
                  back if xt.requires_grad else None)


def sum_all(x: Tensor | Parameter) -> Tensor:
    """Reduce every element to a (1,1,1,1) scalar."""
    xt = _as_tensor(x)

    def back(g: np.ndarray):
        return [(xt, np.full(xt.data.shape, g.reshape(-1)[0]))]

    return Tensor(np.full((1, 1, 1, 1), xt.data.sum()), xt.requires_grad, (xt,),
                  back if xt.requires_grad else None)


def sum_squares(x: Tensor | Parameter) -> Tensor:
    """Scalar sum of squared elements (the L2 building block)."""
    xt = _as_tensor(x)

    def back(g: np.ndarray):
        return [(xt, 2.0 * xt.data * g.reshape(-1)[0])]

    return Tensor(np.full((1, 1, 1, 1), float((xt.data ** 2).sum())), xt.requires_grad,
                  (xt,), back if xt.requires_grad else None)


def flatten_head_maps(maps: Sequence[Tensor | Parameter], entries: int = 6) -> Tensor:
    """Stack per-location head outputs into one (1, entries, B*N, 1) table.

    Each map is (B, A*entries, H, W) with channel a*entries+e holding entry e
    of anchor slot a.  Rows are ordered batch-major, then map, then row-major
    location, then anchor slot: the same order enumerate_anchors uses, which
    is what ties table rows to anchor boxes.
    """
    if not maps:
        raise ShapeError("flatten_head_maps() needs at least one map")
    ts = [_as_tensor(m) for m in maps]
    batch = ts[0].data.shape[0]
    blocks, dims = [], []
    for t in ts:
        b, c, h, w = t.data.shape
        if b != batch:
            raise ShapeError("flatten_head_maps() maps disagree on batch size")
        if c % entries:
            raise ShapeError(f"map channels {c} not a multiple of {entries}")
        a = c // entries
        z = t.data.reshape(b, a, entries, h, w).transpose(0, 3, 4, 1, 2)
        blocks.append(z.reshape(b, h * w * a, entries))
        dims.append((a, h, w))
    table = np.concatenate(blocks, axis=1)          # (B, N, entries)
    n = table.shape[1]
    data = table.reshape(batch * n, entries).T.reshape(1, entries, batch * n, 1)
    requires = any(t.requires_grad for t in ts)

    def back(g: np.ndarray):
        gt = g[0, :, :, 0].T.reshape(batch, n, entries)
        grads, at = [], 0
        for t, (a, h, w) in zip(ts, dims):
            span = h * w * a
            piece = gt[:, at : at + span].reshape(batch, h, w, a, entries)
            grads.append((t, piece.transpose(0, 3, 4, 1, 2).reshape(t.data.shape)))
            at += span
        return grads

    return Tensor(data, requires, tuple(ts), back if requires else None)


def gather_anchors(x: Tensor | Parameter, indices: np.ndarray) -> Tensor:
    """Select table rows (axis 2) by index; duplicates accumulate on backward."""
    xt = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    n = xt.data.shape[2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather index out of range for {n} rows")

    def back(g: np.ndarray):
        acc = np.zeros((n, xt.data.shape[1]))
        np.add.at(acc, idx, g[0, :, :, 0].T)
        return [(xt, acc.T.reshape(xt.data.shape))]

    return Tensor(xt.data[:, :, idx, :].copy(), xt.requires_grad, (xt,),
                  back if xt.requires_grad else None)


def softmax_cross_entropy_sum(logits: Tensor | Parameter, labels: np.ndarray) -> Tensor:
    """Sum of per-row softmax cross-entropies.

    logits is a (1, num_classes, K, 1) table slice; labels holds K class
    indices.  Uses the log-sum-exp form, so it is finite for any logits.
    """
    lt = _as_tensor(logits)
    _, num_classes, k, _ = lt.data.shape
    lab = np.asarray(labels, dtype=np.intp).reshape(-1)
    if lab.shape[0] != k:
        raise ShapeError(f"{k} rows but {lab.shape[0]} labels")
    if k and (lab.min() < 0 or lab.max() >= num_classes):
        raise ShapeError(f"label outside [0, {num_classes})")
    z = lt.data[0, :, :, 0]                          # (C, K)
    m = z.max(axis=0) if k else np.zeros(0)
    lse = m + np.log(np.exp(z - m).sum(axis=0)) if k else np.zeros(0)
    total = float((lse - z[lab, np.arange(k)]).sum())

    def back(g: np.ndarray):
        soft = np.exp(z - lse)                       # (C, K) softmax columns
        soft[lab, np.arange(k)] -= 1.0
        return [(lt, (soft * g.reshape(-1)[0]).reshape(lt.data.shape))]

    return Tensor(np.full((1, 1, 1, 1), total), lt.requires_grad, (lt,),
                  back if lt.requires_grad else None)


def smooth_l1_sum(pred: Tensor | Parameter, target: np.ndarray) -> Tensor:
    """Sum of elementwise smooth-L1 terms against a constant target.

    Per element r = pred - target: 0.5*r^2 if |r| < 1 else |r| - 0.5.
    """
    pt = _as_tensor(pred)
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.shape != pt.data.shape:
        raise ShapeError(f"target shape {tgt.shape} != pred shape {pt.data.shape}")
    r = pt.data - tgt
    absr = np.abs(r)
    total = float(np.where(absr < 1.0, 0.5 * r * r, absr - 0.5).sum())

    def back(g: np.ndarray):
        return [(pt, np.clip(r, -1.0, 1.0) * g.reshape(-1)[0])]

    return Tensor(np.full((1, 1, 1, 1), total), pt.requires_grad, (pt,),
                  back if pt.requires_grad else None)


def sgd_step(params: Sequence[Parameter], lr: float) -> None:
    """Plain SGD: p -= lr * grad for every parameter, then zero all grads."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient; run backward first")
    for p in params:
        p.tensor.data = p.tensor.data - lr * p.tensor.grad
        p.zero_grad()


def check_gradients(builder: Callable[[], tuple[Tensor, Sequence[Parameter]]],
                    eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``builder`` reconstructs the graph from current parameter values and
    returns (scalar loss, parameters to perturb).  Relative error uses
    max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    loss, params = builder()
    for p in params:
        p.zero_grad()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} unreachable from the loss")
        analytic.append(p.grad.copy())
        p.zero_grad()
    worst = 0.0
    for p, ref in zip(params, analytic):
        flat = p.tensor.data.reshape(-1)
        for i in range(flat.size):
            kept = flat[i]
            flat[i] = kept + eps
            up = builder()[0].item()
            flat[i] = kept - eps
            down = builder()[0].item()
            flat[i] = kept
            numeric = (up - down) / (2.0 * eps)
            a = ref.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
