"""Reverse-mode automatic differentiation on dense float64 arrays.

Tensors wrap numpy arrays and record their producing operation so that a
single backward() call over a scalar populates .grad on every reachable
tensor with requires_grad set. No broadcasting: binary elementwise ops
require identical shapes, and the few shape-changing ops (expand_rows,
channel bias) are explicit. Argmin-style subgradients always route to the
earliest index in row-major scan order, so repeated backward passes on
identical inputs are bitwise identical.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-only forward)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward, op):
        out = Tensor(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise -------------------------------------------------------

    def _check_same_shape(self, other, op):
        if self.data.shape != other.data.shape:
            raise ShapeError(
                f"{op}: shape mismatch {self.data.shape} vs {other.data.shape}"
            )

    def add(self, other: "Tensor") -> "Tensor":
        self._check_same_shape(other, "add")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(g)

        return Tensor._result(a.data + b.data, (a, b), backward, "add")

    def sub(self, other: "Tensor") -> "Tensor":
        self._check_same_shape(other, "sub")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(g)
            if b.requires_grad:
                b._accum(-g)

        return Tensor._result(a.data - b.data, (a, b), backward, "sub")

    def mul(self, other: "Tensor") -> "Tensor":
        self._check_same_shape(other, "mul")
        a, b = self, other
        ad, bd = a.data, b.data

        def backward(g):
            if a.requires_grad:
                a._accum(g * bd)
            if b.requires_grad:
                b._accum(g * ad)

        return Tensor._result(ad * bd, (a, b), backward, "mul")

    def div(self, other: "Tensor") -> "Tensor":
        self._check_same_shape(other, "div")
        a, b = self, other
        ad, bd = a.data, b.data
        out_data = ad / bd

        def backward(g):
            if a.requires_grad:
                a._accum(g / bd)
            if b.requires_grad:
                b._accum(-g * out_data / bd)

        return Tensor._result(out_data, (a, b), backward, "div")

    def square(self) -> "Tensor":
        a = self
        ad = a.data

        def backward(g):
            a._accum(2.0 * ad * g)

        return Tensor._result(ad * ad, (a,), backward, "square")

    def log(self) -> "Tensor":
        a = self
        if np.any(a.data <= 0.0):
            bad = float(np.min(a.data))
            raise DomainError(f"log: non-positive input (min value {bad})")
        ad = a.data

        def backward(g):
            a._accum(g / ad)

        return Tensor._result(np.log(ad), (a,), backward, "log")

    def negate(self) -> "Tensor":
        a = self

        def backward(g):
            a._accum(-g)

        return Tensor._result(-a.data, (a,), backward, "negate")

    def scale(self, c: float) -> "Tensor":
        a = self
        c = float(c)

        def backward(g):
            a._accum(c * g)

        return Tensor._result(c * a.data, (a,), backward, "scale")

    def add_scalar(self, c: float) -> "Tensor":
        a = self

        def backward(g):
            a._accum(g)

        return Tensor._result(a.data + float(c), (a,), backward, "add_scalar")

    def reciprocal(self) -> "Tensor":
        a = self
        out_data = 1.0 / a.data

        def backward(g):
            a._accum(-g * out_data * out_data)

        return Tensor._result(out_data, (a,), backward, "reciprocal")

    def clamp_max(self, hi: float) -> "Tensor":
        """Clamp values to <= hi; gradient is zero on the clamped entries."""
        a = self
        mask = a.data <= hi

        def backward(g):
            a._accum(g * mask)

        return Tensor._result(np.minimum(a.data, hi), (a,), backward, "clamp_max")

    def sigmoid(self) -> "Tensor":
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))

        def backward(g):
            a._accum(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (a,), backward, "sigmoid")

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0.0

        def backward(g):
            a._accum(g * mask)

        return Tensor._result(a.data * mask, (a,), backward, "relu")

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None) -> "Tensor":
        a = self
        shape = a.data.shape

        def backward(g):
            if axis is None:
                a._accum(np.full(shape, g, dtype=np.float64))
            else:
                a._accum(np.broadcast_to(np.expand_dims(g, axis), shape).copy())

        return Tensor._result(np.sum(a.data, axis=axis), (a,), backward, "sum")

    def mean(self, axis=None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis).scale(1.0 / n)

    def min_reduce(self, axis: int):
        """Minimum along one axis. Returns (min tensor, argmin index array).

        Gradient flows only to the argmin entry; np.argmin picks the first
        occurrence, which is the earliest-scan-order tie rule.
        """
        a = self
        idx = np.argmin(a.data, axis=axis)
        out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
        out_data = np.squeeze(out_data, axis=axis)

        def backward(g):
            buf = np.zeros_like(a.data)
            np.put_along_axis(
                buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
            )
            a._accum(buf)

        return Tensor._result(out_data, (a,), backward, "min_reduce"), idx

    def reshape(self, *shape) -> "Tensor":
        a = self
        orig = a.data.shape

        def backward(g):
            a._accum(g.reshape(orig))

        return Tensor._result(a.data.reshape(*shape), (a,), backward, "reshape")

    def expand_rows(self, n: int) -> "Tensor":
        """Tile a 1-D tensor into n identical rows; gradient sums over rows."""
        if self.data.ndim != 1:
            raise ShapeError(f"expand_rows expects a 1-D tensor, got {self.data.shape}")
        a = self

        def backward(g):
            a._accum(g.sum(axis=0))

        out_data = np.broadcast_to(a.data, (n, a.data.shape[0])).copy()
        return Tensor._result(out_data, (a,), backward, "expand_rows")

    # -- structured ops ------------------------------------------------------

    def conv2d(self, weight: "Tensor", stride: int = 1) -> "Tensor":
        """Valid (no padding) 2-D convolution: input (N,C,H,W), weight (K,C,kh,kw)."""
        x, w = self, weight
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError(
                f"conv2d: expected 4-D input and weight, got {x.data.shape} and {w.data.shape}"
            )
        n, c, h, wd_ = x.data.shape
        k, cw, kh, kw = w.data.shape
        if cw != c:
            raise ShapeError(f"conv2d: input has {c} channels, kernels expect {cw}")
        if kh > h or kw > wd_:
            raise ShapeError(
                f"conv2d: kernel ({kh},{kw}) larger than input ({h},{wd_})"
            )
        oh = (h - kh) // stride + 1
        ow = (wd_ - kw) // stride + 1
        xd, wdat = x.data, w.data
        out = np.zeros((n, k, oh, ow))
        for i in range(kh):
            for j in range(kw):
                xs = xd[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                out += np.einsum("kc,nchw->nkhw", wdat[:, :, i, j], xs, optimize=True)

        def backward(g):
            if x.requires_grad:
                gx = np.zeros_like(xd)
                for i in range(kh):
                    for j in range(kw):
                        gx[
                            :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                        ] += np.einsum("kc,nkhw->nchw", wdat[:, :, i, j], g, optimize=True)
                x._accum(gx)
            if w.requires_grad:
                gw = np.zeros_like(wdat)
                for i in range(kh):
                    for j in range(kw):
                        xs = xd[
                            :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
                        ]
                        gw[:, :, i, j] = np.einsum("nkhw,nchw->kc", g, xs, optimize=True)
                w._accum(gw)

        return Tensor._result(out, (x, w), backward, "conv2d")

    def add_channel_bias(self, bias: "Tensor") -> "Tensor":
        """Add a per-channel bias (K,) to an (N,K,H,W) activation."""
        x, b = self, bias
        if x.data.ndim != 4 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
            raise ShapeError(
                f"add_channel_bias: got activation {x.data.shape}, bias {b.data.shape}"
            )

        def backward(g):
            if x.requires_grad:
                x._accum(g)
            if b.requires_grad:
                b._accum(g.sum(axis=(0, 2, 3)))

        return Tensor._result(x.data + b.data[None, :, None, None], (x, b), backward, "bias")

    def proto_sqdist(self, protos: "Tensor") -> "Tensor":
        """Squared L2 distance map between every spatial patch and every prototype.

        Input (N,C,H,W) against prototypes (m,C); output (N,m,H,W) where
        out[n,j,r,c] = ||Z[n,:,r,c] - P[j,:]||^2.
        """
        z, p = self, protos
        if z.data.ndim != 4 or p.data.ndim != 2:
            raise ShapeError(
                f"proto_sqdist: expected (N,C,H,W) and (m,C), got {z.data.shape}, {p.data.shape}"
            )
        if z.data.shape[1] != p.data.shape[1]:
            raise ShapeError(
                f"proto_sqdist: patch depth {z.data.shape[1]} != prototype depth {p.data.shape[1]}"
            )
        zd, pd = z.data, p.data
        n, c, h, w = zd.shape
        m = pd.shape[0]
        zr = zd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
        out = (
            np.einsum("pc,pc->p", zr, zr)[:, None]
            - 2.0 * (zr @ pd.T)
            + np.einsum("jc,jc->j", pd, pd)[None, :]
        )
        # the expanded form leaves cancellation residue near zero; recompute
        # those entries directly so coincident points give exactly 0
        near = out < 1e-12
        if near.any():
            rows, js = np.nonzero(near)
            d = zr[rows] - pd[js]
            out[near] = np.einsum("pc,pc->p", d, d)
        out = out.reshape(n, h, w, m).transpose(0, 3, 1, 2).copy()

        def backward(g):
            g2d = g.transpose(0, 2, 3, 1).reshape(n * h * w, m)
            if z.requires_grad:
                gz = 2.0 * zd * g.sum(axis=1)[:, None, :, :] - 2.0 * (
                    (g2d @ pd).reshape(n, h, w, c).transpose(0, 3, 1, 2)
                )
                z._accum(gz)
            if p.requires_grad:
                gp = 2.0 * pd * g.sum(axis=(0, 2, 3))[:, None] - 2.0 * (g2d.T @ zr)
                p._accum(gp)

        return Tensor._result(out, (z, p), backward, "proto_sqdist")

    def min_k_mean(self, k: int) -> "Tensor":
        """Mean of the k smallest entries of a 1-D tensor.

        With k larger than the length, averages everything. Gradient 1/k'
        flows to each selected entry; ties break to the earliest index
        (stable argsort).
        """
        if self.data.ndim != 1:
            raise ShapeError(f"min_k_mean expects a 1-D tensor, got {self.data.shape}")
        if self.data.size == 0:
            raise ShapeError("min_k_mean on empty tensor")
        if k < 1:
            raise ValueError(f"min_k_mean: k must be >= 1, got {k}")
        a = self
        k_eff = min(k, a.data.size)
        sel = np.argsort(a.data, kind="stable")[:k_eff]

        def backward(g):
            buf = np.zeros_like(a.data)
            buf[sel] = g / k_eff
            a._accum(buf)

        return Tensor._result(np.mean(a.data[sel]), (a,), backward, "min_k_mean")

    def masked_min_k_rows(self, masks: np.ndarray, k: int) -> "Tensor":
        """Row-wise min-k mean under a boolean mask, averaged over rows.

        For an (n,m) tensor and (n,m) mask, takes for each row the mean of
        the k smallest masked entries (all masked entries when fewer than k)
        and returns the average over rows as a scalar. Rows must have at
        least one True entry.
        """
        a = self
        if a.data.shape != masks.shape:
            raise ShapeError(
                f"masked_min_k_rows: mask shape {masks.shape} != tensor {a.data.shape}"
            )
        n = a.data.shape[0]
        selections = []
        total = 0.0
        for i in range(n):
            cols = np.flatnonzero(masks[i])
            if cols.size == 0:
                raise ValueError(f"masked_min_k_rows: row {i} has an empty mask")
            order = np.argsort(a.data[i, cols], kind="stable")
            chosen = cols[order[: min(k, cols.size)]]
            selections.append(chosen)
            total += float(np.mean(a.data[i, chosen]))

        def backward(g):
            buf = np.zeros_like(a.data)
            for i, chosen in enumerate(selections):
                buf[i, chosen] = g / (n * chosen.size)
            a._accum(buf)

        return Tensor._result(total / n, (a,), backward, "masked_min_k_rows")

    # -- operator sugar ------------------------------------------------------

    __add__ = add
    __sub__ = sub
    __mul__ = mul
    __truediv__ = div

    def __neg__(self):
        return self.negate()

    # -- backward ------------------------------------------------------------

    def backward(self):
        """Reverse pass from a scalar; fills .grad on every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def elementwise(kind: str, a: Tensor, b: Tensor | None = None, c: float = 1.0) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds need matching shapes."""
    unary = {"square": Tensor.square, "log": Tensor.log, "negate": Tensor.negate}
    binary = {"add": Tensor.add, "sub": Tensor.sub, "mul": Tensor.mul}
    if kind in binary:
        if b is None:
            raise ValueError(f"elementwise '{kind}' needs two operands")
        return binary[kind](a, b)
    if kind in unary:
        return unary[kind](a)
    if kind == "scale":
        return a.scale(c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# -- optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter-group Adam moment buffers and step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState, lr: float):
    """One Adam update with bias correction, in place on the params."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.data.shape != g.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Convenience wrapper binding an AdamState to a fixed parameter list."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params
        ]
        adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# -- gradient verification -----------------------------------------------------


def grad_check(
    closure,
    params: list[Tensor],
    fd_step: float = 1e-6,
    max_coords: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of closure() against central finite differences.

    closure must rebuild the loss (a scalar Tensor) from the current param
    values. Returns the max relative error over sampled coordinates,
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = closure()
    loss.backward()
    analytic = [np.array(p.grad, copy=True) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + fd_step
            with no_grad():
                up = closure().item()
            flat[c] = orig - fd_step
            with no_grad():
                down = closure().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * fd_step)
            ana = a.reshape(-1)[c]
            err = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
