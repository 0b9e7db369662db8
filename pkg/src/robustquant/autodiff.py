"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors are C-contiguous float64 numpy arrays; a Graph is an append-only
tape of eagerly evaluated nodes, so node inputs always refer to earlier
nodes and backward() is a single reverse sweep.  Training and analysis run
in 64-bit throughout; checkpoints downcast to 32-bit on disk.

Conventions baked in here and relied on elsewhere:
  * subgradient of |x| and relu at 0 is 0
  * reductions accumulate in a fixed (sequential) order, so a given seed
    and config reproduce losses bit-for-bit
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy import special as _sp

Tensor = np.ndarray  # float64, row-major


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


class Rng:
    """Deterministic random stream: identical seed => identical sequence.

    Backed by numpy's counter-based Philox generator, which is stable
    across platforms and runs.
    """

    def __init__(self, seed: int, algorithm: str = "philox"):
        self.seed = int(seed)
        self.algorithm = algorithm
        if algorithm == "philox":
            bitgen = np.random.Philox(self.seed)
        elif algorithm == "pcg64":
            bitgen = np.random.PCG64(self.seed)
        else:
            raise ValueError(f"unknown rng algorithm: {algorithm!r}")
        self._gen = np.random.Generator(bitgen)

    def spawn(self, tag: str) -> "Rng":
        """Independent child stream, deterministic in (seed, tag)."""
        h = hashlib.blake2s(f"{self.seed}:{tag}".encode()).digest()
        return Rng(int.from_bytes(h[:8], "little"), self.algorithm)

    def normal(self, shape=(), scale=1.0) -> Tensor:
        return self._gen.standard_normal(shape) * scale

    def uniform(self, lo: float, hi: float, shape=()) -> Tensor:
        return self._gen.uniform(lo, hi, shape)

    def integers(self, lo: int, hi: int, shape=()):
        return self._gen.integers(lo, hi, shape)

    def permutation(self, n: int):
        return self._gen.permutation(n)


class Node:
    __slots__ = ("graph", "nid", "kind", "inputs", "attrs", "value", "grad", "needs_grad")

    def __init__(self, graph, nid, kind, inputs, attrs, value, needs_grad):
        self.graph = graph
        self.nid = nid
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.nid} {self.kind} {self.value.shape}>"


def _im2col(xp: Tensor, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcols: Tensor, padded_shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> Tensor:
    n, c = padded_shape[0], padded_shape[1]
    gx = np.zeros(padded_shape, dtype=np.float64)
    gc = gcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gc[:, :, i, j]
    return gx


def _algsat(x):
    # odd, bounded by 1, slope (1+x^4)^(-5/4) strictly decreasing on x>=0
    return x * (1.0 + x**4) ** -0.25


def _algsat_deriv(x):
    return (1.0 + x**4) ** -1.25


_ERF_DERIV = 2.0 / np.sqrt(np.pi)


class Graph:
    """Single-owner, single-threaded autodiff tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_ids: set[int] = set()

    # -- node construction -------------------------------------------------

    def _append(self, kind, inputs, attrs, value, needs_grad) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"op {kind!r} produced non-finite values")
        node = Node(self, len(self.nodes), kind, inputs, attrs, value, needs_grad)
        self.nodes.append(node)
        return node

    def param(self, value) -> Node:
        node = self._append("param", (), {}, as_tensor(value), True)
        self.param_ids.add(node.nid)
        return node

    def constant(self, value) -> Node:
        return self._append("const", (), {}, as_tensor(value), False)

    def parameters(self) -> list[Node]:
        return [self.nodes[i] for i in sorted(self.param_ids)]

    # -- forward dispatch ---------------------------------------------------

    def forward_op(self, kind: str, *inputs: Node, **attrs) -> Node:
        fn = getattr(self, kind, None)
        if fn is None or kind.startswith("_") or kind in ("param", "constant", "backward", "forward_op"):
            raise ValueError(f"unknown op kind: {kind!r}")
        return fn(*inputs, **attrs)

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2:
            raise ShapeError(f"matmul needs 2-D operands, got {av.shape} and {bv.shape}")
        inner = bv.shape[1] if transpose_b else bv.shape[0]
        if av.shape[1] != inner:
            raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}"
                             f"{'^T' if transpose_b else ''}")
        out = av @ (bv.T if transpose_b else bv)
        return self._append("matmul", (a, b), {"transpose_b": transpose_b}, out,
                            a.needs_grad or b.needs_grad)

    def conv2d(self, x: Node, w: Node, stride: int = 1, pad: int = 0) -> Node:
        xv, wv = x.value, w.value
        if xv.ndim != 4 or wv.ndim != 4:
            raise ShapeError(f"conv2d needs NCHW input and OIHW weight, got {xv.shape}, {wv.shape}")
        n, c, h, wd = xv.shape
        o, ci, kh, kw = wv.shape
        if ci != c:
            raise ShapeError(f"conv2d channel mismatch: input {xv.shape} vs weight {wv.shape}")
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (wd + 2 * pad - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv2d output would be empty for input {xv.shape}, kernel {wv.shape}")
        xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
        cols = _im2col(xp, kh, kw, stride, oh, ow)
        out = np.matmul(wv.reshape(o, -1), cols).reshape(n, o, oh, ow)
        attrs = {"stride": stride, "pad": pad, "cols": cols, "padded_shape": xp.shape,
                 "out_hw": (oh, ow)}
        return self._append("conv2d", (x, w), attrs, out, x.needs_grad or w.needs_grad)

    def add_bias(self, x: Node, b: Node) -> Node:
        xv, bv = x.value, b.value
        if bv.ndim != 1:
            raise ShapeError(f"add_bias bias must be rank 1, got {bv.shape}")
        if xv.ndim == 2:
            if xv.shape[1] != bv.shape[0]:
                raise ShapeError(f"add_bias mismatch: {xv.shape} + {bv.shape}")
            out = xv + bv
        elif xv.ndim == 4:
            if xv.shape[1] != bv.shape[0]:
                raise ShapeError(f"add_bias mismatch: {xv.shape} + {bv.shape}")
            out = xv + bv[None, :, None, None]
        else:
            raise ShapeError(f"add_bias input must be rank 2 or 4, got {xv.shape}")
        return self._append("add_bias", (x, b), {}, out, x.needs_grad or b.needs_grad)

    def relu(self, x: Node) -> Node:
        return self._append("relu", (x,), {}, np.maximum(x.value, 0.0), x.needs_grad)

    def tanh(self, x: Node) -> Node:
        return self._append("tanh", (x,), {}, np.tanh(x.value), x.needs_grad)

    def erf(self, x: Node) -> Node:
        return self._append("erf", (x,), {}, _sp.erf(x.value), x.needs_grad)

    def algsat(self, x: Node) -> Node:
        return self._append("algsat", (x,), {}, _algsat(x.value), x.needs_grad)

    def flatten(self, x: Node) -> Node:
        xv = x.value
        if xv.ndim < 2:
            raise ShapeError(f"flatten needs a batch dimension, got {xv.shape}")
        return self._append("flatten", (x,), {"in_shape": xv.shape},
                            xv.reshape(xv.shape[0], -1), x.needs_grad)

    def avgpool2d(self, x: Node, size: int = 2) -> Node:
        xv = x.value
        if xv.ndim != 4:
            raise ShapeError(f"avgpool2d needs NCHW input, got {xv.shape}")
        n, c, h, w = xv.shape
        if h % size or w % size:
            raise ShapeError(f"avgpool2d size {size} does not divide spatial dims of {xv.shape}")
        out = xv.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
        return self._append("avgpool2d", (x,), {"size": size}, out, x.needs_grad)

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
        return self._append("add", (a, b), {}, a.value + b.value, a.needs_grad or b.needs_grad)

    def sub(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"sub shape mismatch: {a.value.shape} vs {b.value.shape}")
        return self._append("sub", (a, b), {}, a.value - b.value, a.needs_grad or b.needs_grad)

    def mul(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
        return self._append("mul", (a, b), {}, a.value * b.value, a.needs_grad or b.needs_grad)

    def scale(self, x: Node, c: float) -> Node:
        return self._append("scale", (x,), {"c": float(c)}, x.value * float(c), x.needs_grad)

    def abs(self, x: Node) -> Node:
        return self._append("abs", (x,), {}, np.abs(x.value), x.needs_grad)

    def sum(self, x: Node) -> Node:
        return self._append("sum", (x,), {}, np.asarray(np.sum(x.value)), x.needs_grad)

    def mean(self, x: Node) -> Node:
        return self._append("mean", (x,), {"n": x.value.size},
                            np.asarray(np.mean(x.value)), x.needs_grad)

    def gather(self, x: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        return self._append("gather", (x,), {"idx": idx}, x.value.ravel()[idx], x.needs_grad)

    def softmax_cross_entropy(self, logits: Node, labels) -> Node:
        lv = logits.value
        labels = np.asarray(labels, dtype=np.intp)
        if lv.ndim != 2:
            raise ShapeError(f"softmax_cross_entropy needs (batch, classes) logits, got {lv.shape}")
        if lv.shape[0] == 0:
            raise ValueError("softmax_cross_entropy: empty batch")
        if labels.shape != (lv.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {lv.shape[0]}")
        if labels.min() < 0 or labels.max() >= lv.shape[1]:
            raise ValueError(f"label out of range [0, {lv.shape[1]})")
        shifted = lv - lv.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        nll = logz - shifted[np.arange(lv.shape[0]), labels]
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return self._append("softmax_cross_entropy", (logits,),
                            {"labels": labels, "probs": probs},
                            np.asarray(nll.mean()), logits.needs_grad)

    def fake_quant(self, x: Node, step: Node, qn: int, qp: int, channel_axis=None,
                   grad_scale: float = 1.0) -> Node:
        """LSQ-style fake quantizer with a learnable step.

        Straight-through on x inside the clip range; step gradient follows
        the learned-step rule scaled by grad_scale.  Not a true derivative,
        so it is excluded from finite-difference checks by design.
        """
        xv, sv = x.value, step.value
        if channel_axis is None:
            if sv.size != 1:
                raise ShapeError(f"per-tensor fake_quant needs scalar step, got {sv.shape}")
            s = sv.reshape(())
        else:
            shape = [1] * xv.ndim
            shape[channel_axis] = xv.shape[channel_axis]
            if sv.size != xv.shape[channel_axis]:
                raise ShapeError(f"per-channel fake_quant step {sv.shape} vs axis size "
                                 f"{xv.shape[channel_axis]}")
            s = sv.reshape(shape)
        v = xv / s
        vbar = np.clip(np.round(v), qn, qp)
        out = vbar * s
        attrs = {"qn": qn, "qp": qp, "channel_axis": channel_axis,
                 "grad_scale": float(grad_scale), "v": v, "vbar": vbar, "s_bc": s}
        return self._append("fake_quant", (x, step), attrs, out,
                            x.needs_grad or step.needs_grad)

    # -- backward -----------------------------------------------------------

    def backward(self, loss: Node) -> None:
        if loss.value.ndim != 0:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes[: loss.nid + 1]):
            if node.grad is None or not node.inputs:
                continue
            self._backward_one(node)

    @staticmethod
    def _acc(node: Node, g: Tensor) -> None:
        if not node.needs_grad:
            return
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
        node.grad += g

    def _backward_one(self, node: Node) -> None:
        g = node.grad
        kind = node.kind
        a = node.inputs[0]
        if kind == "matmul":
            b = node.inputs[1]
            if node.attrs["transpose_b"]:
                self._acc(a, g @ b.value)
                self._acc(b, g.T @ a.value)
            else:
                self._acc(a, g @ b.value.T)
                self._acc(b, a.value.T @ g)
        elif kind == "conv2d":
            w = node.inputs[1]
            stride, pad = node.attrs["stride"], node.attrs["pad"]
            cols = node.attrs["cols"]
            oh, ow = node.attrs["out_hw"]
            o = w.value.shape[0]
            kh, kw = w.value.shape[2], w.value.shape[3]
            g2 = g.reshape(g.shape[0], o, oh * ow)
            if w.needs_grad:
                gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
                self._acc(w, gw.reshape(w.value.shape))
            if a.needs_grad:
                gcols = np.matmul(w.value.reshape(o, -1).T, g2)
                gxp = _col2im(gcols, node.attrs["padded_shape"], kh, kw, stride, oh, ow)
                if pad:
                    gxp = gxp[:, :, pad:-pad, pad:-pad]
                self._acc(a, gxp)
        elif kind == "add_bias":
            b = node.inputs[1]
            self._acc(a, g)
            if b.needs_grad:
                axes = (0,) if g.ndim == 2 else (0, 2, 3)
                self._acc(b, g.sum(axis=axes))
        elif kind == "relu":
            self._acc(a, g * (a.value > 0.0))
        elif kind == "tanh":
            self._acc(a, g * (1.0 - node.value**2))
        elif kind == "erf":
            self._acc(a, g * _ERF_DERIV * np.exp(-a.value**2))
        elif kind == "algsat":
            self._acc(a, g * _algsat_deriv(a.value))
        elif kind == "flatten":
            self._acc(a, g.reshape(node.attrs["in_shape"]))
        elif kind == "avgpool2d":
            size = node.attrs["size"]
            gx = np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size)
            self._acc(a, gx)
        elif kind == "add":
            self._acc(a, g)
            self._acc(node.inputs[1], g)
        elif kind == "sub":
            self._acc(a, g)
            self._acc(node.inputs[1], -g)
        elif kind == "mul":
            b = node.inputs[1]
            self._acc(a, g * b.value)
            self._acc(b, g * a.value)
        elif kind == "scale":
            self._acc(a, g * node.attrs["c"])
        elif kind == "abs":
            self._acc(a, g * np.sign(a.value))
        elif kind == "sum":
            self._acc(a, np.broadcast_to(g, a.value.shape).copy())
        elif kind == "mean":
            self._acc(a, np.broadcast_to(g / node.attrs["n"], a.value.shape).copy())
        elif kind == "gather":
            gx = np.zeros(a.value.size, dtype=np.float64)
            np.add.at(gx, node.attrs["idx"].ravel(), g.ravel())
            self._acc(a, gx.reshape(a.value.shape))
        elif kind == "softmax_cross_entropy":
            labels, probs = node.attrs["labels"], node.attrs["probs"]
            gl = probs.copy()
            gl[np.arange(labels.shape[0]), labels] -= 1.0
            gl *= g / labels.shape[0]
            self._acc(a, gl)
        elif kind == "fake_quant":
            step = node.inputs[1]
            v, vbar = node.attrs["v"], node.attrs["vbar"]
            inside = (v >= node.attrs["qn"]) & (v <= node.attrs["qp"])
            self._acc(a, g * inside)
            if step.needs_grad:
                gs_elem = g * (vbar - np.where(inside, v, 0.0))
                ax = node.attrs["channel_axis"]
                if ax is None:
                    gs = np.asarray(gs_elem.sum())
                else:
                    axes = tuple(i for i in range(gs_elem.ndim) if i != ax)
                    gs = gs_elem.sum(axis=axes)
                self._acc(step, node.attrs["grad_scale"] * gs.reshape(step.value.shape))
        else:
            raise ValueError(f"no backward rule for op kind {kind!r}")


def loss_value(build_loss, params) -> float:
    """Evaluate a loss-building closure at the given parameter values."""
    g = Graph()
    pnodes = [g.param(p) for p in params]
    return float(build_loss(g, pnodes).value)


def finite_difference_check(build_loss, params, epsilon: float = 1e-5) -> float:
    """Compare backward gradients with central differences.

    build_loss(graph, param_nodes) must deterministically return a scalar
    loss node.  Returns the max over all elements of
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    params = [as_tensor(p) for p in params]
    g = Graph()
    pnodes = [g.param(p) for p in params]
    loss = build_loss(g, pnodes)
    g.backward(loss)
    grads = [np.zeros_like(p) if n.grad is None else n.grad for p, n in zip(params, pnodes)]
    worst = 0.0
    for k in range(len(params)):
        flat = params[k].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_value(build_loss, params)
            flat[i] = orig - epsilon
            lm = loss_value(build_loss, params)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * epsilon)
            ad = grads[k].ravel()[i]
            rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            worst = max(worst, rel)
    return worst
