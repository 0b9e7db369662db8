"""Symmetry regularization losses and saturating weight nonlinearities.

SymReg pushes each output channel's sorted weights toward mirror symmetry:
a channel whose sorted values pair up as (v, -v) keeps a zero mean under
any symmetric quantizer, which kills the output bias drift of the layer.
The strict loss pairs the i-th smallest with the i-th largest; the relaxed
loss lets groups of two from each end cancel jointly, never exceeding the
strict loss (per-group terms obey the triangle inequality against their
two pairs).

SatNL reparameterizes weights through a bounded, odd, saturating function
so effective weights live in (-1, 1) and sharpness-aware perturbations
shrink near zero in effective-weight space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special as _sp

from .autodiff import Graph, Node, Tensor, as_tensor

SATNL_KINDS = ("tanh", "erf", "algsat")


def satnl_forward(kind: str, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "erf":
        return _sp.erf(x)
    if kind == "algsat":
        return x * (1.0 + x**4) ** -0.25
    raise ValueError(f"unknown satnl kind {kind!r}")


def satnl_inverse(kind: str, y):
    y = np.asarray(y, dtype=np.float64)
    if kind == "tanh":
        return np.arctanh(y)
    if kind == "erf":
        return _sp.erfinv(y)
    if kind == "algsat":
        return y * (1.0 - y**4) ** -0.25
    raise ValueError(f"unknown satnl kind {kind!r}")


def is_valid_satnl(f, probe_grid=None, bound: float = 1.0):
    """Check the three saturating-nonlinearity properties on a probe grid:
    odd symmetry, bounded + saturating range, and nonincreasing slope for
    x >= 0.  Returns (valid, violations)."""
    if probe_grid is None:
        probe_grid = np.linspace(-10.0, 10.0, 2001)
    grid = np.asarray(probe_grid, dtype=np.float64)
    if grid.size < 1000:
        raise ValueError("probe grid needs >= 1000 points")
    if not np.allclose(grid, -grid[::-1], atol=1e-12):
        raise ValueError("probe grid must be symmetric about 0")
    y = np.asarray(f(grid), dtype=np.float64)
    violations = []
    if np.max(np.abs(y + y[::-1])) > 1e-12:
        violations.append("not odd: f(-x) != -f(x)")
    if np.max(np.abs(y)) > bound:
        violations.append(f"not bounded by {bound}: sup|f| = {np.max(np.abs(y)):.6g}")
    if float(f(10.0)) - float(f(9.0)) >= 1e-3:
        violations.append("not saturating: f(10) - f(9) >= 1e-3")
    pos = grid >= 0.0
    slopes = np.diff(y[pos]) / np.diff(grid[pos])
    if np.any(np.diff(slopes) > 1e-12):
        violations.append("slope not nonincreasing for x >= 0")
    return (not violations, violations)


@dataclass
class SatNLConfig:
    kind: str = "tanh"
    enabled: dict | None = None  # layer name -> bool; None = all layers

    def __post_init__(self):
        if self.kind not in SATNL_KINDS:
            raise ValueError(f"satnl kind must be one of {SATNL_KINDS}, got {self.kind!r}")
        ok, violations = is_valid_satnl(lambda x: satnl_forward(self.kind, x))
        if not ok:
            raise ValueError(f"satnl kind {self.kind!r} fails validity: {violations}")

    def applies_to(self, layer: str) -> bool:
        if self.enabled is None:
            return True
        return bool(self.enabled.get(layer, False))


def satnl_apply(w_latent: Node, cfg: SatNLConfig) -> Node:
    """Insert the saturating nonlinearity over a latent weight node."""
    g = w_latent.graph
    return g.forward_op(cfg.kind, w_latent)


def init_latent(w_target, cfg: SatNLConfig) -> Tensor:
    """Latent weights whose effective values reproduce w_target (clamped
    into the open output range so the inverse stays finite)."""
    w = np.clip(as_tensor(w_target), -0.999, 0.999)
    return satnl_inverse(cfg.kind, w)


@dataclass
class SymRegConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    channel_axis: int = 0
    skip_layers: frozenset = field(default_factory=frozenset)
    min_channel_elems: int = 16  # depthwise-like layers are left alone

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        self.skip_layers = frozenset(self.skip_layers)


def _channel_flat_indices(shape, axis: int) -> np.ndarray:
    """(C, N) array of flat indices grouping a tensor by channel slice."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    return np.moveaxis(idx, axis, 0).reshape(shape[axis], -1)


def _sorted_channel_indices(w: Node, channel_axis: int):
    idx = _channel_flat_indices(w.value.shape, channel_axis)
    vals = w.value.ravel()[idx]
    order = np.argsort(vals, axis=1, kind="stable")
    return np.take_along_axis(idx, order, axis=1)


def sym_loss1(w: Node, channel_axis: int = 0) -> Node:
    """Strict mirror-pair symmetry loss: mean |i-th smallest + i-th largest|
    over channels.  Gradients route through the sort to the originating
    positions; the middle element of an odd channel contributes nothing."""
    g = w.graph
    sidx = _sorted_channel_indices(w, channel_axis)
    c, n = sidx.shape
    if n < 2:
        raise ValueError(f"sym_loss1 needs >= 2 elements per channel, got {n}")
    half = n // 2
    i = np.arange(half)
    left = g.gather(w, sidx[:, i].ravel())
    right = g.gather(w, sidx[:, n - 1 - i].ravel())
    total = g.sum(g.abs(g.add(left, right)))
    return g.scale(total, 2.0 / (c * n))


def sym_loss2(w: Node, channel_axis: int = 0) -> Node:
    """Relaxed 2:2 symmetry loss: two elements from each end of the sorted
    channel cancel as a group, so it never exceeds sym_loss1.  Leftover
    middle elements (N mod 4 != 0) are excluded."""
    g = w.graph
    sidx = _sorted_channel_indices(w, channel_axis)
    c, n = sidx.shape
    if n < 4:
        raise ValueError(f"sym_loss2 needs >= 4 elements per channel, got {n}")
    i = np.arange(n // 4)
    lo_even = g.gather(w, sidx[:, 2 * i].ravel())
    lo_odd = g.gather(w, sidx[:, 2 * i + 1].ravel())
    hi_even = g.gather(w, sidx[:, n - 1 - 2 * i].ravel())
    hi_odd = g.gather(w, sidx[:, n - 2 - 2 * i].ravel())
    groups = g.add(g.add(lo_even, hi_even), g.add(lo_odd, hi_odd))
    total = g.sum(g.abs(groups))
    return g.scale(total, 2.0 / (c * n))


def symreg_layers(named_weights, cfg: SymRegConfig):
    """Select (name, node) pairs that SymReg applies to: skip-listed and
    depthwise-like channels (fewer than min_channel_elems per slice) are
    left unregularized."""
    selected = []
    for name, node in named_weights:
        if name in cfg.skip_layers:
            continue
        shape = node.value.shape
        per_channel = int(np.prod(shape)) // shape[cfg.channel_axis]
        if per_channel < cfg.min_channel_elems:
            continue
        selected.append((name, node))
    return selected


def total_loss(ce: Node, named_weights, cfg: SymRegConfig) -> Node:
    """Training objective: cross entropy plus lambda-weighted SymReg terms,
    each averaged over the layers they apply to."""
    g = ce.graph
    loss = ce
    layers = symreg_layers(named_weights, cfg)
    if not layers:
        return loss
    if cfg.lambda1 > 0:
        acc = None
        for _, node in layers:
            term = sym_loss1(node, cfg.channel_axis)
            acc = term if acc is None else g.add(acc, term)
        loss = g.add(loss, g.scale(acc, cfg.lambda1 / len(layers)))
    if cfg.lambda2 > 0:
        acc = None
        for _, node in layers:
            term = sym_loss2(node, cfg.channel_axis)
            acc = term if acc is None else g.add(acc, term)
        loss = g.add(loss, g.scale(acc, cfg.lambda2 / len(layers)))
    return loss
