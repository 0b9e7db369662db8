"""Fake-quantization primitives.

Weights use symmetric quantization on the restricted integer range
[-(2^(b-1)-1), +(2^(b-1)-1)] so positive and negative levels mirror each
other; activations use asymmetric per-tensor quantization on [0, 2^b - 1].
Rounding is ties-to-even everywhere (numpy's round), which keeps the
symmetric quantizer an odd map and avoids directional mean drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, as_tensor

_MODES = ("symmetric", "asymmetric")
_GRANULARITIES = ("per_tensor", "per_channel")
_FITS = ("minmax", "aciq_analytic", "mse_grid")


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    mode: str = "symmetric"
    granularity: str = "per_tensor"
    channel_axis: int = 0
    fit: str = "minmax"

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.granularity not in _GRANULARITIES:
            raise ValueError(f"granularity must be one of {_GRANULARITIES}")
        if self.fit not in _FITS:
            raise ValueError(f"fit must be one of {_FITS}, got {self.fit!r}")
        if self.mode == "asymmetric" and self.granularity != "per_tensor":
            raise ValueError("asymmetric mode is per-tensor only (single zero point)")

    @property
    def max_pos_level(self) -> int:
        """Largest positive integer level (levels mirror in symmetric mode)."""
        if self.mode == "symmetric":
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1


@dataclass
class QuantParams:
    """Fitted quantizer state: one step per channel slice (or one per tensor)."""

    step: np.ndarray
    max_pos_level: int
    channel_axis: int | None = None    # None = per-tensor
    zero_point: int | None = None      # asymmetric only
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        self.step = np.atleast_1d(np.asarray(self.step, dtype=np.float64))
        if np.any(self.step <= 0):
            raise ValueError("step must be positive everywhere")
        if self.degenerate is None:
            self.degenerate = np.zeros(self.step.shape, dtype=bool)

    @property
    def clip(self) -> np.ndarray:
        return self.step * self.max_pos_level

    def broadcast_step(self, shape) -> np.ndarray:
        if self.channel_axis is None:
            return self.step.reshape(())
        bshape = [1] * len(shape)
        bshape[self.channel_axis] = self.step.size
        if shape[self.channel_axis] != self.step.size:
            raise ValueError(f"params fitted for {self.step.size} channels on axis "
                             f"{self.channel_axis}, tensor has shape {tuple(shape)}")
        return self.step.reshape(bshape)


def _channel_slices(t: Tensor, axis: int) -> np.ndarray:
    """View of t as (channels, elements-per-channel)."""
    if not -t.ndim <= axis < t.ndim:
        raise ValueError(f"channel axis {axis} invalid for shape {t.shape}")
    return np.moveaxis(t, axis, 0).reshape(t.shape[axis], -1)


def _fit_symmetric_clip(sl: np.ndarray, scheme: QuantScheme) -> tuple[float, bool]:
    """Clip boundary for one slice under the scheme's fit rule."""
    amax = float(np.max(np.abs(sl)))
    if amax == 0.0:
        return float(scheme.max_pos_level), True  # degenerate: step 1
    if scheme.fit == "minmax":
        return amax, False
    if scheme.fit == "aciq_analytic":
        from .error_model import optimal_alpha
        sigma = float(np.std(sl))
        if sigma == 0.0:
            return float(scheme.max_pos_level), True
        return sigma * optimal_alpha(scheme.bits, "normal"), False
    # mse_grid: 100 uniform candidates in (0, max|value|]
    lvl = scheme.max_pos_level
    best_clip, best_err = amax, np.inf
    for i in range(100):
        cand = amax * (i + 1) / 100.0
        step = cand / lvl
        q = np.round(np.clip(sl, -cand, cand) / step) * step
        err = float(np.mean((sl - q) ** 2))
        if err < best_err:
            best_err, best_clip = err, cand
    return best_clip, False


def fit_params(t: Tensor, scheme: QuantScheme) -> QuantParams:
    t = as_tensor(t)
    if t.size == 0:
        raise ValueError("cannot fit quantizer params on an empty tensor")
    if scheme.mode == "asymmetric":
        if scheme.fit != "minmax":
            raise ValueError("asymmetric mode supports minmax fit only")
        lo = min(float(t.min()), 0.0)
        hi = max(float(t.max()), 0.0)
        nlev = 2**scheme.bits - 1
        if hi == lo:
            return QuantParams(np.array([1.0]), nlev, None, zero_point=0,
                               degenerate=np.array([True]))
        step = (hi - lo) / nlev
        zp = int(np.clip(np.round(-lo / step), 0, nlev))
        return QuantParams(np.array([step]), nlev, None, zero_point=zp)

    lvl = scheme.max_pos_level
    if scheme.granularity == "per_tensor":
        slices = t.reshape(1, -1)
        axis = None
    else:
        slices = _channel_slices(t, scheme.channel_axis)
        axis = scheme.channel_axis
    steps = np.empty(slices.shape[0])
    degen = np.zeros(slices.shape[0], dtype=bool)
    for c in range(slices.shape[0]):
        clip, is_degen = _fit_symmetric_clip(slices[c], scheme)
        degen[c] = is_degen
        steps[c] = 1.0 if is_degen else clip / lvl
    return QuantParams(steps, lvl, axis, degenerate=degen)


def quantize(t: Tensor, p: QuantParams, scheme: QuantScheme) -> Tensor:
    """Fake-quantize: clamp to the clip range, round to the nearest level
    (ties to even), and map back to real values.  Shape is preserved."""
    t = as_tensor(t)
    if scheme.mode == "asymmetric":
        step = float(p.step[0])
        nlev = 2**scheme.bits - 1
        k = np.clip(np.round(t / step) + p.zero_point, 0, nlev)
        return (k - p.zero_point) * step
    step = p.broadcast_step(t.shape)
    clip = step * p.max_pos_level
    return np.round(np.clip(t, -clip, clip) / step) * step


def scale_step(p: QuantParams, ratio: float) -> QuantParams:
    """Quantizer with every step scaled by ratio (clip follows; zero points fixed)."""
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    return replace(p, step=p.step * ratio, degenerate=p.degenerate.copy())


def quantize_single_level(t: Tensor, p: QuantParams, level: int) -> Tensor:
    """Quantize only the elements whose nearest level is `level`; pass the
    rest through untouched.  Symmetric quantizers only."""
    if p.zero_point is not None:
        raise ValueError("single-level probing is defined for symmetric quantizers")
    if abs(level) > p.max_pos_level:
        raise ValueError(f"level {level} outside range +-{p.max_pos_level}")
    t = as_tensor(t)
    step = p.broadcast_step(t.shape)
    clip = step * p.max_pos_level
    nearest = np.round(np.clip(t, -clip, clip) / step)
    return np.where(nearest == level, level * step, t)


def log_quantize(t: Tensor, bits: int) -> Tensor:
    """Power-of-two quantization: x -> sign(x) * 2^round(log2|x|), exponents
    clamped to a 2^(bits-1)-wide window ending at the max exponent."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    t = as_tensor(t)
    out = t.copy()
    nz = t != 0.0
    if not nz.any():
        return out
    e = np.round(np.log2(np.abs(t[nz])))
    e_max = e.max()
    e_min = e_max - (2 ** (bits - 1) - 1)
    out[nz] = np.sign(t[nz]) * np.exp2(np.clip(e, e_min, e_max))
    return out


def kmeans_quantize(t: Tensor, bits: int, max_iters: int = 100) -> Tensor:
    """1-D Lloyd's algorithm with 2^bits centroids seeded at uniform quantiles."""
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    t = as_tensor(t)
    if t.size == 0:
        raise ValueError("cannot cluster an empty tensor")
    flat = t.ravel()
    k = 2**bits
    if np.unique(flat).size <= k:
        return t.copy()  # every distinct value is its own centroid
    cent = np.quantile(flat, (np.arange(k) + 0.5) / k)
    assign = None
    for _ in range(max_iters):
        order = np.argsort(cent, kind="stable")
        cent = cent[order]
        bounds = 0.5 * (cent[:-1] + cent[1:])
        new_assign = np.searchsorted(bounds, flat)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = flat[assign == c]
            if members.size:
                cent[c] = members.mean()
    return cent[assign].reshape(t.shape)


def fit_activation_params(samples: Tensor, bits: int, percentile: float = 99.9) -> QuantParams:
    """Asymmetric per-tensor fit on a calibration batch, with the range
    winsorized at the given percentile of |x| to shed outliers."""
    samples = as_tensor(samples)
    if samples.size == 0:
        raise ValueError("calibration batch is empty")
    m = float(np.percentile(np.abs(samples), percentile))
    lo = max(float(samples.min()), -m)
    hi = min(float(samples.max()), m)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    nlev = 2**bits - 1
    if hi == lo:
        return QuantParams(np.array([1.0]), nlev, None, zero_point=0,
                           degenerate=np.array([True]))
    step = (hi - lo) / nlev
    zp = int(np.clip(np.round(-lo / step), 0, nlev))
    return QuantParams(np.array([step]), nlev, None, zero_point=zp)
