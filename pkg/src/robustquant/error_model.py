"""Analytical quantization-error models for standard-normal and clamped-normal
weights, plus the Monte Carlo oracle and the bias-drift estimator.

The expected squared error of b-bit symmetric quantization with truncation
boundary alpha splits into a truncation term (mass beyond the boundary) and
a rounding term alpha^2 / (3 * 2^(2b)).  The Gaussian truncation integrals
are evaluated in closed form:

    int_a^inf f(x) (x-a)^2 dx = (1 + a^2)(1 - F(a)) - a f(a)

and for a definite interval via the antiderivative
H(x) = (1 + a^2) F(x) + (2a - x) f(x), so no quadrature tolerance enters
the comparison with the Monte Carlo oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(x: float) -> float:
    return math.exp(-0.5 * x * x) * _INV_SQRT_2PI


def norm_cdf(x: float) -> float:
    # erfc keeps ~1e-16 relative accuracy in the far tails
    return 0.5 * math.erfc(-x / _SQRT2)


@dataclass(frozen=True)
class ErrorEstimate:
    truncation: float
    rounding: float
    alpha: float
    bits: int

    @property
    def total(self) -> float:
        return self.truncation + self.rounding


def _rounding_term(alpha: float, bits: int) -> float:
    return alpha * alpha / (3.0 * 2.0 ** (2 * bits))


def quant_error_normal(alpha: float, bits: int) -> ErrorEstimate:
    """Expected squared error of b-bit symmetric quantization of N(0,1)
    with truncation boundary alpha."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    trunc = 2.0 * ((1.0 + alpha * alpha) * (1.0 - norm_cdf(alpha)) - alpha * norm_pdf(alpha))
    return ErrorEstimate(max(trunc, 0.0), _rounding_term(alpha, bits), alpha, bits)


def clamped_cdf(x: float, d: float) -> float:
    """CDF of the clamped standard normal: 0 below -d, F(x) + F(-d) inside,
    1 at and above d."""
    if d <= 0:
        raise ValueError(f"d must be positive, got {d}")
    if x <= -d:
        return 0.0
    if x >= d:
        return 1.0
    return norm_cdf(x) + norm_cdf(-abs(d))


def _gauss_sq_antideriv(x: float, alpha: float) -> float:
    """Antiderivative of f(x) (x - alpha)^2."""
    return (1.0 + alpha * alpha) * norm_cdf(x) + (2.0 * alpha - x) * norm_pdf(x)


def quant_error_clamped(alpha: float, d: float, bits: int) -> ErrorEstimate:
    """Expected squared error for weights clamped to [-d, d]: boundary point
    masses land at distance (d - alpha), the interior integral runs only to d."""
    if d <= 0:
        raise ValueError(f"d must be positive, got {d}")
    if not 0 < alpha <= d:
        raise ValueError(f"need 0 < alpha <= d, got alpha={alpha}, d={d}")
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    interior = _gauss_sq_antideriv(d, alpha) - _gauss_sq_antideriv(alpha, alpha)
    trunc = 2.0 * (norm_cdf(-abs(d)) * (d - alpha) ** 2 + max(interior, 0.0))
    return ErrorEstimate(max(trunc, 0.0), _rounding_term(alpha, bits), alpha, bits)


def _golden_section(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    invphi2 = (3.0 - math.sqrt(5.0)) / 2.0
    a, b = lo, hi
    h = b - a
    c, d = a + invphi2 * h, a + invphi * h
    fc, fd = f(c), f(d)
    while h > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            h = b - a
            c = a + invphi2 * h
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            h = b - a
            d = a + invphi * h
            fd = f(d)
    return 0.5 * (a + b)


def optimal_alpha(bits: int, model: str = "normal", d: float | None = None) -> float:
    """Truncation boundary minimizing total error, via golden-section search
    to 1e-6 absolute on alpha."""
    if bits < 2:
        raise ValueError(f"bits must be >= 2, got {bits}")
    if model == "normal":
        return _golden_section(lambda a: quant_error_normal(a, bits).total, 1e-3, 8.0)
    if model == "clamped":
        if d is None or d <= 0:
            raise ValueError("clamped model needs d > 0")
        return _golden_section(lambda a: quant_error_clamped(a, d, bits).total, 1e-3, d)
    raise ValueError(f"model must be 'normal' or 'clamped', got {model!r}")


def mc_quant_error(n: int, alpha: float, bits: int, d: float | None = None,
                   seed: int = 0) -> float:
    """Monte Carlo oracle: draw standard normals (clamped to +-d if given),
    quantize with boundary alpha and step 2*alpha/2^b (round-to-nearest on
    the clamped value, boundary values land on the extreme level), and
    return the mean squared error."""
    if n < 10**5:
        raise ValueError(f"n must be >= 1e5 for a stable estimate, got {n}")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    rng = np.random.Generator(np.random.Philox(seed))
    x = rng.standard_normal(n)
    if d is not None:
        np.clip(x, -d, d, out=x)
    delta = 2.0 * alpha / 2**bits
    q = np.round(np.clip(x, -alpha, alpha) / delta) * delta
    return float(np.mean((x - q) ** 2))


@dataclass
class DominanceReport:
    rows: list
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_dominance(d_grid, bits_list, tol: float = 1e-9) -> DominanceReport:
    """Check that the clamped optimum never exceeds the unbounded optimum,
    reporting both curves for every (d, bits) pair."""
    rows, violations = [], []
    normal_totals = {b: quant_error_normal(optimal_alpha(b, "normal"), b).total
                     for b in bits_list}
    for d in d_grid:
        if d <= 0:
            raise ValueError(f"d must be positive, got {d}")
        for b in bits_list:
            ac = optimal_alpha(b, "clamped", d=d)
            tc = quant_error_clamped(ac, d, b).total
            tn = normal_totals[b]
            ok = tc <= tn + tol
            rows.append({"d": float(d), "bits": int(b), "alpha_clamped": ac,
                         "total_clamped": tc, "total_normal": tn, "ok": ok})
            if not ok:
                violations.append((float(d), int(b)))
    return DominanceReport(rows, violations)


def bias_drift(w, w_q, mu_x: float, axis: int = 0) -> np.ndarray:
    """Expected per-output-channel drift N * mu_x * (mean(Q(w)) - mean(w))
    of a linear layer's output caused by weight quantization."""
    w = np.asarray(w, dtype=np.float64)
    w_q = np.asarray(w_q, dtype=np.float64)
    if w.shape != w_q.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w_q.shape}")
    if not -w.ndim <= axis < w.ndim:
        raise ValueError(f"axis {axis} invalid for shape {w.shape}")
    sl = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    sl_q = np.moveaxis(w_q, axis, 0).reshape(w.shape[axis], -1)
    n = sl.shape[1]
    return n * mu_x * (sl_q.mean(axis=1) - sl.mean(axis=1))
