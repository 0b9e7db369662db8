"""Experiment procedures and CSV reporting.

Every procedure is a pure function of (config, seed): rerunning writes an
identical CSV apart from the timestamp header line.  Reports echo the
resolved configuration as '#'-prefixed comment lines so a CSV is enough to
rerun its experiment.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import error_model
from .autodiff import finite_difference_check, Rng
from .checkpoint import Checkpoint
from .datasets import Dataset, load_idx, make_blobs, make_patterns
from .models import Model, ModelSpec
from .quantizer import (QuantParams, QuantScheme, fit_activation_params, fit_params,
                        quantize, quantize_single_level, scale_step)
from .regularizers import SatNLConfig, SymRegConfig
from .trainer import SamConfig, TrainConfig, evaluate


# -- configuration --------------------------------------------------------------


def _cast_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


class Config:
    """Flat key=value configuration with dotted sections.  Every get() is
    recorded so reports can echo the fully resolved configuration."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})
        self.resolved: dict = {}

    @classmethod
    def from_file(cls, path) -> "Config":
        values = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, _, value = stripped.partition("=")
                values[key.strip()] = value.strip()
        return cls(values)

    def apply_overrides(self, pairs) -> None:
        for key, value in pairs:
            self.values[key] = value

    def get(self, key: str, default, cast=None):
        if key in self.values:
            raw = self.values[key]
            if cast is bool:
                value = _cast_bool(raw)
            elif cast is not None:
                value = cast(raw)
            else:
                value = raw
        else:
            value = default
        self.resolved[key] = value
        return value

    def get_list(self, key: str, default, cast=float):
        if key in self.values:
            raw = self.values[key]
            value = [cast(v) for v in raw.split(",") if v.strip() != ""]
        else:
            value = list(default)
        self.resolved[key] = ",".join(str(v) for v in value)
        return value

    def resolved_items(self):
        return sorted(self.resolved.items())


def dataset_from_config(cfg: Config, seed: int) -> Dataset:
    kind = cfg.get("data.kind", "blobs")
    val_fraction = cfg.get("data.val_fraction", 0.25, float)
    data_seed = cfg.get("data.seed", seed, int)
    if kind == "blobs":
        return make_blobs(
            n=cfg.get("data.n", 4000, int),
            classes=cfg.get("data.classes", 4, int),
            dim=cfg.get("data.dim", 16, int),
            separation=cfg.get("data.separation", 3.0, float),
            noise=cfg.get("data.noise", 1.0, float),
            val_fraction=val_fraction,
            seed=data_seed,
        )
    if kind == "patterns":
        return make_patterns(
            n=cfg.get("data.n", 2000, int),
            size=cfg.get("data.size", 12, int),
            noise=cfg.get("data.noise", 0.3, float),
            val_fraction=val_fraction,
            seed=data_seed,
        )
    if kind == "idx":
        return load_idx(cfg.get("data.images", ""), cfg.get("data.labels", ""),
                        val_fraction=val_fraction, seed=data_seed)
    raise ValueError(f"unknown data.kind {kind!r}")


def model_spec_from_config(cfg: Config, data: Dataset) -> ModelSpec:
    arch = cfg.get("model.arch", "mlp")
    satnl = None
    if cfg.get("satnl.enabled", False, bool):
        kind = cfg.get("satnl.kind", "tanh")
        layers = cfg.get("satnl.layers", "all")
        enabled = None if layers == "all" else {n: True for n in layers.split(",") if n}
        satnl = SatNLConfig(kind=kind, enabled=enabled)
    if arch == "mlp":
        return ModelSpec(
            architecture="mlp",
            in_dim=data.x_train.shape[1],
            hidden=tuple(cfg.get_list("model.hidden", (32,), int)),
            classes=data.classes,
            satnl=satnl,
        )
    if arch == "smallcnn":
        return ModelSpec(
            architecture="smallcnn",
            in_shape=tuple(data.x_train.shape[1:]),
            channels=tuple(cfg.get_list("model.channels", (8, 16), int)),
            fc_width=cfg.get("model.fc_width", 32, int),
            classes=data.classes,
            satnl=satnl,
        )
    raise ValueError(f"unknown model.arch {arch!r}")


def train_config_from_config(cfg: Config, seed: int) -> TrainConfig:
    symreg = None
    if cfg.get("symreg.enabled", False, bool):
        skip = cfg.get("symreg.skip", "")
        symreg = SymRegConfig(
            lambda1=cfg.get("symreg.lambda1", 0.1, float),
            lambda2=cfg.get("symreg.lambda2", 0.1, float),
            channel_axis=0,
            skip_layers=frozenset(n for n in skip.split(",") if n),
        )
    sam = SamConfig(
        enabled=cfg.get("sam.enabled", False, bool),
        adaptive=cfg.get("sam.adaptive", True, bool),
        rho=cfg.get("sam.rho", 0.5, float),
    )
    return TrainConfig(
        epochs=cfg.get("train.epochs", 30, int),
        batch_size=cfg.get("train.batch_size", 64, int),
        lr=cfg.get("train.lr", 0.1, float),
        weight_decay=cfg.get("train.weight_decay", 1e-4, float),
        momentum=cfg.get("train.momentum", 0.9, float),
        warmup_epochs=cfg.get("train.warmup_epochs", 2, int),
        lr_floor=cfg.get("train.lr_floor", 1e-3, float),
        seed=seed,
        sam=sam,
        symreg=symreg,
    )


# -- CSV reports -----------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float) or isinstance(value, np.floating):
        return f"{float(value):.6g}"
    return str(value)


def write_report(path, command: str, rows, resolved_items, extra_comments=()) -> None:
    if not rows:
        raise ValueError("refusing to write an empty report")
    keys = list(rows[0].keys())
    for row in rows:
        if list(row.keys()) != keys:
            raise ValueError("all rows of one report must share an identical key set")
    lines = [f"# robustquant {command}",
             f"# generated: {datetime.now(timezone.utc).isoformat()}"]
    for key, value in resolved_items:
        lines.append(f"# {key} = {_fmt(value)}")
    for comment in extra_comments:
        lines.append(f"# {comment}")
    lines.append(",".join(keys))
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in keys))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# -- shared quantization plumbing --------------------------------------------------


def weight_quantizers(model: Model, eff: dict, bits_w: int, fit: str) -> dict:
    """Per-layer symmetric per-output-channel quantizers; first and last
    layers pinned to 8 bits."""
    first, last = model.first_last()
    out = {}
    for name in model.layer_names():
        bits = 8 if name in (first, last) else bits_w
        scheme = QuantScheme(bits=bits, mode="symmetric", granularity="per_channel",
                             channel_axis=0, fit=fit)
        out[name] = (fit_params(eff[name], scheme), scheme)
    return out


def quantize_weights(eff: dict, quantizers: dict) -> dict:
    return {name: quantize(eff[name], p, scheme) for name, (p, scheme) in quantizers.items()}


def activation_quantizers(model: Model, layer_inputs: dict, bits_a: int,
                          percentile: float = 99.9) -> dict:
    """Per-tensor asymmetric quantizers fitted on calibration activations,
    8-bit for the first and last layers."""
    first, last = model.first_last()
    out = {}
    for name in model.layer_names():
        bits = 8 if name in (first, last) else bits_a
        p = fit_activation_params(layer_inputs[name], bits, percentile)
        scheme = QuantScheme(bits=bits, mode="asymmetric", granularity="per_tensor")
        out[name] = (p, scheme)
    return out


def _calib_inputs(model: Model, params: dict, data: Dataset, calib_size: int):
    calib = data.x_train[:calib_size]
    _, res = model.logits(calib, params, collect=True)
    return res.layer_inputs


# -- procedures --------------------------------------------------------------------


def ptq_pipeline(ckpt: Checkpoint, data: Dataset, bits_w, bits_a, fit: str = "minmax",
                 calib_size: int = 256, percentile: float = 99.9) -> dict:
    """Post-training quantization: per-channel symmetric weights, per-tensor
    asymmetric activations, first/last layers at 8 bits.  bits_w or bits_a
    may be the string "FP" to leave that side unquantized."""
    model = Model(ckpt.spec)
    params = ckpt.params
    eff = model.effective_weights(params)
    fp_acc = evaluate(model, params, data.x_val, data.y_val)
    layer_inputs = _calib_inputs(model, params, data, calib_size)

    override = None
    drift_max = 0.0
    if bits_w != "FP":
        quantizers = weight_quantizers(model, eff, int(bits_w), fit)
        override = quantize_weights(eff, quantizers)
        for name in model.layer_names():
            mu_x = float(np.mean(layer_inputs[name]))
            drift = error_model.bias_drift(eff[name], override[name], mu_x, axis=0)
            drift_max = max(drift_max, float(np.max(np.abs(drift))))
    act_quant = None
    if bits_a != "FP":
        act_quant = activation_quantizers(model, layer_inputs, int(bits_a), percentile)
    q_acc = evaluate(model, params, data.x_val, data.y_val,
                     weight_override=override, act_quant=act_quant)
    return {
        "seed": ckpt.meta.get("seed", "?"),
        "bits_w": bits_w,
        "bits_a": bits_a,
        "fit": fit,
        "fp_accuracy": fp_acc,
        "quant_accuracy": q_acc,
        "accuracy_drop": fp_acc - q_acc,
        "drift_max": drift_max,
    }


def sweep_bits(ckpt: Checkpoint, data: Dataset, bits_list, mode: str = "ptq",
               fit: str = "minmax", jobs: int = 1) -> list:
    """Evaluate one checkpoint across weight bit-widths without retraining.
    In qat mode only the step sizes are re-fitted (minmax) at each width."""
    model = Model(ckpt.spec)
    eff = model.effective_weights(ckpt.params)
    fp_acc = evaluate(model, ckpt.params, data.x_val, data.y_val)
    use_fit = "minmax" if mode == "qat" else fit

    def run(bits: int) -> dict:
        override = quantize_weights(eff, weight_quantizers(model, eff, bits, use_fit))
        acc = evaluate(model, ckpt.params, data.x_val, data.y_val,
                       weight_override=override)
        return {"seed": ckpt.meta.get("seed", "?"), "mode": mode, "bits_w": bits,
                "accuracy": acc, "fp_accuracy": fp_acc}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, bits_list))
    return [run(b) for b in bits_list]


def sweep_step_ratio(ckpt: Checkpoint, data: Dataset, bits: int, ratios,
                     fit: str = "minmax", jobs: int = 1) -> tuple:
    """Scale every weight quantizer step by each ratio and evaluate.
    Returns (rows, area-under-accuracy over ratio in [0.8, 1.2])."""
    model = Model(ckpt.spec)
    eff = model.effective_weights(ckpt.params)
    base = weight_quantizers(model, eff, bits, fit)

    def run(ratio: float) -> dict:
        scaled = {name: (scale_step(p, ratio), scheme) for name, (p, scheme) in base.items()}
        override = quantize_weights(eff, scaled)
        acc = evaluate(model, ckpt.params, data.x_val, data.y_val,
                       weight_override=override)
        return {"seed": ckpt.meta.get("seed", "?"), "bits_w": bits,
                "ratio": ratio, "accuracy": acc}

    ratios = sorted(ratios)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, ratios))
    else:
        rows = [run(r) for r in ratios]
    window = [(r["ratio"], r["accuracy"]) for r in rows if 0.8 - 1e-9 <= r["ratio"] <= 1.2 + 1e-9]
    auc = 0.0
    for (r0, a0), (r1, a1) in zip(window, window[1:]):
        auc += 0.5 * (a0 + a1) * (r1 - r0)
    return rows, auc


def default_ratio_grid() -> list:
    """21 points across [0.8, 1.2] plus the 0.5 and 2.0 endpoints."""
    return [0.5] + [round(0.8 + 0.02 * i, 2) for i in range(21)] + [2.0]


def probe_single_level(ckpt: Checkpoint, data: Dataset, bits: int,
                       jobs: int = 1) -> list:
    """Quantize only the weights landing on one level (all layers probed
    simultaneously) and measure the accuracy per level."""
    model = Model(ckpt.spec)
    eff = model.effective_weights(ckpt.params)
    fp_acc = evaluate(model, ckpt.params, data.x_val, data.y_val)
    scheme = QuantScheme(bits=bits, mode="symmetric", granularity="per_channel",
                         channel_axis=0, fit="minmax")
    fitted = {name: fit_params(eff[name], scheme) for name in model.layer_names()}
    max_level = scheme.max_pos_level

    def run(level: int) -> dict:
        override = {name: quantize_single_level(eff[name], fitted[name], level)
                    for name in model.layer_names()}
        acc = evaluate(model, ckpt.params, data.x_val, data.y_val,
                       weight_override=override)
        return {"seed": ckpt.meta.get("seed", "?"), "bits_w": bits, "level": level,
                "accuracy": acc, "fp_accuracy": fp_acc}

    levels = list(range(-max_level, max_level + 1))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, levels))
    return [run(l) for l in levels]


def histogram_kl(p_values, q_values, bins: int = 64, smoothing: float = 1e-8) -> float:
    """KL(P||Q) between histograms over the pooled range of both samples."""
    p_values = np.asarray(p_values, dtype=np.float64).ravel()
    q_values = np.asarray(q_values, dtype=np.float64).ravel()
    lo = min(p_values.min(), q_values.min())
    hi = max(p_values.max(), q_values.max())
    if hi == lo:
        return 0.0
    hp, _ = np.histogram(p_values, bins=bins, range=(lo, hi))
    hq, _ = np.histogram(q_values, bins=bins, range=(lo, hi))
    p = hp / hp.sum() + smoothing
    q = hq / hq.sum() + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def kl_propagation(ckpt: Checkpoint, data: Dataset, bits_w, probe_size: int = 256,
                   fit: str = "minmax") -> list:
    """Layer-wise KL divergence between full-precision and weight-quantized
    activations on a probe batch, in depth order."""
    model = Model(ckpt.spec)
    probe = data.x_val[:probe_size]
    if probe.shape[0] == 0:
        raise ValueError("probe batch is empty")
    _, fp_res = model.logits(probe, ckpt.params, collect=True)
    eff = model.effective_weights(ckpt.params)
    override = None
    if bits_w != "FP":
        override = quantize_weights(eff, weight_quantizers(model, eff, int(bits_w), fit))
    _, q_res = model.logits(probe, ckpt.params, weight_override=override, collect=True)
    rows = []
    for depth, name in enumerate(model.layer_names()):
        kl = histogram_kl(fp_res.layer_outputs[name], q_res.layer_outputs[name])
        rows.append({"seed": ckpt.meta.get("seed", "?"), "bits_w": bits_w,
                     "depth": depth, "layer": name, "kl": kl})
    return rows


def error_curves(d_grid, bits_list) -> tuple:
    """Fig-style comparison of unbounded vs clamped total error, plus the
    dominance verdict.  Returns (rows, ok)."""
    report = error_model.verify_dominance(d_grid, bits_list)
    return report.rows, report.ok


_GRADCHECK_TOL = 1e-4


def _gradcheck_cases(rng: Rng):
    """One loss-builder per differentiable op kind, on small random shapes.
    Kink-bearing ops (relu, abs) get inputs nudged away from 0."""
    def away(x, margin=0.05):
        x = x.copy()
        x[np.abs(x) < margin] += 2 * margin
        return x

    labels = rng.integers(0, 3, 4)
    return {
        "matmul": ([rng.normal((3, 4)), rng.normal((4, 2))],
                   lambda g, ps: g.sum(g.tanh(g.matmul(ps[0], ps[1])))),
        "matmul_t": ([rng.normal((3, 4)), rng.normal((2, 4))],
                     lambda g, ps: g.sum(g.tanh(g.matmul(ps[0], ps[1], transpose_b=True)))),
        "conv2d": ([rng.normal((2, 2, 5, 5)), rng.normal((3, 2, 3, 3))],
                   lambda g, ps: g.sum(g.tanh(g.conv2d(ps[0], ps[1], stride=1, pad=1)))),
        "add_bias": ([rng.normal((3, 4)), rng.normal(4)],
                     lambda g, ps: g.sum(g.tanh(g.add_bias(ps[0], ps[1])))),
        "add_bias_nchw": ([rng.normal((2, 3, 4, 4)), rng.normal(3)],
                          lambda g, ps: g.sum(g.tanh(g.add_bias(ps[0], ps[1])))),
        "relu": ([away(rng.normal((4, 4)))],
                 lambda g, ps: g.sum(g.relu(ps[0]))),
        "tanh": ([rng.normal((4, 4))],
                 lambda g, ps: g.sum(g.tanh(ps[0]))),
        "erf": ([rng.normal((4, 4))],
                lambda g, ps: g.sum(g.erf(ps[0]))),
        "algsat": ([rng.normal((4, 4))],
                   lambda g, ps: g.sum(g.algsat(ps[0]))),
        "flatten": ([rng.normal((2, 3, 2, 2))],
                    lambda g, ps: g.sum(g.tanh(g.flatten(ps[0])))),
        "avgpool2d": ([rng.normal((2, 2, 4, 4))],
                      lambda g, ps: g.sum(g.tanh(g.avgpool2d(ps[0], 2)))),
        "softmax_cross_entropy": ([rng.normal((4, 3))],
                                  lambda g, ps: g.softmax_cross_entropy(ps[0], labels)),
        "add": ([rng.normal((3, 3)), rng.normal((3, 3))],
                lambda g, ps: g.sum(g.tanh(g.add(ps[0], ps[1])))),
        "sub": ([rng.normal((3, 3)), rng.normal((3, 3))],
                lambda g, ps: g.sum(g.tanh(g.sub(ps[0], ps[1])))),
        "mul": ([rng.normal((3, 3)), rng.normal((3, 3))],
                lambda g, ps: g.sum(g.tanh(g.mul(ps[0], ps[1])))),
        "scale": ([rng.normal((3, 3))],
                  lambda g, ps: g.sum(g.scale(ps[0], 1.7))),
        "abs": ([away(rng.normal((4, 4)))],
                lambda g, ps: g.sum(g.abs(ps[0]))),
        "mean": ([rng.normal((3, 3))],
                 lambda g, ps: g.mean(g.tanh(ps[0]))),
        "gather": ([rng.normal(8)],
                   lambda g, ps: g.sum(g.tanh(g.gather(ps[0], [0, 2, 2, 5])))),
    }


def gradcheck_report(seed: int = 0, points: int = 10) -> tuple:
    """Finite-difference check for every differentiable op kind at `points`
    random parameter draws.  Returns (rows, all_passed)."""
    rows = []
    all_ok = True
    for point in range(points):
        rng = Rng(seed).spawn(f"gradcheck-{point}")
        for op, (params, build) in _gradcheck_cases(rng).items():
            err = finite_difference_check(build, params, epsilon=1e-5)
            ok = err <= _GRADCHECK_TOL
            all_ok &= ok
            rows.append({"op": op, "point": point, "max_rel_error": err,
                         "tolerance": _GRADCHECK_TOL, "pass": ok})
    return rows, all_ok
