"""Training loop for the reference networks: SGD with momentum, cosine
learning rate with linear warmup, optional SymReg/SatNL/(A)SAM, plus the
learned-step QAT fine-tuning stage.

Determinism contract: (seed, config) fixes the whole trajectory bit for
bit.  All randomness flows through named Rng streams, and the SAM second
pass rebuilds the graph on the same batch, so rho = 0 reproduces the plain
SGD trajectory exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph, NonFiniteError, Rng
from .checkpoint import Checkpoint
from .datasets import Dataset
from .models import Model, ModelSpec
from .quantizer import QuantParams, QuantScheme, fit_params
from .regularizers import SymRegConfig, total_loss


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SamConfig:
    enabled: bool = False
    adaptive: bool = False
    rho: float = 0.0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    warmup_epochs: int = 2
    lr_floor: float = 1e-3
    seed: int = 0
    sam: SamConfig = field(default_factory=SamConfig)
    symreg: SymRegConfig | None = None


def config_hash(spec: ModelSpec, cfg: TrainConfig) -> str:
    blob = repr(sorted(asdict(cfg).items())) + repr(sorted(asdict(spec).items()))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr: float,
                floor: float) -> float:
    """Linear warmup to lr, then cosine annealing down to the floor."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    t = min(1.0, (step - warmup_steps) / span)
    return floor + 0.5 * (lr - floor) * (1.0 + math.cos(math.pi * t))


def global_norm(tensors: dict) -> float:
    total = 0.0
    for v in tensors.values():
        total += float(np.sum(v * v))
    return math.sqrt(total)


def sgd_update(params: dict, grads: dict, bufs: dict, lr: float, momentum: float,
               weight_decay: float) -> None:
    """In-place SGD with momentum; weight decay acts on the (latent) params."""
    for k in params:
        g = grads[k] + weight_decay * params[k]
        bufs[k] = momentum * bufs[k] + g
        params[k] -= lr * bufs[k]


def sam_perturbation(params: dict, grads: dict, sam: SamConfig) -> dict | None:
    """Ascent direction: rho * g / ||g|| (SAM) or rho * T^2 g / ||T g|| with
    T = diag(|w|) (ASAM).  None when the relevant norm is zero."""
    if sam.adaptive:
        norm = global_norm({k: np.abs(params[k]) * grads[k] for k in grads})
        if norm == 0.0:
            return None
        return {k: sam.rho * params[k] ** 2 * grads[k] / norm for k in grads}
    norm = global_norm(grads)
    if norm == 0.0:
        return None
    return {k: sam.rho * grads[k] / norm for k in grads}


def sam_step(params: dict, grads: dict, sam: SamConfig, closure, update_fn) -> None:
    """Two-pass update: perturb, re-evaluate gradients via the closure,
    restore, then take the base step with the perturbed-point gradient.
    Zero gradient norm skips the perturbation (plain step)."""
    eps = sam_perturbation(params, grads, sam)
    if eps is None:
        update_fn(params, grads)
        return
    for k in eps:
        params[k] += eps[k]
    second = closure(params)
    for k in eps:
        params[k] -= eps[k]
    update_fn(params, second)


def _loss_and_grads(model: Model, params: dict, xb, yb, symreg: SymRegConfig | None):
    g = Graph()
    res = model.forward(g, g.constant(xb), params, trainable=True)
    loss = g.softmax_cross_entropy(res.logits, yb)
    if symreg is not None:
        named = [(name, res.eff_weights[name]) for name in model.layer_names()]
        loss = total_loss(loss, named, symreg)
    g.backward(loss)
    grads = {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
             for name, node in res.param_nodes.items()}
    return float(loss.value), grads


def evaluate(model: Model, params: dict, x, y, *, weight_override=None,
             act_quant=None, batch_size: int = 512) -> float:
    """Top-1 accuracy; optional pre-quantized effective weights and
    activation quantizers are applied in the forward pass."""
    hits = 0
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo : lo + batch_size]
        logits, _ = model.logits(xb, params, weight_override=weight_override,
                                 act_quant=act_quant)
        hits += int(np.sum(np.argmax(logits, axis=1) == y[lo : lo + batch_size]))
    return hits / x.shape[0]


def evaluate_checkpoint(ckpt: Checkpoint, x, y, **kw) -> float:
    return evaluate(Model(ckpt.spec), ckpt.params, x, y, **kw)


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig) -> Checkpoint:
    """Train to the best-validation checkpoint.  Raises TrainingDiverged
    (naming the epoch) if the loss goes non-finite."""
    if int(data.y_train.max()) >= spec.classes:
        raise ValueError("dataset labels exceed the model's class count")
    model = Model(spec)
    params = model.init_params(Rng(cfg.seed).spawn("init"))
    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    shuffle = Rng(cfg.seed).spawn("shuffle")
    n = data.n_train
    spe = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * spe
    warmup_steps = cfg.warmup_epochs * spe
    step = 0
    best_acc, best_params, best_epoch = -1.0, {k: v.copy() for k, v in params.items()}, 0
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            xb, yb = data.x_train[sel], data.y_train[sel]
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr, cfg.lr_floor)
            try:
                loss, grads = _loss_and_grads(model, params, xb, yb, cfg.symreg)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"loss diverged at epoch {epoch}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss diverged at epoch {epoch}")

            def update(p, g, _lr=lr):
                sgd_update(p, g, bufs, _lr, cfg.momentum, cfg.weight_decay)

            if cfg.sam.enabled:
                def closure(p):
                    return _loss_and_grads(model, p, xb, yb, cfg.symreg)[1]
                sam_step(params, grads, cfg.sam, closure, update)
            else:
                update(params, grads)
            step += 1
        val_acc = evaluate(model, params, data.x_val, data.y_val)
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch
    meta = {
        "seed": str(cfg.seed),
        "epoch": str(best_epoch),
        "val_accuracy": f"{best_acc:.6f}",
        "config_hash": config_hash(spec, cfg),
    }
    return Checkpoint(best_params, spec, meta)


# -- QAT fine-tuning ----------------------------------------------------------


def _weight_bits(model: Model, bits_w: int) -> dict:
    """Per-layer weight bit-widths with the first and last layers pinned to 8."""
    first, last = model.first_last()
    return {name: 8 if name in (first, last) else bits_w for name in model.layer_names()}


def qat_finetune(ckpt: Checkpoint, data: Dataset, cfg: TrainConfig, bits_w: int,
                 bits_a: int | None = None) -> Checkpoint:
    """Learned-step fake-quant fine-tuning at 1/10 the pre-training rate.

    Weight steps are per output channel (straight-through inside the clip
    range, learned-step-rule gradient scaled by 1/sqrt(levels * count));
    activation steps are per tensor on each layer input.
    """
    model = Model(ckpt.spec)
    params = {k: v.copy() for k, v in ckpt.params.items()}
    wbits = _weight_bits(model, bits_w)

    w_state = {}
    eff = model.effective_weights(params)
    for name in model.layer_names():
        b = wbits[name]
        qp = 2 ** (b - 1) - 1
        scheme = QuantScheme(bits=b, mode="symmetric", granularity="per_channel",
                             channel_axis=0, fit="minmax")
        step0 = fit_params(eff[name], scheme).step
        w_state[name] = {"bits": b, "step": np.maximum(step0, 1e-8), "qp": qp}

    a_state = {}
    if bits_a is not None:
        first, _ = model.first_last()
        calib = data.x_train[:256]
        _, res = model.logits(calib, params, collect=True)
        for name in model.layer_names():
            b = 8 if name == first else bits_a
            inp = res.layer_inputs[name]
            if name == first:
                # raw input may be signed; later layers sit behind a relu
                qp = 2 ** (b - 1) - 1
                qn = -qp
                hi = float(np.percentile(np.abs(inp), 99.9))
            else:
                qp = 2**b - 1
                qn = 0
                hi = float(np.percentile(inp, 99.9))
            per_sample = inp.size // calib.shape[0]
            a_state[name] = {"bits": b, "qn": qn, "qp": qp,
                             "step": np.array([max(hi, 1e-6) / qp]),
                             "grad_scale": 1.0 / math.sqrt(qp * per_sample * cfg.batch_size)}

    bufs = {k: np.zeros_like(v) for k, v in params.items()}
    for name in w_state:
        bufs[f"~wstep.{name}"] = np.zeros_like(w_state[name]["step"])
    for name in a_state:
        bufs[f"~astep.{name}"] = np.zeros_like(a_state[name]["step"])

    def pack():
        p = dict(params)
        for name, st in w_state.items():
            p[f"~wstep.{name}"] = st["step"]
        for name, st in a_state.items():
            p[f"~astep.{name}"] = st["step"]
        return p

    def grads_at(p: dict):
        g = Graph()
        weight_fq, act_fq = {}, {}
        pn = {}
        for name, st in w_state.items():
            node = g.param(p[f"~wstep.{name}"])
            pn[f"~wstep.{name}"] = node
            count = eff[name][0].size
            weight_fq[name] = (node, -st["qp"], st["qp"],
                               1.0 / math.sqrt(st["qp"] * count))
        for name, st in a_state.items():
            node = g.param(p[f"~astep.{name}"])
            pn[f"~astep.{name}"] = node
            act_fq[name] = (node, st["qn"], st["qp"], st["grad_scale"])
        res = model.forward(g, g.constant(xb), {k: p[k] for k in params},
                            trainable=True, weight_fq=weight_fq, act_fq=act_fq)
        loss = g.softmax_cross_entropy(res.logits, yb)
        if cfg.symreg is not None:
            named = [(n2, res.eff_weights[n2]) for n2 in model.layer_names()]
            loss = total_loss(loss, named, cfg.symreg)
        g.backward(loss)
        out = {}
        for name, node in res.param_nodes.items():
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        for name, node in pn.items():
            out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        return float(loss.value), out

    lr0 = cfg.lr / 10.0
    shuffle = Rng(cfg.seed).spawn("qat-shuffle")
    n = data.n_train
    spe = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * spe
    warmup_steps = cfg.warmup_epochs * spe
    step_i = 0
    best_acc = -1.0
    best_state = ({k: v.copy() for k, v in params.items()},
                  {n2: {"bits": s["bits"], "step": s["step"].copy()} for n2, s in w_state.items()},
                  {n2: {"bits": s["bits"], "step": s["step"].copy()} for n2, s in a_state.items()})
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            sel = perm[lo : lo + cfg.batch_size]
            xb, yb = data.x_train[sel], data.y_train[sel]
            lr = lr_schedule(step_i, total_steps, warmup_steps, lr0, cfg.lr_floor / 10.0)
            packed = pack()
            try:
                loss, grads = grads_at(packed)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"QAT loss diverged at epoch {epoch}") from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"QAT loss diverged at epoch {epoch}")

            def update(p, g, _lr=lr):
                for k in p:
                    gg = g[k] + (cfg.weight_decay * p[k] if not k.startswith("~") else 0.0)
                    bufs[k] = cfg.momentum * bufs[k] + gg
                    p[k] -= _lr * bufs[k]

            if cfg.sam.enabled:
                def closure(p):
                    return grads_at(p)[1]
                sam_step(packed, grads, cfg.sam, closure, update)
            else:
                update(packed, grads)
            for k in params:
                params[k] = packed[k]
            for name, st in w_state.items():
                st["step"] = np.maximum(packed[f"~wstep.{name}"], 1e-8)
            for name, st in a_state.items():
                st["step"] = np.maximum(packed[f"~astep.{name}"], 1e-8)
            step_i += 1
        acc = evaluate_qat_state(model, params, w_state, a_state, data.x_val, data.y_val)
        if acc > best_acc:
            best_acc = acc
            best_state = ({k: v.copy() for k, v in params.items()},
                          {n2: {"bits": s["bits"], "step": s["step"].copy()}
                           for n2, s in w_state.items()},
                          {n2: {"bits": s["bits"], "step": s["step"].copy()}
                           for n2, s in a_state.items()})
    params, wq, aq = best_state
    meta = {"seed": str(cfg.seed), "val_accuracy": f"{best_acc:.6f}",
            "config_hash": config_hash(ckpt.spec, cfg), "qat_bits_w": str(bits_w),
            "qat_bits_a": "FP" if bits_a is None else str(bits_a)}
    quant = {"weights": wq}
    if aq:
        quant["acts"] = aq
    return Checkpoint(params, ckpt.spec, meta, quant)


def quantized_weight_override(model: Model, params: dict, w_state: dict) -> dict:
    """Effective weights pushed through their per-channel quantizers."""
    from .quantizer import quantize
    eff = model.effective_weights(params)
    override = {}
    for name, st in w_state.items():
        qp = 2 ** (st["bits"] - 1) - 1
        p = QuantParams(st["step"], qp, channel_axis=0)
        scheme = QuantScheme(bits=st["bits"], mode="symmetric",
                             granularity="per_channel", channel_axis=0)
        override[name] = quantize(eff[name], p, scheme)
    return override


def evaluate_qat_state(model: Model, params: dict, w_state: dict, a_state: dict,
                       x, y) -> float:
    override = quantized_weight_override(model, params, w_state)
    act_quant = {}
    first, _ = model.first_last()
    for name, st in a_state.items():
        if name == first:
            qp = 2 ** (st["bits"] - 1) - 1
            p = QuantParams(st["step"], qp, channel_axis=None)
            scheme = QuantScheme(bits=st["bits"], mode="symmetric", granularity="per_tensor")
        else:
            qp = 2 ** st["bits"] - 1
            p = QuantParams(st["step"], qp, channel_axis=None, zero_point=0)
            scheme = QuantScheme(bits=st["bits"], mode="asymmetric", granularity="per_tensor")
        act_quant[name] = (p, scheme)
    return evaluate(model, params, x, y, weight_override=override,
                    act_quant=act_quant or None)


def evaluate_qat_checkpoint(ckpt: Checkpoint, x, y) -> float:
    if not ckpt.quant or "weights" not in ckpt.quant:
        raise ValueError("checkpoint carries no QAT quantizer state")
    model = Model(ckpt.spec)
    return evaluate_qat_state(model, ckpt.params, ckpt.quant["weights"],
                              ckpt.quant.get("acts", {}), x, y)
