"""Small reference networks: an MLP and a two-conv CNN.

Layers own latent weights; when SatNL is enabled for a layer the effective
weight used by the linear/conv op is f(latent), and quantization always
targets the effective weights.  A single forward builder serves training
(latent parameter nodes, optional learned-step fake quant) and evaluation
(constant weights, optional pre-quantized overrides and activation
quantizers), so both paths share the exact arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Node, Rng
from .quantizer import QuantParams, QuantScheme, quantize
from .regularizers import SatNLConfig, init_latent, satnl_apply, satnl_forward


@dataclass
class ModelSpec:
    architecture: str = "mlp"           # "mlp" | "smallcnn"
    in_dim: int = 16                    # mlp
    hidden: tuple = (32,)               # mlp
    in_shape: tuple = (1, 12, 12)       # smallcnn
    channels: tuple = (8, 16)           # smallcnn conv widths, kernel 3
    fc_width: int = 32                  # smallcnn
    classes: int = 4
    satnl: SatNLConfig | None = None

    def __post_init__(self):
        if self.architecture not in ("mlp", "smallcnn"):
            raise ValueError(f"unknown architecture {self.architecture!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.channels = tuple(int(c) for c in self.channels)
        self.in_shape = tuple(int(s) for s in self.in_shape)


@dataclass
class Layer:
    name: str
    op: str                      # "fc" | "conv"
    w_shape: tuple
    stride: int = 1
    pad: int = 0
    pre: tuple = ()              # ops applied to the input: "relu", "pool", "flatten"


@dataclass
class ForwardResult:
    logits: Node
    param_nodes: dict = field(default_factory=dict)       # latent params + biases
    eff_weights: dict = field(default_factory=dict)       # layer -> effective weight node
    layer_inputs: dict = field(default_factory=dict)      # layer -> input activation value
    layer_outputs: dict = field(default_factory=dict)     # layer -> pre-activation output value


class Model:
    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layers: list[Layer] = []
        if spec.architecture == "mlp":
            widths = (spec.in_dim,) + spec.hidden + (spec.classes,)
            for i in range(len(widths) - 1):
                pre = ("relu",) if i > 0 else ()
                self.layers.append(Layer(f"fc{i + 1}", "fc", (widths[i + 1], widths[i]), pre=pre))
        else:
            c_in, h, w = spec.in_shape
            c1, c2 = spec.channels
            if h % 2 or w % 2:
                raise ValueError("smallcnn input spatial dims must be even (2x2 pool)")
            self.layers.append(Layer("conv1", "conv", (c1, c_in, 3, 3), pad=1))
            self.layers.append(Layer("conv2", "conv", (c2, c1, 3, 3), pad=1, pre=("relu",)))
            flat = c2 * (h // 2) * (w // 2)
            self.layers.append(Layer("fc1", "fc", (spec.fc_width, flat),
                                     pre=("relu", "pool", "flatten")))
            self.layers.append(Layer("fc2", "fc", (spec.classes, spec.fc_width), pre=("relu",)))
        if self.param_count() > 10**6:
            raise ValueError(f"model too large: {self.param_count()} parameters")

    # -- parameters ----------------------------------------------------------

    def param_count(self) -> int:
        return sum(int(np.prod(l.w_shape)) + l.w_shape[0] for l in self.layers)

    def layer_names(self) -> list[str]:
        return [l.name for l in self.layers]

    def first_last(self) -> tuple[str, str]:
        return self.layers[0].name, self.layers[-1].name

    def uses_satnl(self, layer: str) -> bool:
        return self.spec.satnl is not None and self.spec.satnl.applies_to(layer)

    def init_params(self, rng: Rng) -> dict:
        """He-initialized weights; SatNL layers store the latent preimage so
        effective initial weights match the plain initializer."""
        params = {}
        for l in self.layers:
            fan_in = int(np.prod(l.w_shape[1:]))
            w = rng.normal(l.w_shape, scale=np.sqrt(2.0 / fan_in))
            if self.uses_satnl(l.name):
                w = init_latent(w, self.spec.satnl)
            params[f"{l.name}.w"] = w
            params[f"{l.name}.b"] = np.zeros(l.w_shape[0])
        return params

    def effective_weights(self, params: dict) -> dict:
        """Post-SatNL weights as plain arrays (what quantization acts on)."""
        out = {}
        for l in self.layers:
            w = params[f"{l.name}.w"]
            if self.uses_satnl(l.name):
                w = satnl_forward(self.spec.satnl.kind, w)
            out[l.name] = np.asarray(w, dtype=np.float64)
        return out

    # -- forward --------------------------------------------------------------

    def forward(self, g: Graph, x_node: Node, params: dict, *, trainable: bool = False,
                weight_override: dict | None = None, act_quant: dict | None = None,
                weight_fq: dict | None = None, act_fq: dict | None = None,
                collect: bool = False) -> ForwardResult:
        """Build the network graph.

        trainable       latent weights become parameter nodes (training mode)
        weight_override layer -> effective weight array used as a constant
                        (bypasses SatNL; used for PTQ evaluation)
        act_quant       layer -> (QuantParams, QuantScheme) applied to the
                        layer's input activation values (evaluation mode)
        weight_fq       layer -> (step Node, qn, qp, grad_scale) learned-step
                        fake quant on effective weights (QAT training)
        act_fq          layer -> (step Node, qn, qp, grad_scale) on inputs
        collect         record per-layer input/output values for analysis
        """
        res = ForwardResult(logits=x_node)
        h = x_node
        for l in self.layers:
            for op in l.pre:
                if op == "relu":
                    h = g.relu(h)
                elif op == "pool":
                    h = g.avgpool2d(h, 2)
                elif op == "flatten":
                    h = g.flatten(h)
            if act_quant is not None and l.name in act_quant:
                p, scheme = act_quant[l.name]
                h = g.constant(quantize(h.value, p, scheme))
            if act_fq is not None and l.name in act_fq:
                step, qn, qp, gs = act_fq[l.name]
                h = g.fake_quant(h, step, qn, qp, channel_axis=None, grad_scale=gs)
            if collect:
                res.layer_inputs[l.name] = h.value

            if weight_override is not None and l.name in weight_override:
                w_eff = g.constant(weight_override[l.name])
                b = g.constant(params[f"{l.name}.b"])
            else:
                if trainable:
                    w_latent = g.param(params[f"{l.name}.w"])
                    b = g.param(params[f"{l.name}.b"])
                    res.param_nodes[f"{l.name}.w"] = w_latent
                    res.param_nodes[f"{l.name}.b"] = b
                else:
                    w_latent = g.constant(params[f"{l.name}.w"])
                    b = g.constant(params[f"{l.name}.b"])
                w_eff = satnl_apply(w_latent, self.spec.satnl) if self.uses_satnl(l.name) \
                    else w_latent
            if weight_fq is not None and l.name in weight_fq:
                step, qn, qp, gs = weight_fq[l.name]
                w_eff = g.fake_quant(w_eff, step, qn, qp, channel_axis=0, grad_scale=gs)
            res.eff_weights[l.name] = w_eff

            if l.op == "fc":
                h = g.add_bias(g.matmul(h, w_eff, transpose_b=True), b)
            else:
                h = g.add_bias(g.conv2d(h, w_eff, stride=l.stride, pad=l.pad), b)
            if collect:
                res.layer_outputs[l.name] = h.value
        res.logits = h
        return res

    def logits(self, x: np.ndarray, params: dict, *, weight_override=None,
               act_quant=None, collect: bool = False):
        """Evaluation forward on plain arrays; returns (logits, ForwardResult)."""
        g = Graph()
        res = self.forward(g, g.constant(x), params, weight_override=weight_override,
                           act_quant=act_quant, collect=collect)
        return res.logits.value, res
