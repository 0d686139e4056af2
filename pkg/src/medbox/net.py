"""Configurable densenet: dense blocks with bottleneck layers, transition
layers with channel compression, stem, and a linear classifier head.

The network is a plain layer graph over a flat parameter store (name ->
array) so that freezing, serialization, and optimizer state stay trivial.
Backward passes are hand-chained in reverse layer order; there is no
autograd graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import fused, ops
from .errors import ConfigError
from .ops import BNState


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``compression`` is the fraction of channels a transition layer keeps
    (output channels = floor(compression * input channels)). It may be a
    single fraction applied at every transition, or a per-transition tuple
    of length ``len(block_layout) - 1``.

    ``stem`` selects the input stage: "full" is a 7x7/stride-2 convolution
    followed by BN, ReLU and a 3x3/stride-2 max pool (224px-class inputs);
    "reduced" is a single 3x3/stride-1 convolution with BN and ReLU for
    small desk-scale inputs (32-64px).
    """

    growth_rate: int = 32
    compression: float | tuple[float, ...] = 0.5
    block_layout: tuple[int, ...] = (6, 12, 24, 16)
    num_classes: int = 63
    stem_channels: int | None = None  # default: 2 * growth_rate
    input_size: tuple[int, int, int] = (3, 224, 224)
    bottleneck_width: int = 4
    stem: str = "full"

    def __post_init__(self):
        if self.growth_rate < 1:
            raise ConfigError(f"growth_rate must be >= 1, got {self.growth_rate}")
        for phi in self.phis():
            if not 0.0 < phi <= 1.0:
                raise ConfigError(f"compression must be in (0, 1], got {phi}")
        if isinstance(self.compression, tuple) and \
                len(self.compression) != len(self.block_layout) - 1:
            raise ConfigError(
                f"per-transition compression needs {len(self.block_layout) - 1} "
                f"entries for {len(self.block_layout)} blocks, got {len(self.compression)}"
            )
        if not self.block_layout or any(n < 1 for n in self.block_layout):
            raise ConfigError(f"every block needs >= 1 layer, got {self.block_layout}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.stem not in ("full", "reduced"):
            raise ConfigError(f"stem must be 'full' or 'reduced', got {self.stem!r}")
        if self.stem_channels is not None and self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")

    def phis(self) -> tuple[float, ...]:
        n = len(self.block_layout) - 1
        if isinstance(self.compression, tuple):
            return self.compression
        return (self.compression,) * n

    @property
    def stem_out(self) -> int:
        return self.stem_channels if self.stem_channels is not None else 2 * self.growth_rate

    def to_dict(self) -> dict:
        return {
            "growth_rate": self.growth_rate,
            "compression": list(self.compression)
            if isinstance(self.compression, tuple) else self.compression,
            "block_layout": list(self.block_layout),
            "num_classes": self.num_classes,
            "stem_channels": self.stem_channels,
            "input_size": list(self.input_size),
            "bottleneck_width": self.bottleneck_width,
            "stem": self.stem,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        comp = d["compression"]
        return cls(
            growth_rate=d["growth_rate"],
            compression=tuple(comp) if isinstance(comp, list) else comp,
            block_layout=tuple(d["block_layout"]),
            num_classes=d["num_classes"],
            stem_channels=d.get("stem_channels"),
            input_size=tuple(d["input_size"]),
            bottleneck_width=d.get("bottleneck_width", 4),
            stem=d.get("stem", "full"),
        )


@dataclass
class ParamReport:
    total_params: int
    trainable_params: int
    memory_bytes: int  # total_params * 4 (32-bit weights)


# ---------------------------------------------------------------------------
# layer graph nodes
# ---------------------------------------------------------------------------
# Activations flow in NHWC through the fused kernels (medbox.fused); weights
# stay in the canonical layouts of medbox.ops. Each node reads its parameters
# from the owning Network's store by name and returns (output, ctx). backward
# mirrors forward, returning the input gradient and writing parameter
# gradients into the shared dict.


class _Conv:
    def __init__(self, name, stride=1, padding=0, need_dx=True):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.need_dx = need_dx  # stem conv skips its (unused) input gradient

    def param_names(self):
        return [f"{self.name}.weight"]

    def forward(self, net, x, mode, want_ctx):
        return fused.conv_forward(x, net.params[f"{self.name}.weight"],
                                  self.stride, self.padding, want_ctx)

    def backward(self, net, ctx, dout, grads):
        dx, dw = ctx.backward(dout, need_dx=self.need_dx)
        grads[f"{self.name}.weight"] = dw
        return dx


class _BNRelu:
    """Batch norm with an optionally fused trailing ReLU."""

    def __init__(self, name, relu=True):
        self.name = name
        self.relu = relu

    def param_names(self):
        return [f"{self.name}.gamma", f"{self.name}.beta"]

    def forward(self, net, x, mode, want_ctx):
        # frozen BN layers always run on their running statistics
        eff_mode = mode
        if mode == "train" and not net.trainable.get(f"{self.name}.gamma", True):
            eff_mode = "eval"
        return fused.bnrelu_forward(
            x, net.params[f"{self.name}.gamma"], net.params[f"{self.name}.beta"],
            net.bn_states[self.name], mode=eff_mode, momentum=net.bn_momentum,
            epsilon=net.bn_epsilon, relu=self.relu, want_ctx=want_ctx,
        )

    def backward(self, net, ctx, dout, grads):
        dx, dgamma, dbeta = ctx.backward(dout)
        grads[f"{self.name}.gamma"] = dgamma
        grads[f"{self.name}.beta"] = dbeta
        return dx


class _MaxPool:
    def __init__(self, window, stride, padding=0):
        self.window = window
        self.stride = stride
        self.padding = padding

    def param_names(self):
        return []

    def forward(self, net, x, mode, want_ctx):
        return fused.maxpool_forward(x, self.window, self.stride, self.padding, want_ctx)

    def backward(self, net, ctx, dout, grads):
        return ctx.backward(dout)


class _AvgPool2:
    def param_names(self):
        return []

    def forward(self, net, x, mode, want_ctx):
        return fused.avgpool2_forward(x, want_ctx)

    def backward(self, net, ctx, dout, grads):
        return ctx.backward(dout)


class _Gap:
    def param_names(self):
        return []

    def forward(self, net, x, mode, want_ctx):
        return fused.gap_forward(x, want_ctx)

    def backward(self, net, ctx, dout, grads):
        return ctx.backward(dout)


class _Linear:
    def __init__(self, name):
        self.name = name

    def param_names(self):
        return [f"{self.name}.weight", f"{self.name}.bias"]

    def forward(self, net, x, mode, want_ctx):
        return ops.linear_forward(x, net.params[f"{self.name}.weight"],
                                  net.params[f"{self.name}.bias"], want_ctx)

    def backward(self, net, ctx, dout, grads):
        g = ctx.backward(dout)
        grads[f"{self.name}.weight"] = g.param_grads["weight"]
        grads[f"{self.name}.bias"] = g.param_grads["bias"]
        return g.input_grad


class _Seq:
    def __init__(self, nodes):
        self.nodes = nodes

    def param_names(self):
        return [n for node in self.nodes for n in node.param_names()]

    def forward(self, net, x, mode, want_ctx):
        ctxs = [] if want_ctx else None
        for node in self.nodes:
            x, c = node.forward(net, x, mode, want_ctx)
            if want_ctx:
                ctxs.append(c)
        return x, ctxs

    def backward(self, net, ctxs, dout, grads):
        for node, ctx in zip(reversed(self.nodes), reversed(ctxs)):
            dout = node.backward(net, ctx, dout, grads)
        return dout


class _DenseLayer:
    """One dense layer: BN-ReLU-1x1 conv (bottleneck) -> BN-ReLU-3x3 conv,
    output concatenated onto the layer input."""

    def __init__(self, name):
        self.name = name
        self.body = _Seq([
            _BNRelu(f"{name}.bn1"), _Conv(f"{name}.conv1"),
            _BNRelu(f"{name}.bn2"), _Conv(f"{name}.conv2", padding=1),
        ])

    def param_names(self):
        return self.body.param_names()

    def forward(self, net, x, mode, want_ctx):
        new, body_ctx = self.body.forward(net, x, mode, want_ctx)
        out = np.concatenate([x, new], axis=3)
        return out, ((body_ctx, x.shape[3]) if want_ctx else None)

    def backward(self, net, ctx, dout, grads):
        body_ctx, c_in = ctx
        dnew = dout[..., c_in:]
        dx_body = self.body.backward(net, body_ctx, dnew, grads)
        return dout[..., :c_in] + dx_body


def _make_stem(cfg: ModelConfig):
    if cfg.stem == "full":
        return _Seq([
            _Conv("stem.conv", stride=2, padding=3, need_dx=False),
            _BNRelu("stem.bn"),
            _MaxPool(window=3, stride=2, padding=1),
        ])
    return _Seq([_Conv("stem.conv", stride=1, padding=1, need_dx=False), _BNRelu("stem.bn")])


class Network:
    """A realized layer graph with a flat parameter store."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self.bn_states: dict[str, BNState] = {}
        self.bn_momentum = 0.1
        self.bn_epsilon = 1e-5
        self.stages: list = []  # ordered graph nodes
        self._build_graph()

    # -- structure ----------------------------------------------------------

    def _build_graph(self):
        cfg = self.config
        self.stages.append(_make_stem(cfg))
        for b, layers in enumerate(cfg.block_layout):
            self.stages.append(_Seq([_DenseLayer(f"block{b}.layer{l}") for l in range(layers)]))
            if b < len(cfg.block_layout) - 1:
                self.stages.append(_Seq([
                    _BNRelu(f"trans{b}.bn", relu=False),
                    _Conv(f"trans{b}.conv"),
                    _AvgPool2(),
                ]))
        self.head = _Seq([_BNRelu("head.bn"), _Gap()])
        self.classifier = _Linear("classifier")

    def channel_plan(self) -> list[int]:
        """Entry channel count of each dense block, in order."""
        cfg = self.config
        plan = []
        m = cfg.stem_out
        for b, layers in enumerate(cfg.block_layout):
            plan.append(m)
            m += layers * cfg.growth_rate
            if b < len(cfg.block_layout) - 1:
                m = int(cfg.phis()[b] * m)
        return plan

    def final_channels(self) -> int:
        cfg = self.config
        m = cfg.stem_out
        for b, layers in enumerate(cfg.block_layout):
            m += layers * cfg.growth_rate
            if b < len(cfg.block_layout) - 1:
                m = int(cfg.phis()[b] * m)
        return m

    # -- execution ----------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "eval", want_ctx: bool = False):
        """Run the full network on an NCHW batch; returns logits, or
        (logits, tape) when contexts are kept for backward."""
        x = self._to_nhwc(x)
        tape = [] if want_ctx else None
        for stage in self.stages:
            x, c = stage.forward(self, x, mode, want_ctx)
            if want_ctx:
                tape.append(c)
        x, c = self.head.forward(self, x, mode, want_ctx)
        if want_ctx:
            tape.append(c)
        logits, c = self.classifier.forward(self, x, mode, want_ctx)
        if want_ctx:
            tape.append(c)
            return logits, tape
        return logits

    def forward_features(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Pooled pre-classifier features (N, D); no contexts are kept."""
        x = self._to_nhwc(x)
        for stage in self.stages:
            x, _ = stage.forward(self, x, mode, False)
        x, _ = self.head.forward(self, x, mode, False)
        return x

    def _to_nhwc(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.config.input_size[0]:
            raise ConfigError(
                f"input has {x.shape[1]} channels, model expects {self.config.input_size[0]}"
            )
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))

    def classify_features(self, feats: np.ndarray, want_ctx: bool = False):
        return self.classifier.forward(self, feats, "eval", want_ctx)

    def backward(self, tape, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Chain backward through the tape; returns gradients per parameter."""
        grads: dict[str, np.ndarray] = {}
        d = self.classifier.backward(self, tape[-1], dlogits, grads)
        d = self.head.backward(self, tape[-2], d, grads)
        for stage, ctx in zip(reversed(self.stages), reversed(tape[:-2])):
            d = stage.backward(self, ctx, d, grads)
        return grads

    # -- bookkeeping --------------------------------------------------------

    def count_params(self) -> ParamReport:
        total = sum(p.size for p in self.params.values())
        trainable = sum(p.size for n, p in self.params.items() if self.trainable[n])
        return ParamReport(total, trainable, total * 4)

    def param_names(self) -> list[str]:
        names = []
        for stage in self.stages:
            names.extend(stage.param_names())
        names.extend(self.head.param_names())
        names.extend(self.classifier.param_names())
        return names

    def cast(self, dtype) -> "Network":
        """Copy of the network with params/stats in another dtype (used by
        the float64 gradient-verification mode)."""
        other = Network(self.config)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.trainable = dict(self.trainable)
        for name, st in self.bn_states.items():
            ns = BNState(st.running_mean.size, dtype)
            ns.running_mean = st.running_mean.astype(dtype)
            ns.running_var = st.running_var.astype(dtype)
            ns.initialized = st.initialized
            other.bn_states[name] = ns
        return other


def _spatial_after_stem(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    if cfg.stem == "full":
        h = (h + 2 * 3 - 7) // 2 + 1
        w = (w + 2 * 3 - 7) // 2 + 1
        h = (h + 2 * 1 - 3) // 2 + 1
        w = (w + 2 * 1 - 3) // 2 + 1
    return h, w


def build(config: ModelConfig, seed: int = 0) -> Network:
    """Instantiate a network: allocates and initializes every parameter.

    Convolutions are He-normal, BN is gamma=1/beta=0, and the classifier is
    uniform in +/- 1/sqrt(fan_in). Raises ConfigError if the spatial size
    collapses before the final block.
    """
    net = Network(config)
    rng = np.random.default_rng(seed)
    k = config.growth_rate
    bott = config.bottleneck_width * k

    def conv_init(name, f, c, kh, kw):
        std = math.sqrt(2.0 / (c * kh * kw))
        net.params[name] = (rng.standard_normal((f, c, kh, kw)) * std).astype(np.float32)
        net.trainable[name] = True

    def bn_init(name, c):
        net.params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
        net.params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)
        net.trainable[f"{name}.gamma"] = True
        net.trainable[f"{name}.beta"] = True
        net.bn_states[name] = BNState(c)

    c_in, h, w = config.input_size
    if config.stem == "full":
        conv_init("stem.conv.weight", config.stem_out, c_in, 7, 7)
    else:
        conv_init("stem.conv.weight", config.stem_out, c_in, 3, 3)
    bn_init("stem.bn", config.stem_out)
    h, w = _spatial_after_stem(config, h, w)
    if h < 1 or w < 1:
        raise ConfigError(f"spatial size exhausted at stem: {config.input_size[1:]} input")

    m = config.stem_out
    phis = config.phis()
    for b, layers in enumerate(config.block_layout):
        for l in range(layers):
            base = f"block{b}.layer{l}"
            bn_init(f"{base}.bn1", m)
            conv_init(f"{base}.conv1.weight", bott, m, 1, 1)
            bn_init(f"{base}.bn2", bott)
            conv_init(f"{base}.conv2.weight", k, bott, 3, 3)
            m += k
        if b < len(config.block_layout) - 1:
            out_c = int(phis[b] * m)
            if out_c < 1:
                raise ConfigError(f"compression at transition {b} leaves no channels ({m} -> {out_c})")
            bn_init(f"trans{b}.bn", m)
            conv_init(f"trans{b}.conv.weight", out_c, m, 1, 1)
            m = out_c
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            if h < 1 or w < 1:
                raise ConfigError(
                    f"spatial size exhausted at transition {b} "
                    f"(before block {b + 1}): input {config.input_size[1:]} is too small"
                )

    bn_init("head.bn", m)
    bound = 1.0 / math.sqrt(m)
    net.params["classifier.weight"] = rng.uniform(
        -bound, bound, (config.num_classes, m)).astype(np.float32)
    net.params["classifier.bias"] = rng.uniform(
        -bound, bound, config.num_classes).astype(np.float32)
    net.trainable["classifier.weight"] = True
    net.trainable["classifier.bias"] = True
    return net


def densenet121(growth_rate: int = 32, compression: float | tuple = 0.5,
                num_classes: int = 63, input_size=(3, 224, 224)) -> ModelConfig:
    """The reference 121-layer layout (blocks 6/12/24/16, 64-channel stem).

    The stem width stays 64 for every growth rate, matching the reference
    design this family is named after.
    """
    return ModelConfig(
        growth_rate=growth_rate,
        compression=compression,
        block_layout=(6, 12, 24, 16),
        num_classes=num_classes,
        stem_channels=64,
        input_size=input_size,
        stem="full",
    )


def desk_config(growth_rate: int = 12, block_layout=(2, 4, 4), num_classes: int = 8,
                compression: float = 0.5, input_px: int = 64) -> ModelConfig:
    """Small reduced-stem variant for desk-scale experiments."""
    return ModelConfig(
        growth_rate=growth_rate,
        compression=compression,
        block_layout=tuple(block_layout),
        num_classes=num_classes,
        input_size=(3, input_px, input_px),
        stem="reduced",
    )


def expected_params(config: ModelConfig) -> int:
    """Closed-form parameter count from the channel arithmetic alone.

    Independent of the realized graph; used to cross-check count_params.
    """
    cfg = config
    k = cfg.growth_rate
    bott = cfg.bottleneck_width * k
    kh = 7 if cfg.stem == "full" else 3
    total = cfg.input_size[0] * cfg.stem_out * kh * kh + 2 * cfg.stem_out
    m = cfg.stem_out
    for b, layers in enumerate(cfg.block_layout):
        for _ in range(layers):
            total += 2 * m + m * bott + 2 * bott + bott * k * 9
            m += k
        if b < len(cfg.block_layout) - 1:
            out_c = int(cfg.phis()[b] * m)
            total += 2 * m + m * out_c
            m = out_c
    total += 2 * m
    total += m * cfg.num_classes + cfg.num_classes
    return total
