"""Layer graphs for the generators and the PatchGAN discriminator.

A :class:`ModelGraph` is a list of nodes evaluated in order; each node names its
inputs by index, which is enough to express U-Net skip concatenations and
residual additions. Shapes are known statically from the declared input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import InvalidArgument, ShapeError
from . import functional as F
from .tensor import Tensor, ensure_tensor, parameter

# Order matters: the index is the kind tag in checkpoints.
LAYER_KINDS = (
    "input",
    "conv2d",
    "conv2d_transpose",
    "leaky_relu",
    "relu",
    "tanh",
    "sigmoid",
    "batch_norm",
    "dropout",
    "concat_skip",
    "max_pool",
    "upsample_nearest",
    "add",
    "noise_concat",
)

# Hyperparameter names per kind, in serialisation order.
HYPERPARAMS = {
    "input": ("channels", "height", "width"),
    "conv2d": ("in_channels", "filters", "kernel", "stride", "padding"),
    "conv2d_transpose": ("in_channels", "filters", "kernel", "stride", "padding"),
    "leaky_relu": ("slope",),
    "relu": (),
    "tanh": (),
    "sigmoid": (),
    "batch_norm": ("channels", "eps", "momentum"),
    "dropout": ("rate",),
    "concat_skip": (),
    "max_pool": ("kernel",),
    "upsample_nearest": ("scale",),
    "add": (),
    "noise_concat": ("std",),
}

_INT_HYPER = {"channels", "height", "width", "in_channels", "filters", "kernel", "stride", "padding", "scale"}

INIT_STD = 0.02


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in HYPERPARAMS:
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        expected = HYPERPARAMS[self.kind]
        if set(self.hyper) != set(expected):
            raise InvalidArgument(f"{self.kind} needs hyperparameters {expected}, got {tuple(self.hyper)}")
        clean = {k: (int(v) if k in _INT_HYPER else float(v)) for k, v in self.hyper.items()}
        object.__setattr__(self, "hyper", clean)
        if self.kind in ("conv2d", "conv2d_transpose"):
            if clean["kernel"] < 1 or clean["stride"] < 1 or clean["padding"] < 0:
                raise InvalidArgument(f"bad {self.kind} geometry {clean}")
        if self.kind == "dropout" and not 0.0 <= clean["rate"] < 1.0:
            raise InvalidArgument("dropout rate must lie in [0, 1)")

    def values(self) -> tuple:
        return tuple(self.hyper[k] for k in HYPERPARAMS[self.kind])

    def __getitem__(self, key):
        return self.hyper[key]


@dataclass(frozen=True)
class Node:
    name: str
    spec: LayerSpec
    inputs: tuple = ()


def layer_param_count(spec: LayerSpec) -> int:
    h = spec.hyper
    if spec.kind == "conv2d" or spec.kind == "conv2d_transpose":
        return h["in_channels"] * h["filters"] * h["kernel"] ** 2 + h["filters"]
    if spec.kind == "batch_norm":
        return 2 * h["channels"]
    return 0


class ModelGraph:
    """Trainable network with deterministic parameter enumeration."""

    def __init__(self, nodes: Sequence[Node], label: str = "", dtype=np.float32, seed: int = 0):
        self.nodes = list(nodes)
        if not self.nodes or self.nodes[0].spec.kind != "input":
            raise InvalidArgument("the first node must be an input node")
        self.label = label
        self.dtype = np.dtype(dtype)
        self.training = True
        self.rng = np.random.default_rng(seed + 1)
        self._shapes = self.static_shapes()
        self.params: dict[int, dict[str, Tensor]] = {}
        self.buffers: dict[int, dict[str, np.ndarray]] = {}
        self._init_params(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------
    def _init_params(self, rng: np.random.Generator) -> None:
        for i, node in enumerate(self.nodes):
            s, h = node.spec, node.spec.hyper
            if s.kind == "conv2d":
                w = rng.normal(0.0, INIT_STD, (h["filters"], h["in_channels"], h["kernel"], h["kernel"]))
                b = np.zeros(h["filters"])
            elif s.kind == "conv2d_transpose":
                w = rng.normal(0.0, INIT_STD, (h["in_channels"], h["filters"], h["kernel"], h["kernel"]))
                b = np.zeros(h["filters"])
            elif s.kind == "batch_norm":
                c = h["channels"]
                self.params[i] = {
                    "gamma": parameter(rng.normal(1.0, INIT_STD, c).astype(self.dtype), f"{node.name}.gamma"),
                    "beta": parameter(np.zeros(c, self.dtype), f"{node.name}.beta"),
                }
                self.buffers[i] = {"running_mean": np.zeros(c, self.dtype), "running_var": np.ones(c, self.dtype)}
                continue
            else:
                continue
            self.params[i] = {
                "weight": parameter(w.astype(self.dtype), f"{node.name}.weight"),
                "bias": parameter(b.astype(self.dtype), f"{node.name}.bias"),
            }

    # -- introspection -------------------------------------------------------
    @property
    def input_shape(self) -> tuple:
        h = self.nodes[0].spec.hyper
        return (h["channels"], h["height"], h["width"])

    @property
    def output_shape(self) -> tuple:
        return self._shapes[-1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i in sorted(self.params):
            for key in ("weight", "bias", "gamma", "beta"):
                if key in self.params[i]:
                    out.append((f"{self.nodes[i].name}.{key}", self.params[i][key]))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i in sorted(self.buffers):
            for key in ("running_mean", "running_var"):
                out.append((f"{self.nodes[i].name}.{key}", self.buffers[i][key]))
        return out

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def analytic_param_count(self) -> int:
        return sum(layer_param_count(n.spec) for n in self.nodes)

    def layers_named(self, prefix: str) -> list[Node]:
        return [n for n in self.nodes if n.name.startswith(prefix)]

    def static_shapes(self, input_shape: Optional[tuple] = None) -> list[tuple]:
        """Per-node output shape ``(C, H, W)`` for a given input shape."""
        shapes: list[tuple] = []
        for node in self.nodes:
            s, h = node.spec, node.spec.hyper
            ins = [shapes[j] for j in node.inputs]
            if s.kind == "input":
                shp = tuple(input_shape) if input_shape is not None else (h["channels"], h["height"], h["width"])
            elif s.kind == "conv2d":
                c, hh, ww = ins[0]
                self._expect_channels(node, c, h["in_channels"])
                ho = F.conv_output_size(hh, h["kernel"], h["stride"], h["padding"])
                wo = F.conv_output_size(ww, h["kernel"], h["stride"], h["padding"])
                if ho < 1 or wo < 1:
                    raise ShapeError(f"layer {node.name}: input {hh}x{ww} too small for kernel {h['kernel']}")
                shp = (h["filters"], ho, wo)
            elif s.kind == "conv2d_transpose":
                c, hh, ww = ins[0]
                self._expect_channels(node, c, h["in_channels"])
                shp = (
                    h["filters"],
                    F.conv_transpose_output_size(hh, h["kernel"], h["stride"], h["padding"]),
                    F.conv_transpose_output_size(ww, h["kernel"], h["stride"], h["padding"]),
                )
            elif s.kind == "batch_norm":
                self._expect_channels(node, ins[0][0], h["channels"])
                shp = ins[0]
            elif s.kind == "concat_skip":
                if len({x[1:] for x in ins}) != 1:
                    raise ShapeError(f"layer {node.name}: cannot concatenate spatial shapes {ins}")
                shp = (sum(x[0] for x in ins),) + ins[0][1:]
            elif s.kind == "add":
                if len(set(ins)) != 1:
                    raise ShapeError(f"layer {node.name}: cannot add shapes {ins}")
                shp = ins[0]
            elif s.kind == "max_pool":
                c, hh, ww = ins[0]
                k = h["kernel"]
                if hh % k or ww % k:
                    raise ShapeError(f"layer {node.name}: pool kernel {k} does not divide {hh}x{ww}")
                shp = (c, hh // k, ww // k)
            elif s.kind == "upsample_nearest":
                c, hh, ww = ins[0]
                shp = (c, hh * h["scale"], ww * h["scale"])
            elif s.kind == "noise_concat":
                shp = (ins[0][0] + 1,) + ins[0][1:]
            else:
                shp = ins[0]
            shapes.append(shp)
        return shapes

    @staticmethod
    def _expect_channels(node: Node, got: int, want: int) -> None:
        if got != want:
            raise ShapeError(f"layer {node.name}: expects {want} channels, receives {got}")

    def receptive_field(self) -> int:
        """Receptive field of one output unit, for a plain chain of layers."""
        r = 1
        for node in reversed(self.nodes):
            if node.spec.kind in ("conv2d", "max_pool"):
                k = node.spec.hyper["kernel"]
                s = node.spec.hyper.get("stride", k)
                r = (r - 1) * s + k
            elif node.spec.kind not in ("input", "leaky_relu", "relu", "tanh", "sigmoid", "batch_norm", "dropout"):
                raise InvalidArgument("receptive_field only handles sequential conv stacks")
        return r

    # -- modes ---------------------------------------------------------------
    def train(self) -> "ModelGraph":
        self.training = True
        return self

    def eval(self) -> "ModelGraph":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- evaluation ----------------------------------------------------------
    def forward(self, x) -> Tensor:
        x = ensure_tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"layer {self.nodes[0].name}: expected input (N, {self.input_shape}), got {x.shape}")
        values: list[Tensor] = []
        for i, node in enumerate(self.nodes):
            s, h = node.spec, node.spec.hyper
            ins = [values[j] for j in node.inputs]
            if s.kind == "input":
                out = x
            elif s.kind == "conv2d":
                p = self.params[i]
                out = F.conv2d(ins[0], p["weight"], p["bias"], h["stride"], h["padding"])
            elif s.kind == "conv2d_transpose":
                p = self.params[i]
                out = F.conv_transpose2d(ins[0], p["weight"], p["bias"], h["stride"], h["padding"])
            elif s.kind == "leaky_relu":
                out = F.leaky_relu(ins[0], h["slope"])
            elif s.kind == "relu":
                out = F.relu(ins[0])
            elif s.kind == "tanh":
                out = F.tanh(ins[0])
            elif s.kind == "sigmoid":
                out = F.sigmoid(ins[0])
            elif s.kind == "batch_norm":
                p, b = self.params[i], self.buffers[i]
                out = F.batch_norm(
                    ins[0], p["gamma"], p["beta"], b["running_mean"], b["running_var"],
                    self.training, h["momentum"], h["eps"],
                )
            elif s.kind == "dropout":
                out = F.dropout(ins[0], h["rate"], self.rng, self.training)
            elif s.kind == "concat_skip":
                out = F.concat(ins, axis=1)
            elif s.kind == "max_pool":
                out = F.max_pool2d(ins[0], h["kernel"])
            elif s.kind == "upsample_nearest":
                out = F.upsample_nearest2d(ins[0], h["scale"])
            elif s.kind == "add":
                out = ins[0] + ins[1]
            elif s.kind == "noise_concat":
                out = F.noise_concat(ins[0], self.rng, self.training, h["std"])
            else:  # pragma: no cover - LayerSpec validates kinds
                raise InvalidArgument(s.kind)
            if tuple(out.shape[1:]) != self._shapes[i]:
                raise ShapeError(f"layer {node.name} ({s.kind}): produced {out.shape[1:]}, expected {self._shapes[i]}")
            values.append(out)
        return values[-1]

    __call__ = forward

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Inference on a numpy batch without building a graph."""
        from .tensor import no_grad

        with no_grad():
            return self.forward(Tensor(np.asarray(x, dtype=self.dtype))).data

    def copy_state_from(self, other: "ModelGraph") -> None:
        for (_, a), (_, b) in zip(self.named_parameters(), other.named_parameters()):
            a.data = b.data.copy()
        for (_, a), (_, b) in zip(self.named_buffers(), other.named_buffers()):
            a[...] = b


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, name: str, kind: str, inputs=None, **hyper) -> int:
        if inputs is None:
            inputs = (len(self.nodes) - 1,) if self.nodes else ()
        elif isinstance(inputs, int):
            inputs = (inputs,)
        self.nodes.append(Node(name, LayerSpec(kind, hyper), tuple(inputs)))
        return len(self.nodes) - 1


def unet_filters(base_filters: int, depth: int) -> list[int]:
    """Encoder widths: doubling per level, capped at 8x the base."""
    return [base_filters * 2 ** min(level, 3) for level in range(depth)]


def build_unet_generator(
    base_filters: int = 16,
    depth: int = 4,
    side: int = 128,
    in_channels: int = 1,
    dropout: float = 0.5,
    noise_channel: bool = False,
    dtype=np.float32,
    seed: int = 0,
) -> ModelGraph:
    """Pix2Pix-style U-Net: strided 4x4 convs down, transposed convs up, tanh out."""
    if depth < 1 or base_filters < 1:
        raise InvalidArgument("depth and base_filters must be >= 1")
    if side % (2**depth):
        raise ShapeError(f"input side {side} is not divisible by 2**depth = {2 ** depth}")
    b = _Builder()
    b.add("input", "input", (), channels=in_channels, height=side, width=side)
    ch = in_channels
    if noise_channel:
        b.add("noise", "noise_concat", std=1.0)
        ch += 1
    widths = unet_filters(base_filters, depth)
    skips = []
    for level, f in enumerate(widths):
        b.add(f"enc{level}.conv", "conv2d", in_channels=ch, filters=f, kernel=4, stride=2, padding=1)
        if level > 0:
            b.add(f"enc{level}.bn", "batch_norm", channels=f, eps=1e-5, momentum=0.1)
        skips.append(b.add(f"enc{level}.act", "leaky_relu", slope=0.2))
        ch = f
    n_dropout = min(3, depth - 1)
    for k, level in enumerate(range(depth - 2, -1, -1)):
        f = widths[level]
        b.add(f"dec{level}.up", "conv2d_transpose", in_channels=ch, filters=f, kernel=4, stride=2, padding=1)
        b.add(f"dec{level}.bn", "batch_norm", channels=f, eps=1e-5, momentum=0.1)
        if k < n_dropout and dropout > 0:
            b.add(f"dec{level}.dropout", "dropout", rate=dropout)
        act = b.add(f"dec{level}.act", "relu")
        b.add(f"dec{level}.skip", "concat_skip", (act, skips[level]))
        ch = 2 * f
    b.add("out.up", "conv2d_transpose", in_channels=ch, filters=1, kernel=4, stride=2, padding=1)
    b.add("out.tanh", "tanh")
    return ModelGraph(b.nodes, label="unet", dtype=dtype, seed=seed)


def _residual_block(b: _Builder, name: str, x: int, channels: int) -> int:
    """``x + BN(conv(leaky(BN(conv(x)))))``; no activation after the sum."""
    b.add(f"{name}.conv1", "conv2d", x, in_channels=channels, filters=channels, kernel=3, stride=1, padding=1)
    b.add(f"{name}.bn1", "batch_norm", channels=channels, eps=1e-5, momentum=0.1)
    b.add(f"{name}.act1", "leaky_relu", slope=0.2)
    b.add(f"{name}.conv2", "conv2d", in_channels=channels, filters=channels, kernel=3, stride=1, padding=1)
    h = b.add(f"{name}.bn2", "batch_norm", channels=channels, eps=1e-5, momentum=0.1)
    return b.add(f"{name}.sum", "add", (x, h))


def residual_filters(base_filters: int, depth: int) -> list[int]:
    return [base_filters * 2**level for level in range(depth)]


def build_residual_unet_generator(
    base_filters: int = 8,
    depth: int = 4,
    side: int = 128,
    in_channels: int = 1,
    noise_channel: bool = False,
    dtype=np.float32,
    seed: int = 0,
) -> ModelGraph:
    """U-Net with a residual block at every scale, max-pool down and nearest up."""
    if depth < 1 or base_filters < 1:
        raise InvalidArgument("depth and base_filters must be >= 1")
    if side % (2**depth):
        raise ShapeError(f"input side {side} is not divisible by 2**depth = {2 ** depth}")
    b = _Builder()
    b.add("input", "input", (), channels=in_channels, height=side, width=side)
    ch = in_channels
    if noise_channel:
        b.add("noise", "noise_concat", std=1.0)
        ch += 1
    widths = residual_filters(base_filters, depth)
    skips = []
    for level, f in enumerate(widths):
        if level > 0:
            b.add(f"enc{level}.pool", "max_pool", kernel=2)
        b.add(f"enc{level}.proj", "conv2d", in_channels=ch, filters=f, kernel=3, stride=1, padding=1)
        x = b.add(f"enc{level}.proj_act", "leaky_relu", slope=0.2)
        skips.append(_residual_block(b, f"enc{level}.res", x, f))
        ch = f
    b.add("mid.pool", "max_pool", kernel=2)
    b.add("mid.proj", "conv2d", in_channels=ch, filters=2 * ch, kernel=3, stride=1, padding=1)
    x = b.add("mid.proj_act", "leaky_relu", slope=0.2)
    ch *= 2
    x = _residual_block(b, "mid.res", x, ch)
    for level in range(depth - 1, -1, -1):
        f = widths[level]
        b.add(f"dec{level}.up", "upsample_nearest", x, scale=2)
        b.add(f"dec{level}.conv", "conv2d", in_channels=ch, filters=f, kernel=3, stride=1, padding=1)
        up = b.add(f"dec{level}.act", "relu")
        b.add(f"dec{level}.skip", "concat_skip", (up, skips[level]))
        b.add(f"dec{level}.fuse", "conv2d", in_channels=2 * f, filters=f, kernel=1, stride=1, padding=0)
        x = b.add(f"dec{level}.fuse_act", "relu")
        x = _residual_block(b, f"dec{level}.res", x, f)
        ch = f
    b.add("out.conv", "conv2d", x, in_channels=ch, filters=1, kernel=1, stride=1, padding=0)
    b.add("out.tanh", "tanh")
    return ModelGraph(b.nodes, label="residual_unet", dtype=dtype, seed=seed)


def build_patchgan_discriminator(
    base_filters: int = 64,
    side: int = 128,
    in_channels: int = 2,
    dtype=np.float32,
    seed: int = 0,
) -> ModelGraph:
    """Five hidden conv layers (stride 2 on the first three) and a logit map."""
    if side % 8:
        raise ShapeError(f"discriminator input side {side} must be divisible by 8")
    f = base_filters
    b = _Builder()
    b.add("input", "input", (), channels=in_channels, height=side, width=side)
    plan = [(in_channels, f, 4, 2, 1), (f, 2 * f, 4, 2, 1), (2 * f, 4 * f, 4, 2, 1), (4 * f, 8 * f, 3, 1, 1), (8 * f, 8 * f, 3, 1, 1)]
    for i, (cin, cout, k, s, p) in enumerate(plan, 1):
        b.add(f"hidden{i}.conv", "conv2d", in_channels=cin, filters=cout, kernel=k, stride=s, padding=p)
        if i > 1:
            b.add(f"hidden{i}.bn", "batch_norm", channels=cout, eps=1e-5, momentum=0.1)
        b.add(f"hidden{i}.act", "leaky_relu", slope=0.2)
    b.add("logits.conv", "conv2d", in_channels=8 * f, filters=1, kernel=3, stride=1, padding=1)
    return ModelGraph(b.nodes, label="patchgan", dtype=dtype, seed=seed)


def hidden_conv_layers(model: ModelGraph) -> list[Node]:
    return [n for n in model.nodes if n.name.startswith("hidden") and n.spec.kind == "conv2d"]
