"""Declarative CNN specs, vertical splitting and size/FLOP accounting."""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .tensor import Parameter, Tensor, as_tensor, conv2d, flatten, linear, maxpool2d, relu

LAYER_KINDS = ("conv", "maxpool", "fc", "relu", "flatten")
PARTS = ("encoder", "cloud", "co", "control")


class ChainError(ValueError):
    """Consecutive layers cannot be chained."""


class SplitError(ValueError):
    """A split configuration or split request is invalid."""


class ClassCountError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0  # filters for conv, features for fc
    kernel: int = 0  # conv kernel or pooling window
    stride: int = 1
    padding: int = 0
    bias: Optional[bool] = None  # default: conv without, fc with

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "fc") and self.out < 1:
            raise ValueError(f"{self.kind} layer needs a positive width")
        if self.kind in ("conv", "maxpool") and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ValueError(f"bad kernel/stride/padding on {self.kind} layer")

    @property
    def has_bias(self) -> bool:
        if self.bias is not None:
            return self.bias
        return self.kind == "fc"

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "fc")

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def conv(out, kernel=3, stride=1, padding=None, bias=None) -> LayerSpec:
    return LayerSpec("conv", out, kernel, stride, kernel // 2 if padding is None else padding, bias)


def pool(window=2, stride=None) -> LayerSpec:
    return LayerSpec("maxpool", 0, window, stride or window, 0)


def fc(out, bias=None) -> LayerSpec:
    return LayerSpec("fc", out, bias=bias)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        last = self.layers[-1] if self.layers else None
        if last is None or last.kind != "fc" or last.out != self.num_classes:
            raise ChainError("a model must end in an fc classifier with num_classes outputs")
        infer_shapes(self.layers, self.input_shape)

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers],
                "input_shape": list(self.input_shape), "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), tuple(d["input_shape"]), d["num_classes"])


def infer_shapes(layers: Sequence[LayerSpec], input_shape: tuple) -> list:
    """Per-layer output shapes (batch dimension omitted)."""
    shape = tuple(input_shape)
    shapes = []
    for i, l in enumerate(layers):
        if l.kind == "conv":
            if len(shape) != 3:
                raise ChainError(f"layer {i}: conv needs a [C,H,W] input, got {shape}")
            c, h, w = shape
            if h + 2 * l.padding < l.kernel or w + 2 * l.padding < l.kernel:
                raise ChainError(f"layer {i}: kernel {l.kernel} exceeds padded input {h}x{w}")
            shape = (l.out, (h + 2 * l.padding - l.kernel) // l.stride + 1,
                     (w + 2 * l.padding - l.kernel) // l.stride + 1)
        elif l.kind == "maxpool":
            if len(shape) != 3 or shape[1] < l.kernel or shape[2] < l.kernel:
                raise ChainError(f"layer {i}: pool window {l.kernel} does not fit input {shape}")
            c, h, w = shape
            shape = (c, (h - l.kernel) // l.stride + 1, (w - l.kernel) // l.stride + 1)
        elif l.kind == "flatten":
            shape = (math.prod(shape),)
        elif l.kind == "fc":
            if len(shape) != 1:
                raise ChainError(f"layer {i}: fc needs a flat input (insert a flatten), got {shape}")
            shape = (l.out,)
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------------
# instantiated layers


class Layer:
    def __init__(self, spec: LayerSpec, in_shape: tuple, out_shape: tuple, params=()):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.params: list[Parameter] = list(params)

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.kind == "conv":
            return conv2d(x, self.params[0], s.stride, s.padding, self.params[1] if s.has_bias else None)
        if s.kind == "fc":
            return linear(x, self.params[0], self.params[1] if s.has_bias else None)
        if s.kind == "maxpool":
            return maxpool2d(x, s.kernel, s.stride)
        if s.kind == "relu":
            return relu(x)
        return flatten(x)

    def flops(self) -> int:
        s = self.spec
        if s.kind == "conv":
            c = self.in_shape[0]
            o, ho, wo = self.out_shape
            return 2 * c * s.kernel * s.kernel * o * ho * wo
        if s.kind == "fc":
            return 2 * self.in_shape[0] * s.out
        if s.kind == "maxpool":
            return s.kernel * s.kernel * math.prod(self.out_shape)
        return 0


def _init_layer(spec: LayerSpec, in_shape: tuple, out_shape: tuple, rng: np.random.Generator, prefix: str):
    params = []
    if spec.kind == "conv":
        fan_in = in_shape[0] * spec.kernel * spec.kernel
        shape = (spec.out, in_shape[0], spec.kernel, spec.kernel)
    elif spec.kind == "fc":
        fan_in = in_shape[0]
        shape = (in_shape[0], spec.out)
    else:
        return Layer(spec, in_shape, out_shape)
    bound = math.sqrt(1.0 / fan_in)
    params.append(Parameter(rng.uniform(-bound, bound, size=shape), name=f"{prefix}.weight"))
    if spec.has_bias:
        params.append(Parameter(rng.uniform(-bound, bound, size=(spec.out,)), name=f"{prefix}.bias"))
    return Layer(spec, in_shape, out_shape, params)


class Sequential:
    """A chain of layers. An empty chain is the identity."""

    def __init__(self, layers: Sequence[LayerSpec], input_shape: tuple, seed=0, name: str = ""):
        self.name = name
        self.specs = tuple(layers)
        self.input_shape = tuple(input_shape)
        shapes = infer_shapes(self.specs, self.input_shape)
        rng = np.random.default_rng(seed)
        ins = [self.input_shape] + shapes[:-1]
        self.layers = [_init_layer(s, i, o, rng, f"{name}.{k}") for k, (s, i, o) in
                       enumerate(zip(self.specs, ins, shapes))]
        self.output_shape = shapes[-1] if shapes else self.input_shape

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Parameter]:
        return [p for l in self.layers for p in l.params]

    @property
    def classifier(self) -> Layer:
        last = self.layers[-1]
        if last.spec.kind != "fc":
            raise ChainError("this chain has no fc classifier")
        return last

    def features(self, x) -> Tensor:
        """Forward through everything except the final fc classifier."""
        x = as_tensor(x)
        for layer in self.layers[:-1]:
            x = layer(x)
        return x

    @property
    def feature_width(self) -> int:
        return self.classifier.in_shape[0]

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(arrays):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {np.shape(a)}")
            p.data[...] = a

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.specs], "input_shape": list(self.input_shape)}


def build_model(spec: ModelSpec, seed=0) -> Sequential:
    """Instantiate ``spec`` with fan-in scaled uniform weights drawn from ``seed``."""
    return Sequential(spec.layers, spec.input_shape, seed, name="base")


def count_params(model) -> int:
    if isinstance(model, DecoupledModel):
        return sum(count_params(m) for m in model.parts().values())
    return sum(p.data.size for p in model.parameters())


def count_flops(model, input_shape: Optional[tuple] = None) -> int:
    """Per-sample FLOPs: 2*MACs for conv/fc, window comparisons for max-pool."""
    if isinstance(model, DecoupledModel):
        return sum(count_flops(m) for m in model.parts().values())
    if input_shape is not None and tuple(input_shape) != model.input_shape:
        model = Sequential(model.specs, input_shape)
    return sum(l.flops() for l in model.layers)


# ---------------------------------------------------------------------------
# splitting


def as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, str):
        return Fraction(x.strip())
    return Fraction(x).limit_denominator(10_000)


@dataclass(frozen=True)
class SplitConfig:
    alpha_cl: Fraction = Fraction(7, 8)
    alpha_co: Fraction = Fraction(1, 8)
    shared_prefix_len: int = 1
    heterogeneous: bool = False

    def __post_init__(self):
        a, b = as_fraction(self.alpha_cl), as_fraction(self.alpha_co)
        object.__setattr__(self, "alpha_cl", a)
        object.__setattr__(self, "alpha_co", b)
        for name, v in (("alpha_cl", a), ("alpha_co", b)):
            if not 0 < v <= 1:
                raise SplitError(f"{name} must lie in (0, 1], got {v}")
        if a * a + b * b > 1:
            raise SplitError(f"alpha_cl^2 + alpha_co^2 <= 1 violated: {a}^2 + {b}^2 = {float(a*a + b*b):.4f}")
        if self.shared_prefix_len < 0:
            raise SplitError("shared_prefix_len must be non-negative")
        if self.heterogeneous and self.shared_prefix_len:
            raise SplitError("heterogeneous mode shares no encoder (shared_prefix_len must be 0)")


def scaled_width(n: int, alpha) -> int:
    return max(1, math.floor(as_fraction(alpha) * n))


def split_prefix(layers: Sequence[LayerSpec], k: int) -> tuple[list, list]:
    """Split after the k-th conv/fc layer; its trailing ReLUs stay with the prefix."""
    if k == 0:
        return [], list(layers)
    seen = 0
    for i, l in enumerate(layers):
        if l.parametric:
            seen += 1
            if seen == k:
                j = i + 1
                while j < len(layers) and layers[j].kind == "relu":
                    j += 1
                return list(layers[:j]), list(layers[j:])
    raise SplitError(f"cannot share {k} layers; the model has only {seen} conv/fc layers")


def scale_layers(layers: Sequence[LayerSpec], alpha, num_classes: int) -> list[LayerSpec]:
    """Scale every conv/fc width by alpha; the final classifier keeps num_classes."""
    out = []
    last_fc = max((i for i, l in enumerate(layers) if l.kind == "fc"), default=-1)
    for i, l in enumerate(layers):
        if l.kind == "conv" or (l.kind == "fc" and i != last_fc):
            l = replace(l, out=scaled_width(l.out, alpha))
        elif i == last_fc:
            l = replace(l, out=num_classes)
        out.append(l)
    return out


class DecoupledModel:
    """Shared encoder feeding three independent heads: cloud, co and control.

    ``cloud`` may be ``None`` for the device-side view, which never holds the
    cloud submodel.
    """

    def __init__(self, encoder: Sequential, cloud: Optional[Sequential], co: Sequential,
                 control: Sequential, num_classes: int, heterogeneous: bool = False):
        self.encoder = encoder
        self.cloud = cloud
        self.co = co
        self.control = control
        self.num_classes = num_classes
        self.heterogeneous = heterogeneous
        self.stage = 0  # 1 after cloud training, 2 after distillation

    def parts(self) -> dict:
        d = {"encoder": self.encoder, "cloud": self.cloud, "co": self.co, "control": self.control}
        return {k: v for k, v in d.items() if v is not None}

    def params(self, *names: str) -> list[Parameter]:
        parts = self.parts()
        return [p for n in names for p in parts[n].parameters()]

    def freeze(self, *names: str) -> None:
        for n in names:
            self.parts()[n].freeze()

    def unfreeze(self, *names: str) -> None:
        for n in names:
            self.parts()[n].unfreeze()

    @property
    def input_shape(self) -> tuple:
        return self.encoder.input_shape

    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def head(self, name: str, h) -> Tensor:
        return self.parts()[name](h)

    def logits(self, x, mode: str = "decoupled") -> np.ndarray:
        h = self.encode(x)
        if mode == "decoupled":
            return self.cloud(h).data + self.co(h).data
        if mode == "device_side":
            return self.control(h).data + self.co(h).data
        if mode == "cloud_only":
            return self.cloud(h).data
        if mode == "co_only":
            return self.co(h).data
        raise ValueError(f"unknown evaluation mode {mode!r}")

    def copy(self) -> "DecoupledModel":
        return copy.deepcopy(self)

    def device_view(self) -> "DecoupledModel":
        """Encoder, co-submodel and control model only (the cloud submodel never leaves the cloud)."""
        view = DecoupledModel(copy.deepcopy(self.encoder), None, copy.deepcopy(self.co),
                              copy.deepcopy(self.control), self.num_classes, self.heterogeneous)
        view.stage = self.stage
        return view

    def to_dict(self) -> dict:
        return {"type": "decoupled", "num_classes": self.num_classes, "heterogeneous": self.heterogeneous,
                "stage": self.stage, "parts": {k: v.to_dict() for k, v in self.parts().items()}}


def _stream(seed, tag: int):
    return np.random.default_rng([int(seed), tag])


def split_model(base: ModelSpec, cfg: SplitConfig, seed=0) -> DecoupledModel:
    """Vertically split ``base`` into shared encoder + cloud/co submodels + control model.

    Submodels are instantiated fresh with scaled widths; no filters are copied
    across the cut, so cross connections do not exist by construction.
    """
    if cfg.heterogeneous:
        raise SplitError("use build_heterogeneous for heterogeneous mode")
    prefix, high = split_prefix(base.layers, cfg.shared_prefix_len)
    if not any(l.kind == "fc" for l in high):
        raise SplitError("the shared prefix swallowed the classifier")
    for a in (cfg.alpha_cl, cfg.alpha_co):
        need = math.ceil(1 / a)
        for l in high:
            if l.kind == "conv" and l.out < need:
                raise SplitError(f"conv layer with {l.out} filters cannot give alpha={a} a filter "
                                 f"(needs >= {need})")
    encoder = Sequential(prefix, base.input_shape, _stream(seed, 0), name="encoder")
    h_shape = encoder.output_shape
    cloud = Sequential(scale_layers(high, cfg.alpha_cl, base.num_classes), h_shape, _stream(seed, 1), "cloud")
    co_layers = scale_layers(high, cfg.alpha_co, base.num_classes)
    co = Sequential(co_layers, h_shape, _stream(seed, 2), "co")
    control = Sequential(co_layers, h_shape, _stream(seed, 3), "control")
    return DecoupledModel(encoder, cloud, co, control, base.num_classes)


def build_heterogeneous(cloud_spec: ModelSpec, co_spec: ModelSpec, seed=0) -> DecoupledModel:
    """Distinct cloud and co/control backbones with no shared encoder."""
    if cloud_spec.num_classes != co_spec.num_classes:
        raise ClassCountError(f"cloud model has {cloud_spec.num_classes} classes, co model {co_spec.num_classes}")
    if cloud_spec.input_shape != co_spec.input_shape:
        raise ClassCountError(f"input shapes differ: {cloud_spec.input_shape} vs {co_spec.input_shape}")
    encoder = Sequential([], cloud_spec.input_shape, name="encoder")
    cloud = Sequential(cloud_spec.layers, cloud_spec.input_shape, _stream(seed, 1), "cloud")
    co = Sequential(co_spec.layers, co_spec.input_shape, _stream(seed, 2), "co")
    control = Sequential(co_spec.layers, co_spec.input_shape, _stream(seed, 3), "control")
    return DecoupledModel(encoder, cloud, co, control, co_spec.num_classes, heterogeneous=True)


def encoder_plus(dm_or_spec, part: str = "co", seed=0) -> Sequential:
    """A single chain made of the encoder layers followed by one head's layers."""
    parts = dm_or_spec.parts()
    enc, head = parts["encoder"], parts[part]
    return Sequential(list(enc.specs) + list(head.specs), enc.input_shape, seed, name=f"encoder+{part}")


def size_report(base: Optional[Sequential], dm: DecoupledModel) -> dict:
    """Parameter and FLOP counts in the columns used by the sizes report."""
    enc, co, ctl = dm.encoder, dm.co, dm.control
    out = {
        "decoupled_params": count_params(enc) + count_params(dm.cloud) + count_params(co),
        "decoupled_flops": count_flops(enc) + count_flops(dm.cloud) + count_flops(co),
        "cloud_side_params": count_params(enc) + count_params(dm.cloud) + count_params(co),
        "device_side_params": count_params(enc) + count_params(co) + count_params(ctl),
        "device_side_flops": count_flops(enc) + count_flops(co) + count_flops(ctl),
        "co_params": count_params(co),
        "encoder_params": count_params(enc),
    }
    if base is not None:
        out["base_params"] = count_params(base)
        out["base_flops"] = count_flops(base)
    return out


# ---------------------------------------------------------------------------
# presets


def feasibility_base_spec(num_classes: int = 10) -> ModelSpec:
    """The feasibility-study base CNN: 4 conv layers + 1 fc on 3x32x32 input."""
    return ModelSpec(
        (conv(128, 5, padding=2), RELU,
         conv(256, 3), RELU, pool(2),
         conv(256, 3), RELU,
         conv(128, 5, padding=2), RELU, pool(2),
         FLATTEN, fc(num_classes, bias=False)),
        (3, 32, 32), num_classes)


def feasibility_reference_parts(num_classes: int = 10) -> dict:
    """Per-part layer lists transcribed row by row from the reference per-layer table.

    The co-submodel rows cannot all hold at once: a 32-filter conv3 feeds a
    32x8x8 = 2048-wide classifier, not the listed 1024. The conv rows are kept
    as printed, so the co classifier is 2048 -> num_classes.
    """
    enc = [conv(128, 5, padding=2), RELU]
    cloud = [conv(224, 3, padding=1), RELU, pool(2), conv(224, 3, padding=1), RELU,
             conv(112, 5, padding=2), RELU, pool(2), FLATTEN, fc(num_classes, bias=False)]
    co = [conv(32, 3, padding=2), RELU, pool(2), conv(32, 3, padding=1), RELU,
          conv(32, 5, padding=2), RELU, pool(2), FLATTEN, fc(num_classes, bias=False)]
    return {"encoder": enc, "cloud": cloud, "co": co}


def build_from_parts(parts: dict, input_shape: tuple, num_classes: int, seed=0) -> DecoupledModel:
    encoder = Sequential(parts["encoder"], input_shape, _stream(seed, 0), "encoder")
    h = encoder.output_shape
    cloud = Sequential(parts["cloud"], h, _stream(seed, 1), "cloud")
    co = Sequential(parts["co"], h, _stream(seed, 2), "co")
    control = Sequential(parts.get("control", parts["co"]), h, _stream(seed, 3), "control")
    return DecoupledModel(encoder, cloud, co, control, num_classes, heterogeneous=not parts["encoder"])


def desk_base_spec(num_classes: int = 10, channels: int = 1, image_size: int = 12,
                   widths: tuple = (8, 48, 48, 32)) -> ModelSpec:
    """Desk-scale analog of the feasibility CNN used by the bundled experiments."""
    w0, w1, w2, w3 = widths
    return ModelSpec(
        (conv(w0, 3), RELU,
         conv(w1, 3), RELU, pool(2),
         conv(w2, 3), RELU,
         conv(w3, 3), RELU, pool(2),
         FLATTEN, fc(num_classes)),
        (channels, image_size, image_size), num_classes)


PRESETS = {"feasibility_cnn": feasibility_base_spec, "desk": desk_base_spec}
