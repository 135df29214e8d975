"""Encoder-decoder segmentation networks.

Both the stage-2 MetricUNet and the stage-1 detector share one symmetric UNet
topology: ``L`` encoder blocks of two conv-bn-relu layers followed by 2x2
max pooling, a bottleneck conv pair, ``L`` decoder blocks (2x2 transposed
conv, skip concatenation, two conv-bn-relu layers) and a segmentation head
(3x3 conv-bn-relu, then a 1x1 conv to two classes). The activations of the
last decoder convolution are exposed as the voxel embedding.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor_core import (
    Parameter,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    maxpool2d,
    relu,
    softmax,
    transposed_conv2d,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
VARIANTS = ("baseline", "metric")


@dataclass
class NetworkSpec:
    in_channels: int = 3
    encoder_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    decoder_channels: list[int] = field(default_factory=lambda: [128, 64, 32])
    num_classes: int = 2
    head_channels: int = 32
    variant: str = "metric"

    def validate(self) -> None:
        if len(self.encoder_channels) != len(self.decoder_channels) + 1:
            raise ValidationError(
                f"encoder_channels needs one more entry than decoder_channels "
                f"({len(self.encoder_channels)} vs {len(self.decoder_channels)})"
            )
        if not self.decoder_channels:
            raise ValidationError("at least one pooling level is required")
        counts = [self.in_channels, self.head_channels, *self.encoder_channels, *self.decoder_channels]
        if any(int(c) <= 0 for c in counts):
            raise ValidationError(f"all channel counts must be positive: {counts}")
        if self.num_classes != 2:
            raise ValidationError(f"num_classes must be 2, got {self.num_classes}")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def levels(self) -> int:
        return len(self.decoder_channels)

    @property
    def embedding_channels(self) -> int:
        return self.decoder_channels[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        spec = cls(**d)
        spec.encoder_channels = [int(c) for c in spec.encoder_channels]
        spec.decoder_channels = [int(c) for c in spec.decoder_channels]
        return spec


@dataclass
class ModelState:
    spec: NetworkSpec
    params: dict[str, Parameter]
    mode: str = "train"

    @property
    def bn_running_stats(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items() if not p.trainable}

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.trainable())

    def train(self) -> ModelState:
        self.mode = "train"
        return self

    def eval(self) -> ModelState:
        self.mode = "eval"
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValidationError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.data.shape:
                raise DimensionError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
            p.tensor.data = np.ascontiguousarray(arrays[name], dtype=p.data.dtype)

    def clone(self) -> ModelState:
        params = {
            n: Parameter(Tensor(p.data.copy(), requires_grad=p.trainable, dtype=p.data.dtype), n, p.trainable)
            for n, p in self.params.items()
        }
        return ModelState(copy.deepcopy(self.spec), params, self.mode)

    def astype(self, dtype) -> ModelState:
        """Copy of the model with every parameter cast to ``dtype``."""
        out = self.clone()
        for p in out.params.values():
            p.tensor.data = p.data.astype(dtype)
        return out


@dataclass
class ForwardOutput:
    logits: Tensor
    embedding: Tensor
    prob: np.ndarray


def _layer_names(spec: NetworkSpec) -> Iterator[tuple[str, str, int, int]]:
    """Yield (kind, name, in_channels, out_channels) in construction order."""
    enc = spec.encoder_channels
    dec = spec.decoder_channels
    levels = spec.levels
    c_in = spec.in_channels
    for i, c in enumerate(enc, start=1):
        yield "cbr", f"conv{i}a", c_in, c
        yield "cbr", f"conv{i}b", c, c
        c_in = c
    for j, c in enumerate(dec, start=1):
        idx = levels + j
        skip = enc[levels - j]
        yield "tconv", f"upconv{idx}a", c_in, c
        yield "cbr", f"conv{idx}c", c + skip, c
        yield "cbr", f"conv{idx}d", c, c
        c_in = c
    yield "cbr", "sega", c_in, spec.head_channels
    yield "conv1x1", "segb", spec.head_channels, spec.num_classes


def _new_param(params: dict[str, Parameter], name: str, data: np.ndarray, trainable: bool = True) -> None:
    if name in params:
        raise ValidationError(f"duplicate parameter name {name!r}")
    params[name] = Parameter(Tensor(data, requires_grad=trainable), name, trainable)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_unet(spec: NetworkSpec, seed: int = 0) -> ModelState:
    spec.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    for kind, name, c_in, c_out in _layer_names(spec):
        if kind == "cbr":
            # Bias omitted: the following batch norm cancels any per-channel offset.
            _new_param(params, f"{name}.weight", _uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
            _new_param(params, f"{name}.bn.gamma", np.ones(c_out))
            _new_param(params, f"{name}.bn.beta", np.zeros(c_out))
            _new_param(params, f"{name}.bn.running_mean", np.zeros(c_out), trainable=False)
            _new_param(params, f"{name}.bn.running_var", np.ones(c_out), trainable=False)
        elif kind == "tconv":
            _new_param(params, f"{name}.weight", _uniform(rng, (c_in, c_out, 2, 2), c_in))
            _new_param(params, f"{name}.bias", np.zeros(c_out))
        else:
            _new_param(params, f"{name}.weight", _uniform(rng, (c_out, c_in, 1, 1), c_in))
            _new_param(params, f"{name}.bias", np.zeros(c_out))
    return ModelState(spec, params, "train")


def build_metric_unet(spec: NetworkSpec | None = None, seed: int = 0) -> ModelState:
    """Stage-2 network; the default spec gives encoder 32/64/128/256, decoder 128/64/32."""
    return build_unet(spec if spec is not None else NetworkSpec(), seed)


def detection_spec(spec: NetworkSpec | None = None, max_filters: int = 32) -> NetworkSpec:
    """Lightweight variant of ``spec`` for stage 1: widths capped at ``max_filters``, 5 input slices."""
    base = spec if spec is not None else NetworkSpec(in_channels=5)
    return NetworkSpec(
        in_channels=base.in_channels,
        encoder_channels=[min(c, max_filters) for c in base.encoder_channels],
        decoder_channels=[min(c, max_filters) for c in base.decoder_channels],
        num_classes=2,
        head_channels=min(base.head_channels, max_filters),
        variant="baseline",
    )


def build_detection_unet(spec: NetworkSpec | None = None, seed: int = 0) -> ModelState:
    return build_unet(detection_spec(spec), seed)


def _cbr(model: ModelState, name: str, x: Tensor) -> Tensor:
    p = model.params
    y = conv2d(x, p[f"{name}.weight"].tensor, None, stride=1, padding=1)
    y = batchnorm2d(
        y,
        p[f"{name}.bn.gamma"].tensor,
        p[f"{name}.bn.beta"].tensor,
        p[f"{name}.bn.running_mean"].data,
        p[f"{name}.bn.running_var"].data,
        training=model.mode == "train",
        momentum=BN_MOMENTUM,
        eps=BN_EPS,
    )
    return relu(y)


def forward(model: ModelState, patch, sep: bool = False) -> ForwardOutput:
    """Run the network on ``patch`` ``[N, C, H, W]``.

    With ``sep`` the segmentation head reads a detached copy of the embedding,
    so the cross-entropy gradient stops at the head.
    """
    x = patch if isinstance(patch, Tensor) else Tensor(patch, dtype=model.params["segb.weight"].data.dtype)
    spec = model.spec
    if x.ndim != 4:
        raise DimensionError(f"forward: expected [N, C, H, W], got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"forward: input has {x.shape[1]} channels (axis 1), network expects {spec.in_channels}")
    factor = 2**spec.levels
    h, w = x.shape[2:]
    if h % factor or w % factor:
        raise DimensionError(f"forward: spatial size {h}x{w} must be divisible by {factor} ({spec.levels} pooling levels)")
    p = model.params
    levels = spec.levels
    skips = []
    y = x
    for i in range(1, levels + 1):
        y = _cbr(model, f"conv{i}a", y)
        y = _cbr(model, f"conv{i}b", y)
        skips.append(y)
        y = maxpool2d(y, 2, 2)
    y = _cbr(model, f"conv{levels + 1}a", y)
    y = _cbr(model, f"conv{levels + 1}b", y)
    for j in range(1, levels + 1):
        idx = levels + j
        y = transposed_conv2d(y, p[f"upconv{idx}a.weight"].tensor, p[f"upconv{idx}a.bias"].tensor, stride=2, kernel=2)
        y = concat(y, skips[levels - j], axis=1)
        y = _cbr(model, f"conv{idx}c", y)
        y = _cbr(model, f"conv{idx}d", y)
    embedding = y
    head_in = embedding.detach() if sep else embedding
    h_out = _cbr(model, "sega", head_in)
    logits = conv2d(h_out, p["segb.weight"].tensor, p["segb.bias"].tensor, stride=1, padding=0)
    prob = softmax(logits.data, axis=1)[:, 1]
    return ForwardOutput(logits=logits, embedding=embedding, prob=prob)


def head_parameter_names(model: ModelState) -> list[str]:
    """Trainable parameters of the segmentation head (after the embedding layer)."""
    return [n for n, p in model.params.items() if p.trainable and n.split(".")[0] in ("sega", "segb")]


def trunk_parameter_names(model: ModelState) -> list[str]:
    """Trainable parameters at or before the embedding layer."""
    head = set(head_parameter_names(model))
    return [n for n, p in model.params.items() if p.trainable and n not in head]
