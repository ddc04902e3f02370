"""Prototype-matching few-shot segmentation model.

A plain sequential CNN encodes support and query images; masked average
pooling turns support features into foreground/background prototypes, and the
query is labelled by a temperature-scaled two-way softmax over cosine
similarities to those prototypes.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateMaskError, DimensionError, ContractError
from .tensor import (
    Tensor,
    avg_pool2d,
    conv2d,
    cosine_map,
    masked_mean,
    no_grad,
    relu,
    scale,
    sigmoid,
    stack_mean,
    sub,
)
from .tensor.serialize import load_tensor, save_tensor

DEFAULT_TEMPERATURE = 10.0
CHECKPOINT_FORMAT = "isa-fss-model"


@dataclass
class ConvBlock:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 1

    def forward(self, x: Tensor) -> Tensor:
        return relu(conv2d(x, self.weight, self.bias, self.stride, self.padding))


class LayeredModel:
    """Stages of conv blocks with ``avg_pool2d(pool_window)`` between stages.

    Parameters are addressed as ``"<layer>.weight"`` / ``"<layer>.bias"``;
    iteration order is definition order.
    """

    def __init__(self, stages: list[list[ConvBlock]], in_channels: int, pool_window: int = 2):
        self.stages = stages
        self.in_channels = in_channels
        self.pool_window = pool_window
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate layer names in {names}")
        self._by_name = {b.name: b for b in self.blocks}

    @property
    def blocks(self) -> list[ConvBlock]:
        return [b for stage in self.stages for b in stage]

    def layer_names(self) -> list[str]:
        return [b.name for b in self.blocks]

    def layer(self, name: str) -> ConvBlock:
        try:
            return self._by_name[name]
        except KeyError:
            raise ContractError(f"unknown layer {name!r}") from None

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for b in self.blocks:
            out[f"{b.name}.weight"] = b.weight
            out[f"{b.name}.bias"] = b.bias
        return out

    def layer_parameters(self, names: Sequence[str]) -> dict[str, Tensor]:
        out = {}
        for name in names:
            b = self.layer(name)
            out[f"{name}.weight"] = b.weight
            out[f"{name}.bias"] = b.bias
        return out

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].weight.shape[0]

    @property
    def downsample(self) -> int:
        return self.pool_window ** (len(self.stages) - 1)

    def set_trainable(self, names: Sequence[str] | None) -> None:
        """Flag only ``names`` as differentiable; ``None`` flags everything."""
        wanted = None if names is None else set(names)
        for b in self.blocks:
            on = wanted is None or b.name in wanted
            b.weight.requires_grad = on
            b.bias.requires_grad = on

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def copy(self) -> LayeredModel:
        return copy.deepcopy(self)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.parameters().items():
            v.data[...] = snap[k]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def __call__(self, images: Tensor) -> Tensor:
        x = images
        for si, stage in enumerate(self.stages):
            if si:
                x = avg_pool2d(x, self.pool_window)
            for block in stage:
                x = block.forward(x)
        return x


def default_backbone(
    seed: int,
    in_channels: int = 3,
    channels: Sequence[int] = (8, 16, 32),
    blocks_per_stage: int = 3,
) -> LayeredModel:
    """Three stages of three 3x3 conv+relu blocks, He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    stages = []
    c_prev = in_channels
    for si, c in enumerate(channels, start=1):
        stage = []
        for bi in range(blocks_per_stage):
            fan_in = c_prev * 9
            w = rng.standard_normal((c, c_prev, 3, 3)) * np.sqrt(2.0 / fan_in)
            stage.append(
                ConvBlock(
                    f"stage{si}.block{bi}.conv0",
                    Tensor(w, requires_grad=True),
                    Tensor(np.zeros(c), requires_grad=True),
                )
            )
            c_prev = c
        stages.append(stage)
    return LayeredModel(stages, in_channels)


def layer_output_rms(model: LayeredModel, images: np.ndarray) -> list[float]:
    """Root-mean-square activation of every block's output on ``images``."""
    out = []
    x = Tensor(np.asarray(images, dtype=np.float64))
    with no_grad():
        for si, stage in enumerate(model.stages):
            if si:
                x = avg_pool2d(x, model.pool_window)
            for block in stage:
                x = block.forward(x)
                out.append(float(np.sqrt(np.mean(x.data**2))))
    return out


def normalize_layer_scales(model: LayeredModel, images: np.ndarray) -> LayeredModel:
    """Copy of ``model`` rescaled so every block's output has unit RMS on ``images``.

    relu and average pooling are positively homogeneous, so scaling block l by
    s_l / s_{l-1} (bias by s_l) only rescales the final features, which the
    cosine head ignores. Gradient magnitudes per layer do change, which makes
    layer scores comparable across depth. Dead blocks keep their scale.
    """
    out = model.copy()
    prev = 1.0
    for block, rms in zip(out.blocks, layer_output_rms(model, images)):
        s = 1.0 / rms if rms > 0 else prev
        block.weight.data *= s / prev
        block.bias.data *= s
        prev = s
    return out


# ------------------------------------------------------------------ samples


@dataclass
class ImageSample:
    image: np.ndarray  # [C,H,W] in [0,1]
    mask: np.ndarray  # [H,W] in {0,1}

    def __post_init__(self):
        self.image = np.asarray(self.image.data if isinstance(self.image, Tensor) else self.image,
                                dtype=np.float64)
        self.mask = np.asarray(self.mask.data if isinstance(self.mask, Tensor) else self.mask,
                               dtype=np.float64)
        if self.image.ndim != 3:
            raise DimensionError(f"image must be [C,H,W], got {self.image.shape}")
        if self.image.shape[1:] != self.mask.shape:
            raise DimensionError(
                f"image spatial size {self.image.shape[1:]} != mask size {self.mask.shape}"
            )
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ContractError("mask must be strictly binary")


@dataclass
class Prototype:
    fg: Tensor
    bg: Tensor


def _nearest_index(dst: int, src: int) -> np.ndarray:
    # centre-of-cell sampling
    return np.minimum((np.arange(dst) * src + src // 2) // dst, src - 1)


def resize_mask_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = mask.shape
    rows = _nearest_index(size[0], h)
    cols = _nearest_index(size[1], w)
    return mask[np.ix_(rows, cols)]


def extract_features(model: LayeredModel, image) -> Tensor:
    """Encode ``image`` ([C,H,W] or [N,C,H,W]) into the final feature map."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    c_axis = 0 if x.data.ndim == 3 else 1
    if x.data.ndim not in (3, 4) or x.shape[c_axis] != model.in_channels:
        raise DimensionError(
            f"image {x.shape} does not match model input (C={model.in_channels}, H, W)"
        )
    h, w = x.shape[-2:]
    if h % model.downsample or w % model.downsample:
        raise DimensionError(f"image H={h}, W={w} not divisible by {model.downsample}")
    return model(x)


def masked_average_pool(features: Tensor, mask: np.ndarray) -> Prototype:
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ContractError("mask must be strictly binary")
    small = resize_mask_nearest(mask, features.shape[1:])
    n_fg = int(small.sum())
    if n_fg == 0:
        raise DegenerateMaskError("mask has no foreground at feature resolution")
    if n_fg == small.size:
        raise DegenerateMaskError("mask has no background at feature resolution")
    return Prototype(masked_mean(features, small), masked_mean(features, 1.0 - small))


def mean_prototype(protos: Sequence[Prototype]) -> Prototype:
    if len(protos) == 1:
        return protos[0]
    return Prototype(stack_mean([p.fg for p in protos]), stack_mean([p.bg for p in protos]))


def predict(features_q: Tensor, proto: Prototype, temperature: float = DEFAULT_TEMPERATURE) -> Tensor:
    """Foreground probability per pixel: softmax over (tau*cos_fg, tau*cos_bg)."""
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    diff = sub(cosine_map(features_q, proto.fg), cosine_map(features_q, proto.bg))
    return sigmoid(scale(diff, temperature))


def segment(
    model: LayeredModel,
    supports: Sequence[ImageSample],
    query: ImageSample,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[Tensor, np.ndarray]:
    """Return (feature-resolution fg probability, full-resolution binary mask)."""
    if not supports:
        raise ContractError("segment needs at least one support")
    batch = np.stack([s.image for s in supports] + [query.image])
    with no_grad():
        feats = extract_features(model, Tensor(batch))
        protos = [
            masked_average_pool(Tensor(feats.data[i]), s.mask) for i, s in enumerate(supports)
        ]
        prob = predict(Tensor(feats.data[-1]), mean_prototype(protos), temperature)
    small = (prob.data > 0.5).astype(np.float64)
    return prob, resize_mask_nearest(small, query.mask.shape)


# --------------------------------------------------------------- checkpoints


def save_model(model: LayeredModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "in_channels": model.in_channels,
        "pool_window": model.pool_window,
        "stages": [],
    }
    for stage in model.stages:
        entries = []
        for b in stage:
            save_tensor(directory / f"{b.name}.weight.isat", b.weight)
            save_tensor(directory / f"{b.name}.bias.isat", b.bias)
            entries.append(
                {
                    "name": b.name,
                    "weight_shape": list(b.weight.shape),
                    "bias_shape": list(b.bias.shape),
                    "stride": b.stride,
                    "padding": b.padding,
                }
            )
        manifest["stages"].append(entries)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_model(directory) -> LayeredModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory} is not a model checkpoint")
    stages = []
    for entries in manifest["stages"]:
        stage = []
        for e in entries:
            w = load_tensor(directory / f"{e['name']}.weight.isat")
            b = load_tensor(directory / f"{e['name']}.bias.isat")
            w.requires_grad = b.requires_grad = True
            if list(w.shape) != e["weight_shape"] or list(b.shape) != e["bias_shape"]:
                raise DimensionError(f"checkpoint tensor shapes for {e['name']} disagree with manifest")
            stage.append(ConvBlock(e["name"], w, b, e["stride"], e["padding"]))
        stages.append(stage)
    return LayeredModel(stages, manifest["in_channels"], manifest["pool_window"])
