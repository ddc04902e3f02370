"""Backward-vs-finite-difference check on small seeded random models.

Each model is a random sequential CNN (at most 1k parameters, random
widths and 1x1/3x3 kernels) scored with the full matching loss on a random episode, so
conv, pooling, relu, masked pooling, cosine, sigmoid and BCE all sit on the
differentiated path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ConvBlock, ImageSample, LayeredModel
from .objective import FeatureBank, pair_loss
from .tensor import Tensor, backward, finite_diff_grad, no_grad

MAX_PARAMS = 1000
# entries where both gradients are below this are compared absolutely
ABS_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    seed: int
    param_count: int
    max_rel_error: float
    max_abs_error: float


def random_model(seed: int) -> LayeredModel:
    """2 stages of 1-2 conv blocks, 2-4 channels, at most ``MAX_PARAMS`` parameters."""
    rng = np.random.default_rng(seed)
    while True:
        c_in = int(rng.integers(1, 4))
        stages, c_prev = [], c_in
        for si in range(2):
            stage = []
            for bi in range(int(rng.integers(1, 3))):
                c = int(rng.integers(2, 5))
                kh = int(rng.choice([1, 3]))
                w = rng.standard_normal((c, c_prev, kh, kh)) * np.sqrt(2.0 / (c_prev * kh * kh))
                b = rng.standard_normal(c) * 0.1
                stage.append(
                    ConvBlock(
                        f"stage{si + 1}.block{bi}.conv0",
                        Tensor(w, requires_grad=True),
                        Tensor(b, requires_grad=True),
                        stride=1,
                        padding=kh // 2,
                    )
                )
                c_prev = c
            stages.append(stage)
        model = LayeredModel(stages, c_in)
        if model.num_parameters() <= MAX_PARAMS:
            return model


def _random_sample(rng, channels: int, size: int) -> ImageSample:
    mask = np.zeros((size, size))
    y, x = (int(v) for v in rng.integers(0, size // 2, 2))
    mask[y : y + size // 2, x : x + size // 2] = 1.0
    return ImageSample(rng.random((channels, size, size)), mask)


def check_model(seed: int, step: float = 1e-5) -> GradCheckResult:
    """Compare autodiff and central differences for every parameter of ``random_model(seed)``."""
    model = random_model(seed)
    rng = np.random.default_rng(10_000 + seed)
    samples = [_random_sample(rng, model.in_channels, 8) for _ in range(3)]
    params = model.parameters()

    def loss_tensor():
        return pair_loss(FeatureBank(model, samples), [0, 1], 2)

    model.zero_grad()
    backward(loss_tensor())
    analytic = {k: p.grad.copy() for k, p in params.items()}
    model.zero_grad()

    def loss_value():
        with no_grad():
            return loss_tensor().item()

    numeric = finite_diff_grad(loss_value, params, step)
    rel = ab = 0.0
    for k in params:
        diff = np.abs(analytic[k] - numeric[k])
        denom = np.maximum(np.maximum(np.abs(analytic[k]), np.abs(numeric[k])), ABS_FLOOR)
        rel = max(rel, float((diff / denom).max()))
        ab = max(ab, float(diff.max()))
    return GradCheckResult(seed, model.num_parameters(), rel, ab)


def run_gradcheck(count: int = 20, seed: int = 0) -> list[GradCheckResult]:
    return [check_model(seed + i) for i in range(count)]
