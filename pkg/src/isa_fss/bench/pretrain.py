"""Episodic source-domain training that produces the model to be adapted."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingFailure
from ..model import DEFAULT_TEMPERATURE, LayeredModel, normalize_layer_scales
from ..objective import FeatureBank, pair_loss
from ..tensor import backward, stack_mean
from .synth import DomainSpec, generate_episode

log = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    model: LayeredModel
    losses: list[float] = field(default_factory=list)
    steps: int = 0


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def pretrain_source(
    model: LayeredModel,
    source: DomainSpec,
    steps: int = 300,
    seed: int = 0,
    lr: float = 3e-3,
    episodes_per_step: int = 4,
    target_loss: float = 0.3,
    temperature: float = DEFAULT_TEMPERATURE,
    normalize: bool = True,
) -> PretrainResult:
    """Train all parameters on source episodes; returns a trained copy.

    Stops early once the 10-step moving-average loss drops below
    ``target_loss``. A loss above 10 raises :class:`TrainingFailure`.
    With ``normalize`` the result is rescaled to unit per-layer activation
    RMS on a seeded source batch (see :func:`normalize_layer_scales`).
    """
    model = model.copy()
    model.set_trainable(None)
    params = model.parameters()
    opt = _Adam(params, lr)
    losses: list[float] = []
    rng = np.random.Generator(np.random.PCG64(seed))
    for step in range(steps):
        model.zero_grad()
        terms = []
        for e in range(episodes_per_step):
            k = int(rng.integers(1, 4))
            ep = generate_episode(source, k, 1, seed=int(rng.integers(0, 2**31)))
            samples = ep.supports + ep.queries
            bank = FeatureBank(model, samples)
            terms.append(pair_loss(bank, list(range(k)), k, temperature))
        loss = stack_mean(terms)
        value = loss.item()
        losses.append(value)
        if not np.isfinite(value) or value > 10:
            raise TrainingFailure(f"pretraining diverged at step {step}: loss {value}", losses)
        backward(loss)
        opt.step()
        if len(losses) >= 10 and float(np.mean(losses[-10:])) < target_loss:
            log.info("pretraining reached loss %.3f at step %d", np.mean(losses[-10:]), step)
            break
    model.zero_grad()
    if normalize:
        model = normalize_layer_scales(model, source_batch(source, seed))
    return PretrainResult(model, losses, len(losses))


def source_batch(source: DomainSpec, seed: int, episodes: int = 16) -> np.ndarray:
    """Seeded stack of source images (two per episode) used to fix the layer scales."""
    images = []
    for i in range(episodes):
        ep = generate_episode(source, 2, 0, seed=1_000_000 + seed * episodes + i)
        images.extend(s.image for s in ep.supports)
    return np.stack(images)
