"""Support-query matching loss over a shared batch of encoded samples."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DegenerateMaskError
from .model import (
    DEFAULT_TEMPERATURE,
    ImageSample,
    LayeredModel,
    Prototype,
    extract_features,
    masked_average_pool,
    mean_prototype,
    predict,
    resize_mask_nearest,
)
from .tensor import Tensor, bce_mean, take


class FeatureBank:
    """Features for a fixed list of samples from one batched forward pass.

    Per-sample feature maps and prototypes are built lazily and cached, so
    every pair drawing on the same support shares one prototype node.
    """

    def __init__(self, model: LayeredModel, samples: Sequence[ImageSample]):
        self.samples = list(samples)
        self._index = {id(s): i for i, s in enumerate(self.samples)}
        self.features = extract_features(model, Tensor(np.stack([s.image for s in self.samples])))
        self._maps: dict[int, Tensor] = {}
        self._protos: dict[int, Prototype] = {}

    def index_of(self, sample: ImageSample) -> int:
        return self._index[id(sample)]

    def feature_map(self, i: int) -> Tensor:
        if i not in self._maps:
            self._maps[i] = take(self.features, i)
        return self._maps[i]

    def prototype(self, i: int) -> Prototype:
        if i not in self._protos:
            self._protos[i] = masked_average_pool(self.feature_map(i), self.samples[i].mask)
        return self._protos[i]


def unique_samples(groups) -> list[ImageSample]:
    seen, out = set(), []
    for group in groups:
        for s in group:
            if id(s) not in seen:
                seen.add(id(s))
                out.append(s)
    return out


def pair_loss(
    bank: FeatureBank,
    support_ids: Sequence[int],
    query_id: int,
    temperature: float = DEFAULT_TEMPERATURE,
    pair_index: int | None = None,
) -> Tensor:
    """BCE between predicted fg probability and the pseudo-query mask."""
    try:
        proto = mean_prototype([bank.prototype(i) for i in support_ids])
    except DegenerateMaskError as exc:
        raise DegenerateMaskError(str(exc), pair_index=pair_index) from None
    fq = bank.feature_map(query_id)
    prob = predict(fq, proto, temperature)
    target = resize_mask_nearest(bank.samples[query_id].mask, prob.shape)
    return bce_mean(prob, target)
