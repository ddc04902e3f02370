"""Informative structure identification.

Per-parameter importance is the diagonal empirical Fisher: the mean over
support-query pairs of the squared gradient of the pair's log-likelihood
(the BCE matching loss at the true pseudo-query mask). Each conv layer is
scored by reducing its weight importances, and the top-scoring layers become
the only trainable structures.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .episodes import cyclic_pairs, effective_supports
from .errors import ContractError
from .model import DEFAULT_TEMPERATURE, ImageSample, LayeredModel
from .objective import FeatureBank, pair_loss, unique_samples
from .tensor import Tensor, backward

REDUCTIONS = ("top1", "topk-mean(j)", "mean")


def parse_reduction(reduction: str) -> tuple[str, int]:
    """``"top1"``, ``"topJ"``/``"topk-mean(J)"`` or ``"mean"`` -> (kind, j)."""
    r = reduction.strip().lower()
    if r == "mean":
        return "mean", 0
    m = re.fullmatch(r"top(\d+)|topk-mean\((\d+)\)", r)
    if not m:
        raise ContractError(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")
    j = int(m.group(1) or m.group(2))
    if j < 1:
        raise ContractError(f"reduction size must be >= 1, got {j}")
    return "topk", j


def reduce_values(values: np.ndarray, reduction: str) -> float:
    kind, j = parse_reduction(reduction)
    flat = np.abs(np.asarray(values, dtype=np.float64).reshape(-1))
    if kind == "mean":
        return float(flat.mean())
    if j > flat.size:
        warnings.warn(f"top-{j} exceeds {flat.size} parameters; clamping", stacklevel=3)
        j = flat.size
    if j == 1:
        return float(flat.max())
    top = np.sort(flat)[::-1][:j]
    return float(top.mean())


@dataclass
class FisherReport:
    values: dict[str, np.ndarray]  # layer -> Fisher per weight entry
    sample_count: int
    reduction: str = "top1"
    scores: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, v in self.values.items():
            if np.any(v < 0):
                raise AssertionError(f"negative Fisher value in {name}")
        if not self.scores:
            self.scores = structure_scores(self, self.reduction)

    def to_json(self, top_n: int = 10) -> dict:
        out = {}
        for name, v in self.values.items():
            flat = np.sort(v.reshape(-1))[::-1]
            out[name] = {
                "score": self.scores[name],
                "reduction": self.reduction,
                "param_count": int(v.size),
                "top_values": [float(x) for x in flat[:top_n]],
            }
        return out


@dataclass
class SelectionResult:
    layers: list[str]
    k: int
    ranking: list[tuple[str, float]]
    report: FisherReport | None = None

    def to_json(self) -> dict:
        return {
            "layers": list(self.layers),
            "k": self.k,
            "ranking": [[n, float(s)] for n, s in self.ranking],
        }


def fisher_diagonal(
    losses: Iterable[Callable[[], Tensor]], params: Mapping[str, Tensor]
) -> tuple[dict[str, np.ndarray], int]:
    """Mean over ``losses`` of squared gradients w.r.t. each tensor in ``params``.

    Each callable builds one scalar loss. Squares are accumulated in call
    order, so results are reproducible bit for bit.
    """
    sums = {k: np.zeros_like(p.data) for k, p in params.items()}
    count = 0
    for build in losses:
        for p in params.values():
            p.grad = None
        backward(build())
        for k, p in params.items():
            if p.grad is not None:
                sums[k] += p.grad * p.grad
        count += 1
    for p in params.values():
        p.grad = None
    if count == 0:
        raise ContractError("empirical Fisher needs at least one pair")
    return {k: v / count for k, v in sums.items()}, count


def empirical_fisher(
    model: LayeredModel,
    pairs: Sequence[tuple[Sequence[ImageSample], ImageSample]],
    temperature: float = DEFAULT_TEMPERATURE,
    reduction: str = "top1",
    candidates: Sequence[str] | None = None,
) -> FisherReport:
    """Diagonal empirical Fisher of every conv weight over ``(supports, query)`` pairs.

    Layers whose weights are not flagged ``requires_grad`` get all-zero
    values. Parameter values are left untouched.
    """
    if not pairs:
        raise ContractError("empirical Fisher needs at least one pair")
    names = list(candidates) if candidates is not None else model.layer_names()
    params = model.parameters()
    saved = {k: p.requires_grad for k, p in params.items()}
    weights = {n: model.layer(n).weight for n in names}
    for p in params.values():
        p.requires_grad = False
    for n in names:
        weights[n].requires_grad = saved[f"{n}.weight"]
    try:
        bank = FeatureBank(model, unique_samples([[q, *s] for s, q in pairs]))
        def build(pi, sup, q):
            return lambda: pair_loss(
                bank, [bank.index_of(x) for x in sup], bank.index_of(q), temperature, pi
            )
        values, count = fisher_diagonal(
            [build(pi, sup, q) for pi, (sup, q) in enumerate(pairs)], weights
        )
    finally:
        for k, p in params.items():
            p.requires_grad = saved[k]
            p.grad = None
    return FisherReport(values, count, reduction)


def structure_scores(report: FisherReport, reduction: str = "top1") -> dict[str, float]:
    if not report.values:
        raise ContractError("empty Fisher report")
    return {name: reduce_values(v, reduction) for name, v in report.values.items()}


def select_layers(scores: Mapping[str, float], k: int) -> SelectionResult:
    """The ``k`` highest-scoring layers; ties keep the map's (registry) order."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not scores:
        raise ContractError("cannot select from an empty score map")
    ranking = sorted(scores.items(), key=lambda kv: -kv[1])  # stable
    return SelectionResult([n for n, _ in ranking[:k]], k, ranking)


def isi(
    model: LayeredModel,
    supports: Sequence[ImageSample],
    k: int = 1,
    reduction: str = "top1",
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
) -> SelectionResult:
    """Score layers on cyclic pseudo-query pairs and pick the top ``k``."""
    pool = effective_supports(supports, seed)
    report = empirical_fisher(model, cyclic_pairs(pool), temperature, reduction)
    result = select_layers(report.scores, k)
    result.report = report
    return result


__all__ = [
    "FisherReport",
    "SelectionResult",
    "empirical_fisher",
    "fisher_diagonal",
    "isi",
    "parse_reduction",
    "reduce_values",
    "select_layers",
    "structure_scores",
]
