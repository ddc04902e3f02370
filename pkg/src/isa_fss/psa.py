"""Progressive structure adaptation and the full per-episode adaptation loop.

For each shot count ``n`` of the schedule (ascending), the selected layers
take ``iterations`` SGD steps on the mean matching loss over all n-shot
training pairs; stage ``n`` starts from the parameters stage ``n-1`` left.
Every episode adapts a private copy of the model.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .episodes import DEFAULT_COMBINATION_CAP, Episode, TrainingPair, effective_supports, hierarchical_pairs
from .errors import ConfigError, ContractError, ISAError
from .fisher import SelectionResult, isi, parse_reduction
from .model import DEFAULT_TEMPERATURE, LayeredModel, segment
from .objective import FeatureBank, pair_loss, unique_samples
from .tensor import Tensor, backward, no_grad, sgd_step, stack_mean

FAST_MID_LAYER = "stage2.block2.conv0"


@dataclass(frozen=True)
class AdaptationConfig:
    lr: float = 1e-3
    iterations: int = 1
    schedule: tuple[int, ...] | None = None  # None -> schedule_start..K-1
    schedule_start: int = 1
    k: int = 1
    reduction: str = "top1"
    combination_cap: int | None = DEFAULT_COMBINATION_CAP
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    manual_layers: tuple[str, ...] | None = None
    recompute_fisher: bool = False

    def __post_init__(self):
        if self.schedule is not None:
            object.__setattr__(self, "schedule", tuple(int(n) for n in self.schedule))
        if self.manual_layers is not None:
            object.__setattr__(self, "manual_layers", tuple(self.manual_layers))
        self.validate()

    def validate(self, k_supports: int | None = None) -> None:
        if not np.isfinite(self.lr) or self.lr < 0:
            raise ConfigError("lr", f"must be a finite number >= 0, got {self.lr}")
        if self.iterations < 1:
            raise ConfigError("iterations", f"must be >= 1, got {self.iterations}")
        if self.k < 1:
            raise ConfigError("k", f"must be >= 1, got {self.k}")
        if self.temperature <= 0:
            raise ConfigError("temperature", f"must be > 0, got {self.temperature}")
        if self.combination_cap is not None and self.combination_cap < 1:
            raise ConfigError("combination_cap", f"must be >= 1 or null, got {self.combination_cap}")
        if self.schedule_start < 1:
            raise ConfigError("schedule_start", f"must be >= 1, got {self.schedule_start}")
        try:
            parse_reduction(self.reduction)
        except ContractError as exc:
            raise ConfigError("reduction", str(exc)) from None
        if self.manual_layers is not None and not self.manual_layers:
            raise ConfigError("manual_layers", "must list at least one layer or be null")
        if self.schedule is not None:
            s = self.schedule
            if not s:
                raise ConfigError("schedule", "must not be empty")
            if s[0] < 1:
                raise ConfigError("schedule", f"shot counts must be >= 1, got {list(s)}")
            if any(b <= a for a, b in zip(s, s[1:])):
                raise ConfigError("schedule", f"must be strictly increasing, got {list(s)}")
            if k_supports is not None and s[-1] > k_supports - 1:
                raise ConfigError(
                    "schedule", f"shot count {s[-1]} exceeds K-1 = {k_supports - 1}"
                )

    def resolve_schedule(self, k_supports: int) -> list[int]:
        self.validate(k_supports)
        if self.schedule is not None:
            return list(self.schedule)
        top = k_supports - 1
        return list(range(min(self.schedule_start, top), top + 1))

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("schedule", "manual_layers"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_json(cls, d: dict) -> AdaptationConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown adaptation field")
        return cls(**d)


def last_conv_layer(model: LayeredModel) -> str:
    return model.layer_names()[-1]


def fast_profile(model: LayeredModel, base: AdaptationConfig | None = None) -> AdaptationConfig:
    """Manual [mid layer, last conv], schedule 2..K-1, one pair per pseudo-query."""
    base = base or AdaptationConfig()
    names = model.layer_names()
    mid = FAST_MID_LAYER if FAST_MID_LAYER in names else names[len(names) // 2]
    return replace(
        base,
        manual_layers=(mid, names[-1]),
        schedule=None,
        schedule_start=2,
        combination_cap=1,
    )


@dataclass
class StageRecord:
    n: int
    pair_count: int
    loss_before: float
    loss_after: float
    updated_layers: list[str]


@dataclass
class AdaptationTrace:
    episode_id: str = ""
    selection: SelectionResult | None = None
    stages: list[StageRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "selection": self.selection.to_json() if self.selection else None,
            "stages": [asdict(s) for s in self.stages],
            "wall_time": self.wall_time,
        }


def _pair_losses(bank: FeatureBank, pairs: Sequence[TrainingPair], temperature: float) -> list[Tensor]:
    return [
        pair_loss(
            bank, [bank.index_of(s) for s in p.supports], bank.index_of(p.query), temperature, pi
        )
        for pi, p in enumerate(pairs)
    ]


def stage_loss(
    model: LayeredModel, pairs: Sequence[TrainingPair], temperature: float = DEFAULT_TEMPERATURE
) -> Tensor:
    """Mean matching loss over ``pairs``; each sample is encoded once."""
    if not pairs:
        raise ContractError("stage_loss needs at least one pair")
    ns = {p.n for p in pairs}
    if len(ns) != 1:
        raise ContractError(f"all pairs in a stage must share n, got {sorted(ns)}")
    bank = FeatureBank(model, unique_samples([[p.query, *p.supports] for p in pairs]))
    return stack_mean(_pair_losses(bank, pairs, temperature))


def psa_step(
    model: LayeredModel,
    selection: SelectionResult | Sequence[str],
    pairs: Sequence[TrainingPair],
    config: AdaptationConfig,
) -> list[float]:
    """``config.iterations`` SGD steps on the selected layers (weights and biases).

    Returns the stage loss seen before each step. On any error the selected
    parameters are restored to their values at entry.
    """
    layers = list(selection.layers if isinstance(selection, SelectionResult) else selection)
    if not layers:
        raise ContractError("psa_step needs a non-empty layer selection")
    params = model.layer_parameters(layers)
    saved = {k: p.data.copy() for k, p in params.items()}
    flags = {k: p.requires_grad for k, p in model.parameters().items()}
    losses = []
    try:
        model.set_trainable(layers)
        for _ in range(config.iterations):
            model.zero_grad()
            loss = stage_loss(model, pairs, config.temperature)
            losses.append(loss.item())
            backward(loss)
            sgd_step(params, config.lr)
            model.zero_grad()
    except BaseException:
        for k, p in params.items():
            p.data[...] = saved[k]
        raise
    finally:
        for k, p in model.parameters().items():
            p.requires_grad = flags[k]
            p.grad = None
    return losses


def _select(model, supports, config) -> SelectionResult:
    if config.manual_layers is not None:
        for name in config.manual_layers:
            model.layer(name)
        return SelectionResult(list(config.manual_layers), len(config.manual_layers), [])
    return isi(model, supports, config.k, config.reduction, config.temperature, config.seed)


def _stage_seed(seed: int, n: int) -> int:
    return seed * 7919 + n


def run_isa(
    model: LayeredModel, episode: Episode, config: AdaptationConfig
) -> tuple[LayeredModel, AdaptationTrace]:
    """Adapt a copy of ``model`` to ``episode``; ``model`` itself is never modified."""
    start = time.perf_counter()
    trace = AdaptationTrace(episode_id=episode.episode_id)
    adapted = model.copy()
    try:
        supports = effective_supports(episode.supports, config.seed)
        schedule = config.resolve_schedule(len(supports))
        selection = _select(adapted, supports, config)
        trace.selection = selection
        for si, n in enumerate(schedule):
            if si and config.recompute_fisher and config.manual_layers is None:
                selection = _select(adapted, supports, config)
            pairs = hierarchical_pairs(
                supports, n, config.combination_cap, _stage_seed(config.seed, n)
            )
            before = psa_step(adapted, selection, pairs, config)
            with no_grad():
                after = stage_loss(adapted, pairs, config.temperature).item()
            trace.stages.append(StageRecord(n, len(pairs), before[0], after, list(selection.layers)))
    except ISAError as exc:
        trace.wall_time = time.perf_counter() - start
        exc.trace = trace
        raise
    trace.wall_time = time.perf_counter() - start
    return adapted, trace


def adapt_and_segment(
    model: LayeredModel, episode: Episode, config: AdaptationConfig
) -> tuple[list[np.ndarray], AdaptationTrace]:
    """Adapt on the supports, then segment every query with all K original supports."""
    if not episode.queries:
        raise ContractError("episode has no queries to segment")
    adapted, trace = run_isa(model, episode, config)
    masks = [segment(adapted, episode.supports, q, config.temperature)[1] for q in episode.queries]
    return masks, trace
