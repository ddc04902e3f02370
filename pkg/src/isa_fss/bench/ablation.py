"""Ablation harness: adaptation methods x synthetic domains x seeded episodes.

Methods
-------
``baseline``   no adaptation
``msa``        last conv layer only, flat (K-1)-shot pairs
``isi-only``   ISI-selected layers, flat (K-1)-shot pairs
``psa-only``   last conv layer, progressive schedule
``isa``        ISI-selected layers, progressive schedule
``fast-isa``   fixed [mid, last] layers, schedule 2..K-1, one pair per query

Any method accepts overrides in brackets, e.g. ``isa[schedule=4]`` or
``isa[k=3;lr=0.01]``; the full string is the method's label in every output.
Each episode is adapted independently from the same start model and seeded
from its own id, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from ..episodes import effective_supports, write_pgm
from ..errors import ConfigError, ContractError, ISAError
from ..model import LayeredModel, default_backbone, load_model, save_model, segment
from ..psa import AdaptationConfig, adapt_and_segment, fast_profile, last_conv_layer
from .metrics import miou
from .pretrain import pretrain_source
from .synth import DEFAULT_TARGETS, SOURCE, DomainSpec, generate_episode

log = logging.getLogger(__name__)

METHODS = ("baseline", "msa", "isi-only", "psa-only", "isa", "fast-isa")
REPORT_FORMAT = "isa-fss-benchmark"
_USES_ISI = {"isi-only", "isa"}
_USES_PSA = {"psa-only", "isa", "fast-isa"}

# desk-scale step size for the benchmark; see README
BENCH_LR = 0.03


@dataclass(frozen=True)
class BenchmarkConfig:
    adaptation: AdaptationConfig = field(default_factory=lambda: AdaptationConfig(lr=BENCH_LR))
    k_shots: int = 5
    n_queries: int = 2
    seed: int = 0
    source: DomainSpec = SOURCE
    pretrain_steps: int = 300
    pretrain_lr: float = 3e-3

    def __post_init__(self):
        if self.k_shots < 1:
            raise ConfigError("k_shots", f"must be >= 1, got {self.k_shots}")
        if self.n_queries < 1:
            raise ConfigError("n_queries", f"must be >= 1, got {self.n_queries}")
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps", f"must be >= 0, got {self.pretrain_steps}")

    def pretrain_json(self) -> dict:
        return {
            "backbone_seed": self.seed,
            "source": self.source.to_json(),
            "steps": self.pretrain_steps,
            "lr": self.pretrain_lr,
            "temperature": self.adaptation.temperature,
        }

    def to_json(self) -> dict:
        return {
            "adaptation": self.adaptation.to_json(),
            "k_shots": self.k_shots,
            "n_queries": self.n_queries,
            "seed": self.seed,
            "pretrain": self.pretrain_json(),
        }


# ------------------------------------------------------------------ methods


_METHOD_RE = re.compile(r"^([a-z-]+)(?:\[(.*)\])?$")
_OVERRIDES = {
    "schedule": lambda v: tuple(int(x) for x in v.split("-")),
    "k": int,
    "lr": float,
    "iterations": int,
    "reduction": str,
    "cap": int,
    "temperature": float,
}


def parse_method(spec: str) -> tuple[str, dict]:
    """``"isa[schedule=1-2-3-4;k=2]"`` -> ``("isa", {"schedule": (1, 2, 3, 4), "k": 2})``."""
    m = _METHOD_RE.match(spec.strip())
    if not m or m.group(1) not in METHODS:
        raise ConfigError("methods", f"unknown method {spec!r}; expected one of {METHODS}")
    overrides = {}
    for item in filter(None, (m.group(2) or "").split(";")):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in _OVERRIDES:
            raise ConfigError("methods", f"bad override {item!r} in {spec!r}")
        try:
            overrides[key] = _OVERRIDES[key](value.strip())
        except ValueError:
            raise ConfigError("methods", f"bad value in {item!r} of {spec!r}") from None
    if "cap" in overrides:
        overrides["combination_cap"] = overrides.pop("cap")
    if m.group(1) == "baseline" and overrides:
        raise ConfigError("methods", "baseline takes no overrides")
    return m.group(1), overrides


def method_config(
    spec: str, base: AdaptationConfig, model: LayeredModel, k_supports: int
) -> AdaptationConfig | None:
    """Adaptation config for one method on an episode with ``k_supports`` effective supports."""
    name, overrides = parse_method(spec)
    if name == "baseline":
        return None
    last = last_conv_layer(model)
    flat = (k_supports - 1,)
    if name == "msa":
        cfg = replace(base, manual_layers=(last,), schedule=flat)
    elif name == "isi-only":
        cfg = replace(base, manual_layers=None, schedule=flat)
    elif name == "psa-only":
        cfg = replace(base, manual_layers=(last,))
    elif name == "isa":
        cfg = replace(base, manual_layers=None)
    else:
        cfg = fast_profile(model, base)
    return replace(cfg, **overrides) if overrides else cfg


def k_sweep_methods(max_k: int = 5) -> list[str]:
    return [f"isa[k={k}]" for k in range(1, max_k + 1)]


# ------------------------------------------------------------------ results


@dataclass
class EpisodeResult:
    episode_id: str
    domain: str
    method: str
    miou: float | None
    layers: list[str] | None = None
    error: str | None = None
    trace: dict | None = None
    masks: list[np.ndarray] | None = None


@dataclass
class BenchmarkReport:
    config: dict
    methods: list[str]
    domains: list[str]
    results: list[EpisodeResult]
    wall_time: float = 0.0

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)

    def _scores(self, domain: str | None, method: str) -> list[float]:
        return [
            r.miou
            for r in self.results
            if r.method == method and (domain is None or r.domain == domain) and r.miou is not None
        ]

    def failures(self, domain: str | None, method: str) -> int:
        return sum(
            1
            for r in self.results
            if r.method == method and (domain is None or r.domain == domain) and r.miou is None
        )

    def stats(self, domain: str | None, method: str) -> dict:
        """mean / population std / count of episode mIoU; ``domain=None`` pools all domains."""
        v = self._scores(domain, method)
        if not v:
            return {"mean": None, "std": None, "count": 0, "failures": self.failures(domain, method)}
        mean = math.fsum(v) / len(v)
        std = math.sqrt(math.fsum((x - mean) ** 2 for x in v) / len(v))
        return {"mean": mean, "std": std, "count": len(v), "failures": self.failures(domain, method)}

    def mean(self, method: str, domain: str | None = None) -> float | None:
        return self.stats(domain, method)["mean"]

    def histogram(self, domain: str, method: str) -> dict[str, int]:
        """Counts of the top-ranked selected layer over the domain's successful episodes."""
        counts: dict[str, int] = {}
        for r in self.results:
            if r.domain == domain and r.method == method and r.miou is not None and r.layers:
                counts[r.layers[0]] = counts.get(r.layers[0], 0) + 1
        return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))

    def modal_layer(self, domain: str, method: str = "isa") -> str | None:
        h = self.histogram(domain, method)
        return next(iter(h)) if h else None

    def total_failures(self) -> int:
        return sum(1 for r in self.results if r.miou is None)

    def to_json(self) -> dict:
        adapting = [m for m in self.methods if parse_method(m)[0] != "baseline"]
        return {
            "format": REPORT_FORMAT,
            "version": 1,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "methods": list(self.methods),
            "domains": list(self.domains),
            "results": {
                d: {m: self.stats(d, m) for m in self.methods} for d in self.domains
            },
            "overall": {m: self.stats(None, m) for m in self.methods},
            "selection_histograms": {
                d: {m: self.histogram(d, m) for m in adapting} for d in self.domains
            },
            "failures": [
                {"episode_id": r.episode_id, "domain": r.domain, "method": r.method, "error": r.error}
                for r in self.results
                if r.miou is None
            ],
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(out / "episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode_id", "domain", "method", "miou"])
            for r in self.results:
                w.writerow([r.episode_id, r.domain, r.method, "" if r.miou is None else repr(r.miou)])
        with open(out / "selections.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode_id", "domain", "method", "layer"])
            for r in self.results:
                if parse_method(r.method)[0] != "baseline":
                    w.writerow([r.episode_id, r.domain, r.method, ";".join(r.layers or [])])

    def format_table(self) -> str:
        """Plain-text table: one row per method, mIoU in points per domain and pooled."""
        head = ["method", "ISI", "PSA", *self.domains, "mean", "failed"]
        rows = []
        for m in self.methods:
            name = parse_method(m)[0]
            cells = [m, "x" if name in _USES_ISI else "-", "x" if name in _USES_PSA else "-"]
            for d in [*self.domains, None]:
                mu = self.mean(m, d)
                cells.append("n/a" if mu is None else f"{100 * mu:.2f}")
            cells.append(str(self.failures(None, m)))
            rows.append(cells)
        widths = [max(len(r[i]) for r in [head, *rows]) for i in range(len(head))]

        def fmt(cells):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

        rule = "-" * len(fmt(head))
        return "\n".join([fmt(head), rule, *map(fmt, rows)])


def config_fingerprint(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ------------------------------------------------------------------ running


def pretrained_model(config: BenchmarkConfig, cache_dir=None) -> LayeredModel:
    """Pretrain the default backbone on the source domain, reusing ``cache_dir`` when given."""
    key = config_fingerprint(config.pretrain_json())[:16]
    path = Path(cache_dir) / key if cache_dir is not None else None
    if path is not None and (path / "manifest.json").exists():
        return load_model(path)
    result = pretrain_source(
        default_backbone(config.seed),
        config.source,
        steps=config.pretrain_steps,
        seed=config.seed,
        lr=config.pretrain_lr,
        temperature=config.adaptation.temperature,
    )
    if path is not None:
        save_model(result.model, path)
    return result.model


def episode_seed(global_seed: int, index: int) -> int:
    return global_seed * 100_000 + index


def _score(masks, queries) -> float:
    return math.fsum(miou(p, q.mask) for p, q in zip(masks, queries)) / len(queries)


def run_episode(
    model: LayeredModel,
    domain: DomainSpec,
    index: int,
    methods: Sequence[str],
    config: BenchmarkConfig,
    keep_masks: bool = False,
) -> list[EpisodeResult]:
    """Every method on one seeded episode; failures are captured, not raised."""
    seed = episode_seed(config.seed, index)
    ep = generate_episode(domain, config.k_shots, config.n_queries, seed)
    k_eff = len(effective_supports(ep.supports, seed))
    base = replace(config.adaptation, seed=seed)
    out = []
    for spec in methods:
        res = EpisodeResult(ep.episode_id, domain.name, spec, None)
        try:
            cfg = method_config(spec, base, model, k_eff)
            if cfg is None:
                masks = [segment(model, ep.supports, q, base.temperature)[1] for q in ep.queries]
            else:
                masks, trace = adapt_and_segment(model, ep, cfg)
                res.trace = trace.to_json()
                res.layers = list(trace.selection.layers)
            res.miou = _score(masks, ep.queries)
            if keep_masks:
                res.masks = masks
        except (ISAError, FloatingPointError) as exc:
            res.error = f"{type(exc).__name__}: {exc}"
            trace = getattr(exc, "trace", None)
            if trace is not None and hasattr(trace, "to_json"):
                res.trace = trace.to_json()
                if trace.selection is not None:
                    res.layers = list(trace.selection.layers)
            log.warning("%s / %s failed: %s", ep.episode_id, spec, res.error)
        out.append(res)
    return out


_WORKER_STATE: dict = {}


def _worker_init(model, methods, config, keep_masks):
    _WORKER_STATE.update(model=model, methods=methods, config=config, keep_masks=keep_masks)


def _worker_run(task):
    domain, index = task
    s = _WORKER_STATE
    return run_episode(s["model"], domain, index, s["methods"], s["config"], s["keep_masks"])


def run_ablation(
    methods: Sequence[str],
    domains: Sequence[DomainSpec] = DEFAULT_TARGETS,
    episodes: int = 50,
    config: BenchmarkConfig | None = None,
    model: LayeredModel | None = None,
    workers: int = 1,
    trace_dir=None,
    dump_dir=None,
    cache_dir=None,
) -> BenchmarkReport:
    """Run ``methods`` on ``episodes`` seeded episodes per domain.

    ``model`` defaults to the pretrained backbone for ``config``. Results are
    assembled in (domain, episode, method) order whatever ``workers`` is.
    """
    config = config or BenchmarkConfig()
    methods = list(methods)
    if not methods:
        raise ContractError("run_ablation needs at least one method")
    if not domains:
        raise ContractError("run_ablation needs at least one domain")
    if episodes < 1:
        raise ContractError(f"episodes must be >= 1, got {episodes}")
    if len(set(methods)) != len(methods):
        raise ConfigError("methods", f"duplicate method in {methods}")
    if len({d.name for d in domains}) != len(domains):
        raise ConfigError("domains", "domain names must be distinct")
    for spec in methods:
        parse_method(spec)
    start = time.perf_counter()
    if model is None:
        model = pretrained_model(config, cache_dir)
    keep = dump_dir is not None
    tasks = [(d, i) for d in domains for i in range(episodes)]
    if workers <= 1:
        chunks = [run_episode(model, d, i, methods, config, keep) for d, i in tasks]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(model, methods, config, keep)
        ) as pool:
            chunks = list(pool.map(_worker_run, tasks))
    results = [r for chunk in chunks for r in chunk]
    _write_side_outputs(results, trace_dir, dump_dir)
    for r in results:
        r.masks = None
    full_config = {
        "benchmark": config.to_json(),
        "methods": methods,
        "domains": [d.to_json() for d in domains],
        "episodes": episodes,
        "model": _model_digest(model),
    }
    return BenchmarkReport(
        full_config, methods, [d.name for d in domains], results, time.perf_counter() - start
    )


def _model_digest(model: LayeredModel) -> str:
    h = hashlib.sha256()
    for name, p in model.parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _write_side_outputs(results, trace_dir, dump_dir) -> None:
    if trace_dir is not None:
        tdir = Path(trace_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.trace is not None:
                safe = r.method.replace("[", "_").replace("]", "").replace(";", "_").replace("=", "")
                (tdir / f"{r.episode_id}.{safe}.json").write_text(json.dumps(r.trace, indent=2) + "\n")
    if dump_dir is not None:
        for r in results:
            if r.masks is None:
                continue
            d = Path(dump_dir) / r.domain / r.episode_id / r.method
            d.mkdir(parents=True, exist_ok=True)
            for qi, mask in enumerate(r.masks):
                write_pgm(d / f"query{qi}.pgm", (mask * 255).astype(np.uint8))


def config_from_json(d: dict) -> BenchmarkConfig:
    known = {"adaptation", "k_shots", "n_queries", "seed", "pretrain_steps", "pretrain_lr"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown benchmark field")
    kwargs = dict(d)
    if "adaptation" in kwargs:
        adapt = {"lr": BENCH_LR, **kwargs["adaptation"]}
        kwargs["adaptation"] = AdaptationConfig.from_json(adapt)
    return BenchmarkConfig(**kwargs)


__all__ = [
    "BENCH_LR",
    "METHODS",
    "BenchmarkConfig",
    "BenchmarkReport",
    "EpisodeResult",
    "config_fingerprint",
    "config_from_json",
    "episode_seed",
    "k_sweep_methods",
    "method_config",
    "parse_method",
    "pretrained_model",
    "run_ablation",
    "run_episode",
]
