"""``isa-fss`` command line: generate | pretrain | adapt | ablate | fisher-report | gradcheck.

Settings come from an optional JSON file (``--config``), then the ``ISA_SEED``
environment variable, then command-line flags. Everything is validated before
any work starts.

Exit codes: 0 success, 1 configuration error, 2 I/O error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bench.ablation import (
    METHODS,
    BenchmarkConfig,
    episode_seed,
    k_sweep_methods,
    parse_method,
    pretrained_model,
    run_ablation,
)
from .bench.metrics import miou
from .bench.synth import SHAPE, SOURCE, TEXTURE, DomainSpec, generate_episode
from .episodes import effective_supports, load_episode, save_episode, write_pgm
from .errors import ConfigError, ISAError
from .fisher import isi
from .gradcheck import run_gradcheck
from .kernels import BACKEND
from .model import LayeredModel, load_model, save_model
from .psa import AdaptationConfig, adapt_and_segment, fast_profile

log = logging.getLogger("isa_fss")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_RUNTIME = 0, 1, 2, 3
PRESETS = {d.name: d for d in (SOURCE, TEXTURE, SHAPE)}
DEFAULT_METHODS = ["baseline", "msa", "isi-only", "psa-only", "isa"]


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    bench: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    domains: list[DomainSpec] = field(default_factory=lambda: [TEXTURE, SHAPE])
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    episodes: int = 50
    workers: int = 1
    model: str | None = None
    cache_dir: str | None = None
    out_dir: str | None = None
    trace_dir: str | None = None
    dump_masks: str | None = None

    def to_json(self) -> dict:
        return {
            "seed": self.bench.seed,
            "adaptation": self.bench.adaptation.to_json(),
            "k_shots": self.bench.k_shots,
            "n_queries": self.bench.n_queries,
            "pretrain_steps": self.bench.pretrain_steps,
            "pretrain_lr": self.bench.pretrain_lr,
            "domains": [d.to_json() for d in self.domains],
            "methods": list(self.methods),
            "episodes": self.episodes,
            "workers": self.workers,
            "model": self.model,
            "output": {
                "out_dir": self.out_dir,
                "trace_dir": self.trace_dir,
                "dump_masks": self.dump_masks,
                "cache_dir": self.cache_dir,
            },
        }


_TOP_KEYS = {
    "seed", "adaptation", "k_shots", "n_queries", "pretrain_steps", "pretrain_lr",
    "domains", "methods", "episodes", "workers", "model", "output",
}
_OUTPUT_KEYS = {"out_dir", "trace_dir", "dump_masks", "cache_dir"}


def _expect(value, types, path):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(path, f"expected {types}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(path, f"expected {getattr(types, '__name__', types)}, got {type(value).__name__}")
    return value


def parse_domain(value, path) -> DomainSpec:
    if isinstance(value, str):
        if value not in PRESETS:
            raise ConfigError(path, f"unknown domain {value!r}; presets are {sorted(PRESETS)}")
        return PRESETS[value]
    _expect(value, dict, path)
    try:
        d = dict(value)
        if "object_count" in d:
            d["object_count"] = tuple(d["object_count"])
        return DomainSpec(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def config_from_dict(d: dict) -> RunConfig:
    """Validate a JSON config; errors name the offending field path."""
    _expect(d, dict, "<root>")
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    cfg = RunConfig()
    adapt = {"lr": cfg.bench.adaptation.lr}
    if "adaptation" in d:
        adapt.update(_expect(d["adaptation"], dict, "adaptation"))
    try:
        adaptation = AdaptationConfig.from_json(adapt)
    except ConfigError as exc:
        raise ConfigError(f"adaptation.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    except TypeError as exc:
        raise ConfigError("adaptation", str(exc)) from None
    bench = {"adaptation": adaptation}
    for key in ("seed", "k_shots", "n_queries", "pretrain_steps"):
        if key in d:
            bench[key] = _expect(d[key], int, key)
    if "pretrain_lr" in d:
        bench["pretrain_lr"] = float(_expect(d["pretrain_lr"], (int, float), "pretrain_lr"))
    cfg.bench = BenchmarkConfig(**bench)
    if "domains" in d:
        cfg.domains = [parse_domain(v, f"domains[{i}]") for i, v in enumerate(_expect(d["domains"], list, "domains"))]
    if "methods" in d:
        cfg.methods = [_expect(m, str, f"methods[{i}]") for i, m in enumerate(_expect(d["methods"], list, "methods"))]
    for key in ("episodes", "workers"):
        if key in d:
            setattr(cfg, key, _expect(d[key], int, key))
    if d.get("model") is not None:
        cfg.model = _expect(d["model"], str, "model")
    out = _expect(d.get("output", {}), dict, "output")
    unknown = set(out) - _OUTPUT_KEYS
    if unknown:
        raise ConfigError(f"output.{sorted(unknown)[0]}", "unknown field")
    for key in _OUTPUT_KEYS:
        if out.get(key) is not None:
            setattr(cfg, key, _expect(out[key], str, f"output.{key}"))
    return cfg


def validate(cfg: RunConfig, generated_k: bool = True) -> None:
    """Check cross-field constraints; ``generated_k`` means K comes from the config."""
    if cfg.episodes < 1:
        raise ConfigError("episodes", f"must be >= 1, got {cfg.episodes}")
    if cfg.workers < 1:
        raise ConfigError("workers", f"must be >= 1, got {cfg.workers}")
    if not cfg.domains:
        raise ConfigError("domains", "must list at least one domain")
    if len({d.name for d in cfg.domains}) != len(cfg.domains):
        raise ConfigError("domains", "domain names must be distinct")
    if not cfg.methods:
        raise ConfigError("methods", "must list at least one method")
    if len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError("methods", "duplicate method")
    for i, m in enumerate(cfg.methods):
        try:
            name, overrides = parse_method(m)
            AdaptationConfig(**{**cfg.bench.adaptation.to_json(), **overrides})
        except ConfigError as exc:
            raise ConfigError(f"methods[{i}]", str(exc).split(": ", 1)[-1]) from None
    cfg.bench.adaptation.validate()
    sched = cfg.bench.adaptation.schedule
    # a lone support is augmented to three
    k_eff = 3 if cfg.bench.k_shots == 1 else cfg.bench.k_shots
    if generated_k and sched is not None and sched[-1] > k_eff - 1:
        raise ConfigError("adaptation.schedule", f"shot count {sched[-1]} exceeds K-1 = {k_eff - 1}")


def _parse_int_list(text: str, flag: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace("-", ",").split(",") if x.strip())
    except ValueError:
        raise ConfigError(flag, f"expected comma-separated integers, got {text!r}") from None


def _parse_seeds(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition(":")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise ConfigError("--seeds", f"bad seed range {part!r}") from None
    return out


def build_config(args) -> RunConfig:
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(args.config, f"invalid JSON: {exc}") from None
        cfg = config_from_dict(raw)
    else:
        cfg = RunConfig()
    bench_over, adapt_over = {}, {}
    env = os.environ.get("ISA_SEED")
    if env is not None:
        try:
            bench_over["seed"] = int(env)
        except ValueError:
            raise ConfigError("ISA_SEED", f"must be an integer, got {env!r}") from None
    if getattr(args, "seed", None) is not None:
        bench_over["seed"] = args.seed
    for flag, key in (("k_shots", "k_shots"), ("queries", "n_queries"), ("pretrain_steps", "pretrain_steps")):
        if getattr(args, flag, None) is not None:
            bench_over[key] = getattr(args, flag)
    for flag in ("lr", "iterations", "reduction", "temperature", "k"):
        if getattr(args, flag, None) is not None:
            adapt_over[flag] = getattr(args, flag)
    if getattr(args, "cap", None) is not None:
        adapt_over["combination_cap"] = None if args.cap <= 0 else args.cap
    if getattr(args, "schedule", None) is not None:
        adapt_over["schedule"] = _parse_int_list(args.schedule, "--schedule")
    if getattr(args, "layers", None):
        adapt_over["manual_layers"] = tuple(x for x in args.layers.split(",") if x)
    if adapt_over:
        try:
            bench_over["adaptation"] = replace(cfg.bench.adaptation, **adapt_over)
        except ConfigError as exc:
            raise ConfigError(f"adaptation.{exc.path}", str(exc).split(": ", 1)[-1]) from None
    if bench_over:
        cfg.bench = replace(cfg.bench, **bench_over)
    if getattr(args, "domains", None):
        cfg.domains = [parse_domain(x, "--domains") for x in args.domains.split(",") if x]
    if getattr(args, "methods", None):
        cfg.methods = [x for x in args.methods.split(",") if x]
    if getattr(args, "k_sweep", False):
        cfg.methods = ["baseline", *k_sweep_methods(5)]
    for flag in ("episodes", "workers"):
        if getattr(args, flag, None) is not None:
            setattr(cfg, flag, getattr(args, flag))
    for flag in ("model", "cache_dir", "out", "trace_dir", "dump_masks"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, "out_dir" if flag == "out" else flag, value)
    validate(cfg, generated_k=getattr(args, "command", None) not in ("adapt", "fisher-report"))
    return cfg


def _model(cfg: RunConfig) -> LayeredModel:
    if cfg.model:
        return load_model(cfg.model)
    return pretrained_model(cfg.bench, cfg.cache_dir)


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out_dir:
        raise ConfigError("output.out_dir", "an output directory is required (--out)")
    return Path(cfg.out_dir)


# ------------------------------------------------------------------ commands


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _require_out(cfg)
    seeds = _parse_seeds(args.seeds) if args.seeds else [
        episode_seed(cfg.bench.seed, i) for i in range(cfg.episodes)
    ]
    for domain in cfg.domains:
        for s in seeds:
            ep = generate_episode(domain, cfg.bench.k_shots, cfg.bench.n_queries, s)
            save_episode(ep, out / ep.episode_id)
    print(f"wrote {len(seeds) * len(cfg.domains)} episodes to {out}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = _require_out(cfg)
    model = pretrained_model(cfg.bench, cfg.cache_dir)
    save_model(model, out)
    print(f"wrote pretrained model ({model.num_parameters()} parameters) to {out}")
    return EXIT_OK


def cmd_adapt(cfg: RunConfig, args) -> int:
    out = _require_out(cfg)
    episode = load_episode(args.episode)
    model = _model(cfg)
    adapt = replace(cfg.bench.adaptation, seed=cfg.bench.seed)
    if args.profile == "fast":
        adapt = fast_profile(model, adapt)
    try:
        adapt.validate(len(effective_supports(episode.supports, adapt.seed)))
        masks, trace = adapt_and_segment(model, episode, adapt)
    except ConfigError:
        raise
    except ISAError as exc:
        raise ISAError(f"episode {episode.episode_id}: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    scores = []
    for qi, (mask, q) in enumerate(zip(masks, episode.queries)):
        write_pgm(out / f"query_{qi:02d}_pred.pgm", (mask * 255).astype(np.uint8))
        scores.append(miou(mask, q.mask))
    trace_dir = Path(cfg.trace_dir) if cfg.trace_dir else out
    trace_dir.mkdir(parents=True, exist_ok=True)
    (trace_dir / "trace.json").write_text(json.dumps(trace.to_json(), indent=2) + "\n")
    summary = {
        "episode_id": episode.episode_id,
        "config": adapt.to_json(),
        "selected_layers": list(trace.selection.layers),
        "query_miou": scores,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{episode.episode_id}: layers {','.join(trace.selection.layers)} "
          f"mIoU {100 * float(np.mean(scores)):.2f}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _require_out(cfg)
    model = load_model(cfg.model) if cfg.model else None
    report = run_ablation(
        cfg.methods,
        cfg.domains,
        cfg.episodes,
        cfg.bench,
        model=model,
        workers=cfg.workers,
        trace_dir=cfg.trace_dir,
        dump_dir=cfg.dump_masks,
        cache_dir=cfg.cache_dir,
    )
    report.write(out)
    print(report.format_table())
    print(f"fingerprint {report.fingerprint}")
    for d in report.domains:
        for m in report.methods:
            h = report.histogram(d, m)
            if h and parse_method(m)[0] in ("isa", "isi-only"):
                print(f"selections {d} {m}: " + ", ".join(f"{k}={v}" for k, v in h.items()))
    log.info("ablation finished in %.1f s", report.wall_time)
    if report.results and report.total_failures() == len(report.results):
        print("every episode failed; see report.json", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_fisher_report(cfg: RunConfig, args) -> int:
    """Per episode: ``<out>/<episode_id>.fisher.json`` plus one ``selections.csv`` row per layer picked."""
    out = _require_out(cfg)
    model = _model(cfg)
    a = cfg.bench.adaptation
    rows = []
    for path in args.episode:
        episode = load_episode(path)
        try:
            sel = isi(model, episode.supports, a.k, a.reduction, a.temperature, cfg.bench.seed)
        except ISAError as exc:
            raise ISAError(f"episode {episode.episode_id}: {exc}") from exc
        out.mkdir(parents=True, exist_ok=True)
        doc = json.dumps(sel.report.to_json(), indent=2) + "\n"
        (out / f"{episode.episode_id}.fisher.json").write_text(doc)
        rows.extend((episode.episode_id, layer) for layer in sel.layers)
        print(f"{episode.episode_id} ({sel.report.sample_count} pairs, {a.reduction})")
        for name, score in sel.ranking:
            mark = "*" if name in sel.layers else " "
            print(f"  {mark} {name:24s} {score:.6e}")
    with open(out / "selections.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode_id", "selected_layer"])
        w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = run_gradcheck(args.models, cfg.bench.seed)
    worst = max(r.max_rel_error for r in results)
    for r in results:
        print(f"model {r.seed:3d}  params {r.param_count:4d}  max rel err {r.max_rel_error:.3e}")
    ok = worst < args.tolerance
    print(f"backend {BACKEND}: worst {worst:.3e} ({'ok' if ok else 'FAIL'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


# ------------------------------------------------------------------ parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides config and ISA_SEED)")
    p.add_argument("--k-shots", type=int, help="supports per episode")
    p.add_argument("--queries", type=int, help="queries per episode")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _adaptation(p):
    p.add_argument("--lr", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--schedule", help="shot counts, e.g. 1,2,3,4 or 4")
    p.add_argument("--k", type=int, help="number of selected layers")
    p.add_argument("--reduction", help="top1 | topJ | topk-mean(J) | mean")
    p.add_argument("--cap", type=int, help="max combinations per pseudo-query (<=0: no cap)")
    p.add_argument("--temperature", type=float)
    p.add_argument("--layers", help="comma-separated manual layer list (skips selection)")


def _model_args(p):
    p.add_argument("--model", help="model checkpoint directory (default: pretrain)")
    p.add_argument("--cache-dir", help="directory caching pretrained models")
    p.add_argument("--pretrain-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isa-fss", description="Few-shot segmentation test-time adaptation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write synthetic episodes (PGM + manifest)")
    _common(p)
    p.add_argument("--domains", help="comma-separated domain presets")
    p.add_argument("--episodes", type=int, help="number of episodes per domain")
    p.add_argument("--seeds", help="explicit episode seeds, e.g. 0,5,10:19")

    p = sub.add_parser("pretrain", help="pretrain the default backbone on the source domain")
    _common(p)
    _model_args(p)

    p = sub.add_parser("adapt", help="adapt to one episode and segment its queries")
    _common(p)
    _adaptation(p)
    _model_args(p)
    p.add_argument("--episode", required=True, help="episode directory")
    p.add_argument("--profile", choices=["full", "fast"], default="full")
    p.add_argument("--trace-dir")

    p = sub.add_parser("ablate", help="run the ablation benchmark")
    _common(p)
    _adaptation(p)
    _model_args(p)
    p.add_argument("--methods", help=f"comma-separated; from {', '.join(METHODS)} with [overrides]")
    p.add_argument("--domains", help="comma-separated domain presets")
    p.add_argument("--episodes", type=int, help="episodes per domain")
    p.add_argument("--workers", type=int)
    p.add_argument("--k-sweep", action="store_true", help="isa with k = 1..5 selected layers")
    p.add_argument("--trace-dir")
    p.add_argument("--dump-masks", help="directory for predicted query masks")

    p = sub.add_parser("fisher-report", help="per-layer Fisher scores and selections for episodes")
    _common(p)
    _adaptation(p)
    _model_args(p)
    p.add_argument("--episode", required=True, nargs="+", help="episode directories")

    p = sub.add_parser("gradcheck", help="autodiff vs finite differences on random models")
    _common(p)
    p.add_argument("--models", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "fisher-report": cmd_fisher_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ISAError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
