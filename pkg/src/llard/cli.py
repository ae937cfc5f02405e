"""Command-line entry point.

Every command works inside a run directory holding fixed artifact names and a
``manifest.json`` with their sha256 hashes; downstream commands refuse
artifacts whose hashes no longer match.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import DataError, Dataset, inject_noise, kcore_filter, read_catalog, read_interactions, split_dataset
from .evaluation import (
    DEFAULT_RATIOS,
    coldstart_report,
    evaluate,
    robustness_sweep,
    write_coldstart,
    write_series,
    write_sweep,
)
from .llm.gateway import GatewayError, LLMGateway, ProviderConfig, ResponseCache
from .llm.mock import MockProvider, MockRules
from .pipeline import train_and_evaluate
from .preference import ConfigurationError, KnowledgeGenerationError, PreferenceKnowledge, generate_preference_knowledge
from .relation import RelationKnowledge, build_enriched_graph, generate_relation_knowledge
from .trainer import (
    Checkpoint,
    MissingKnowledgeError,
    NumericError,
    TrainConfig,
    TrainingContext,
    coerce_value,
    export_denoised_graph,
    fit,
    make_scorer,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PROVIDER, EXIT_NUMERIC = 0, 2, 3, 4, 5

ARTIFACTS = {
    "dataset": "dataset.json",
    "kp": "preference.kp",
    "kr": "relations.kr",
    "checkpoint": "checkpoint.ckpt",
    "metrics": "metrics.tsv",
    "cache": "llm_cache.bin",
}

log = logging.getLogger("llard")


class ManifestError(DataError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    path: Path
    artifacts: dict[str, dict] = field(default_factory=dict)  # name -> {"path", "sha256"}
    config_hash: str | None = None
    seeds: dict[str, int] = field(default_factory=dict)
    timestamps: dict[str, float] = field(default_factory=dict)
    tool_version: str = __version__

    @classmethod
    def open(cls, run_dir: Path) -> "RunManifest":
        path = run_dir / "manifest.json"
        if not path.exists():
            return cls(path)
        obj = json.loads(path.read_text())
        return cls(path, obj.get("artifacts", {}), obj.get("config_hash"), obj.get("seeds", {}),
                   obj.get("timestamps", {}), obj.get("tool_version", __version__))

    def record(self, name: str, file: Path, step: str | None = None) -> None:
        self.artifacts[name] = {"path": file.name, "sha256": sha256_file(file)}
        self.timestamps[step or name] = time.time()

    def require(self, name: str) -> Path:
        """Path of a recorded artifact after checking it exists and matches its hash."""
        entry = self.artifacts.get(name)
        if entry is None:
            raise ManifestError(f"missing artifact: {name} (not recorded in {self.path})")
        file = self.path.parent / entry["path"]
        if not file.exists():
            raise ManifestError(f"missing artifact: {name} ({file} does not exist)")
        if sha256_file(file) != entry["sha256"]:
            raise ManifestError(f"artifact {name} ({file}) does not match its recorded hash")
        return file

    def has(self, name: str) -> bool:
        return name in self.artifacts

    def save(self) -> None:
        obj = {"tool_version": self.tool_version, "config_hash": self.config_hash, "seeds": self.seeds,
               "timestamps": self.timestamps, "artifacts": self.artifacts}
        self.path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- shared helpers ----------------------------------------------------------------------


def _run_dir(args) -> Path:
    d = Path(args.run_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit command-line values."""
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_file(args.config, cfg)
    hints = typing.get_type_hints(TrainConfig)
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        raw = getattr(args, "cfg_" + f.name, None)
        if raw is not None:
            overrides[f.name] = coerce_value(f.name, raw, hints[f.name])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides)


def _gateway(args, run_dir: Path) -> LLMGateway:
    cache = ResponseCache(args.cache or run_dir / ARTIFACTS["cache"])
    if args.mock:
        rules = MockRules.load(args.mock_rules) if args.mock_rules else MockRules()
        return LLMGateway(MockProvider(rules), cache, args.max_parallel)
    if not args.endpoint or not args.model:
        raise ConfigurationError("a live provider needs --endpoint and --model (or use --mock)")
    from .llm.http import HTTPProvider

    cfg = ProviderConfig(endpoint=args.endpoint, model=args.model,
                         embedding_model=args.embedding_model or args.model,
                         api_key_env=args.api_key_env, max_parallel=args.max_parallel)
    return LLMGateway(HTTPProvider(cfg), cache, args.max_parallel)


def _load_dataset(manifest: RunManifest) -> Dataset:
    return Dataset.load(manifest.require("dataset"))


def _load_knowledge(manifest: RunManifest, dataset: Dataset, config: TrainConfig):
    ab = config.ablation
    kp = PreferenceKnowledge.load(manifest.require("kp")) if (ab.use_prf or manifest.has("kp")) else None
    kr = None
    if ab.use_rel:
        kr = RelationKnowledge.load(manifest.require("kr"))
    return kp, kr


def _eval_context(dataset: Dataset, config: TrainConfig) -> TrainingContext:
    return TrainingContext.build(dataset, config.replace(no_mi_max=True))


def _load_checkpoint(manifest: RunManifest, dataset: Dataset):
    ckpt = Checkpoint.load(manifest.require("checkpoint"))
    ctx = _eval_context(dataset, ckpt.config)
    return ckpt, ctx, ckpt.restore(ctx)


# -- commands -----------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    run_dir = _run_dir(args)
    records = read_interactions(args.interactions)
    catalog = read_catalog(args.catalog) if args.catalog else None
    kept = kcore_filter(records, args.k, args.min_rating)
    if not kept:
        raise DataError(f"no interactions left after filtering (k={args.k}, min_rating={args.min_rating})")
    dataset = split_dataset(kept, seed=args.seed, catalog=catalog)
    if args.noise_ratio:
        dataset = inject_noise(dataset, args.noise_ratio, args.seed)
    out = run_dir / ARTIFACTS["dataset"]
    dataset.save(out)
    manifest = RunManifest.open(run_dir)
    manifest.record("dataset", out, "ingest")
    manifest.seeds["ingest"] = args.seed
    manifest.save()
    s = dataset.summary()
    print("Dataset\t#Users\t#Items\t#Interactions\tDensity")
    print(f"{Path(args.interactions).stem}\t{s['users']}\t{s['items']}\t{s['interactions']}\t{s['density']:.5f}")
    return EXIT_OK


def cmd_knowledge(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    config = _config(args)
    gateway = _gateway(args, run_dir)
    if args.kind == "prefs":
        kp = generate_preference_knowledge(gateway, dataset, dim=config.dim, head_hidden=config.head_hidden,
                                           seed=config.seed)
        out = run_dir / ARTIFACTS["kp"]
        kp.save(out)
        manifest.record("kp", out, "knowledge-prefs")
        manifest.seeds["knowledge-prefs"] = config.seed
    else:
        kp = PreferenceKnowledge.load(manifest.require("kp"))
        kr = generate_relation_knowledge(gateway, dataset, kp)
        out = run_dir / ARTIFACTS["kr"]
        kr.save(out)
        manifest.record("kr", out, "knowledge-relations")
        print(f"noise edges: {len(kr.noise_edges)}\tcollab edges: {len(kr.collab_edges)}"
              f"\tinterest edges: {len(kr.interest_edges)}")
    manifest.save()
    st = gateway.stats
    print(f"cache hits: {st.hits}\tcache misses: {st.misses}\tprovider calls: {st.provider_calls}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    config = _config(args)
    kp, kr = _load_knowledge(manifest, dataset, config)
    grel = build_enriched_graph(dataset, kr) if kr is not None else None
    ctx = TrainingContext.build(dataset, config, kp, grel)
    metrics = run_dir / ARTIFACTS["metrics"]
    result = fit(dataset, config, ctx=ctx, metrics_path=metrics)
    ckpt = run_dir / ARTIFACTS["checkpoint"]
    result.checkpoint.save(ckpt)
    manifest.record("checkpoint", ckpt, "train")
    manifest.record("metrics", metrics, "train-metrics")
    manifest.config_hash = config.hash()
    manifest.seeds["train"] = config.seed
    manifest.save()
    print(f"best epoch {result.best_epoch} of {result.epochs_run}\tval {config.monitor} "
          f"{result.checkpoint.best_metric:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    ckpt, ctx, state = _load_checkpoint(manifest, dataset)
    cfg = ckpt.config
    scorer = make_scorer(state.model, ctx, cfg, cfg.eval_tau(ckpt.epoch))
    ns = tuple(int(n) for n in args.ns.split(","))
    report = evaluate(scorer, dataset, args.split, ns, exclude_val=not args.include_val_candidates,
                      metadata={"seed": cfg.seed, "config": cfg.hash()})
    out = run_dir / f"report_{args.split}.tsv"
    report.save(out)
    manifest.record(f"report_{args.split}", out, "eval")
    manifest.save()
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_robustness(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    config = _config(args)
    ab = config.ablation
    needs_llm = ab.use_prf or ab.use_rel
    gateway = _gateway(args, run_dir) if needs_llm else None

    def run(ds: Dataset):
        kp = kr = None
        if needs_llm:
            kp = generate_preference_knowledge(gateway, ds, dim=config.dim, head_hidden=config.head_hidden,
                                               seed=config.seed)
            kr = generate_relation_knowledge(gateway, ds, kp) if ab.use_rel else None
        return train_and_evaluate(ds, config, kp, kr).report

    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else list(DEFAULT_RATIOS)
    rows = robustness_sweep(dataset, run, ratios, seed=config.seed)
    out = run_dir / "robustness.tsv"
    write_sweep(rows, out)
    write_series(run_dir / "robustness_drop.xy", [r.ratio for r in rows], [r.drop_rate for r in rows])
    manifest.record("robustness", out, "robustness")
    manifest.save()
    sys.stdout.write(out.read_text())
    return EXIT_OK


def cmd_coldstart(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    ckpt, ctx, state = _load_checkpoint(manifest, dataset)
    cfg = ckpt.config
    report = evaluate(make_scorer(state.model, ctx, cfg, cfg.eval_tau(ckpt.epoch)), dataset, "test",
                      metadata={"seed": cfg.seed, "config": cfg.hash()})
    groups = coldstart_report(report, dataset, args.groups)
    out = run_dir / "coldstart.tsv"
    write_coldstart(groups, out)
    write_series(run_dir / "coldstart_recall20.xy", [g.group for g in groups],
                 [g.report.mean("recall", 20) if 20 in g.report.ns else 0.0 for g in groups])
    manifest.record("coldstart", out, "coldstart")
    manifest.save()
    sys.stdout.write(out.read_text())
    return EXIT_OK


def cmd_export_graph(args) -> int:
    run_dir = _run_dir(args)
    manifest = RunManifest.open(run_dir)
    dataset = _load_dataset(manifest)
    ckpt, ctx, state = _load_checkpoint(manifest, dataset)
    out = Path(args.out) if args.out else run_dir / "denoised_graph.tsv"
    q, hard = export_denoised_graph(state.model, ctx, ckpt.config, ckpt.config.eval_tau(ckpt.epoch), out)
    manifest.record("denoised_graph", out, "export-graph")
    manifest.save()
    print(f"edges: {len(q)}\tretained: {len(hard)}\tmean q: {float(q.mean()) if len(q) else 0.0:.6f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------------


def _add_provider_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("LLM provider")
    g.add_argument("--mock", action="store_true", help="use the offline rule-based mock provider")
    g.add_argument("--mock-rules", help="JSON rule table for the mock provider")
    g.add_argument("--endpoint", help="base URL of an OpenAI-compatible API")
    g.add_argument("--model", help="completion model name")
    g.add_argument("--embedding-model", help="embedding model name (defaults to --model)")
    g.add_argument("--api-key-env", default="LLARD_API_KEY", help="environment variable holding the API key")
    g.add_argument("--cache", help="response cache file (default: <run-dir>/llm_cache.bin)")
    g.add_argument("--max-parallel", type=int, default=4)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="file of 'key = value' lines")
    g = p.add_argument_group("training overrides (beat the config file)")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in (bool, "bool"):
            g.add_argument(flag, dest="cfg_" + f.name, nargs="?", const="true", metavar="BOOL")
        else:
            g.add_argument(flag, dest="cfg_" + f.name, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llard", description="LLM-assisted denoising recommender")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--run-dir", default=".", help="directory holding artifacts and manifest.json")
    common.add_argument("--seed", type=int, default=None, help="single seed for all randomness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="filter, split and index raw interactions")
    p.add_argument("interactions", help="user<TAB>item[<TAB>rating[<TAB>timestamp]] lines")
    p.add_argument("--catalog", help="kind<TAB>id<TAB>field<TAB>text lines")
    p.add_argument("--k", type=int, default=10, help="k-core threshold")
    p.add_argument("--min-rating", type=int, default=3)
    p.add_argument("--noise-ratio", type=float, default=0.0, help="inject this fraction of random train noise")
    p.set_defaults(func=cmd_ingest, seed=0)

    p = sub.add_parser("knowledge", parents=[common], help="generate preference or relation knowledge")
    p.add_argument("kind", choices=["prefs", "relations"])
    _add_provider_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_knowledge)

    p = sub.add_parser("train", parents=[common], help="train with early stopping")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate the saved checkpoint")
    p.add_argument("--split", choices=["val", "test"], default="test")
    p.add_argument("--ns", default="10,20", help="comma-separated cutoffs")
    p.add_argument("--include-val-candidates", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", parents=[common], help="noise-injection sweep with drop rates")
    p.add_argument("--ratios", help="comma-separated noise ratios (default 0.05,0.1,0.15,0.2)")
    _add_provider_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("coldstart", parents=[common], help="metrics per interaction-frequency group")
    p.add_argument("--groups", type=int, default=5)
    p.set_defaults(func=cmd_coldstart)

    p = sub.add_parser("export-graph", parents=[common], help="write per-edge q and the retained edge list")
    p.add_argument("--out", help="output file (default: <run-dir>/denoised_graph.tsv)")
    p.set_defaults(func=cmd_export_graph)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except KnowledgeGenerationError as exc:
        print(f"error: knowledge generation failed for {len(exc.failures)} subject(s):", file=sys.stderr)
        for key, err in sorted(exc.failures.items()):
            print(f"  {key}: {err}", file=sys.stderr)
        return EXIT_PROVIDER
    except (GatewayError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MissingKnowledgeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
