"""Command-line entry point: ``pretrain``, ``episodes``, ``bench`` and ``report``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
whose keys are the fields of :class:`ExperimentConfig`; ``--set key=value``
and the dedicated flags override it. Every artifact written here carries the
hash of the resolved configuration and the seeds that produced it, and no
timestamps, so equal manifests give byte-identical files.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics
from .data import (
    DatasetStore,
    SrPool,
    file_sha256,
    generate_synthetic,
    import_csv,
    load_dataset,
    load_episodes,
    presample_episodes,
    split_dataset,
)
from .errors import CapacityError, DegenerateInputError, DimensionError, DivergenceError, FormatError
from .losses import LossConfig
from .model import BackboneConfig, load_checkpoint, save_checkpoint
from .numcore import SgdConfig
from .trainer import (
    FinetuneConfig,
    PretrainConfig,
    RunResults,
    Variant,
    VariantSpec,
    base_accuracy,
    pretrain,
    read_run_results,
    run_benchmark,
    write_run_results,
)

log = logging.getLogger("worstcase_fsl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

CHECKPOINT_NAME = "backbone.ckpt"
EPISODES_NAME = "episodes.jsonl"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Every knob of an experiment. Comments give the source of each default."""

    # dataset (plumbing: synthetic stand-in, calibrated for mid-range accuracy)
    data_path: str = ""             # dataset file (.wcfs binary or .csv); empty = synthesize
    synthesize: bool = True         # allow synthesis when data_path is empty
    n_classes: int = 100
    samples_per_class: int = 100
    input_dim: int = 128
    latent_dim: int = 8
    separation: float = 12.0
    cluster_spread: float = 1.9
    data_seed: int = 0
    # split counts (64/16/20 class split)
    n_base: int = 64
    n_val: int = 16
    n_novel: int = 20
    # backbone (plumbing: grouped dense net stands in for residual stages)
    group_dims: str = "64,64,64,64,64"
    layers_per_group: int = 1
    # pretraining (plumbing: plain supervised CE with a cosine head)
    pretrain_epochs: int = 5
    pretrain_batch_size: int = 128
    # fine-tuning: 100 epochs, SGD lr 0.1 / wd 1e-4 / momentum 0.9, eps 0.1, alpha 0.1
    epochs: int = 100
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    momentum: float = 0.9
    decay_biases: bool = True       # open question: uniform weight decay unless disabled
    epsilon: float = 0.1
    alpha: float = 0.1
    head_scale: float = 10.0        # plumbing: fixed cosine-head temperature
    adaptability: int = 1           # learnable trailing groups j
    sr_batch_size: int = 256
    sr_resample: str = "step"       # open question: per-step vs per-epoch SR batches
    distinct_member_init: bool = True
    # variant
    variant: str = "ac-sr"
    ensemble_m: int = 4
    # evaluation protocol: 5-way, 15 queries, K in {1,5}, 500 episodes x 5 runs
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    n_episodes: int = 500
    n_runs: int = 5
    master_seed: int = 0
    # plumbing (excluded from the config hash: they never change numbers)
    out: str = "runs"
    sr_pool: str = ""               # optional external SR pool (dataset file); empty = base split
    workers: int = 1
    episode_hash: str = ""          # expected sha256 of the episode file; empty = not checked

    def __post_init__(self):
        if self.variant not in {v.value for v in Variant}:
            raise UsageError(f"variant must be one of {[v.value for v in Variant]}, got {self.variant!r}")
        for name in ("n_episodes", "n_runs", "epochs", "n_way", "k_shot", "n_query", "workers"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")

    # -- derived configs ---------------------------------------------------------
    @property
    def backbone(self) -> BackboneConfig:
        dims = tuple(int(d) for d in self.group_dims.split(",") if d.strip())
        return BackboneConfig(self.input_dim, dims, self.layers_per_group)

    @property
    def pretrain_config(self) -> PretrainConfig:
        sgd = SgdConfig(self.learning_rate, self.weight_decay, self.momentum, self.decay_biases)
        return PretrainConfig(self.pretrain_epochs, self.pretrain_batch_size, sgd, self.epsilon, self.head_scale)

    @property
    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.epochs,
            sgd=SgdConfig(self.learning_rate, self.weight_decay, self.momentum, self.decay_biases),
            loss=LossConfig(self.epsilon, self.alpha),
            adaptability=self.adaptability,
            sr_batch_size=self.sr_batch_size,
            sr_source="pool" if self.sr_pool else "base",
            head_scale=self.head_scale,
            sr_resample=self.sr_resample,
            distinct_member_init=self.distinct_member_init,
        )

    @property
    def variant_spec(self) -> VariantSpec:
        return VariantSpec(Variant(self.variant), self.ensemble_m)

    # -- manifests ----------------------------------------------------------------
    def snapshot(self) -> dict:
        snap = dataclasses.asdict(self)
        for k in _UNHASHED:
            snap.pop(k)
        return snap

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()


_UNHASHED = ("out", "workers", "episode_hash")
_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise UsageError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, origin="<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def render_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in dataclasses.asdict(cfg).items())


def resolve_config(args) -> ExperimentConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    flag_map = {"seed": "master_seed", "variant": "variant", "out": "out", "sr_pool": "sr_pool",
                "k": "k_shot", "workers": "workers"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return ExperimentConfig(**values)


# -- shared plumbing --------------------------------------------------------------

def build_store(cfg: ExperimentConfig) -> DatasetStore:
    """Load or synthesize the store, applying the configured split when the file has none."""
    if cfg.data_path:
        path = Path(cfg.data_path)
        if not path.is_file():
            raise FileNotFoundError(f"dataset file {path} not found; fix data_path or clear it to synthesize")
        store = import_csv(path) if path.suffix.lower() == ".csv" else load_dataset(path)
    elif cfg.synthesize:
        store = generate_synthetic(cfg.n_classes, cfg.samples_per_class, cfg.input_dim, cfg.cluster_spread,
                                   cfg.data_seed, cfg.separation, cfg.latent_dim)
    else:
        raise FileNotFoundError("no dataset: data_path is empty and synthesize = false; "
                                "set data_path to a dataset file or enable synthesize")
    if not store.split_of_class:
        store = split_dataset(store, cfg.n_base, cfg.n_val, cfg.n_novel, cfg.data_seed)
    store.validate_splits()
    if store.input_dim != cfg.input_dim:
        raise DimensionError(f"dataset has {store.input_dim} features but input_dim = {cfg.input_dim}")
    return store


def store_fingerprint(store: DatasetStore) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(store.features).tobytes())
    h.update(np.ascontiguousarray(store.labels, dtype="<i8").tobytes())
    h.update(json.dumps(sorted(store.split_of_class.items())).encode())
    return h.hexdigest()


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _episodes_path(cfg: ExperimentConfig, args) -> Path:
    return Path(args.episodes) if args.episodes else Path(cfg.out) / EPISODES_NAME


# -- subcommands --------------------------------------------------------------------

def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    store = build_store(cfg)
    model, head = pretrain(store, cfg.backbone, cfg.pretrain_config, cfg.master_seed)
    acc = base_accuracy(model, head, store)
    out = Path(cfg.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    extra = {"config_hash": cfg.config_hash(), "store_fingerprint": store_fingerprint(store),
             "base_accuracy": acc}
    save_checkpoint(ckpt, model, None, seed=cfg.master_seed, extra=extra)
    _write_json(ckpt.with_name(ckpt.name + ".manifest.json"), {
        "command": "pretrain", "config_hash": cfg.config_hash(), "config": cfg.snapshot(),
        "seeds": {"master_seed": cfg.master_seed, "data_seed": cfg.data_seed},
        "checkpoint_sha256": file_sha256(ckpt), "base_accuracy": acc,
    })
    print(f"checkpoint {ckpt}  sha256 {file_sha256(ckpt)}  base accuracy {metrics.pct(acc)}")
    return EXIT_OK


def cmd_episodes(cfg: ExperimentConfig, args) -> int:
    store = build_store(cfg)
    path = _episodes_path(cfg, args)
    path.parent.mkdir(parents=True, exist_ok=True)
    presample_episodes(store, cfg.n_episodes, cfg.n_way, cfg.k_shot, cfg.n_query, cfg.master_seed, path)
    digest = file_sha256(path)
    _write_json(path.with_name(path.name + ".manifest.json"), {
        "command": "episodes", "config_hash": cfg.config_hash(), "episode_file_sha256": digest,
        "seeds": {"master_seed": cfg.master_seed, "data_seed": cfg.data_seed},
        "n_episodes": cfg.n_episodes, "n_way": cfg.n_way, "k_shot": cfg.k_shot, "n_query": cfg.n_query,
    })
    print(f"episodes {path}  sha256 {digest}")
    return EXIT_OK


def cmd_bench(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    ep_path = _episodes_path(cfg, args)
    for p, what in ((ckpt, "checkpoint"), (ep_path, "episode file")):
        if not p.is_file():
            raise FileNotFoundError(f"{what} {p} not found")
    digest = file_sha256(ep_path)
    if cfg.episode_hash and cfg.episode_hash != digest:
        raise FormatError(f"episode file {ep_path} has sha256 {digest}, config expects {cfg.episode_hash}")
    store = build_store(cfg)
    backbone, _, header = load_checkpoint(ckpt)
    fp = header.get("extra", {}).get("store_fingerprint")
    if fp is not None and fp != store_fingerprint(store):
        raise FormatError(f"checkpoint {ckpt} was pretrained on a different dataset than this config builds")
    episodes = load_episodes(ep_path)
    shape = {(ep.n_way, len(ep.support) // ep.n_way, len(ep.query) // ep.n_way) for ep in episodes}
    if shape != {(cfg.n_way, cfg.k_shot, cfg.n_query)}:
        raise FormatError(f"episode file shapes {sorted(shape)} differ from configured "
                          f"(N, K, Q) = {(cfg.n_way, cfg.k_shot, cfg.n_query)}")
    pool = None
    if cfg.sr_pool:
        pool_store = import_csv(cfg.sr_pool) if cfg.sr_pool.lower().endswith(".csv") else load_dataset(cfg.sr_pool)
        pool = SrPool(pool_store.features, Path(cfg.sr_pool).name)
    results = run_benchmark(backbone, store, episodes, cfg.variant_spec, cfg.finetune_config,
                            cfg.n_runs, cfg.master_seed, cfg.workers, pool)
    snap = {"config_hash": cfg.config_hash(), "experiment": cfg.snapshot(),
            "checkpoint_sha256": file_sha256(ckpt)}
    for res in results:
        res.episode_file_hash = digest
        path = write_run_results(out, res, snap)
        print(f"{path}  mean {metrics.pct(metrics.acc_mean(res.per_episode_accuracy))}")
    return EXIT_OK


def _expand_results(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            found.extend(sorted(q for q in p.glob("*_run*.csv")))
        elif p.is_file():
            found.append(p)
        else:
            raise FileNotFoundError(f"results path {p} not found")
    if not found:
        raise UsageError("no results files given")
    return found


def build_reports(runs: list[RunResults], pooled=False, allow_mixed=False) -> dict[str, metrics.MetricsReport]:
    hashes = {r.episode_file_hash for r in runs}
    if len(hashes) > 1 and not allow_mixed:
        raise FormatError("results come from different episode files "
                          f"({', '.join(sorted(h[:12] for h in hashes))}); pass --allow-mixed-episodes to compare anyway")
    by_variant: dict[str, list[RunResults]] = {}
    for r in sorted(runs, key=lambda r: (r.variant, r.run_id)):
        by_variant.setdefault(r.variant, []).append(r)
    reports = {}
    for variant, rs in by_variant.items():
        prov = {"episode_file_hash": sorted({r.episode_file_hash for r in rs}),
                "seeds": [r.seeds for r in rs], "run_ids": [r.run_id for r in rs]}
        if pooled:
            rep = metrics.pooled_report([r.per_episode_accuracy for r in rs])
        else:
            rep = metrics.aggregate_runs([metrics.compute_report(r.per_episode_accuracy) for r in rs])
        rep.provenance = prov
        reports[variant] = rep
    return reports


def cmd_report(cfg: ExperimentConfig, args) -> int:
    runs = [read_run_results(p) for p in _expand_results(args.results)]
    reports = build_reports(runs, args.pooled, args.allow_mixed_episodes)
    out = Path(cfg.out)
    _write_json(out / "report.json", {v: r.to_dict() for v, r in sorted(reports.items())})
    table = metrics.render_table(reports, sort_by=args.sort)
    _write_text(out / "table.txt", table)
    for variant in reports:
        sample = np.concatenate([r.per_episode_accuracy for r in runs if r.variant == variant])
        _write_text(out / f"{variant}_histogram.csv", metrics.histogram_export(sample, args.bins).to_csv())
    sys.stdout.write(table)
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "episodes": cmd_episodes, "bench": cmd_bench, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for bench")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="worstcase-fsl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain a backbone on the base split")
    p.add_argument("--checkpoint", help=f"checkpoint path (default OUT/{CHECKPOINT_NAME})")

    p = sub.add_parser("episodes", parents=[common], help="pre-sample an episode file")
    p.add_argument("--episodes", help=f"episode file to write (default OUT/{EPISODES_NAME})")
    p.add_argument("--k", type=int, choices=(1, 5), help="shots per class")

    p = sub.add_parser("bench", parents=[common], help="fine-tune and evaluate a variant on every episode")
    p.add_argument("--checkpoint", help=f"pretrained checkpoint (default OUT/{CHECKPOINT_NAME})")
    p.add_argument("--episodes", help=f"episode file (default OUT/{EPISODES_NAME})")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--sr-pool", dest="sr_pool", help="dataset file used as the SR pool instead of the base split")
    p.add_argument("--k", type=int, choices=(1, 5), help="shots per class (must match the episode file)")

    p = sub.add_parser("report", parents=[common], help="metrics, histograms and comparison table")
    p.add_argument("results", nargs="+", help="result CSVs or directories holding them")
    p.add_argument("--sort", choices=("acc1", "accm"), default="acc1", help="table order (descending)")
    p.add_argument("--bins", type=int, default=20, help="histogram bins")
    p.add_argument("--pooled", action="store_true", help="pool all runs' episodes instead of averaging per-run metrics")
    p.add_argument("--allow-mixed-episodes", action="store_true",
                   help="compare results produced from different episode files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (FormatError, DimensionError, CapacityError, DegenerateInputError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
