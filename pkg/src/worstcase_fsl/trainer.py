"""Pretraining, per-episode fine-tuning, ensembles and benchmark runs."""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    BASE,
    BasePartition,
    DatasetStore,
    EpisodeSpec,
    SrPool,
    check_episode,
    file_sha256,
    load_episodes,
    partition_base,
    partition_rows,
    rng_stream,
    sample_sr_indices,
)
from .errors import CapacityError, DivergenceError
from .losses import LossConfig, label_smoothed_ce, stability_regularization
from .model import (
    NORM_EPS,
    BackboneConfig,
    BackboneModel,
    CosineHead,
    backbone_backward,
    backbone_forward,
    clone_frozen_reference,
    clone_model,
    cosine_logits,
    cosine_logits_backward,
    forward_prefix,
    init_backbone,
    init_head,
    set_adaptability,
)
from .numcore import SgdConfig, sgd_step, softmax

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 128
    sgd: SgdConfig = SgdConfig(learning_rate=0.1, weight_decay=1e-4, momentum=0.9)
    epsilon: float = 0.1
    head_scale: float = 10.0
    # None means "all groups"; anything else is rejected
    learnable_groups: int | None = None


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 100
    sgd: SgdConfig = SgdConfig()
    loss: LossConfig = LossConfig()
    adaptability: int = 1
    sr_enabled: bool = True
    sr_batch_size: int = 256
    sr_source: str = "base"
    head_scale: float = 10.0
    # "step" draws a fresh SR batch per optimizer step; with full-batch support
    # there is one step per epoch so "epoch" is the same schedule
    sr_resample: str = "step"
    distinct_member_init: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.sr_batch_size < 1:
            raise ValueError(f"sr_batch_size must be >= 1, got {self.sr_batch_size}")
        if self.sr_resample not in ("step", "epoch"):
            raise ValueError(f"sr_resample must be 'step' or 'epoch', got {self.sr_resample!r}")


class Variant(str, enum.Enum):
    PLAIN = "plain"
    AC = "ac"
    AC_SR = "ac-sr"
    AC_ENSR = "ac-ensr"


@dataclass(frozen=True)
class VariantSpec:
    kind: Variant = Variant.AC_SR
    ensemble_m: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", Variant(self.kind))
        if self.ensemble_m < 1:
            raise ValueError(f"ensemble_m must be >= 1, got {self.ensemble_m}")

    @property
    def members(self) -> int:
        return self.ensemble_m if self.kind is Variant.AC_ENSR else 1

    def finetune_config(self, cfg: FinetuneConfig, n_groups: int) -> FinetuneConfig:
        """Specialize ``cfg`` for this variant."""
        if self.kind is Variant.PLAIN:
            return replace(cfg, adaptability=n_groups, sr_enabled=False)
        if self.kind is Variant.AC:
            return replace(cfg, sr_enabled=False)
        return replace(cfg, sr_enabled=True)


@dataclass
class RunResults:
    run_id: int
    variant: str
    episode_ids: list[int]
    per_episode_accuracy: list[float]
    episode_file_hash: str
    seeds: dict = field(default_factory=dict)
    n_way: int = 5
    n_query: int = 15

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "accuracy"])
        for e, a in zip(self.episode_ids, self.per_episode_accuracy):
            w.writerow([e, repr(float(a))])
        return buf.getvalue()

    def sidecar(self, config_snapshot=None) -> dict:
        return {
            "run_id": self.run_id,
            "variant": self.variant,
            "episode_file_hash": self.episode_file_hash,
            "seeds": self.seeds,
            "n_episodes": len(self.per_episode_accuracy),
            "n_way": self.n_way,
            "n_query": self.n_query,
            "config": config_snapshot or {},
        }


@dataclass
class FinetuneResult:
    model: BackboneModel
    head: CosineHead
    ce_history: list[float]
    loss_history: list[float]
    sr_skipped: int = 0


# -- pretraining ------------------------------------------------------------------

def pretrain(store: DatasetStore, config: BackboneConfig, cfg: PretrainConfig = PretrainConfig(), seed=0):
    """Supervised training on the base split; returns ``(backbone, base_head)``.

    Callers discard the base head before fine-tuning.
    """
    if cfg.learnable_groups is not None and cfg.learnable_groups != config.n_groups:
        raise ValueError(
            f"pretraining trains all {config.n_groups} groups; got learnable_groups={cfg.learnable_groups}"
        )
    idx = store.indices_in(BASE)
    if idx.size == 0:
        raise CapacityError("store has no base split to pretrain on")
    base_classes = sorted(set(store.labels[idx].tolist()))
    lookup = {c: i for i, c in enumerate(base_classes)}
    x = store.features[idx]
    y = np.array([lookup[int(c)] for c in store.labels[idx]], dtype=np.int64)

    rng = rng_stream(seed, "pretrain-init")
    model = init_backbone(config, rng)
    head = init_head(len(base_classes), config.feature_dim, rng, cfg.head_scale)
    params = model.params() + [head.weights]
    order_rng = rng_stream(seed, "pretrain-order")
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(idx.size)
        for step, start in enumerate(range(0, idx.size, cfg.batch_size)):
            b = order[start:start + cfg.batch_size]
            feats, fc = backbone_forward(model, x[b], cache=True)
            logits, hc = cosine_logits(head, feats, cache=True)
            loss, gl = label_smoothed_ce(logits, y[b], cfg.epsilon)
            if not np.isfinite(loss):
                raise DivergenceError(f"pretraining loss {loss} at epoch {epoch}, step {step}")
            backbone_backward(model, fc, cosine_logits_backward(head, hc, gl))
            sgd_step(params, cfg.sgd)
        log.debug("pretrain epoch %d loss %.4f", epoch, loss)
    return model, head


def base_accuracy(model: BackboneModel, head: CosineHead, store: DatasetStore) -> float:
    idx = store.indices_in(BASE)
    base_classes = sorted(set(store.labels[idx].tolist()))
    lookup = np.array(base_classes)
    pred = lookup[np.argmax(cosine_logits(head, backbone_forward(model, store.features[idx])), axis=1)]
    return float(np.mean(pred == store.labels[idx]))


# -- fine-tuning -------------------------------------------------------------------

@dataclass
class PreparedPool:
    """SR pool rows pushed once through the frozen reference.

    ``prefix`` is the activation entering group ``boundary`` and
    ``ref_features`` the reference output, row-aligned with ``pool``.
    Frozen groups never change, so both stay valid for every episode.
    """

    pool: SrPool
    boundary: int
    prefix: np.ndarray
    ref_features: np.ndarray
    origin_rows: np.ndarray | None = None  # rows of the parent pool this one was cut from

    def subset(self, rows, name=None) -> "PreparedPool":
        rows = np.asarray(rows, dtype=np.int64)
        idx = None if self.pool.indices is None else self.pool.indices[rows]
        sub = SrPool(self.pool.features[rows], name or self.pool.source_name, idx)
        origin = rows if self.origin_rows is None else self.origin_rows[rows]
        return PreparedPool(sub, self.boundary, self.prefix[rows], self.ref_features[rows], origin)

    def audit_ids(self, picks):
        """Store indices of picked rows, or original pool rows for external pools."""
        if self.pool.indices is not None:
            return self.pool.indices[picks]
        return picks if self.origin_rows is None else self.origin_rows[picks]


def prepare_pool(reference: BackboneModel, pool: SrPool, boundary: int) -> PreparedPool:
    prefix = forward_prefix(reference, pool.features, boundary)
    return PreparedPool(pool, boundary, prefix, backbone_forward(reference, prefix, start_group=boundary))


def finetune_episode(f_pretrained: BackboneModel, episode: EpisodeSpec, store: DatasetStore,
                     cfg: FinetuneConfig, rng: np.random.Generator, sr_pool: SrPool | PreparedPool | None = None,
                     audit: list | None = None) -> FinetuneResult:
    """Fit a copy of ``f_pretrained`` plus a fresh cosine head on the support set.

    The head is drawn from ``rng`` first, then each epoch draws one SR batch
    (defaulting to the whole base split). Activations through the frozen
    prefix are computed once: the tuned copy shares those groups with the
    frozen reference bit for bit, so only the learnable suffix is re-run.
    With ``audit`` given, the store indices of every SR batch are appended.
    """
    n_groups = len(f_pretrained.groups)
    tuned = clone_model(f_pretrained)
    head = init_head(episode.n_way, f_pretrained.config.feature_dim, rng, cfg.head_scale)
    set_adaptability(tuned, head, cfg.adaptability)
    boundary = n_groups - cfg.adaptability
    params = tuned.params(include_frozen=False) + [head.weights]

    xs = forward_prefix(tuned, store.features[list(episode.support)], boundary)
    ys = episode.support_labels(store)

    prepared = None
    if cfg.sr_enabled:
        if sr_pool is None:
            sr_pool = SrPool.from_store(store)
        if isinstance(sr_pool, PreparedPool) and sr_pool.boundary == boundary:
            prepared = sr_pool
        else:
            pool = sr_pool.pool if isinstance(sr_pool, PreparedPool) else sr_pool
            prepared = prepare_pool(clone_frozen_reference(f_pretrained), pool, boundary)
        n_pool = prepared.prefix.shape[0]
    alpha = cfg.loss.alpha

    ce_hist, loss_hist, skipped = [], [], 0
    for epoch in range(cfg.epochs):
        feats, fc = backbone_forward(tuned, xs, cache=True, start_group=boundary)
        logits, hc = cosine_logits(head, feats, cache=True)
        ce, gl = label_smoothed_ce(logits, ys, cfg.loss.epsilon)
        backbone_backward(tuned, fc, cosine_logits_backward(head, hc, gl))
        total = ce
        if prepared is not None:
            picks = sample_sr_indices(n_pool, cfg.sr_batch_size, rng)
            if audit is not None:
                audit.append(prepared.audit_ids(picks))
            f_ref = prepared.ref_features[picks]
            f_new, fc_sr = backbone_forward(tuned, prepared.prefix[picks], cache=True, start_group=boundary)
            keep = (np.linalg.norm(f_ref, axis=1) >= NORM_EPS) & (np.linalg.norm(f_new, axis=1) >= NORM_EPS)
            n_keep = int(keep.sum())
            skipped += keep.size - n_keep
            if n_keep:
                sr, g_kept = stability_regularization(f_ref[keep], f_new[keep])
                g_sr = np.zeros_like(f_new)
                g_sr[keep] = alpha * g_kept
                backbone_backward(tuned, fc_sr, g_sr)
                total = ce + alpha * sr
        if not np.isfinite(total):
            raise DivergenceError(f"fine-tuning loss {total} at epoch {epoch} of episode {episode.episode_id}")
        ce_hist.append(ce)
        loss_hist.append(total)
        sgd_step(params, cfg.sgd)
    return FinetuneResult(tuned, head, ce_hist, loss_hist, skipped)


def predict_proba(model: BackboneModel, head: CosineHead, x) -> np.ndarray:
    return softmax(cosine_logits(head, backbone_forward(model, x)), axis=1)


def evaluate_episode(members: Sequence[tuple[BackboneModel, CosineHead]], episode: EpisodeSpec,
                     store: DatasetStore) -> float:
    """Accuracy of the averaged class probabilities over the query set."""
    if not members:
        raise ValueError("need at least one model to evaluate")
    counts = {head.n_classes for _, head in members}
    if counts != {episode.n_way}:
        raise ValueError(f"members have class counts {sorted(counts)}, episode is {episode.n_way}-way")
    xq = store.features[list(episode.query)]
    yq = episode.query_labels(store)
    probs = np.mean([predict_proba(m, h, xq) for m, h in members], axis=0)
    correct = int(np.sum(np.argmax(probs, axis=1) == yq))
    return correct / len(episode.query)


def member_stream(seed, run_id, episode_id, member):
    return rng_stream(seed, "finetune", run_id, episode_id, member)


def run_ensemble_episode(f_pretrained: BackboneModel, episode: EpisodeSpec, store: DatasetStore,
                         cfg: FinetuneConfig, partition: BasePartition, seed: int, run_id=0,
                         audit: dict | None = None, sr_pool: SrPool | PreparedPool | None = None) -> float:
    """Fine-tune one SR-regularized member per base subset and average their probabilities.

    Member ``m`` draws SR rows only from ``partition.subsets[m]``. Subsets hold
    store indices for the base split, or row numbers when ``sr_pool`` is an
    external pool.
    """
    if not cfg.sr_enabled:
        raise ValueError("ensembles are always stability regularized; sr_enabled must be true")
    boundary = len(f_pretrained.groups) - cfg.adaptability
    if sr_pool is None:
        sr_pool = SrPool.from_store(store)
    if not isinstance(sr_pool, PreparedPool) or sr_pool.boundary != boundary:
        pool = sr_pool.pool if isinstance(sr_pool, PreparedPool) else sr_pool
        sr_pool = prepare_pool(clone_frozen_reference(f_pretrained), pool, boundary)
    members = []
    for m, subset in enumerate(partition.subsets):
        if subset.size == 0:
            raise CapacityError(f"ensemble member {m} has an empty base subset")
        rows = _rows_for(sr_pool.pool, subset)
        stream = member_stream(seed, run_id, episode.episode_id, m if cfg.distinct_member_init else 0)
        log_m = audit.setdefault(m, []) if audit is not None else None
        fit = finetune_episode(f_pretrained, episode, store, cfg, stream,
                               sr_pool.subset(rows, f"{sr_pool.pool.source_name}[{m}]"), log_m)
        members.append((fit.model, fit.head))
    return evaluate_episode(members, episode, store)


def _rows_for(pool: SrPool, subset):
    """Pool rows holding the given store indices (or the subset itself for external pools)."""
    if pool.indices is None:
        return subset
    pos = np.searchsorted(pool.indices, subset)
    if np.any(pos >= pool.indices.size) or not np.array_equal(pool.indices[np.minimum(pos, pool.indices.size - 1)], subset):
        raise CapacityError("partition refers to samples outside the SR pool")
    return pos


def run_single_episode(f_pretrained, episode, store, cfg, seed, run_id=0, sr_pool=None) -> float:
    fit = finetune_episode(f_pretrained, episode, store, cfg,
                           member_stream(seed, run_id, episode.episode_id, 0), sr_pool)
    return evaluate_episode([(fit.model, fit.head)], episode, store)


# -- benchmark ---------------------------------------------------------------------

def episodes_hash(episodes: Sequence[EpisodeSpec]) -> str:
    text = "".join(ep.to_json() + "\n" for ep in episodes)
    return hashlib.sha256(text.encode()).hexdigest()


def _episode_task(backbone, store, episode, variant: VariantSpec, cfg, seed, run_id, partition, sr_pool):
    try:
        if variant.kind is Variant.AC_ENSR:
            return run_ensemble_episode(backbone, episode, store, cfg, partition, seed, run_id, sr_pool=sr_pool)
        return run_single_episode(backbone, episode, store, cfg, seed, run_id, sr_pool)
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        try:
            wrapped = type(exc)(f"run {run_id}, episode {episode.episode_id}: {exc}")
        except TypeError:
            raise exc
        raise wrapped from exc


_WORKER: dict = {}


def _worker_init(payload):
    _WORKER.update(payload)


def _worker_run(item):
    run_id, episode, partition = item
    w = _WORKER
    acc = _episode_task(w["backbone"], w["store"], episode, w["variant"], w["cfg"], w["seed"],
                        run_id, partition, w["sr_pool"])
    return run_id, episode.episode_id, acc


def run_benchmark(backbone: BackboneModel, store: DatasetStore, episodes, variant: VariantSpec,
                  cfg: FinetuneConfig, n_runs=5, master_seed=0, workers=1,
                  sr_pool: SrPool | None = None) -> list[RunResults]:
    """Fine-tune and evaluate every (run, episode) pair.

    ``episodes`` is a path to an episode file or a list of specs. Run ``r``,
    episode ``e`` (member ``m``) always uses the stream keyed by
    ``(master_seed, r, e, m)``, so ``workers`` has no effect on the numbers.
    """
    if isinstance(episodes, (str, Path)):
        ep_hash = file_sha256(episodes)
        episodes = load_episodes(episodes)
    else:
        episodes = list(episodes)
        ep_hash = episodes_hash(episodes)
    if not episodes:
        raise ValueError("no episodes to run")
    for ep in episodes:
        check_episode(store, ep)
    vcfg = variant.finetune_config(cfg, len(backbone.groups))

    partitions = {}
    for r in range(n_runs):
        if variant.kind is not Variant.AC_ENSR:
            partitions[r] = None
        elif sr_pool is None:
            partitions[r] = partition_base(store, variant.ensemble_m, master_seed, r)
        else:
            partitions[r] = partition_rows(sr_pool.features.shape[0], variant.ensemble_m, master_seed, r)

    if vcfg.sr_enabled:
        pool = sr_pool if sr_pool is not None else SrPool.from_store(store)
        sr_pool = prepare_pool(clone_frozen_reference(backbone), pool, len(backbone.groups) - vcfg.adaptability)

    items = [(r, ep, partitions[r]) for r in range(n_runs) for ep in episodes]
    acc = {}
    if workers <= 1:
        for r, ep, part in items:
            acc[r, ep.episode_id] = _episode_task(backbone, store, ep, variant, vcfg, master_seed, r, part, sr_pool)
    else:
        payload = dict(backbone=backbone, store=store, variant=variant, cfg=vcfg, seed=master_seed, sr_pool=sr_pool)
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(payload,)) as pool:
            for r, e, a in pool.map(_worker_run, items, chunksize=max(1, len(items) // (4 * workers))):
                acc[r, e] = a

    results = []
    for r in range(n_runs):
        ids = [ep.episode_id for ep in episodes]
        results.append(RunResults(
            run_id=r,
            variant=variant.kind.value,
            episode_ids=ids,
            per_episode_accuracy=[acc[r, e] for e in ids],
            episode_file_hash=ep_hash,
            seeds={"master_seed": master_seed, "run_stream": [master_seed, r]},
            n_way=episodes[0].n_way,
            n_query=len(episodes[0].query) // episodes[0].n_way,
        ))
    return results


def config_snapshot(cfg: FinetuneConfig, variant: VariantSpec) -> dict:
    snap = asdict(cfg)
    snap["variant"] = {"kind": variant.kind.value, "ensemble_m": variant.ensemble_m}
    return snap


def write_run_results(out_dir, results: RunResults, config_snapshot_: dict | None = None):
    """Write ``<variant>_run<r>.csv`` and its JSON sidecar; returns the CSV path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{results.variant}_run{results.run_id}"
    csv_path = out / f"{stem}.csv"
    _atomic_text(csv_path, results.to_csv())
    _atomic_text(out / f"{stem}.json", json.dumps(results.sidecar(config_snapshot_), indent=2, sort_keys=True) + "\n")
    return csv_path


def read_run_results(csv_path) -> RunResults:
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    ids, accs = [], []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            ids.append(int(row["episode_id"]))
            accs.append(float(row["accuracy"]))
    return RunResults(meta["run_id"], meta["variant"], ids, accs, meta["episode_file_hash"],
                      meta.get("seeds", {}), meta.get("n_way", 5), meta.get("n_query", 15))


def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
