"""Datasets, splits, episode sampling and persistence.

Randomness always comes from :func:`rng_stream`, which derives an independent
generator from ``(seed, purpose, *ids)``. Two calls with the same key give
bit-identical draws regardless of what else ran in between, which is what lets
episodes be evaluated in any order or in parallel.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import CapacityError, DimensionError, FormatError
from .numcore import DTYPE

BASE, VALIDATION, NOVEL = "base", "validation", "novel"
SPLITS = (BASE, VALIDATION, NOVEL)


def rng_stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    key = (zlib.crc32(purpose.encode()),) + tuple(int(i) for i in ids)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


@dataclass
class DatasetStore:
    features: np.ndarray
    labels: np.ndarray
    split_of_class: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree on sample count"
            )

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def classes_in(self, split: str) -> list[int]:
        return sorted(c for c, s in self.split_of_class.items() if s == split)

    def indices_in(self, split: str) -> np.ndarray:
        wanted = np.array(self.classes_in(split), dtype=np.int64)
        return np.flatnonzero(np.isin(self.labels, wanted))

    def indices_of_class(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def validate_splits(self):
        """Every present class sits in exactly one known split."""
        for c, s in self.split_of_class.items():
            if s not in SPLITS:
                raise ValueError(f"class {c} assigned to unknown split {s!r}")
        missing = set(self.classes.tolist()) - set(self.split_of_class)
        if missing:
            raise ValueError(f"classes without a split: {sorted(missing)[:10]}")


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: int
    classes: tuple[int, ...]
    support: tuple[int, ...]
    query: tuple[int, ...]

    @property
    def n_way(self) -> int:
        return len(self.classes)

    def support_labels(self, store: DatasetStore) -> np.ndarray:
        return _relabel(store.labels[list(self.support)], self.classes)

    def query_labels(self, store: DatasetStore) -> np.ndarray:
        return _relabel(store.labels[list(self.query)], self.classes)

    def to_json(self) -> str:
        return json.dumps({
            "episode_id": self.episode_id,
            "classes": list(self.classes),
            "support": list(self.support),
            "query": list(self.query),
        }, separators=(",", ":"))


def _relabel(labels, classes):
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[int(c)] for c in labels], dtype=np.int64)


@dataclass(frozen=True)
class BasePartition:
    subsets: tuple[np.ndarray, ...]

    @property
    def m(self) -> int:
        return len(self.subsets)


@dataclass
class SrPool:
    """Unlabeled rows for the stability penalty.

    ``indices`` maps pool rows back to store sample ids when the pool was cut
    from a store; it is ``None`` for external pools.
    """

    features: np.ndarray
    source_name: str = "external"
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=DTYPE)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise CapacityError(f"SR pool {self.source_name!r} is empty")

    @classmethod
    def from_store(cls, store: DatasetStore, indices=None, name="base"):
        idx = store.indices_in(BASE) if indices is None else np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise CapacityError(f"SR pool {name!r} is empty")
        return cls(store.features[idx], name, idx)


# -- generation and splitting ---------------------------------------------------

def generate_synthetic(n_classes=100, samples_per_class=100, input_dim=128, cluster_spread=1.9,
                       seed=0, separation=12.0, latent_dim=8) -> DatasetStore:
    """Isotropic Gaussian clusters around random points on a sphere of radius ``separation``.

    With ``latent_dim < input_dim`` every class mean lies on the great sphere
    of one shared random ``latent_dim``-dimensional subspace, so base and
    novel classes share structure a backbone can learn. Noise stays isotropic
    in the full input space.
    """
    if min(n_classes, samples_per_class, input_dim) < 1:
        raise ValueError("n_classes, samples_per_class and input_dim must be positive")
    latent_dim = input_dim if latent_dim is None else int(latent_dim)
    if not 1 <= latent_dim <= input_dim:
        raise ValueError(f"latent_dim must lie in [1, {input_dim}], got {latent_dim}")
    rng = rng_stream(seed, "synthetic")
    means = rng.standard_normal((n_classes, latent_dim))
    if latent_dim < input_dim:
        basis, _ = np.linalg.qr(rng.standard_normal((input_dim, latent_dim)))
        means = means @ basis.T
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    noise = rng.standard_normal((n_classes, samples_per_class, input_dim))
    feats = means[:, None, :] + cluster_spread * noise
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    return DatasetStore(feats.reshape(-1, input_dim), labels)


def split_dataset(store: DatasetStore, n_base=64, n_val=16, n_novel=20, seed=0) -> DatasetStore:
    classes = store.classes
    if n_base + n_val + n_novel != classes.size:
        raise ValueError(
            f"split counts {n_base}+{n_val}+{n_novel}={n_base + n_val + n_novel} "
            f"!= {classes.size} classes"
        )
    perm = rng_stream(seed, "split").permutation(classes)
    names = [BASE] * n_base + [VALIDATION] * n_val + [NOVEL] * n_novel
    split = {int(c): s for c, s in zip(perm, names)}
    return DatasetStore(store.features, store.labels, split)


# -- episodes -------------------------------------------------------------------

def sample_episode(store: DatasetStore, n_way, k_shot, n_query, rng: np.random.Generator,
                   episode_id=0) -> EpisodeSpec:
    novel = store.classes_in(NOVEL)
    if len(novel) < n_way:
        raise CapacityError(f"need {n_way} novel classes, store has {len(novel)}")
    per_class = {c: store.indices_of_class(c) for c in novel}
    short = [c for c in novel if per_class[c].size < k_shot + n_query]
    if short:
        c = short[0]
        raise CapacityError(
            f"novel class {c} has {per_class[c].size} samples, need K+Q={k_shot + n_query}"
        )
    classes = rng.choice(np.array(novel), size=n_way, replace=False)
    support, query = [], []
    for c in classes:
        picks = rng.choice(per_class[int(c)], size=k_shot + n_query, replace=False)
        support.extend(int(i) for i in picks[:k_shot])
        query.extend(int(i) for i in picks[k_shot:])
    return EpisodeSpec(int(episode_id), tuple(int(c) for c in classes), tuple(support), tuple(query))


def presample_episodes(store: DatasetStore, n_episodes, n_way, k_shot, n_query, seed, path=None):
    """Draw ``n_episodes`` episodes; each uses its own stream keyed by episode id."""
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be positive, got {n_episodes}")
    episodes = [
        sample_episode(store, n_way, k_shot, n_query, rng_stream(seed, "episode", e), episode_id=e)
        for e in range(n_episodes)
    ]
    if path is not None:
        save_episodes(path, episodes)
    return episodes


def save_episodes(path, episodes: Iterable[EpisodeSpec]) -> str:
    text = "".join(ep.to_json() + "\n" for ep in episodes)
    _atomic_write(Path(path), text.encode())
    return hashlib.sha256(text.encode()).hexdigest()


def load_episodes(path) -> list[EpisodeSpec]:
    episodes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                episodes.append(EpisodeSpec(int(rec["episode_id"]), tuple(rec["classes"]),
                                            tuple(rec["support"]), tuple(rec["query"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad episode record: {exc}") from exc
    return episodes


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def check_episode(store: DatasetStore, ep: EpisodeSpec):
    """Raise unless the episode is consistent with the store's novel split."""
    novel = set(store.classes_in(NOVEL))
    if not set(ep.classes) <= novel:
        raise ValueError(f"episode {ep.episode_id}: classes {set(ep.classes) - novel} are not novel")
    if set(ep.support) & set(ep.query):
        raise ValueError(f"episode {ep.episode_id}: support and query overlap")
    n = store.labels.size
    for i in ep.support + ep.query:
        if not 0 <= i < n:
            raise ValueError(f"episode {ep.episode_id}: sample index {i} outside store of {n}")
        if int(store.labels[i]) not in ep.classes:
            raise ValueError(f"episode {ep.episode_id}: sample {i} is not from a listed class")


# -- base partition and SR sampling --------------------------------------------

def partition_base(store: DatasetStore, m: int, seed: int, run_id: int = 0) -> BasePartition:
    """Shuffle the base samples and deal them round-robin into ``m`` subsets.

    Subsets are returned sorted, so ``m=1`` yields exactly the base split.
    """
    return _deal(store.indices_in(BASE), m, rng_stream(seed, "partition", run_id))


def partition_rows(n_rows: int, m: int, seed: int, run_id: int = 0) -> BasePartition:
    """Same as :func:`partition_base` over the rows ``0..n_rows-1`` of an external pool."""
    return _deal(np.arange(n_rows), m, rng_stream(seed, "partition", run_id))


def _deal(universe, m, rng):
    if m < 1:
        raise ValueError(f"ensemble size must be positive, got {m}")
    if m > universe.size:
        raise CapacityError(f"cannot split {universe.size} samples into {m} subsets")
    shuffled = rng.permutation(universe)
    subsets = tuple(np.sort(shuffled[i::m]) for i in range(m))
    _check_partition(subsets, universe)
    return BasePartition(subsets)


def _check_partition(subsets, universe):
    seen = np.concatenate(subsets)
    if seen.size != np.unique(seen).size:
        raise AssertionError("partition subsets overlap")
    if not np.array_equal(np.sort(seen), np.sort(universe)):
        raise AssertionError("partition subsets do not cover the base split")


def sample_sr_indices(pool_size, batch_size, rng: np.random.Generator) -> np.ndarray:
    if pool_size < 1:
        raise CapacityError("cannot sample from an empty SR pool")
    return rng.integers(0, pool_size, size=batch_size)


def sample_sr_batch(pool: SrPool, batch_size, rng: np.random.Generator) -> np.ndarray:
    """``batch_size`` rows drawn uniformly with replacement."""
    return pool.features[sample_sr_indices(pool.features.shape[0], batch_size, rng)]


# -- dataset file format -----------------------------------------------------------

DATASET_MAGIC = b"WCFSDATA"
DATASET_VERSION = 1
_HEADER = struct.Struct("<IIII")  # version, n_samples, dim, n_classes


def save_dataset(path, store: DatasetStore) -> bytes:
    """Little-endian: magic, header, then per sample ``u32 label`` + ``dim`` f64.

    A JSON trailer after the samples carries the class->split map, if any.
    """
    n, dim = store.features.shape
    n_classes = int(store.classes.size)
    rec = np.zeros(n, dtype=np.dtype([("label", "<u4"), ("x", "<f8", (dim,))]))
    rec["label"] = store.labels
    rec["x"] = store.features
    trailer = json.dumps({str(k): v for k, v in sorted(store.split_of_class.items())}).encode()
    blob = (DATASET_MAGIC + _HEADER.pack(DATASET_VERSION, n, dim, n_classes) + rec.tobytes()
            + struct.pack("<I", len(trailer)) + trailer)
    _atomic_write(Path(path), blob)
    return blob


def load_dataset(path) -> DatasetStore:
    blob = Path(path).read_bytes()
    m = len(DATASET_MAGIC)
    if blob[:m] != DATASET_MAGIC:
        raise FormatError("bad magic, not a dataset file", 0)
    if len(blob) < m + _HEADER.size:
        raise FormatError("truncated header", len(blob))
    version, n, dim, n_classes = _HEADER.unpack_from(blob, m)
    if version != DATASET_VERSION:
        raise FormatError(f"unknown dataset version {version}", m)
    if dim == 0:
        raise DimensionError("header declares feature dim 0")
    start = m + _HEADER.size
    rec_size = 4 + 8 * dim
    end = start + n * rec_size
    if end + 4 > len(blob):
        raise FormatError(f"truncated sample block: header promises {n} samples of dim {dim}", len(blob))
    rec = np.frombuffer(blob, dtype=np.dtype([("label", "<u4"), ("x", "<f8", (dim,))]), count=n, offset=start)
    (tlen,) = struct.unpack_from("<I", blob, end)
    if end + 4 + tlen != len(blob):
        raise DimensionError(
            f"file size {len(blob)} inconsistent with declared n={n}, dim={dim} "
            f"(expected {end + 4 + tlen} bytes)"
        )
    try:
        split = {int(k): v for k, v in json.loads(blob[end + 4:].decode()).items()}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt split trailer: {exc}", end + 4) from exc
    store = DatasetStore(rec["x"].astype(DTYPE), rec["label"].astype(np.int64), split)
    if np.unique(store.labels).size != n_classes:
        raise FormatError(f"header declares {n_classes} classes, found {np.unique(store.labels).size}", m)
    if split:
        store.validate_splits()
    return store


def import_csv(path) -> DatasetStore:
    """Read ``label,f1,...,fd`` rows (header row required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise FormatError(f"{path}: first row must be a header starting with 'label'")
        dim = len(header) - 1
        labels, rows = [], []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) - 1 != dim:
                raise DimensionError(f"{path}:{lineno}: {len(row) - 1} features, header declares {dim}")
            labels.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    return DatasetStore(np.array(rows, dtype=DTYPE).reshape(-1, dim), np.array(labels, dtype=np.int64))


def _atomic_write(path: Path, blob: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
