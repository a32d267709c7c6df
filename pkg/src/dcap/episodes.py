"""Datasets, class splits and the N-way K-shot episode sampler.

Randomness comes from Philox streams keyed by ``(seed, purpose, index)`` so an
episode depends only on its own key: episodes can be drawn in any order or on
any number of workers and come out identical.
"""
from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPLITS = ("meta-train", "meta-val", "meta-test")
NO_BASE_LABEL = -1

# stream purposes
STREAM_TRAIN = 1
STREAM_EVAL = 2
STREAM_SPLIT = 3
STREAM_BATCH = 4


class SamplingError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def rng_stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    """Counter-based generator for one ``(seed, purpose, index)`` key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(purpose), int(index)])))


def worker_count(default: int = 1) -> int:
    value = os.environ.get("DCAP_THREADS")
    if not value:
        return default
    try:
        return max(1, int(value))
    except ValueError:
        return default


@dataclass(eq=False)
class Dataset:
    images: np.ndarray          # (M, S, S, C) uint8
    labels: np.ndarray          # (M,) global class ids
    class_names: tuple
    class_splits: tuple         # split tag per class id
    name: str = "dataset"
    _by_class: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_names = tuple(self.class_names)
        self.class_splits = tuple(self.class_splits)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DatasetError("images must be a uint8 array of shape (M, S, S, C)")
        if len(self.images) != len(self.labels):
            raise DatasetError("one label per image required")
        if len(self.class_names) != len(self.class_splits):
            raise DatasetError("one split tag per class required")
        bad = set(self.class_splits) - set(SPLITS)
        if bad:
            raise DatasetError(f"unknown split tags {sorted(bad)}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label outside the class registry")
        order = np.argsort(self.labels, kind="stable")
        bounds = np.searchsorted(self.labels[order], np.arange(len(self.class_names) + 1))
        for c in range(len(self.class_names)):
            self._by_class[c] = order[bounds[c]:bounds[c + 1]]
        self._base = {c: i for i, c in enumerate(self.classes("meta-train"))}

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def classes(self, split: str) -> np.ndarray:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return np.array([c for c, s in enumerate(self.class_splits) if s == split], dtype=np.int64)

    def indices(self, class_id: int) -> np.ndarray:
        return self._by_class[int(class_id)]

    def split_indices(self, split: str) -> np.ndarray:
        cls = self.classes(split)
        return np.concatenate([self.indices(c) for c in cls]) if len(cls) else np.zeros(0, np.int64)

    @property
    def num_base_classes(self) -> int:
        return len(self._base)

    def base_index(self, class_id) -> np.ndarray:
        """Position among meta-train classes, or ``NO_BASE_LABEL``."""
        ids = np.atleast_1d(class_id)
        return np.array([self._base.get(int(c), NO_BASE_LABEL) for c in ids], dtype=np.int64)

    def as_float(self, index) -> np.ndarray:
        from .numkit import get_default_dtype
        return self.images[index].astype(get_default_dtype()) / 255.0

    def audit(self) -> None:
        """Check split disjointness: per class id and per image content."""
        owner: dict[bytes, str] = {}
        for i in range(len(self)):
            split = self.class_splits[self.labels[i]]
            key = hashlib.sha1(self.images[i].tobytes()).digest()
            prev = owner.setdefault(key, split)
            if prev != split:
                raise DatasetError(f"image {i} duplicates content from split {prev}")
        for a in SPLITS:
            for b in SPLITS:
                if a < b and set(self.classes(a)) & set(self.classes(b)):
                    raise DatasetError(f"splits {a} and {b} share classes")

    def validate_shape(self, n_way: int, k_shot: int, n_query: int, split: str) -> None:
        cls = self.classes(split)
        if len(cls) < n_way:
            raise SamplingError(f"split {split} has {len(cls)} classes, {n_way}-way episodes need {n_way}")
        short = [(int(c), len(self.indices(c))) for c in cls if len(self.indices(c)) < k_shot + n_query]
        if short:
            raise SamplingError(f"classes with fewer than {k_shot + n_query} images in {split}: {short}")


@dataclass
class Episode:
    task_id: int
    class_ids: np.ndarray       # (N,) global class ids; episode label t <-> class_ids[t]
    support: np.ndarray         # (N*K,) image indices, class-major
    query: np.ndarray           # (N*Q,)
    support_labels: np.ndarray
    query_labels: np.ndarray
    support_base: np.ndarray    # base-class index per support image or NO_BASE_LABEL
    query_base: np.ndarray
    shot: int
    queries: int

    @property
    def way(self) -> int:
        return len(self.class_ids)

    @property
    def size(self) -> int:
        return len(self.support) + len(self.query)

    def manifest_line(self) -> str:
        def fmt(a):
            return ",".join(str(int(v)) for v in a)
        return f"{self.task_id}\t{fmt(self.class_ids)}\t{fmt(self.support)}\t{fmt(self.query)}"


def check_episode(ep: Episode, dataset: Dataset | None = None) -> None:
    """Raise AssertionError if an Episode invariant fails."""
    n, k, q = ep.way, ep.shot, ep.queries
    assert len(set(ep.class_ids.tolist())) == n, "classes must be distinct"
    assert len(ep.support) == n * k and len(ep.query) == n * q, "support/query counts"
    assert not set(ep.support.tolist()) & set(ep.query.tolist()), "support and query overlap"
    assert len(set(ep.support.tolist())) == n * k and len(set(ep.query.tolist())) == n * q, "duplicate images"
    assert np.array_equal(np.sort(np.unique(ep.support_labels)), np.arange(n)), "episode labels 0..N-1"
    assert np.array_equal(np.sort(np.unique(ep.query_labels)), np.arange(n)), "episode labels 0..N-1"
    if dataset is not None:
        assert np.array_equal(dataset.labels[ep.support], ep.class_ids[ep.support_labels]), "support labels"
        assert np.array_equal(dataset.labels[ep.query], ep.class_ids[ep.query_labels]), "query labels"


def sample_episode(dataset: Dataset, split: str, n_way: int, k_shot: int, n_query: int,
                   rng: np.random.Generator, task_id: int = 0) -> Episode:
    dataset.validate_shape(n_way, k_shot, n_query, split)
    cls = rng.choice(dataset.classes(split), size=n_way, replace=False)
    support, query = [], []
    for c in cls:
        picked = rng.choice(dataset.indices(c), size=k_shot + n_query, replace=False)
        support.append(picked[:k_shot])
        query.append(picked[k_shot:])
    support = np.concatenate(support)
    query = np.concatenate(query)
    s_lab = np.repeat(np.arange(n_way), k_shot)
    q_lab = np.repeat(np.arange(n_way), n_query)
    return Episode(task_id, cls.astype(np.int64), support, query, s_lab, q_lab,
                   dataset.base_index(dataset.labels[support]), dataset.base_index(dataset.labels[query]),
                   k_shot, n_query)


def consistent_eval_set(dataset: Dataset, split: str, n_way: int, k_shot: int, n_query: int,
                        seed: int, count: int = 1000, workers: int | None = None) -> list[Episode]:
    """The same ordered list of tasks for a given (seed, count), regardless of worker count."""
    dataset.validate_shape(n_way, k_shot, n_query, split)
    workers = worker_count() if workers is None else workers

    def draw(i: int) -> Episode:
        return sample_episode(dataset, split, n_way, k_shot, n_query, rng_stream(seed, STREAM_EVAL, i), task_id=i)

    if workers <= 1:
        return [draw(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(draw, range(count)))


def manifest(episodes: Sequence[Episode]) -> str:
    return "".join(ep.manifest_line() + "\n" for ep in episodes)


def parse_manifest(text: str) -> list[tuple]:
    rows = []
    for line in text.splitlines():
        if not line.strip():
            continue
        task, cls, sup, qry = line.split("\t")
        rows.append((int(task), [int(v) for v in cls.split(",")], [int(v) for v in sup.split(",")],
                     [int(v) for v in qry.split(",")]))
    return rows


def horizontal_split(dataset: Dataset, rate: float, seed: int, classes=None) -> dict:
    """Hold out ``round(rate * n)`` images of each meta-train class for evaluation."""
    if not 0 < rate < 1:
        raise ValueError(f"rate must lie in (0, 1), got {rate}")
    classes = dataset.classes("meta-train") if classes is None else classes
    fit, holdout = [], []
    for c in classes:
        idx = dataset.indices(c)
        n_hold = int(round(rate * len(idx)))
        if n_hold == 0 or n_hold == len(idx):
            raise SamplingError(f"class {int(c)} with {len(idx)} images cannot be split at rate {rate}")
        perm = rng_stream(seed, STREAM_SPLIT, int(c)).permutation(idx)
        holdout.append(np.sort(perm[:n_hold]))
        fit.append(np.sort(perm[n_hold:]))
    return {"fit": np.concatenate(fit), "holdout": np.concatenate(holdout)}
