"""Interaction datasets: planted-profile generator, review ingestion, preprocessing.

The planted generator is a small causal world: every user draws one latent
class per profile category, and the class drives which items the user consumes
and how they rate them. The drawn classes live in :class:`GroundTruth`, which
refuses to be read from inside :func:`training_path` blocks.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FOLDS = ("train", "valid", "test")
UNASSIGNED = -1


class TaintError(RuntimeError):
    """Planted ground truth was read from a training-path operation."""


class IngestError(ValueError):
    pass


_taint = threading.local()


@contextmanager
def training_path(name: str = "training"):
    """Mark the enclosed block as a training path; ground-truth reads raise."""
    prev = getattr(_taint, "stack", ())
    _taint.stack = prev + (name,)
    try:
        yield
    finally:
        _taint.stack = prev


def in_training_path() -> bool:
    return bool(getattr(_taint, "stack", ()))


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: int
    timestamp: int

    def __post_init__(self):
        if self.rating not in (1, 2, 3, 4, 5):
            raise ValueError(f"rating must be in 1..5, got {self.rating}")
        if self.user_id < 0 or self.item_id < 0 or self.timestamp < 0:
            raise ValueError("ids and timestamp must be non-negative")


@dataclass
class PlantedProfileSpec:
    """Generative knobs for the planted world.

    ``class_counts`` holds G_1..G_M. Items are split into M contiguous
    segments, one per category, and segment m into G_m affinity buckets with
    Zipf popularity inside each bucket.
    """

    class_counts: tuple[int, ...] = (4, 3)
    affinity_weight: float = 0.7
    zipf_exponent: float = 1.0
    rating_boost: float = 1.0
    seq_len: tuple[int, int] = (30, 30)
    rating_center: float = 3.3
    rating_gap: float = 1.8
    rating_sd: float = 0.7
    rating_sd_gap: float = 0.2

    def __post_init__(self):
        self.class_counts = tuple(int(g) for g in self.class_counts)
        self.seq_len = (int(self.seq_len[0]), int(self.seq_len[1]))
        if len(self.class_counts) < 1:
            raise ValueError("need at least one profile category")
        if any(g < 2 for g in self.class_counts):
            raise ValueError(f"every category needs >= 2 classes, got {self.class_counts}")
        if not 0.0 <= self.affinity_weight <= 1.0:
            raise ValueError("affinity_weight must be a probability")
        if not 1 <= self.seq_len[0] <= self.seq_len[1]:
            raise ValueError(f"bad sequence length range {self.seq_len}")

    @property
    def M(self) -> int:
        return len(self.class_counts)


class GroundTruth:
    """Planted classes and catalog structure; readable only outside training."""

    def __init__(self, user_classes: np.ndarray, item_segment: np.ndarray,
                 item_bucket: np.ndarray, item_weight: np.ndarray, spec: PlantedProfileSpec):
        self._user_classes = np.asarray(user_classes, dtype=np.int64)
        self._item_segment = np.asarray(item_segment, dtype=np.int64)
        self._item_bucket = np.asarray(item_bucket, dtype=np.int64)
        self._item_weight = np.asarray(item_weight, dtype=np.float64)
        self.spec = spec
        self.reads = 0

    def _guard(self):
        if in_training_path():
            raise TaintError("planted ground truth read inside a training path")
        self.reads += 1

    @property
    def user_classes(self) -> np.ndarray:
        self._guard()
        return self._user_classes

    @property
    def catalog(self) -> dict[str, np.ndarray]:
        self._guard()
        return {"segment": self._item_segment, "bucket": self._item_bucket,
                "weight": self._item_weight}

    def subset(self, users: np.ndarray, items: np.ndarray) -> "GroundTruth":
        return GroundTruth(self._user_classes[users], self._item_segment[items],
                           self._item_bucket[items], self._item_weight[items], self.spec)

    def to_json(self) -> dict:
        return {"format": "userip-truth", "version": FORMAT_VERSION,
                "class_counts": list(self.spec.class_counts),
                "user_classes": self._user_classes.tolist(),
                "item_segment": self._item_segment.tolist(),
                "item_bucket": self._item_bucket.tolist(),
                "item_weight": self._item_weight.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        spec = PlantedProfileSpec(class_counts=tuple(obj["class_counts"]))
        return cls(np.array(obj["user_classes"]), np.array(obj["item_segment"]),
                   np.array(obj["item_bucket"]), np.array(obj["item_weight"]), spec)


@dataclass
class Dataset:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int
    user_labels: list = field(default_factory=list)
    item_labels: list = field(default_factory=list)
    folds: np.ndarray | None = None
    truth: GroundTruth | None = None
    report: dict | None = None
    # public catalog metadata (e.g. product category), -1 when unknown
    item_category: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not self.user_labels:
            self.user_labels = list(range(self.n_users))
        if not self.item_labels:
            self.item_labels = list(range(self.n_items))
        if self.folds is None:
            self.folds = np.full(len(self.users), UNASSIGNED, dtype=np.int64)
        if self.item_category is not None:
            self.item_category = np.asarray(self.item_category, dtype=np.int64)
            if len(self.item_category) != self.n_items:
                raise ValueError("item_category needs one entry per item")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def records(self) -> list[InteractionRecord]:
        return [InteractionRecord(int(u), int(i), int(r), int(t)) for u, i, r, t in
                zip(self.users, self.items, self.ratings, self.timestamps)]

    @property
    def labels(self) -> np.ndarray:
        return binarize_array(self.ratings)

    def fold_mask(self, fold: str | None) -> np.ndarray:
        if fold is None:
            return np.ones(len(self), dtype=bool)
        return self.folds == FOLDS.index(fold)

    def user_sequences(self, fold: str | None = "train") -> list[np.ndarray]:
        """Per-user item ids in timestamp order, restricted to ``fold``."""
        sel = np.flatnonzero(self.fold_mask(fold))
        order = sel[np.lexsort((self.timestamps[sel], self.users[sel]))]
        seqs = [np.zeros(0, dtype=np.int64) for _ in range(self.n_users)]
        if len(order) == 0:
            return seqs
        users = self.users[order]
        cuts = np.flatnonzero(np.diff(users)) + 1
        for chunk in np.split(order, cuts):
            seqs[int(self.users[chunk[0]])] = self.items[chunk]
        return seqs

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.users, self.items, self.ratings, self.timestamps, self.folds):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return h.hexdigest()


def binarize(rating: int) -> int:
    """Positive label iff the rating is strictly greater than 3."""
    if rating not in (1, 2, 3, 4, 5):
        raise ValueError(f"rating must be in 1..5, got {rating!r}")
    return int(rating > 3)


def binarize_array(ratings) -> np.ndarray:
    r = np.asarray(ratings)
    if r.size and (r.min() < 1 or r.max() > 5):
        raise ValueError("ratings must be in 1..5")
    return (r > 3).astype(np.int64)


# ----------------------------------------------------------------------------
# planted generator
# ----------------------------------------------------------------------------

def _catalog(spec: PlantedProfileSpec, n_items: int, rng: np.random.Generator):
    M = spec.M
    seg_edges = np.linspace(0, n_items, M + 1).round().astype(int)
    segment = np.zeros(n_items, dtype=np.int64)
    bucket = np.zeros(n_items, dtype=np.int64)
    weight = np.zeros(n_items)
    members: list[list[np.ndarray]] = []
    for m in range(M):
        lo, hi = seg_edges[m], seg_edges[m + 1]
        segment[lo:hi] = m
        b_edges = np.linspace(lo, hi, spec.class_counts[m] + 1).round().astype(int)
        seg_members = []
        for g in range(spec.class_counts[m]):
            ids = np.arange(b_edges[g], b_edges[g + 1])
            if len(ids) < 2:
                raise ValueError(f"affinity bucket {g} of category {m} has {len(ids)} item(s); "
                                 f"need at least 2 (raise n_items)")
            bucket[ids] = g
            ranks = rng.permutation(len(ids)) + 1
            w = 1.0 / ranks ** spec.zipf_exponent
            weight[ids] = w / w.sum()
            seg_members.append(ids)
        members.append(seg_members)
    return segment, bucket, weight, members


def _draw_user(spec: PlantedProfileSpec, members, weight, classes, rng):
    length = int(rng.integers(spec.seq_len[0], spec.seq_len[1] + 1))
    seen: set[int] = set()
    items, matches = [], []
    for _ in range(length):
        for _attempt in range(64):
            m = int(rng.integers(spec.M))
            if rng.random() < spec.affinity_weight:
                g = int(classes[m])
            else:
                g = int(rng.integers(spec.class_counts[m]))
            ids = members[m][g]
            item = int(rng.choice(ids, p=weight[ids]))
            if item not in seen:
                break
        seen.add(item)
        items.append(item)
        matches.append(g == classes[m])
    matches = np.array(matches)
    half_gap = spec.rating_boost * spec.rating_gap / 2
    half_sd = spec.rating_boost * spec.rating_sd_gap / 2
    mu = np.where(matches, spec.rating_center + half_gap, spec.rating_center - half_gap)
    sd = np.where(matches, spec.rating_sd - half_sd, spec.rating_sd + half_sd)
    ratings = np.clip(np.round(rng.normal(mu, sd)), 1, 5).astype(np.int64)
    return np.array(items, dtype=np.int64), ratings


def generate_synthetic(spec: PlantedProfileSpec, n_users: int, n_items: int, seed: int) -> Dataset:
    """Sample a planted-profile dataset; deterministic in ``seed``.

    Each user uses its own stream derived from ``(seed, user_id)`` so users can
    be generated independently.
    """
    if n_users <= 0 or n_items <= 0:
        raise ValueError("n_users and n_items must be positive")
    seed = int(seed) & (2**64 - 1)
    cat_rng = np.random.default_rng(np.random.SeedSequence([seed, 2**32]))
    segment, bucket, weight, members = _catalog(spec, n_items, cat_rng)
    classes = np.zeros((n_users, spec.M), dtype=np.int64)
    cols = {k: [] for k in ("u", "i", "r", "t")}
    for u in range(n_users):
        rng = np.random.default_rng(np.random.SeedSequence([seed, u]))
        classes[u] = [rng.integers(g) for g in spec.class_counts]
        items, ratings = _draw_user(spec, members, weight, classes[u], rng)
        cols["u"].append(np.full(len(items), u))
        cols["i"].append(items)
        cols["r"].append(ratings)
        cols["t"].append(np.arange(len(items)))
    truth = GroundTruth(classes, segment, bucket, weight, spec)
    return Dataset(np.concatenate(cols["u"]), np.concatenate(cols["i"]), np.concatenate(cols["r"]),
                   np.concatenate(cols["t"]), n_users, n_items, truth=truth,
                   item_category=segment.copy())


def markov_corpus(transition: np.ndarray, n_seqs: int, length: int, seed: int) -> Dataset:
    """Sequences from a first-order item chain started at its stationary law."""
    P = np.asarray(transition, dtype=np.float64)
    n = P.shape[0]
    evals, evecs = np.linalg.eig(P.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
    pi = pi / pi.sum()
    rng = np.random.default_rng(seed)
    cum = np.cumsum(P, axis=1)
    items = np.zeros((n_seqs, length), dtype=np.int64)
    items[:, 0] = rng.choice(n, size=n_seqs, p=pi)
    for t in range(1, length):
        r = rng.random(n_seqs)
        items[:, t] = (r[:, None] > cum[items[:, t - 1]]).sum(axis=1).clip(max=n - 1)
    users = np.repeat(np.arange(n_seqs), length)
    ds = Dataset(users, items.reshape(-1), np.full(users.size, 4), np.tile(np.arange(length), n_seqs),
                 n_seqs, n)
    ds.folds[:] = 0
    return ds


# ----------------------------------------------------------------------------
# preprocessing
# ----------------------------------------------------------------------------

def subset(d: Dataset, keep: np.ndarray) -> Dataset:
    """Keep records where ``keep`` is true and densely re-index users/items."""
    keep = np.asarray(keep, dtype=bool)
    users, items = d.users[keep], d.items[keep]
    kept_u = np.unique(users)
    kept_i = np.unique(items)
    u_map = np.full(d.n_users, -1, dtype=np.int64)
    u_map[kept_u] = np.arange(len(kept_u))
    i_map = np.full(d.n_items, -1, dtype=np.int64)
    i_map[kept_i] = np.arange(len(kept_i))
    truth = d.truth.subset(kept_u, kept_i) if d.truth is not None else None
    return Dataset(u_map[users], i_map[items], d.ratings[keep], d.timestamps[keep],
                   len(kept_u), len(kept_i),
                   user_labels=[d.user_labels[u] for u in kept_u],
                   item_labels=[d.item_labels[i] for i in kept_i],
                   folds=d.folds[keep].copy(), truth=truth, report=d.report,
                   item_category=None if d.item_category is None else d.item_category[kept_i])


def filter_cold(d: Dataset, min_count: int = 4) -> Dataset:
    """Drop users and items with fewer than ``min_count`` records, to a fixpoint."""
    keep = np.ones(len(d), dtype=bool)
    while True:
        u_cnt = np.bincount(d.users[keep], minlength=d.n_users)
        i_cnt = np.bincount(d.items[keep], minlength=d.n_items)
        new = keep & (u_cnt[d.users] >= min_count) & (i_cnt[d.items] >= min_count)
        if np.array_equal(new, keep):
            break
        keep = new
    if keep.all():
        return d
    return subset(d, keep)


def split(d: Dataset, ratios=(8, 1, 1), seed: int = 0) -> Dataset:
    """Per-user stratified random train/valid/test assignment.

    Fold sizes per user use largest-remainder rounding with random tie-breaks,
    and any user with records keeps at least one training record.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    frac = ratios / ratios.sum()
    rng = np.random.default_rng(seed)
    folds = np.full(len(d), UNASSIGNED, dtype=np.int64)
    order = np.argsort(d.users, kind="stable")
    cuts = np.flatnonzero(np.diff(d.users[order])) + 1
    for idx in np.split(order, cuts):
        if len(idx) == 0:
            continue
        n = len(idx)
        raw = frac * n
        counts = np.floor(raw).astype(int)
        rem = n - counts.sum()
        tie = rng.random(3)
        for j in np.lexsort((tie, -(raw - counts)))[:rem]:
            counts[j] += 1
        if counts[0] == 0:
            counts[np.argmax(counts)] -= 1
            counts[0] = 1
        perm = rng.permutation(idx)
        folds[perm] = np.repeat(np.arange(3), counts)
    return replace(d, folds=folds)


# ----------------------------------------------------------------------------
# files
# ----------------------------------------------------------------------------

_ALIASES = {
    "user": ("user", "user_id", "reviewerID"),
    "item": ("item", "item_id", "asin", "business_id"),
    "rating": ("rating", "overall", "stars"),
    "timestamp": ("timestamp", "unixReviewTime", "time"),
}


def _field(obj: dict, name: str):
    for key in _ALIASES[name]:
        if key in obj:
            return obj[key]
    raise KeyError(name)


def ingest_reviews(path, strict: bool = False) -> Dataset:
    """Read line-delimited JSON reviews into a dense-id dataset.

    Malformed lines are skipped and their 1-based numbers collected in
    ``dataset.report["malformed_lines"]``; ratings outside 1..5 are counted in
    ``report["rejected_ratings"]``. With ``strict`` the first malformed line
    raises :class:`IngestError`.
    """
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    cols: dict[str, list] = {"u": [], "i": [], "r": [], "t": []}
    malformed: list[int] = []
    rejected: list[int] = []
    seen: set[tuple] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("not an object")
                if "format" in obj and lineno == 1:
                    continue
                user, item = str(_field(obj, "user")), str(_field(obj, "item"))
                rating = float(_field(obj, "rating"))
                ts = int(_field(obj, "timestamp"))
                if ts < 0 or rating != int(rating):
                    raise ValueError("bad timestamp or non-integer rating")
            except (ValueError, KeyError, TypeError) as exc:
                if strict:
                    raise IngestError(f"line {lineno}: {exc}") from exc
                malformed.append(lineno)
                continue
            if not 1 <= rating <= 5:
                rejected.append(lineno)
                continue
            key = (user, item, ts)
            if key in seen:
                continue
            seen.add(key)
            cols["u"].append(user_ids.setdefault(user, len(user_ids)))
            cols["i"].append(item_ids.setdefault(item, len(item_ids)))
            cols["r"].append(int(rating))
            cols["t"].append(ts)
    if malformed or rejected:
        log.warning("ingest %s: %d malformed line(s), %d rating(s) out of range",
                    path, len(malformed), len(rejected))
    return Dataset(np.array(cols["u"], dtype=np.int64), np.array(cols["i"], dtype=np.int64),
                   np.array(cols["r"], dtype=np.int64), np.array(cols["t"], dtype=np.int64),
                   len(user_ids), len(item_ids),
                   user_labels=list(user_ids), item_labels=list(item_ids),
                   report={"malformed_lines": malformed, "rejected_ratings": len(rejected),
                           "rejected_lines": rejected})


def _header(kind: str, **extra) -> str:
    return json.dumps({"format": f"userip-{kind}", "version": FORMAT_VERSION, **extra}) + "\n"


def _check_header(line: str, kind: str) -> dict:
    head = json.loads(line)
    if head.get("format") != f"userip-{kind}":
        raise IngestError(f"expected userip-{kind} file, got {head.get('format')!r}")
    if head.get("version") != FORMAT_VERSION:
        raise IngestError(f"unsupported userip-{kind} version {head.get('version')}")
    return head


def save_dataset(d: Dataset, directory) -> dict[str, Path]:
    """Write interactions, id-map sidecar and split manifest (and truth, if any)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"interactions": out / "interactions.jsonl", "idmap": out / "idmap.jsonl",
             "split": out / "split.txt"}
    with open(paths["interactions"], "w") as fh:
        fh.write(_header("interactions", n_users=d.n_users, n_items=d.n_items))
        for u, i, r, t in zip(d.users.tolist(), d.items.tolist(), d.ratings.tolist(),
                              d.timestamps.tolist()):
            fh.write(f'{{"user": {u}, "item": {i}, "rating": {r}, "timestamp": {t}}}\n')
    with open(paths["idmap"], "w") as fh:
        fh.write(_header("idmap"))
        for kind, labels in (("user", d.user_labels), ("item", d.item_labels)):
            for dense, orig in enumerate(labels):
                row = {"kind": kind, "id": dense, "label": orig}
                if kind == "item" and d.item_category is not None:
                    row["category"] = int(d.item_category[dense])
                fh.write(json.dumps(row) + "\n")
    with open(paths["split"], "w") as fh:
        fh.write(_header("split"))
        fh.writelines(("unassigned" if f < 0 else FOLDS[f]) + "\n" for f in d.folds.tolist())
    if d.truth is not None:
        paths["truth"] = out / "planted_truth.json"
        paths["truth"].write_text(json.dumps(d.truth.to_json()))
    return paths


def load_dataset(directory) -> Dataset:
    src = Path(directory)
    with open(src / "interactions.jsonl") as fh:
        head = _check_header(fh.readline(), "interactions")
        rows = [json.loads(line) for line in fh if line.strip()]
    arr = {k: np.array([r[k] for r in rows], dtype=np.int64)
           for k in ("user", "item", "rating", "timestamp")}
    users, items, cats = [], [], []
    with open(src / "idmap.jsonl") as fh:
        _check_header(fh.readline(), "idmap")
        for line in fh:
            obj = json.loads(line)
            (users if obj["kind"] == "user" else items).append(obj["label"])
            if obj["kind"] == "item" and "category" in obj:
                cats.append(obj["category"])
    with open(src / "split.txt") as fh:
        _check_header(fh.readline(), "split")
        folds = np.array([UNASSIGNED if s.strip() == "unassigned" else FOLDS.index(s.strip())
                          for s in fh if s.strip()], dtype=np.int64)
    if len(folds) != len(rows):
        raise IngestError(f"split manifest has {len(folds)} entries for {len(rows)} records")
    truth = None
    if (src / "planted_truth.json").exists():
        truth = GroundTruth.from_json(json.loads((src / "planted_truth.json").read_text()))
    return Dataset(arr["user"], arr["item"], arr["rating"], arr["timestamp"],
                   head["n_users"], head["n_items"], user_labels=users, item_labels=items,
                   folds=folds, truth=truth, item_category=np.array(cats) if cats else None)


def from_records(records: Iterable[InteractionRecord]) -> Dataset:
    recs = list(records)
    if not recs:
        return Dataset(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), 0, 0)
    u = np.array([r.user_id for r in recs])
    i = np.array([r.item_id for r in recs])
    return Dataset(u, i, np.array([r.rating for r in recs]), np.array([r.timestamp for r in recs]),
                   int(u.max()) + 1, int(i.max()) + 1)


def align_items(d: Dataset, reference: Dataset) -> Dataset:
    """Re-express ``d`` in ``reference``'s item index (matched by item label).

    Records whose item is unknown to ``reference`` are dropped.
    """
    pos = {label: i for i, label in enumerate(reference.item_labels)}
    mapped = np.array([pos.get(d.item_labels[i], -1) for i in range(d.n_items)], dtype=np.int64)
    items = mapped[d.items] if len(d) else d.items
    keep = items >= 0
    return Dataset(d.users[keep], items[keep], d.ratings[keep], d.timestamps[keep], d.n_users,
                   reference.n_items, user_labels=list(d.user_labels),
                   item_labels=list(reference.item_labels), folds=d.folds[keep].copy(),
                   item_category=reference.item_category)


def planted_world(spec: PlantedProfileSpec, n_users: int, n_items: int, seed: int,
                  n_background: int = 0, ratios=(8, 1, 1), min_count: int = 4
                  ) -> tuple[Dataset, Dataset | None]:
    """Evaluation dataset plus an optional background corpus from the same world.

    The background users share the catalog but are disjoint from the evaluation
    users; their classes are discarded. The evaluation set is cold-filtered and
    then split; the background set is aligned to its item index.
    """
    full = generate_synthetic(spec, n_users + n_background, n_items, seed)
    users = full.users
    main = subset(full, users < n_users)
    main = split(filter_cold(main, min_count), ratios, seed)
    if not n_background:
        return main, None
    bg = subset(full, users >= n_users)
    bg.truth = None
    bg = align_items(bg, main)
    bg.folds[:] = 0
    return main, bg


def take_users(d: Dataset, keep_users) -> Dataset:
    """Records of the selected users; user and item indices are left unchanged."""
    keep = np.isin(d.users, np.asarray(keep_users, dtype=np.int64))
    return Dataset(d.users[keep], d.items[keep], d.ratings[keep], d.timestamps[keep], d.n_users,
                   d.n_items, user_labels=list(d.user_labels), item_labels=list(d.item_labels),
                   folds=d.folds[keep].copy(), item_category=d.item_category)
