"""Per-profile codebooks that turn soft profile vectors into discrete IDs.

Each profile m has its own table of K_m code vectors. A vector is assigned to
its nearest code; the codebook is pulled towards assigned vectors through a
stop-gradient term, the vectors are held near their codes by a commitment
term, and a small recommender reads the quantized vectors so that the codes
also carry label signal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numcore as nc
from .numcore import Tensor

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"UIPC"


class Codebook:
    """M code tables; ``tables[m]`` has shape ``(K_m, dim_m)``."""

    def __init__(self, tables: Sequence[np.ndarray]):
        self.tables = [np.array(t, dtype=np.float64) for t in tables]
        if not self.tables:
            raise ValueError("codebook needs at least one table")
        for t in self.tables:
            if t.ndim != 2 or t.shape[0] < 1:
                raise ValueError(f"each table needs K >= 1 rows, got shape {t.shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError("code vectors must be finite")
        self.usage = [np.zeros(len(t), dtype=np.int64) for t in self.tables]
        self.tensors = [Tensor(t, requires_grad=True) for t in self.tables]

    @classmethod
    def random(cls, sizes: Sequence[int], dims: Sequence[int], seed: int,
               scale: float = 0.02) -> "Codebook":
        rng = np.random.default_rng(seed)
        return cls([rng.normal(0, scale, (k, d)) for k, d in zip(sizes, dims)])

    @property
    def M(self) -> int:
        return len(self.tables)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(t) for t in self.tables)

    def reset_usage(self) -> None:
        for u in self.usage:
            u[:] = 0

    def parameters(self) -> list[Tensor]:
        return list(self.tensors)

    def save(self, path, extra: dict | None = None) -> str:
        header = {"M": self.M, "K": list(self.sizes),
                  "dims": [int(t.shape[1]) for t in self.tables], **(extra or {})}
        arrays = {f"table{m}": t for m, t in enumerate(self.tables)}
        arrays.update({f"usage{m}": u.astype(np.float64) for m, u in enumerate(self.usage)})
        return checkpoint.write(path, CODEBOOK_MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "Codebook":
        header, arrays, _ = checkpoint.read(path, CODEBOOK_MAGIC)
        book = cls([arrays[f"table{m}"] for m in range(header["M"])])
        for m in range(header["M"]):
            book.usage[m][:] = arrays[f"usage{m}"].astype(np.int64)
        return book


def sq_distances(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Exact squared distances ``(n, K)`` by explicit differences."""
    x = np.atleast_2d(x)
    return ((x[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)


def nearest(theta_m, table_m) -> int:
    """Index of the closest code; ties go to the lowest index."""
    table_m = np.asarray(table_m, dtype=np.float64)
    if table_m.ndim != 2 or len(table_m) == 0:
        raise ValueError("cannot assign to an empty code table")
    theta_m = np.asarray(theta_m, dtype=np.float64).reshape(-1)
    if theta_m.shape[0] != table_m.shape[1]:
        raise nc.ShapeError(f"vector of width {theta_m.shape[0]} vs codes of width "
                            f"{table_m.shape[1]}")
    return int(np.argmin(sq_distances(theta_m, table_m)[0]))


def nearest_all(x: np.ndarray, table: np.ndarray) -> np.ndarray:
    if len(table) == 0:
        raise ValueError("cannot assign to an empty code table")
    return np.argmin(sq_distances(x, table), axis=1)


def vq_loss(thetas: Sequence[Tensor], book: Codebook, beta: float,
            codes: Sequence[np.ndarray] | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Codebook pull plus beta-weighted commitment, summed over profiles.

    ``thetas[m]`` is ``(n, dim_m)``; the result is the mean over the n rows.
    Pass ``codes`` to hold the assignment fixed.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    total = None
    assigned = []
    for m, th in enumerate(thetas):
        th = nc.as_tensor(th)
        c = nearest_all(th.data, book.tables[m]) if codes is None else np.asarray(codes[m])
        assigned.append(c)
        v = nc.take_rows(book.tensors[m], c)
        pull = nc.tsum((nc.stop_gradient(th) - v) ** 2, axis=-1)
        commit = nc.tsum((th - nc.stop_gradient(v)) ** 2, axis=-1)
        term = nc.mean(pull + commit * beta)
        total = term if total is None else total + term
    return total, assigned


def straight_through(theta_m, table_m, code: np.ndarray | None = None) -> Tensor:
    """Quantized vectors whose backward pass is the identity onto ``theta_m``.

    ``table_m`` may be a Tensor, in which case the code rows used in the
    forward pass receive the same gradient.
    """
    theta_m = nc.as_tensor(theta_m)
    table_m = nc.as_tensor(table_m)
    if code is None:
        code = nearest_all(theta_m.data.reshape(-1, table_m.shape[1]), table_m.data)
        if theta_m.ndim == 1:
            code = code[0]
    return nc.straight_through(theta_m, nc.take_rows(table_m, code))


@dataclass
class SurrogateRecConfig:
    item_dim: int = 8
    hidden: int = 16
    obs_fields: tuple = ("item",)


class SurrogateRec:
    """Two-layer perceptron over (quantized profile vectors, item embedding)."""

    def __init__(self, in_dims: Sequence[int], n_items: int, cfg: SurrogateRecConfig | None = None,
                 seed: int = 0):
        self.cfg = cfg or SurrogateRecConfig()
        unknown = set(self.cfg.obs_fields) - {"item"}
        if unknown:
            raise ValueError(f"unsupported observable fields {sorted(unknown)}")
        rng = np.random.default_rng(seed)
        width = sum(in_dims) + self.cfg.item_dim
        h = self.cfg.hidden
        self.params = {
            "item": Tensor(rng.normal(0, 0.05, (n_items, self.cfg.item_dim)), requires_grad=True),
            "w1": Tensor(rng.normal(0, np.sqrt(2.0 / width), (width, h)), requires_grad=True),
            "b1": Tensor(np.zeros(h), requires_grad=True),
            "w2": Tensor(rng.normal(0, np.sqrt(1.0 / h), (h, 1)), requires_grad=True),
            "b2": Tensor(np.zeros(1), requires_grad=True),
        }

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, quantized: Sequence[Tensor], items) -> Tensor:
        p = self.params
        x = nc.concat(list(quantized) + [nc.take_rows(p["item"], items)], axis=-1)
        h = nc.relu(nc.matmul(x, p["w1"]) + p["b1"])
        return nc.sigmoid(nc.reshape(nc.matmul(h, p["w2"]) + p["b2"], (-1,)))


def surrogate_loss(prob: Tensor, labels) -> Tensor:
    """BCE of the surrogate recommender's probabilities against 0/1 labels."""
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return nc.binary_cross_entropy(prob, labels)


def total_loss(llm_term, vec_term, alpha: float) -> Tensor:
    """Likelihood term plus alpha-weighted quantization term."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return nc.add(llm_term, nc.mul(vec_term, float(alpha)))


@dataclass
class Assignment:
    """Per-user code tuple, ``codes[u, m]``."""

    codes: np.ndarray
    sizes: tuple
    user_ids: np.ndarray | None = None
    dead: list = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1, len(self.sizes))
        if self.user_ids is None:
            self.user_ids = np.arange(len(self.codes))
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        if len(self.user_ids) != len(self.codes):
            raise ValueError("one code tuple per user")
        if len(np.unique(self.user_ids)) != len(self.user_ids):
            raise ValueError("duplicate user ids in assignment")
        for m, k in enumerate(self.sizes):
            if len(self.codes) and (self.codes[:, m].min() < 0 or self.codes[:, m].max() >= k):
                raise ValueError(f"profile {m} index outside [0, {k})")

    def __len__(self):
        return len(self.codes)

    def as_dict(self) -> dict[int, tuple]:
        return {int(u): tuple(int(c) for c in row) for u, row in zip(self.user_ids, self.codes)}


def assign_all(profiles: Sequence[np.ndarray], book: Codebook, user_ids=None) -> Assignment:
    """Nearest-code tuple for every user; refreshes usage counters."""
    codes = []
    book.reset_usage()
    dead = []
    for m, x in enumerate(profiles):
        c = nearest_all(np.asarray(x), book.tables[m])
        book.usage[m][:] = np.bincount(c, minlength=len(book.tables[m]))
        dead.append([int(k) for k in np.flatnonzero(book.usage[m] == 0)])
        codes.append(c)
    if any(dead):
        log.info("assign_all: dead codes per table %s", dead)
    return Assignment(np.stack(codes, axis=1) if codes else np.zeros((0, 0)), book.sizes,
                      user_ids, dead)


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: ``k`` rows of ``x`` chosen by squared-distance sampling."""
    x = np.asarray(x, dtype=np.float64)
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = sq_distances(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def quantization_error(profiles: Sequence[np.ndarray], book: Codebook) -> float:
    """Mean over users of the summed squared distance to the assigned codes."""
    return float(sum(sq_distances(x, t).min(axis=1).mean()
                     for x, t in zip(profiles, book.tables)))


# ----------------------------------------------------------------------------
# clustering scores
# ----------------------------------------------------------------------------

def purity(pred, truth) -> float:
    """Fraction of items whose cluster's majority true class matches their own."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(pred) == 0:
        raise ValueError("purity of an empty labelling")
    hit = 0
    for k in np.unique(pred):
        hit += np.bincount(truth[pred == k]).max()
    return hit / len(pred)


def adjusted_rand_index(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _, a = np.unique(pred, return_inverse=True)
    _, b = np.unique(truth, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return (x * (x - 1) / 2).sum()

    index = pairs(table)
    ra, rb = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    expected = ra * rb / pairs([len(pred)])
    top = (ra + rb) / 2
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


# ----------------------------------------------------------------------------
# joint training alongside soft-profile inference
# ----------------------------------------------------------------------------

@dataclass
class QuantConfig:
    sizes: tuple = (4, 3)
    alpha: float = 1e-3
    beta: float = 1e-3
    lr: float = 1e-3
    pairs_per_user: int = 8
    reseed_noise: float = 0.01
    rec: SurrogateRecConfig = field(default_factory=SurrogateRecConfig)


class JointQuantizer:
    """Adds the weighted quantization term to each inference batch.

    The codebook is seeded by k-means++ from the soft vectors after the first
    epoch; until then the term is zero. Codes unused for a whole epoch are
    re-seeded to a random live vector plus noise.
    """

    def __init__(self, cfg: QuantConfig, widths: Sequence[int], d: int, n_items: int,
                 interactions: list, seed: int = 0):
        self.cfg = cfg
        self.widths = tuple(widths)
        self.dims = [w * d for w in self.widths]
        if len(cfg.sizes) != len(self.widths):
            raise ValueError(f"{len(cfg.sizes)} codebook sizes for {len(self.widths)} profiles")
        self.rng = np.random.default_rng([seed, 7])
        self.book = Codebook.random(cfg.sizes, self.dims, seed)
        self.rec = SurrogateRec(self.dims, n_items, cfg.rec, seed)
        self.interactions = interactions  # per user: (items, labels)
        self.opt = nc.Adam(self.book.parameters() + self.rec.parameters(), lr=cfg.lr)
        self.seeded = False
        self.epoch_usage = [np.zeros(k, dtype=np.int64) for k in cfg.sizes]
        # code each user was trained against on its most recent batch
        self.last_codes = [np.full(len(interactions), -1, dtype=np.int64) for _ in cfg.sizes]
        self.errors: list[float] = []
        self.reseeded: list[int] = []

    def _split(self, theta: Tensor) -> list[Tensor]:
        out, a = [], 0
        n = theta.shape[0]
        for w in self.widths:
            out.append(nc.reshape(theta[:, a:a + w], (n, -1)))
            a += w
        return out

    def _pairs(self, rows):
        users, items, labels = [], [], []
        for j, r in enumerate(rows):
            it, lab = self.interactions[r]
            if len(it) == 0:
                continue
            pick = self.rng.choice(len(it), size=min(self.cfg.pairs_per_user, len(it)),
                                   replace=False)
            users.append(np.full(len(pick), j))
            items.append(it[pick])
            labels.append(lab[pick])
        return np.concatenate(users), np.concatenate(items), np.concatenate(labels)

    def loss(self, epoch: int, rows: np.ndarray, theta: Tensor) -> Tensor:
        if not self.seeded:
            return Tensor(0.0)
        self.opt.zero_grad()
        thetas = self._split(theta)
        vq, codes = vq_loss(thetas, self.book, self.cfg.beta)
        for m, c in enumerate(codes):
            self.epoch_usage[m] += np.bincount(c, minlength=len(self.epoch_usage[m]))
            self.last_codes[m][rows] = c
        quant = [straight_through(t, self.book.tensors[m], codes[m]) for m, t in enumerate(thetas)]
        who, items, labels = self._pairs(rows)
        prob = self.rec.forward([nc.take_rows(q, who) for q in quant], items)
        vec = nc.add(vq, surrogate_loss(prob, labels))
        return nc.mul(vec, self.cfg.alpha)

    def after_step(self) -> None:
        if self.seeded:
            self.opt.step()
            for m, t in enumerate(self.book.tensors):
                self.book.tables[m] = t.data

    def assignment_drift(self, table) -> float:
        """Fraction of (user, profile) codes that change when re-assigned on final vectors."""
        changed = [nearest_all(table.profile(m), self.book.tables[m]) != self.last_codes[m]
                   for m in range(len(self.widths))]
        return float(np.mean(changed))

    def epoch_end(self, epoch: int, table) -> None:
        profiles = [table.profile(m) for m in range(len(self.widths))]
        if not self.seeded:
            for m, x in enumerate(profiles):
                self.book.tensors[m].data[:] = kmeans_pp(x, self.cfg.sizes[m], self.rng)
            self.seeded = True
        else:
            n = 0
            for m, x in enumerate(profiles):
                dead = np.flatnonzero(self.epoch_usage[m] == 0)
                for k in dead:
                    src = x[self.rng.integers(len(x))]
                    self.book.tensors[m].data[k] = src + self.rng.normal(
                        0, self.cfg.reseed_noise, src.shape)
                n += len(dead)
            self.reseeded.append(n)
        for u in self.epoch_usage:
            u[:] = 0
        self.errors.append(quantization_error(profiles, self.book))
