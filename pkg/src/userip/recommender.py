"""DCN-style CTR model over sparse fields, plus AUC / logloss and reports.

Fields are user id, item id, one field per profile index (with a reserved
all-zero "unknown" row) and, for the pass-through ablation, raw profile
vectors projected to the embedding width.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import checkpoint
from . import numcore as nc
from .bank import FeatureBank
from .corpus import Dataset
from .numcore import Tensor

log = logging.getLogger(__name__)

DCN_MAGIC = b"UIPD"
UNKNOWN_INDEX = -1


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------

def _check_binary(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return labels.astype(np.int64)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative; ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # midranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def logloss(scores, labels, eps: float = 1e-12) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1 - eps)
    y = _check_binary(labels)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def relative_improvement(model_auc: float, base_auc: float, model_ll: float,
                         base_ll: float) -> tuple[float, float]:
    """Percent gains: AUC over the 0.5 floor, logloss relative to the model's."""
    if base_auc <= 0.5:
        raise ValueError(f"base AUC {base_auc} <= 0.5: relative AUC gain undefined")
    auc_pct = ((model_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0
    ll_pct = (base_ll - model_ll) / model_ll * 100.0
    return auc_pct, ll_pct


# ----------------------------------------------------------------------------
# data
# ----------------------------------------------------------------------------

@dataclass
class CTRData:
    """Column-oriented examples; ``codes[:, m] == -1`` marks an unknown index."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    codes: np.ndarray | None = None
    dense: list | None = None  # per profile, (n, dim) raw vectors

    def __post_init__(self):
        self.labels = _check_binary(self.labels)
        if self.codes is not None:
            self.codes = np.asarray(self.codes, dtype=np.int64).reshape(len(self.labels), -1)

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "CTRData":
        return CTRData(self.users[idx], self.items[idx], self.labels[idx],
                       None if self.codes is None else self.codes[idx],
                       None if self.dense is None else [d[idx] for d in self.dense])


@dataclass
class CTRExample:
    user_id: int
    item_id: int
    codes: tuple
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def examples_from(data: Dataset, fold: str, bank: FeatureBank | None = None,
                  profiles: Sequence[np.ndarray] | None = None) -> CTRData:
    """CTR examples of one fold, with bank indices or raw per-user profile vectors."""
    sel = data.fold_mask(fold)
    users, items = data.users[sel], data.items[sel]
    codes = None
    if bank is not None:
        known = np.isin(np.unique(data.users), bank.user_ids)
        if not known.any():
            raise ValueError("bank and dataset share no users; was the bank built from "
                             "another dataset?")
        codes = bank.lookup_many(users)
    dense = None if profiles is None else [np.asarray(p)[users] for p in profiles]
    return CTRData(users, items, data.labels[sel], codes, dense)


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------

@dataclass
class DCNConfig:
    emb_dim: int = 8
    n_cross: int = 3
    mlp: tuple = (16, 16)
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 40
    patience: int = 5
    logit_clip: float = 30.0

    def __post_init__(self):
        self.mlp = tuple(int(h) for h in self.mlp)


class DCNParams:
    """Embedding tables, cross weights, MLP, and the zero-initialized head."""

    def __init__(self, cfg: DCNConfig, n_users: int, n_items: int, code_sizes: Sequence[int] = (),
                 dense_dims: Sequence[int] = (), seed: int = 0):
        self.cfg = cfg
        self.n_users, self.n_items = int(n_users), int(n_items)
        self.code_sizes = tuple(int(k) for k in code_sizes)
        self.dense_dims = tuple(int(d) for d in dense_dims)
        e = cfg.emb_dim
        # one stream per field so adding fields leaves the others' init unchanged
        fields = ["user", "item"] + [f"code{m}" for m in range(len(self.code_sizes))] \
            + [f"dense{m}" for m in range(len(self.dense_dims))]
        self.fields = fields
        streams = {f: np.random.default_rng([seed, i]) for i, f in enumerate(fields)}
        tail = np.random.default_rng([seed, 1000])
        a: dict[str, np.ndarray] = {
            "emb.user": streams["user"].normal(0, 0.05, (self.n_users, e)),
            "emb.item": streams["item"].normal(0, 0.05, (self.n_items, e)),
        }
        for m, k in enumerate(self.code_sizes):
            t = streams[f"code{m}"].normal(0, 0.05, (k + 1, e))
            t[k] = 0.0  # reserved unknown row
            a[f"emb.code{m}"] = t
        for m, d in enumerate(self.dense_dims):
            a[f"proj.dense{m}"] = streams[f"dense{m}"].normal(0, 1 / np.sqrt(d), (d, e))
        # scales depend on emb_dim only, so extra fields leave id-field weights unchanged
        width = e * len(fields)
        for l in range(cfg.n_cross):
            a[f"cross{l}.w"] = np.concatenate([streams[f].normal(0, 1 / np.sqrt(2 * e), e)
                                               for f in fields])
            a[f"cross{l}.b"] = np.zeros(width)
        prev = width
        for i, h in enumerate(cfg.mlp):
            if i == 0:
                w = np.concatenate([streams[f].normal(0, np.sqrt(1 / e), (e, h))
                                    for f in fields])
            else:
                w = tail.normal(0, np.sqrt(2 / prev), (prev, h))
            a[f"mlp{i}.w"] = w
            a[f"mlp{i}.b"] = np.zeros(h)
            prev = h
        a["out.w"] = np.zeros(width + prev)
        a["out.b"] = np.zeros(1)
        self.arrays = a
        self.tensors = {k: Tensor(v, requires_grad=True) for k, v in a.items()}
        self.frozen_rows = {f"emb.code{m}": k for m, k in enumerate(self.code_sizes)}

    @property
    def width(self) -> int:
        return self.cfg.emb_dim * len(self.fields)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def pin_unknown_rows(self) -> None:
        """Keep the reserved unknown rows at zero after an optimizer step."""
        for name, row in self.frozen_rows.items():
            self.tensors[name].data[row] = 0.0
            if self.tensors[name].grad is not None:
                self.tensors[name].grad[row] = 0.0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            self.tensors[k].data[...] = v

    def save(self, path, extra: dict | None = None) -> str:
        header = {"config": asdict(self.cfg), "n_users": self.n_users, "n_items": self.n_items,
                  "code_sizes": list(self.code_sizes), "dense_dims": list(self.dense_dims),
                  **(extra or {})}
        return checkpoint.write(path, DCN_MAGIC, header, {k: t.data for k, t in
                                                          self.tensors.items()})

    @classmethod
    def load(cls, path) -> "DCNParams":
        header, arrays, _ = checkpoint.read(path, DCN_MAGIC)
        cfg = DCNConfig(**header["config"])
        p = cls(cfg, header["n_users"], header["n_items"], header["code_sizes"],
                header["dense_dims"])
        p.restore(arrays)
        return p


def _code_rows(codes: np.ndarray, sizes: Sequence[int]) -> np.ndarray:
    rows = codes.copy()
    for m, k in enumerate(sizes):
        col = rows[:, m]
        if np.any((col < UNKNOWN_INDEX) | (col >= k)):
            raise ValueError(f"profile {m} index outside [0, {k}) and not unknown")
        col[col == UNKNOWN_INDEX] = k
    return rows


def embed(params: DCNParams, data: CTRData) -> Tensor:
    """Concatenated field embeddings ``x0`` of shape ``(n, emb_dim * fields)``."""
    t = params.tensors
    if np.any(data.users < 0) or np.any(data.users >= params.n_users):
        raise ValueError("user id outside the embedding table")
    if np.any(data.items < 0) or np.any(data.items >= params.n_items):
        raise ValueError("item id outside the embedding table")
    parts = [nc.take_rows(t["emb.user"], data.users), nc.take_rows(t["emb.item"], data.items)]
    if params.code_sizes:
        if data.codes is None or data.codes.shape[1] != len(params.code_sizes):
            raise ValueError("model expects profile index fields")
        rows = _code_rows(data.codes, params.code_sizes)
        parts += [nc.take_rows(t[f"emb.code{m}"], rows[:, m])
                  for m in range(len(params.code_sizes))]
    if params.dense_dims:
        if data.dense is None or len(data.dense) != len(params.dense_dims):
            raise ValueError("model expects raw profile vector fields")
        parts += [nc.matmul(np.asarray(x, dtype=np.float64), t[f"proj.dense{m}"])
                  for m, x in enumerate(data.dense)]
    return nc.concat(parts, axis=-1)


def cross_layer(x0, xl, w, b) -> Tensor:
    """``x0 * (xl . w) + b + xl`` row-wise."""
    x0, xl = nc.as_tensor(x0), nc.as_tensor(xl)
    w = nc.as_tensor(w)
    if x0.shape != xl.shape or xl.shape[-1] != w.shape[-1]:
        raise nc.ShapeError(f"cross layer shapes {x0.shape}, {xl.shape}, {w.shape}")
    s = nc.matmul(xl, nc.reshape(w, (-1, 1)))  # (n, 1)
    return x0 * s + b + xl


def logits(params: DCNParams, data: CTRData, training: bool = False, rng=None) -> Tensor:
    t = params.tensors
    x0 = embed(params, data)
    x = x0
    for l in range(params.cfg.n_cross):
        x = cross_layer(x0, x, t[f"cross{l}.w"], t[f"cross{l}.b"])
    h = x0
    for i in range(len(params.cfg.mlp)):
        h = nc.relu(nc.matmul(h, t[f"mlp{i}.w"]) + t[f"mlp{i}.b"])
        h = nc.dropout(h, params.cfg.dropout, rng, training)
    z = nc.matmul(nc.concat([x, h], axis=-1), nc.reshape(t["out.w"], (-1, 1))) + t["out.b"]
    z = nc.reshape(z, (-1,))
    return nc.clip(z, -params.cfg.logit_clip, params.cfg.logit_clip)


def predict(params: DCNParams, data: CTRData, batch_size: int = 4096) -> np.ndarray:
    out = []
    with nc.no_grad():
        for i in range(0, len(data), batch_size):
            out.append(nc.sigmoid(logits(params, data.take(slice(i, i + batch_size)))).data)
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class RecLog:
    train_loss: list = field(default_factory=list)
    valid_auc: list = field(default_factory=list)
    best_epoch: int = -1
    best_auc: float = float("nan")


def train_rec(train: CTRData, valid: CTRData, params: DCNParams, seed: int = 0,
              checkpoint_path=None) -> tuple[DCNParams, RecLog]:
    """Mean BCE with Adam; keeps the best-validation-AUC weights (early stopping)."""
    cfg = params.cfg
    rng = np.random.default_rng([seed, 99])
    opt = nc.Adam(params.parameters(), lr=cfg.lr)
    rec = RecLog()
    best = None
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train))
        total = 0.0
        for b in range(0, len(train), cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            batch = train.take(idx)
            opt.zero_grad()
            with nc.tape_scope():
                prob = nc.sigmoid(logits(params, batch, training=True, rng=rng))
                loss = nc.binary_cross_entropy(prob, batch.labels)
                nc.backward(loss)
            params.pin_unknown_rows()
            opt.step()
            params.pin_unknown_rows()
            total += loss.item() * len(idx)
        rec.train_loss.append(total / len(train))
        score = auc(predict(params, valid), valid.labels)
        rec.valid_auc.append(score)
        log.info("train_rec epoch %d loss %.4f valid auc %.4f", epoch, rec.train_loss[-1], score)
        if best is None or score > rec.best_auc:
            rec.best_auc, rec.best_epoch, best = score, epoch, params.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    params.restore(best)
    if checkpoint_path is not None:
        params.save(checkpoint_path, {"seed": seed, "best_epoch": rec.best_epoch})
    return params, rec


def evaluate(params: DCNParams, data: CTRData) -> dict:
    p = predict(params, data)
    return {"auc": auc(p, data.labels), "logloss": logloss(p, data.labels)}


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

METRIC_COLUMNS = ["run_id", "variant", "fold", "auc", "logloss", "seed", "config_hash"]
IMPROVEMENT_COLUMNS = ["run_id", "variant", "base_variant", "auc", "base_auc", "auc_impr_pct",
                       "logloss", "base_logloss", "logloss_impr_pct", "seed", "config_hash"]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_csv(path, columns: list[str], rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def improvement_rows(metrics: list[dict], base_variant: str, fold: str = "test") -> list[dict]:
    """One row per non-base variant. A base at or below chance leaves the AUC gain as nan."""
    by_variant = {r["variant"]: r for r in metrics if r["fold"] == fold}
    base = by_variant[base_variant]
    out = []
    for name, r in by_variant.items():
        if name == base_variant:
            continue
        if base["auc"] > 0.5:
            a, l = relative_improvement(r["auc"], base["auc"], r["logloss"], base["logloss"])
        else:
            a, l = math.nan, (base["logloss"] - r["logloss"]) / r["logloss"] * 100.0
        out.append({"run_id": r["run_id"], "variant": name, "base_variant": base_variant,
                    "auc": r["auc"], "base_auc": base["auc"], "auc_impr_pct": a,
                    "logloss": r["logloss"], "base_logloss": base["logloss"],
                    "logloss_impr_pct": l, "seed": r["seed"], "config_hash": r["config_hash"]})
    return out
