"""Soft profile tokens: prompt assembly, restricted attention mask, and inference.

Each user gets M trainable vectors injected at embedding level between fixed
profile-name spans. They are fitted by maximizing the likelihood of the user's
behavior sequence under a frozen LM; the LM weights are never written.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import lm
from . import numcore as nc
from .corpus import Dataset, training_path
from .numcore import Tensor

log = logging.getLogger(__name__)

THETA_MAGIC = b"UIPT"
NAME, SOFT, DELIM, TASK, TARGET = "name", "soft", "delim", "task", "target"
KINDS = (NAME, SOFT, DELIM, TASK, TARGET)


class DivergenceError(RuntimeError):
    """Inference loss blew up past the guard threshold."""


@dataclass
class PromptTemplate:
    """Ordered (profile name, soft width) pairs followed by a task description."""

    names: list
    widths: tuple = ()
    task: tuple = lm.DEFAULT_TASK
    delimiter: bool = False
    names_see_earlier: bool = False

    def __post_init__(self):
        self.names = [tuple(n) for n in self.names]
        if len(self.names) < 1:
            raise ValueError("template needs at least one profile (M >= 1)")
        if any(len(n) == 0 for n in self.names):
            raise ValueError("profile name spans must be non-empty")
        self.widths = tuple(int(w) for w in self.widths) or (1,) * len(self.names)
        if len(self.widths) != len(self.names) or min(self.widths) < 1:
            raise ValueError(f"need one soft width >= 1 per profile, got {self.widths}")
        self.task = tuple(self.task)

    @classmethod
    def default(cls, M: int, **kw) -> "PromptTemplate":
        return cls(lm.profile_names(M), **kw)

    @property
    def M(self) -> int:
        return len(self.names)

    @property
    def n_soft(self) -> int:
        return sum(self.widths)

    @property
    def prefix_len(self) -> int:
        return (sum(len(n) for n in self.names) + self.n_soft + len(self.task)
                + (self.M if self.delimiter else 0))

    def words(self) -> list[str]:
        return [w for n in self.names for w in n] + list(self.task)


@dataclass
class PromptLayout:
    """Segment label per position; ``group`` is the profile index or -1."""

    kinds: list
    groups: np.ndarray
    tokens: np.ndarray  # token id, or -1 at soft slots
    soft_slot: np.ndarray  # row into the user's stacked soft vectors, or -1

    def __len__(self):
        return len(self.kinds)

    @property
    def segments(self) -> list[tuple[str, int, int, int]]:
        """Maximal runs as ``(kind, group, start, stop)``."""
        out, start = [], 0
        for t in range(1, len(self) + 1):
            if t == len(self) or (self.kinds[t], self.groups[t]) != (self.kinds[start],
                                                                      self.groups[start]):
                out.append((self.kinds[start], int(self.groups[start]), start, t))
                start = t
        return out

    def span(self, kind: str, group: int = -1) -> tuple[int, int]:
        for k, g, a, b in self.segments:
            if k == kind and g == group:
                return a, b
        raise KeyError((kind, group))

    @property
    def target_span(self) -> tuple[int, int]:
        return self.span(TARGET)


def build_layout(template: PromptTemplate, vocab: lm.Vocab, behavior_tokens) -> PromptLayout:
    kinds, groups, toks, slots = [], [], [], []
    slot = 0

    def put(kind, group, tok, s=-1):
        kinds.append(kind)
        groups.append(group)
        toks.append(tok)
        slots.append(s)

    for m, (name, width) in enumerate(zip(template.names, template.widths)):
        for tok in vocab.encode(name):
            put(NAME, m, tok)
        for _ in range(width):
            put(SOFT, m, -1, slot)
            slot += 1
        if template.delimiter:
            put(DELIM, m, vocab[lm.DEL])
    for tok in vocab.encode(template.task):
        put(TASK, -1, tok)
    for tok in behavior_tokens:
        put(TARGET, -1, int(tok))
    return PromptLayout(kinds, np.array(groups), np.array(toks, dtype=np.int64),
                        np.array(slots, dtype=np.int64))


def build_causal_mask(layout: PromptLayout, names_see_earlier: bool = False) -> np.ndarray:
    """Boolean (T, T); entry [i, j] true when position i may attend to j."""
    T = len(layout)
    kinds = np.array(layout.kinds)
    g = layout.groups
    mask = np.zeros((T, T), dtype=bool)
    for i in range(T):
        k = kinds[i]
        if k in (TASK, TARGET):
            mask[i, :i + 1] = True
            continue
        same = g[:i + 1] == g[i]
        if k == NAME:
            row = (kinds[:i + 1] == NAME) & same
            if names_see_earlier:
                row |= kinds[:i + 1] == NAME
        elif k == SOFT:
            row = ((kinds[:i + 1] == NAME) | (kinds[:i + 1] == SOFT)) & same
        else:  # delimiter closes its own (name, soft) block
            row = same.copy()
        mask[i, :i + 1] = row
        mask[i, i] = True
    return mask


def _mean_embedding(params: lm.LMParams) -> np.ndarray:
    return params.arrays["tok"].mean(axis=0)


class SoftProfileTable:
    """Soft vectors for many users: ``(n_users, n_soft, d)`` plus slot bookkeeping."""

    def __init__(self, data: np.ndarray, widths: Sequence[int], seed: int | None = None,
                 user_ids=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.widths = tuple(int(w) for w in widths)
        if self.data.ndim != 3 or self.data.shape[1] != sum(self.widths):
            raise ValueError(f"soft table shape {self.data.shape} does not fit widths "
                             f"{self.widths}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("soft profile vectors must be finite")
        self.seed = seed
        self.user_ids = (np.arange(len(self.data)) if user_ids is None
                         else np.asarray(user_ids, dtype=np.int64))

    @classmethod
    def init(cls, n_users: int, template: PromptTemplate, params: lm.LMParams, seed: int,
             scale: float = 0.02) -> "SoftProfileTable":
        rng = np.random.default_rng(seed)
        d = params.cfg.d
        base = _mean_embedding(params)
        data = (base + rng.normal(0.0, scale, (n_users, template.n_soft, d))).astype(params.dtype)
        return cls(data, template.widths, seed)

    @property
    def M(self) -> int:
        return len(self.widths)

    def profile(self, m: int) -> np.ndarray:
        """``(n_users, width_m * d)``: the flattened vectors of profile m."""
        a = sum(self.widths[:m])
        return self.data[:, a:a + self.widths[m]].reshape(len(self.data), -1)

    def save(self, path, extra: dict | None = None) -> str:
        header = {"M": self.M, "widths": list(self.widths), "d": int(self.data.shape[2]),
                  "seed": self.seed, "n_users": len(self.data), **(extra or {})}
        return checkpoint.write(path, THETA_MAGIC, header,
                                {"theta": self.data, "user_ids": self.user_ids})

    @classmethod
    def load(cls, path) -> "SoftProfileTable":
        header, arrays, _ = checkpoint.read(path, THETA_MAGIC)
        return cls(arrays["theta"], header["widths"], header["seed"],
                   arrays["user_ids"].astype(np.int64))


@dataclass
class SoftProfileSet:
    """One user's soft vectors, ``theta[m]`` of shape ``(width_m, d)``."""

    user_id: int
    theta: list

    @classmethod
    def from_table(cls, table: SoftProfileTable, row: int) -> "SoftProfileSet":
        out, a = [], 0
        for w in table.widths:
            out.append(table.data[row, a:a + w].copy())
            a += w
        return cls(int(table.user_ids[row]), out)


# ----------------------------------------------------------------------------
# prompt assembly
# ----------------------------------------------------------------------------

@dataclass
class PromptBatch:
    inputs: Tensor  # (B, T, d)
    mask: np.ndarray  # (T, T)
    layout: PromptLayout  # shared prefix, target span of the longest row
    tokens: np.ndarray  # (B, T)
    target: np.ndarray  # (B, T) true where position is a real target token
    truncated: int = 0


def _behavior_room(template: PromptTemplate, context_len: int) -> int:
    room = context_len - template.prefix_len
    if room < 1:
        raise ValueError(f"template prefix of {template.prefix_len} leaves no room in "
                         f"context {context_len}")
    return room


def assemble_prompt(theta, template: PromptTemplate, behavior, params: lm.LMParams,
                    vocab: lm.Vocab) -> tuple[Tensor, PromptLayout]:
    """Input vectors ``(T, d)`` and layout for one user.

    ``theta`` is a ``(n_soft, d)`` array or Tensor; ``behavior`` holds item ids.
    """
    behavior = np.asarray(behavior, dtype=np.int64)
    if len(behavior) == 0:
        raise ValueError("behavior sequence is empty")
    batch = assemble_batch(nc.reshape(nc.as_tensor(theta), (1, template.n_soft, params.cfg.d)),
                           template, [behavior], params, vocab)
    return nc.reshape(batch.inputs, batch.inputs.shape[1:]), _row_layout(batch, 0)


def _row_layout(batch: "PromptBatch", row: int) -> PromptLayout:
    """The shared batch layout with one row's real target tokens filled in."""
    lay = batch.layout
    n = int(batch.target[row].sum())
    keep = len(lay) - (batch.target.shape[1] - batch.layout.target_span[0] - n)
    toks = np.where(lay.soft_slot >= 0, -1, batch.tokens[row])
    return PromptLayout(lay.kinds[:keep], lay.groups[:keep], toks[:keep], lay.soft_slot[:keep])


def assemble_batch(theta: Tensor, template: PromptTemplate, behaviors: list, params: lm.LMParams,
                   vocab: lm.Vocab) -> PromptBatch:
    """Right-padded prompts for a batch; soft rows of ``theta`` are injected in place."""
    room = _behavior_room(template, params.cfg.context_len)
    truncated = 0
    rows = []
    for b in behaviors:
        b = np.asarray(b, dtype=np.int64)
        if len(b) > room:
            b = b[-room:]
            truncated += 1
        rows.append(vocab.item(b))
    longest = max(len(r) for r in rows)
    layout = build_layout(template, vocab, np.full(longest, vocab[lm.PAD]))
    T, P = len(layout), template.prefix_len
    tokens = np.full((len(rows), T), vocab[lm.PAD], dtype=np.int64)
    target = np.zeros((len(rows), T), dtype=bool)
    tokens[:, :P] = np.where(layout.tokens[:P] >= 0, layout.tokens[:P], vocab[lm.PAD])
    for i, r in enumerate(rows):
        tokens[i, P:P + len(r)] = r
        target[i, P:P + len(r)] = True
    soft = layout.soft_slot >= 0
    base = params.arrays["tok"][tokens] * (~soft)[None, :, None]
    place = np.zeros((T, template.n_soft), dtype=base.dtype)
    place[np.flatnonzero(soft), layout.soft_slot[soft]] = 1.0
    inputs = nc.add(base, nc.matmul(place, theta))
    if truncated:
        log.warning("assemble: %d behavior sequence(s) left-truncated to %d items", truncated,
                    room)
    mask = build_causal_mask(layout, template.names_see_earlier)
    return PromptBatch(inputs, mask, layout, tokens, target, truncated)


def batch_loss(params: lm.LMParams, batch: PromptBatch, mask: np.ndarray | None = None,
               attn_out: list | None = None, training: bool = False, rng=None) -> Tensor:
    """Mean NLL pooled over every target token of the batch."""
    logits = lm.forward(params, batch.inputs, batch.mask if mask is None else mask,
                        attn_out=attn_out, training=training, rng=rng)
    targets = np.zeros_like(batch.tokens)
    targets[:, :-1] = batch.tokens[:, 1:]
    sel = np.zeros_like(batch.target)
    sel[:, :-1] = batch.target[:, 1:]
    return nc.cross_entropy(logits, targets, sel)


def llm_loss(profile: SoftProfileSet | np.ndarray | Tensor, behavior, template: PromptTemplate,
             params: lm.LMParams, vocab: lm.Vocab, mask: np.ndarray | None = None) -> Tensor:
    """Mean target-span NLL of one user's behavior under the restricted mask."""
    if isinstance(profile, SoftProfileSet):
        profile = np.concatenate(profile.theta, axis=0)
    theta = nc.as_tensor(profile)
    batch = assemble_batch(nc.reshape(theta, (1,) + theta.shape), template,
                           [np.asarray(behavior)], params, vocab)
    return batch_loss(params, batch, mask)


class ProfileDocuments:
    """Pretraining loss that mixes template-form documents into LM training.

    With probability ``rate`` a training sequence is rewritten as a prompt whose
    soft slots hold token embeddings of anchor items: for profile m, an item of
    catalog category m drawn from the same user's history. The name spans thus
    get tied to item categories, standing in for the world knowledge a large
    pretrained LM brings. Only public item metadata is used, never user classes.
    Sequences lacking an item of some category stay in plain form.

    With probability ``distractor`` a slot instead holds a random catalog item
    of another category, unrelated to the user, so the LM learns that slot m
    is informative only through category-m content.
    """

    def __init__(self, template: PromptTemplate, vocab: lm.Vocab, item_category: np.ndarray,
                 rate: float = 0.5, distractor: float = 0.0):
        if item_category is None:
            raise ValueError("template pretraining needs item category metadata")
        self.template = template
        self.vocab = vocab
        self.category = np.asarray(item_category, dtype=np.int64)
        self.rate = rate
        self.distractor = distractor
        self.others = [np.flatnonzero(self.category != m) for m in range(template.M)]
        self.head = 1 + len(template.task)  # <bos> + task words

    def _anchors(self, items: np.ndarray, rng) -> np.ndarray | None:
        out = []
        cats = self.category[items]
        for m, w in enumerate(self.template.widths):
            pool = items[cats == m]
            if len(pool) == 0:
                return None
            for _ in range(w):
                if self.distractor and len(self.others[m]) and rng.random() < self.distractor:
                    out.append(rng.choice(self.others[m]))
                else:
                    out.append(rng.choice(pool))
        return np.array(out)

    def __call__(self, params: lm.LMParams, seqs: list, rng, training: bool = True) -> Tensor:
        plain, docs, anchors = [], [], []
        for s in seqs:
            items = s[self.head:-1] - self.vocab.item_offset
            a = self._anchors(items, rng) if rng.random() < self.rate else None
            if a is None:
                plain.append(s)
            else:
                docs.append(items)
                anchors.append(a)
        parts, weights = [], []
        if plain:
            parts.append(lm.sequence_loss(params, plain, self.vocab[lm.PAD], training=training,
                                          rng=rng))
            weights.append(sum(len(s) - 1 for s in plain))
        if docs:
            soft = params.embed(self.vocab.item(np.stack(anchors)))
            batch = assemble_batch(soft, self.template, docs, params, self.vocab)
            parts.append(batch_loss(params, batch, training=training, rng=rng))
            weights.append(int(batch.target.sum()))
        total = sum(weights)
        loss = parts[0] * (weights[0] / total)
        for part, w in zip(parts[1:], weights[1:]):
            loss = loss + part * (w / total)
        return loss


# ----------------------------------------------------------------------------
# inference loop
# ----------------------------------------------------------------------------

@dataclass
class InferConfig:
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    patience: int = 5
    min_delta: float = 1e-4
    divergence_factor: float = 10.0
    init_scale: float = 0.02


@dataclass
class InferResult:
    table: SoftProfileTable
    losses: list
    initial_loss: float
    lm_checksum: str
    epochs_run: int
    extra: dict = field(default_factory=dict)


def user_behaviors(data: Dataset, fold: str = "train") -> list[np.ndarray]:
    seqs = data.user_sequences(fold)
    empty = [u for u, s in enumerate(seqs) if len(s) == 0]
    if empty:
        raise ValueError(f"{len(empty)} user(s) have no {fold} behavior, e.g. {empty[:5]}")
    return seqs


def infer_profiles(behaviors: list, params: lm.LMParams, vocab: lm.Vocab,
                   template: PromptTemplate, cfg: InferConfig | None = None, seed: int = 0,
                   joint=None, init: SoftProfileTable | None = None,
                   checkpoint_path=None) -> InferResult:
    """Fit every user's soft vectors by mini-batch Adam on pooled target NLL.

    ``joint`` is an optional callback ``(epoch, rows, theta_tensor) -> Tensor``
    returning an extra loss term (already weighted) to add to the batch loss,
    plus an ``after_step()`` / ``epoch_end(epoch, table)`` hook pair; see
    :mod:`userip.quant`. The LM must be frozen and is never written.
    """
    if not params.frozen:
        raise lm.FrozenError("soft-profile inference requires a frozen LM")
    cfg = cfg or InferConfig()
    n = len(behaviors)
    table = init or SoftProfileTable.init(n, template, params, seed, cfg.init_scale)
    table.data = table.data.astype(params.dtype, copy=False)
    opt = nc.RowAdam(table.data, lr=cfg.lr)
    rng = np.random.default_rng([seed, 1])
    before = params.checksum()

    def run_epoch(epoch, train):
        total, count = 0.0, 0
        order = rng.permutation(n) if train else np.arange(n)
        for b in range(0, n, cfg.batch_size):
            rows = np.sort(order[b:b + cfg.batch_size])
            theta = Tensor(table.data[rows], requires_grad=train)
            chunk = [behaviors[r] for r in rows]
            if not train:
                with nc.no_grad():
                    batch = assemble_batch(theta, template, chunk, params, vocab)
                    ntok = int(batch.target.sum())
                    total += batch_loss(params, batch).item() * ntok
                count += ntok
                continue
            with nc.tape_scope():
                batch = assemble_batch(theta, template, chunk, params, vocab)
                ntok = int(batch.target.sum())
                loss = batch_loss(params, batch)
                full = loss if joint is None else nc.add(loss, joint.loss(epoch, rows, theta))
                nc.backward(full)
            opt.step(rows, theta.grad)
            if joint is not None:
                joint.after_step()
            total += loss.item() * ntok
            count += ntok
        return total / count

    with training_path("infer_profiles"):
        initial = run_epoch(-1, train=False)
        losses, best, stale = [], initial, 0
        for epoch in range(cfg.epochs):
            cur = run_epoch(epoch, train=True)
            losses.append(cur)
            if not np.isfinite(cur) or cur > cfg.divergence_factor * initial:
                raise DivergenceError(f"inference loss {cur:.4g} at epoch {epoch} exceeds "
                                      f"{cfg.divergence_factor}x initial {initial:.4g}")
            if joint is not None:
                joint.epoch_end(epoch, table)
            log.info("infer epoch %d loss %.5f", epoch, cur)
            if cur < best - cfg.min_delta:
                best, stale = cur, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if params.checksum() != before:
        raise RuntimeError("frozen LM parameters changed during inference")
    if checkpoint_path is not None:
        table.save(checkpoint_path, {"lm_checksum": before})
    return InferResult(table, losses, initial, before, len(losses))


# ----------------------------------------------------------------------------
# attention export
# ----------------------------------------------------------------------------

def attention_to_soft(params: lm.LMParams, vocab: lm.Vocab, template: PromptTemplate,
                      theta: np.ndarray, behavior) -> tuple[np.ndarray, PromptLayout]:
    """Raw attention ``(T, n_soft)`` from every position onto each soft slot.

    Averaged over heads and layers.
    """
    atts: list = []
    with nc.no_grad():
        batch = assemble_batch(Tensor(theta[None]), template, [np.asarray(behavior)], params,
                               vocab)
        lm.forward(params, batch.inputs, batch.mask, attn_out=atts)
    a = np.mean([x[0].mean(axis=0) for x in atts], axis=0)  # (T, T)
    cols = np.flatnonzero(batch.layout.soft_slot >= 0)
    return a[:, cols], _row_layout(batch, 0)


def export_attention(users, tables: dict, params: lm.LMParams, vocab: lm.Vocab,
                     template: PromptTemplate, behaviors: list, path=None) -> list[dict]:
    """Per-user, per-stage attention onto each soft profile slot.

    ``tables`` maps a stage name (``before``/``after``) to a SoftProfileTable.
    One user's stages form a single table so the heatmaps share a color scale:
    weights are min-max normalized to [0, 1] over all of that user's stages.
    Rows carry user, profile_index, token, position, stage, weight and raw weight.
    """
    rows = []
    for u in users:
        per_stage = {stage: attention_to_soft(params, vocab, template, table.data[u], behaviors[u])
                     for stage, table in tables.items()}
        raw = np.concatenate([att.ravel() for att, _ in per_stage.values()])
        lo, span = raw.min(), raw.max() - raw.min()
        for stage, (att, layout) in per_stage.items():
            slot_group = [layout.groups[p] for p in np.flatnonzero(layout.soft_slot >= 0)]
            norm = (att - lo) / span if span > 0 else np.zeros_like(att)
            for pos in range(len(layout)):
                tok = layout.tokens[pos]
                label = f"<soft{layout.groups[pos]}>" if tok < 0 else vocab.symbols[tok]
                for s, m in enumerate(slot_group):
                    rows.append({"user": int(u), "profile_index": int(m), "token": label,
                                 "position": pos, "kind": layout.kinds[pos], "stage": stage,
                                 "weight": float(norm[pos, s]), "raw": float(att[pos, s])})
    if path is not None:
        write_attention_csv(rows, path)
    return rows


def write_attention_csv(rows: list[dict], path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["user", "profile_index", "token", "stage", "weight", "position", "kind", "raw"]
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + list(extra))
        for r in rows:
            w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.10g}" for c in cols]
                       + list(extra.values()))


def target_attention(rows: list[dict], user: int, stage: str, profile: int) -> float:
    """Mean normalized weight from target tokens onto one profile's soft slots."""
    w = [r["weight"] for r in rows if r["user"] == user and r["stage"] == stage
         and r["profile_index"] == profile and r["kind"] == TARGET]
    return float(np.mean(w))
