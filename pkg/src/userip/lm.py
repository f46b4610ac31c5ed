"""A small pre-LN causal transformer over a behavior vocabulary.

It is trained once on interaction sequences and then frozen; afterwards it only
serves as a fixed likelihood surface for soft-prompt inference. Inputs are
d-dimensional vectors, so token embeddings and injected soft vectors mix freely.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import numcore as nc
from .corpus import Dataset, training_path
from .numcore import Tensor

log = logging.getLogger(__name__)

PAD, BOS, EOS, DEL = "<pad>", "<bos>", "<eos>", "<del>"
SPECIALS = (PAD, BOS, EOS, DEL)
DEFAULT_NAMES = (
    ("this", "user's", "hobby", "is"),
    ("his", "background", "is"),
    ("her", "spending", "level", "is"),
    ("their", "age", "group", "is"),
)
DEFAULT_TASK = ("the", "user", "will", "interact", "with")
LM_MAGIC = b"UIPL"


def profile_names(M: int) -> list[tuple[str, ...]]:
    if M <= len(DEFAULT_NAMES):
        return [DEFAULT_NAMES[m] for m in range(M)]
    return list(DEFAULT_NAMES) + [("profile", f"p{m}", "is") for m in range(len(DEFAULT_NAMES), M)]


class Vocab:
    """Dense symbol table: specials, template words, then one token per item."""

    def __init__(self, symbols: Sequence[str]):
        self.symbols = list(symbols)
        self.index = {s: i for i, s in enumerate(self.symbols)}
        if len(self.index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")
        for s in SPECIALS:
            if s not in self.index:
                raise ValueError(f"vocabulary lacks reserved token {s}")
        self.item_offset = next((i for i, s in enumerate(self.symbols) if s.startswith("item:")),
                                len(self.symbols))

    @classmethod
    def build(cls, n_items: int, words: Sequence[str] = ()) -> "Vocab":
        base = list(SPECIALS)
        for w in list(words) + [w for name in DEFAULT_NAMES for w in name] + list(DEFAULT_TASK):
            if w not in base:
                base.append(w)
        return cls(base + [f"item:{i}" for i in range(n_items)])

    def __len__(self):
        return len(self.symbols)

    def __getitem__(self, sym: str) -> int:
        return self.index[sym]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index[w] for w in words]

    def item(self, item_id) -> np.ndarray:
        return np.asarray(item_id, dtype=np.int64) + self.item_offset

    @property
    def n_items(self) -> int:
        return len(self.symbols) - self.item_offset

    def save(self, path) -> None:
        text = json.dumps({"format": "userip-vocab", "version": 1, "size": len(self)}) + "\n"
        checkpoint.atomic_write(path, (text + "\n".join(self.symbols) + "\n").encode())

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        head = json.loads(lines[0])
        if head.get("format") != "userip-vocab" or head.get("version") != 1:
            raise checkpoint.CheckpointError(f"{path}: not a v1 vocabulary file")
        symbols = lines[1:1 + head["size"]]
        if len(symbols) != head["size"]:
            raise checkpoint.CheckpointError(f"{path}: truncated vocabulary")
        return cls(symbols)


@dataclass
class LMConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128
    dropout: float = 0.0
    # arithmetic precision; checkpoints always store float64
    compute_dtype: str = "float64"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.compute_dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported compute_dtype {self.compute_dtype!r}")


class FrozenError(RuntimeError):
    pass


class LMParams:
    """Named parameter arrays plus a frozen flag; output projection is tied."""

    def __init__(self, cfg: LMConfig, arrays: dict[str, np.ndarray], frozen: bool = False):
        self.cfg = cfg
        dtype = np.dtype(cfg.compute_dtype)
        self.arrays = {k: np.asarray(v).astype(dtype, copy=False) for k, v in arrays.items()}
        self.frozen = False
        self.tensors = {k: Tensor(v, requires_grad=True) for k, v in self.arrays.items()}
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, cfg: LMConfig, seed: int) -> "LMParams":
        rng = np.random.default_rng(seed)
        d, L = cfg.d, cfg.n_layers
        a = {"tok": rng.normal(0, 0.02, (cfg.vocab_size, d)),
             "pos": rng.normal(0, 0.01, (cfg.context_len, d))}
        proj = 0.02 / math.sqrt(2 * L)
        for l in range(L):
            a[f"l{l}.ln1.g"] = np.ones(d)
            a[f"l{l}.ln1.b"] = np.zeros(d)
            for n in "qkv":
                a[f"l{l}.w{n}"] = rng.normal(0, 0.02, (d, d))
                a[f"l{l}.b{n}"] = np.zeros(d)
            a[f"l{l}.wo"] = rng.normal(0, proj, (d, d))
            a[f"l{l}.bo"] = np.zeros(d)
            a[f"l{l}.ln2.g"] = np.ones(d)
            a[f"l{l}.ln2.b"] = np.zeros(d)
            a[f"l{l}.w1"] = rng.normal(0, 0.02, (d, 4 * d))
            a[f"l{l}.b1"] = np.zeros(4 * d)
            a[f"l{l}.w2"] = rng.normal(0, proj, (4 * d, d))
            a[f"l{l}.b2"] = np.zeros(d)
        a["lnf.g"] = np.ones(d)
        a["lnf.b"] = np.zeros(d)
        return cls(cfg, a)

    def freeze(self) -> "LMParams":
        for k, v in self.arrays.items():
            v.setflags(write=False)
            self.tensors[k] = Tensor(v)
        self.frozen = True
        return self

    def cast(self, dtype: str) -> "LMParams":
        """Copy with another compute precision; keeps the frozen flag."""
        cfg = LMConfig(**{**asdict(self.cfg), "compute_dtype": dtype})
        return LMParams(cfg, {k: v.copy() for k, v in self.arrays.items()}, frozen=self.frozen)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.cfg.compute_dtype)

    def parameters(self) -> list[Tensor]:
        if self.frozen:
            raise FrozenError("parameters of a frozen LM are not trainable")
        return list(self.tensors.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def embed(self, token_ids) -> Tensor:
        return nc.take_rows(self.tensors["tok"], token_ids)

    def save(self, path, extra: dict | None = None) -> str:
        header = {"config": asdict(self.cfg), "frozen": self.frozen, **(extra or {})}
        return checkpoint.write(path, LM_MAGIC, header, self.arrays)

    @classmethod
    def load(cls, path) -> "LMParams":
        header, arrays, _ = checkpoint.read(path, LM_MAGIC)
        return cls(LMConfig(**header["config"]), arrays, frozen=header.get("frozen", True))


def _check_mask(mask: np.ndarray, T: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (T, T):
        raise ValueError(f"mask shape {mask.shape} does not match {T} positions")
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a row with no visible position")
    return mask


def forward(params: LMParams, inputs, mask, *, training: bool = False,
            rng: np.random.Generator | None = None, attn_out: list | None = None) -> Tensor:
    """Next-token logits for ``inputs`` of shape ``(T, d)`` or ``(B, T, d)``.

    ``mask[..., i, j]`` true means position i may attend to j. When
    ``attn_out`` is a list, per-layer attention arrays ``(B, H, T, T)`` are
    appended to it.
    """
    cfg = params.cfg
    x = nc.as_tensor(inputs)
    squeeze = x.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    if d != cfg.d:
        raise ValueError(f"input width {d} != model width {cfg.d}")
    if T > cfg.context_len:
        raise ValueError(f"{T} positions exceed context_len={cfg.context_len}")
    mask = _check_mask(mask, T)
    if mask.ndim == 3:
        mask = mask[:, None]
    p = params.tensors
    H, dh = cfg.n_heads, d // cfg.n_heads
    drop = cfg.dropout if training else 0.0
    x = x + p["pos"][:T]
    for l in range(cfg.n_layers):
        h = nc.layernorm(x, p[f"l{l}.ln1.g"], p[f"l{l}.ln1.b"], eps=1e-5)

        def heads(w, b):
            y = nc.matmul(h, p[w]) + p[b]
            return nc.transpose(nc.reshape(y, (B, T, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(f"l{l}.wq", f"l{l}.bq"), heads(f"l{l}.wk", f"l{l}.bk"), heads(f"l{l}.wv", f"l{l}.bv")
        scores = nc.matmul(q, nc.swap_last(k)) * (1.0 / math.sqrt(dh))
        att = nc.softmax(scores, axis=-1, mask=mask)
        if attn_out is not None:
            attn_out.append(att.data.copy())
        att = nc.dropout(att, drop, rng, training)
        o = nc.reshape(nc.transpose(nc.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        x = x + nc.dropout(nc.matmul(o, p[f"l{l}.wo"]) + p[f"l{l}.bo"], drop, rng, training)
        h = nc.layernorm(x, p[f"l{l}.ln2.g"], p[f"l{l}.ln2.b"], eps=1e-5)
        h = nc.gelu(nc.matmul(h, p[f"l{l}.w1"]) + p[f"l{l}.b1"])
        x = x + nc.dropout(nc.matmul(h, p[f"l{l}.w2"]) + p[f"l{l}.b2"], drop, rng, training)
    x = nc.layernorm(x, p["lnf.g"], p["lnf.b"], eps=1e-5)
    logits = nc.matmul(x, nc.transpose(p["tok"]))
    if squeeze:
        logits = nc.reshape(logits, logits.shape[1:])
    return logits


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def span_loss(logits: Tensor, tokens, span) -> Tensor:
    """Mean NLL of ``tokens[start:stop]`` given logits at the preceding positions."""
    start, stop = span
    T = logits.shape[-2]
    if stop <= start:
        raise ValueError("empty target span")
    if start < 1 or stop > T:
        raise ValueError(f"target span {span} outside 1..{T}")
    tokens = np.asarray(tokens, dtype=np.int64)
    targets = np.zeros(logits.shape[:-1], dtype=np.int64)
    sel = np.zeros(logits.shape[:-1], dtype=bool)
    targets[..., start - 1:stop - 1] = tokens[..., start:stop]
    sel[..., start - 1:stop - 1] = True
    return nc.cross_entropy(logits, targets, sel)


def nll(params: LMParams, sequence, mask, span) -> float:
    """Mean next-token NLL over the target span of a token-id sequence."""
    tokens = np.asarray(sequence, dtype=np.int64)
    with nc.no_grad():
        logits = forward(params, params.embed(tokens), mask)
        return span_loss(logits, tokens, span).item()


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

def build_sequences(corpus: Dataset, vocab: Vocab, context_len: int, fold: str | None = "train",
                    task: Sequence[str] = DEFAULT_TASK) -> tuple[list[np.ndarray], int]:
    """``<bos> task items <eos>`` per user; returns sequences and truncation count."""
    head = [vocab[BOS]] + vocab.encode(task)
    room = context_len - len(head) - 1
    seqs, truncated = [], 0
    for items in corpus.user_sequences(fold):
        if len(items) == 0:
            continue
        if len(items) > room:
            items = items[-room:]
            truncated += 1
        seqs.append(np.concatenate([head, vocab.item(items), [vocab[EOS]]]).astype(np.int64))
    return seqs, truncated


def _pad(seqs: list[np.ndarray], pad: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    valid = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        valid[i, :len(s)] = True
    return out, valid


def sequence_loss(params: LMParams, seqs: list[np.ndarray], pad: int, first_target: int = 1,
                  training: bool = False, rng=None) -> Tensor:
    """Mean next-token NLL over positions ``>= first_target`` of each sequence."""
    toks, valid = _pad(seqs, pad)
    T = toks.shape[1]
    logits = forward(params, params.embed(toks), causal_mask(T), training=training, rng=rng)
    targets = np.zeros_like(toks)
    targets[:, :-1] = toks[:, 1:]
    sel = np.zeros_like(valid)
    sel[:, first_target - 1:-1] = valid[:, first_target:]
    return nc.cross_entropy(logits, targets, sel)


def evaluate_nll(params: LMParams, seqs: list[np.ndarray], pad: int, first_target: int = 1,
                 batch_size: int = 64) -> float:
    """Token-weighted mean NLL over a list of sequences."""
    total, count = 0.0, 0
    with nc.no_grad():
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i:i + batch_size]
            n = sum(max(len(s) - first_target, 0) for s in chunk)
            total += sequence_loss(params, chunk, pad, first_target).item() * n
            count += n
    return total / count


@dataclass
class TrainLog:
    init_loss: float
    losses: list
    truncated: int
    heldout_init: float | None = None
    heldout_final: float | None = None
    heldout_curve: list | None = None
    best_epoch: int | None = None


def train_lm(corpus: Dataset, cfg: LMConfig | None = None, epochs: int = 30, seed: int = 0, *,
             vocab: Vocab | None = None, lr: float = 3e-3, batch_size: int = 32,
             heldout: Dataset | None = None, background: Dataset | None = None,
             patience: int = 3, task: Sequence[str] = DEFAULT_TASK,
             batch_loss=None, checkpoint_path=None) -> tuple[LMParams, Vocab, TrainLog]:
    """Fit the LM on training-fold sequences, then freeze it.

    ``background`` adds every sequence of a second corpus sharing the item
    index. With ``heldout`` the weights of the best held-out epoch are kept and
    training stops after ``patience`` epochs without improvement.
    ``batch_loss(params, seqs, rng, training)`` replaces the plain next-token loss per
    batch, in training and in held-out scoring (with a fixed stream there).
    Sequences
    longer than the context are truncated from the left; the count is logged
    and returned.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty corpus")
    vocab = vocab or Vocab.build(corpus.n_items)
    cfg = cfg or LMConfig(vocab_size=len(vocab))
    if cfg.vocab_size != len(vocab):
        raise ValueError("config vocab_size does not match vocabulary")
    if background is not None and background.n_items != corpus.n_items:
        raise ValueError("background corpus uses a different item index")
    with training_path("train_lm"):
        seqs, truncated = build_sequences(corpus, vocab, cfg.context_len, "train", task)
        if background is not None:
            extra, t2 = build_sequences(background, vocab, cfg.context_len, None, task)
            seqs += extra
            truncated += t2
        if truncated:
            log.warning("train_lm: %d sequence(s) left-truncated to context %d", truncated,
                        cfg.context_len)
        held = build_sequences(heldout, vocab, cfg.context_len, None, task)[0] if heldout else None
        params = LMParams.init(cfg, seed)
        rng = np.random.default_rng(seed + 1)
        pad = vocab[PAD]
        init_loss = evaluate_nll(params, seqs, pad)

        def score_held():
            if batch_loss is None:
                return evaluate_nll(params, held, pad)
            hrng = np.random.default_rng([seed, 3])
            with nc.no_grad():
                parts = [batch_loss(params, held[i:i + 64], hrng, False).item()
                         for i in range(0, len(held), 64)]
            return float(np.mean(parts))

        held_init = score_held() if held else None
        opt = nc.Adam(params.parameters(), lr=lr)
        losses, curve = [], []
        best, best_epoch, best_arrays = np.inf, None, None
        for epoch in range(epochs):
            order = rng.permutation(len(seqs))
            total = 0.0
            for b in range(0, len(seqs), batch_size):
                batch = [seqs[i] for i in order[b:b + batch_size]]
                opt.zero_grad()
                with nc.tape_scope():
                    if batch_loss is None:
                        loss = sequence_loss(params, batch, pad, training=True, rng=rng)
                    else:
                        loss = batch_loss(params, batch, rng, True)
                    nc.backward(loss)
                opt.step()
                total += loss.item() * len(batch)
            losses.append(total / len(seqs))
            if held:
                curve.append(score_held())
                log.info("train_lm epoch %d loss %.4f heldout %.4f", epoch, losses[-1], curve[-1])
                if curve[-1] < best:
                    best, best_epoch = curve[-1], epoch
                    best_arrays = {k: v.copy() for k, v in params.arrays.items()}
                elif epoch - best_epoch >= patience:
                    break
            else:
                log.info("train_lm epoch %d loss %.4f", epoch, losses[-1])
        if best_arrays is not None:
            params = LMParams(cfg, best_arrays)
        params.freeze()
        held_final = score_held() if held else None
    if checkpoint_path is not None:
        params.save(checkpoint_path, {"seed": seed, "epochs": len(losses)})
    return params, vocab, TrainLog(init_loss, losses, truncated, held_init, held_final,
                                   curve or None, best_epoch)
