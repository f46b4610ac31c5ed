import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from userip import corpus, lm
from userip import numcore as nc


def _tiny(vocab_size=20, d=16, layers=2, heads=2, seed=0, ctx=32):
    return lm.LMParams.init(lm.LMConfig(vocab_size=vocab_size, d=d, n_layers=layers,
                                        n_heads=heads, context_len=ctx), seed)


def test_vocab_round_trip_and_reserved(tmp_path):
    v = lm.Vocab.build(7)
    assert [v[s] for s in v.symbols] == list(range(len(v)))
    assert lm.DEL in v.index and v.n_items == 7
    v.save(tmp_path / "v.txt")
    assert lm.Vocab.load(tmp_path / "v.txt").symbols == v.symbols
    with pytest.raises(ValueError):
        lm.Vocab(["a", "a", *lm.SPECIALS])


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        lm.LMConfig(vocab_size=10, d=10, n_heads=3)


def test_output_projection_is_tied():
    p = _tiny()
    x = np.random.default_rng(1).normal(size=(3, 16))
    logits = lm.forward(p, x, lm.causal_mask(3))
    assert logits.shape == (3, 20)
    p.arrays["tok"][4] += 1.0  # changes logits for token 4 only through the tied head
    logits2 = lm.forward(p, x, lm.causal_mask(3))
    changed = np.abs(logits2.data - logits.data).max(axis=0) > 0
    assert changed[4] and changed.sum() == 1


def test_causal_mask_blocks_future_positions():
    p = _tiny()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 16))
    base = lm.forward(p, x, lm.causal_mask(6)).data
    x2 = x.copy()
    x2[4:] += rng.normal(size=(2, 16))
    out = lm.forward(p, x2, lm.causal_mask(6)).data
    assert np.array_equal(out[:4], base[:4])
    assert not np.allclose(out[4:], base[4:])


def test_self_only_row_depends_on_own_input_only():
    p = _tiny()
    rng = np.random.default_rng(2)
    mask = lm.causal_mask(5)
    mask[3] = False
    mask[3, 3] = True
    x = rng.normal(size=(5, 16))
    base = lm.forward(p, x, mask).data
    x2 = x.copy()
    x2[:3] += 1.0
    assert np.array_equal(lm.forward(p, x2, mask).data[3], base[3])


def test_all_false_mask_row_rejected():
    p = _tiny()
    mask = lm.causal_mask(4)
    mask[2] = False
    with pytest.raises(ValueError, match="no visible"):
        lm.forward(p, np.zeros((4, 16)), mask)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2 ** 16))
def test_unreachable_positions_never_change_logits(T, seed):
    # random mask; perturb a position that no row reaches transitively, through all layers
    rng = np.random.default_rng(seed)
    mask = np.tril(rng.random((T, T)) < 0.5)
    np.fill_diagonal(mask, True)
    t = int(rng.integers(T))
    reach = np.eye(T, dtype=bool)
    for _ in range(2):  # two layers
        reach = (reach.astype(int) @ mask.astype(int)).astype(bool) | reach
    hidden = np.flatnonzero(~reach[t])
    if len(hidden) == 0:
        return
    p = _tiny()
    x = rng.normal(size=(T, 16))
    base = lm.forward(p, x, mask).data[t]
    x[hidden] += rng.normal(size=(len(hidden), 16))
    assert np.array_equal(lm.forward(p, x, mask).data[t], base)


def test_soft_vector_gradient_matches_finite_differences():
    p = _tiny(d=8, layers=1, heads=2, vocab_size=12).freeze()
    rng = np.random.default_rng(3)
    toks = np.array([1, 5, 7, 2, 9])
    emb = p.arrays["tok"][toks]
    mask = lm.causal_mask(6)

    def loss(theta):
        x = nc.concat([nc.reshape(theta, (1, 8)), emb], axis=0)
        logits = lm.forward(p, x, mask)
        return lm.span_loss(logits, np.concatenate([[0], toks]), (2, 6))

    rep = nc.grad_check(loss, rng.normal(0, 0.5, 8))
    assert rep.max_rel_err < 1e-4


def test_initial_loss_close_to_log_vocab():
    data = corpus.markov_corpus(np.full((30, 30), 1 / 30), 20, 10, 0)
    vocab = lm.Vocab.build(data.n_items)
    cfg = lm.LMConfig(vocab_size=len(vocab), d=16)
    params = lm.LMParams.init(cfg, 0)
    seqs, _ = lm.build_sequences(data, vocab, cfg.context_len)
    init = lm.evaluate_nll(params, seqs, vocab[lm.PAD])
    assert abs(init - math.log(len(vocab))) / math.log(len(vocab)) < 0.05


def test_frozen_params_reject_writes():
    p = _tiny().freeze()
    with pytest.raises(lm.FrozenError):
        p.parameters()
    with pytest.raises(ValueError):
        p.arrays["tok"][0, 0] = 1.0


def test_nll_equals_cross_entropy_of_forward():
    p = _tiny()
    seq = np.array([1, 4, 6, 8, 3, 2])
    mask = lm.causal_mask(6)
    logits = lm.forward(p, p.embed(seq), mask)
    targets = np.zeros(6, dtype=np.int64)
    sel = np.zeros(6, dtype=bool)
    targets[2:5] = seq[3:6]
    sel[2:5] = True
    assert lm.nll(p, seq, mask, (3, 6)) == pytest.approx(
        nc.cross_entropy(logits, targets, sel).item(), abs=1e-14)


def test_nll_scalar_loop_oracle():
    p = _tiny(seed=4)
    seq = np.array([3, 1, 4, 1, 5])
    mask = lm.causal_mask(5)
    logits = lm.forward(p, p.embed(seq), mask).data
    total = 0.0
    for t in range(1, 5):
        row = logits[t - 1]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[seq[t]]
    assert lm.nll(p, seq, mask, (1, 5)) == pytest.approx(total / 4, abs=1e-12)


def test_nll_saturated_single_target():
    p = _tiny()
    seq = np.array([1, 2, 7])
    p.arrays["lnf.g"][:] = 0.0
    p.arrays["lnf.b"][:] = p.arrays["tok"][7] * 1e4
    assert lm.nll(p, seq, lm.causal_mask(3), (2, 3)) < 0.01


def test_nll_rejects_empty_span():
    p = _tiny()
    with pytest.raises(ValueError, match="empty"):
        lm.nll(p, [1, 2, 3], lm.causal_mask(3), (2, 2))


def test_training_left_truncates_and_counts():
    data = corpus.markov_corpus(np.full((4, 4), 0.25), 3, 40, 0)
    vocab = lm.Vocab.build(4)
    seqs, truncated = lm.build_sequences(data, vocab, context_len=20)
    assert truncated == 3 and all(len(s) == 20 for s in seqs)
    items = data.user_sequences("train")[0]
    assert np.array_equal(seqs[0][-14:-1], vocab.item(items[-13:]))


def _chain():
    rng = np.random.default_rng(5)
    P = rng.dirichlet(np.full(6, 0.3), size=6)
    return P


def _conditional_entropy(P):
    evals, evecs = np.linalg.eig(P.T)
    pi = np.real(evecs[:, np.argmin(np.abs(evals - 1))])
    pi /= pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.nansum(P * np.log(P), axis=1)
    return float(pi @ h)


@pytest.fixture(scope="module")
def markov_lm():
    P = _chain()
    train = corpus.markov_corpus(P, 300, 24, 0)
    held = corpus.markov_corpus(P, 100, 24, 1)
    vocab = lm.Vocab.build(6)
    cfg = lm.LMConfig(vocab_size=len(vocab), d=16, n_layers=1, n_heads=2, context_len=32)
    params, vocab, log = lm.train_lm(train, cfg, epochs=15, seed=0, vocab=vocab, lr=1e-2,
                                     heldout=held, patience=3)
    return P, held, params, vocab, log


def test_markov_heldout_nll_near_conditional_entropy(markov_lm):
    P, held, params, vocab, log = markov_lm
    H = _conditional_entropy(P)
    seqs, _ = lm.build_sequences(held, vocab, params.cfg.context_len, None)
    first = 1 + len(lm.DEFAULT_TASK) + 1  # skip the stationary first item
    losses = [lm.nll(params, s, lm.causal_mask(len(s)), (first, len(s) - 1)) for s in seqs]
    assert abs(np.mean(losses) - H) / H < 0.10


def test_training_lowers_heldout_loss_and_freezes(markov_lm):
    _, _, params, _, log = markov_lm
    assert log.heldout_final < log.heldout_init
    assert params.frozen


def test_checkpoint_round_trip_and_determinism(tmp_path):
    data = corpus.markov_corpus(_chain(), 30, 10, 0)
    vocab = lm.Vocab.build(6)
    cfg = lm.LMConfig(vocab_size=len(vocab), d=8, n_layers=1, n_heads=1, context_len=24)
    a, _, _ = lm.train_lm(data, cfg, epochs=2, seed=3, vocab=vocab,
                          checkpoint_path=tmp_path / "a.ckpt")
    b, _, _ = lm.train_lm(data, cfg, epochs=2, seed=3, vocab=vocab,
                          checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded = lm.LMParams.load(tmp_path / "a.ckpt")
    assert loaded.checksum() == a.checksum() == b.checksum()
    assert loaded.frozen


def test_float32_compute_matches_float64():
    p = _tiny()
    p32 = p.cast("float32")
    seq = np.array([1, 5, 9, 3])
    a = lm.nll(p, seq, lm.causal_mask(4), (1, 4))
    b = lm.nll(p32, seq, lm.causal_mask(4), (1, 4))
    assert p32.dtype == np.float32 and abs(a - b) < 1e-4
