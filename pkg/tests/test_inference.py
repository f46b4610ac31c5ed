import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from userip import inference as inf
from userip import lm
from userip import numcore as nc
from userip.numcore import Tensor

N_ITEMS = 12


@pytest.fixture(scope="module")
def vocab():
    return lm.Vocab.build(N_ITEMS)


def _frozen(vocab, d=16, seed=0, dtype="float64", layers=2):
    cfg = lm.LMConfig(vocab_size=len(vocab), d=d, n_layers=layers, n_heads=2, context_len=40,
                      compute_dtype=dtype)
    return lm.LMParams.init(cfg, seed).freeze()


@pytest.fixture(scope="module")
def params(vocab):
    return _frozen(vocab)


def test_layout_worked_example(vocab):
    tpl = inf.PromptTemplate.default(2)
    assert [len(n) for n in tpl.names] == [4, 3] and len(tpl.task) == 5
    layout = inf.build_layout(tpl, vocab, vocab.item(np.arange(6)))
    assert len(layout) == 20
    assert [(k, g, b - a) for k, g, a, b in layout.segments] == [
        ("name", 0, 4), ("soft", 0, 1), ("name", 1, 3), ("soft", 1, 1), ("task", -1, 5),
        ("target", -1, 6)]
    assert layout.target_span == (14, 20)


def test_layout_round_trips_to_prompt_order(vocab):
    tpl = inf.PromptTemplate.default(3, widths=(1, 2, 1))
    layout = inf.build_layout(tpl, vocab, vocab.item([3, 4]))
    rebuilt = []
    for kind, g, a, b in layout.segments:
        if kind == "name":
            rebuilt += list(tpl.names[g])
        elif kind == "soft":
            rebuilt += [f"<soft{g}>"] * (b - a)
        elif kind == "task":
            rebuilt += list(tpl.task)
        else:
            rebuilt += [vocab.symbols[t] for t in layout.tokens[a:b]]
    expected = []
    for name, w, g in zip(tpl.names, tpl.widths, range(3)):
        expected += list(name) + [f"<soft{g}>"] * w
    expected += list(tpl.task) + ["item:3", "item:4"]
    assert rebuilt == expected


def test_template_invariants():
    with pytest.raises(ValueError):
        inf.PromptTemplate([])
    with pytest.raises(ValueError):
        inf.PromptTemplate([("a",), ()])
    with pytest.raises(ValueError):
        inf.PromptTemplate([("a",)], widths=(0,))


def _mask(vocab, M=2, n=6, **kw):
    tpl = inf.PromptTemplate.default(M, **kw)
    layout = inf.build_layout(tpl, vocab, vocab.item(np.arange(n)))
    return layout, inf.build_causal_mask(layout, tpl.names_see_earlier)


def test_soft_row_sees_only_own_name_and_itself(vocab):
    layout, mask = _mask(vocab)
    for m in range(2):
        s = layout.span("soft", m)[0]
        a, b = layout.span("name", m)
        assert set(np.flatnonzero(mask[s])) == set(range(a, b)) | {s}


def test_first_target_row_sees_every_prior_position(vocab):
    layout, mask = _mask(vocab)
    t = layout.target_span[0]
    assert mask[t, :t + 1].all() and not mask[t, t + 1:].any()


def test_name_rows_isolated_between_profiles(vocab):
    layout, mask = _mask(vocab)
    a, b = layout.span("name", 1)
    for i in range(a, b):
        assert set(np.flatnonzero(mask[i])) == set(range(a, i + 1))
    _, loose = _mask(vocab, names_see_earlier=True)
    a0, b0 = layout.span("name", 0)
    assert loose[a, a0:b0].all()


def test_delimiter_rows_and_target_sees_delimiters(vocab):
    layout, mask = _mask(vocab, delimiter=True)
    d0 = layout.span("delim", 0)[0]
    n0 = layout.span("name", 0)
    assert set(np.flatnonzero(mask[d0])) == set(range(n0[0], d0 + 1))
    t = layout.target_span[0]
    assert mask[t, d0]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 3), min_size=4, max_size=4),
       st.integers(1, 8), st.booleans(), st.booleans())
def test_mask_never_attends_forward_and_always_self(M, widths, n, delim, loose):
    v = lm.Vocab.build(N_ITEMS)
    tpl = inf.PromptTemplate.default(M, widths=tuple(widths[:M]), delimiter=delim,
                                     names_see_earlier=loose)
    layout = inf.build_layout(tpl, v, v.item(np.arange(n) % N_ITEMS))
    mask = inf.build_causal_mask(layout, loose)
    assert not np.triu(mask, 1).any()
    assert mask.diagonal().all()
    kinds = np.array(layout.kinds)
    assert kinds[-n:].tolist() == ["target"] * n


def test_assembly_injects_soft_vectors_at_slots(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    theta = np.random.default_rng(0).normal(size=(2, 16))
    x, layout = inf.assemble_prompt(theta, tpl, [1, 2, 3], params, vocab)
    soft = np.flatnonzero(layout.soft_slot >= 0)
    assert np.array_equal(x.data[soft], theta)
    other = np.flatnonzero(layout.soft_slot < 0)
    assert np.array_equal(x.data[other], params.arrays["tok"][layout.tokens[other]])


def test_assembly_truncates_from_the_left(vocab, params, caplog):
    tpl = inf.PromptTemplate.default(2)
    room = params.cfg.context_len - tpl.prefix_len
    beh = np.arange(room + 5) % N_ITEMS
    x, layout = inf.assemble_prompt(np.zeros((2, 16)), tpl, beh, params, vocab)
    assert len(layout) == params.cfg.context_len
    assert np.array_equal(layout.tokens[-room:], vocab.item(beh[-room:]))
    assert "truncated" in caplog.text


def test_empty_behavior_rejected(vocab, params):
    with pytest.raises(ValueError):
        inf.assemble_prompt(np.zeros((2, 16)), inf.PromptTemplate.default(2), [], params, vocab)


def test_mask_restriction_literal(vocab, params):
    # perturbing profile-0 name tokens leaves soft-1 logits bit-identical
    tpl = inf.PromptTemplate.default(2)
    theta = np.random.default_rng(1).normal(0, 0.1, (2, 16))
    x, layout = inf.assemble_prompt(theta, tpl, [1, 2, 3, 4], params, vocab)
    mask = inf.build_causal_mask(layout)
    a, b = layout.span("name", 0)
    s1 = layout.span("soft", 1)[0]
    x2 = x.data.copy()
    x2[a:b] += np.random.default_rng(2).normal(size=(b - a, 16))
    base = lm.forward(params, x.data, mask).data
    pert = lm.forward(params, x2, mask).data
    assert np.array_equal(base[s1], pert[s1])
    full = lm.causal_mask(len(layout))
    assert not np.allclose(lm.forward(params, x.data, full).data[s1],
                           lm.forward(params, x2, full).data[s1])


def test_llm_loss_gradient_matches_finite_differences(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    beh = [3, 1, 4, 1, 5]
    theta0 = params.arrays["tok"].mean(0) + np.random.default_rng(3).normal(0, 0.3, (2, 16))
    rep = nc.grad_check(lambda t: inf.llm_loss(t, beh, tpl, params, vocab), theta0)
    assert rep.max_rel_err < 1e-4


def test_only_theta_receives_gradient(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    with nc.tape_scope():
        theta = Tensor(np.zeros((2, 16)), requires_grad=True)
        loss = inf.llm_loss(theta, [1, 2, 3], tpl, params, vocab)
        nc.backward(loss)
    assert theta.grad is not None and np.abs(theta.grad).sum() > 0
    assert all(not t.requires_grad for t in params.tensors.values())
    assert all(t.grad is None or not t.grad.any() for t in params.tensors.values())


def test_loss_depends_on_theta_and_mask(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    beh = [1, 2, 3, 4]
    rng = np.random.default_rng(4)
    t0 = rng.normal(0, 0.5, (2, 16))
    base = inf.llm_loss(t0, beh, tpl, params, vocab).item()
    assert inf.llm_loss(t0 + rng.normal(0, 0.5, t0.shape), beh, tpl, params, vocab).item() != base
    _, layout = inf.assemble_prompt(t0, tpl, beh, params, vocab)
    full = inf.llm_loss(t0, beh, tpl, params, vocab, mask=lm.causal_mask(len(layout))).item()
    assert full != base


def test_identical_users_identical_loss(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    theta = np.random.default_rng(5).normal(size=(2, 16))
    a = inf.llm_loss(theta, [5, 6, 7], tpl, params, vocab).item()
    b = inf.llm_loss(theta.copy(), [5, 6, 7], tpl, params, vocab).item()
    assert a == b


def test_batched_loss_matches_single_user_pooling(vocab, params):
    tpl = inf.PromptTemplate.default(2)
    rng = np.random.default_rng(6)
    theta = rng.normal(0, 0.1, (2, 2, 16))
    behs = [np.array([1, 2, 3, 4, 5]), np.array([7, 8])]
    batch = inf.assemble_batch(Tensor(theta), tpl, behs, params, vocab)
    pooled = inf.batch_loss(params, batch).item()
    singles = [inf.llm_loss(theta[i], behs[i], tpl, params, vocab).item() for i in range(2)]
    # token-weighted pooling over 5 and 2 target tokens
    assert pooled == pytest.approx((5 * singles[0] + 2 * singles[1]) / 7, rel=1e-10)


def _behaviors(n, rng):
    return [rng.integers(0, N_ITEMS, rng.integers(3, 8)) for _ in range(n)]


def test_infer_profiles_contract(vocab, params, tmp_path):
    tpl = inf.PromptTemplate.default(2)
    behs = _behaviors(10, np.random.default_rng(7))
    cfg = inf.InferConfig(lr=1e-2, epochs=4, batch_size=4)
    before = params.checksum()
    a = inf.infer_profiles(behs, params, vocab, tpl, cfg, seed=1,
                           checkpoint_path=tmp_path / "t.ckpt")
    b = inf.infer_profiles(behs, params, vocab, tpl, cfg, seed=1)
    assert params.checksum() == before == a.lm_checksum
    assert np.array_equal(a.table.data, b.table.data)
    assert a.losses[-1] < a.initial_loss
    loaded = inf.SoftProfileTable.load(tmp_path / "t.ckpt")
    assert np.array_equal(loaded.data, a.table.data) and loaded.widths == (1, 1)


def test_infer_requires_frozen_lm(vocab):
    cfg = lm.LMConfig(vocab_size=len(vocab), d=16, context_len=40)
    live = lm.LMParams.init(cfg, 0)
    with pytest.raises(lm.FrozenError):
        inf.infer_profiles([[1, 2]], live, vocab, inf.PromptTemplate.default(1))


def test_divergence_guard(vocab, params):
    cfg = inf.InferConfig(lr=1e-2, epochs=3, batch_size=4, divergence_factor=0.0)
    with pytest.raises(inf.DivergenceError, match="exceeds"):
        inf.infer_profiles(_behaviors(4, np.random.default_rng(0)), params, vocab,
                           inf.PromptTemplate.default(2), cfg)


def test_init_is_mean_embedding_plus_small_noise(vocab, params):
    table = inf.SoftProfileTable.init(200, inf.PromptTemplate.default(2), params, seed=3)
    noise = table.data - params.arrays["tok"].mean(0)
    assert abs(noise.std() - 0.02) < 0.002 and abs(noise.mean()) < 0.002


def test_soft_profile_set_splits_widths(vocab, params):
    tpl = inf.PromptTemplate.default(2, widths=(2, 1))
    table = inf.SoftProfileTable.init(3, tpl, params, seed=0)
    s = inf.SoftProfileSet.from_table(table, 1)
    assert [t.shape for t in s.theta] == [(2, 16), (1, 16)]
    assert table.profile(0).shape == (3, 32)


def test_export_attention_normalized_per_user_table(vocab, params, tmp_path):
    tpl = inf.PromptTemplate.default(2)
    behs = _behaviors(3, np.random.default_rng(8))
    before = inf.SoftProfileTable.init(3, tpl, params, seed=0)
    after = inf.SoftProfileTable(before.data + np.random.default_rng(1).normal(0, 1, before.data.shape),
                                 before.widths)
    rows = inf.export_attention(range(3), {"before": before, "after": after}, params, vocab, tpl,
                                behs, tmp_path / "att.csv")
    for u in range(3):
        w = [r["weight"] for r in rows if r["user"] == u]
        assert min(w) == 0.0 and max(w) == 1.0
        # one scale across stages: normalized order agrees with raw order
        raw = np.array([r["raw"] for r in rows if r["user"] == u])
        assert np.array_equal(np.argsort(raw, kind="stable"), np.argsort(w, kind="stable"))
    header = (tmp_path / "att.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["user", "profile_index", "token", "stage", "weight"]
    assert 0.0 <= inf.target_attention(rows, 0, "after", 1) <= 1.0


def test_profile_documents_use_category_anchors(vocab, params):
    cats = np.arange(N_ITEMS) % 2
    docs = inf.ProfileDocuments(inf.PromptTemplate.default(2), vocab, cats, rate=1.0)
    items = np.array([0, 1, 2, 3, 4, 5])
    anchors = docs._anchors(items, np.random.default_rng(0))
    assert cats[anchors].tolist() == [0, 1]
    assert docs._anchors(np.array([0, 2, 4]), np.random.default_rng(0)) is None
    seq = np.concatenate([[vocab[lm.BOS]], vocab.encode(lm.DEFAULT_TASK), vocab.item(items),
                          [vocab[lm.EOS]]])
    loss = docs(params, [seq, seq], np.random.default_rng(0), training=False)
    assert np.isfinite(loss.item())
    with pytest.raises(ValueError):
        inf.ProfileDocuments(inf.PromptTemplate.default(2), vocab, None)
