import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from userip import numcore as nc
from userip import quant
from userip.numcore import Tensor


def test_nearest_examples():
    table = np.random.default_rng(0).normal(size=(4, 3))
    assert quant.nearest(table[2], table) == 2
    assert quant.nearest([5.0, -1.0, 2.0], table[:1]) == 0
    assert quant.nearest([1.0, 0.0], [[0.0, 0.0], [2.0, 2.0]]) == 0


def test_nearest_ties_go_to_lowest_index():
    assert quant.nearest([1.0, 0.0], [[2.0, 0.0], [0.0, 0.0], [1.0, 1.0]]) == 0


def test_nearest_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        quant.nearest([1.0], np.zeros((0, 1)))
    with pytest.raises(nc.ShapeError):
        quant.nearest([1.0, 2.0], np.zeros((3, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_nearest_matches_brute_force(K, d, seed):
    rng = np.random.default_rng(seed)
    table = rng.integers(-2, 3, (K, d)).astype(float)  # small integers force ties
    x = rng.integers(-2, 3, d).astype(float)
    dists = [sum((x[j] - table[k, j]) ** 2 for j in range(d)) for k in range(K)]
    assert quant.nearest(x, table) == dists.index(min(dists))


def _book(*tables):
    return quant.Codebook([np.asarray(t, dtype=float) for t in tables])


def test_vq_loss_hand_value_and_zero_case():
    book = _book([[0.0, 0.0], [5.0, 5.0]])
    loss, codes = quant.vq_loss([Tensor([[1.0, 0.0]])], book, beta=0.001)
    assert loss.item() == pytest.approx(1.001, abs=1e-15) and codes[0].tolist() == [0]
    loss, _ = quant.vq_loss([Tensor([[5.0, 5.0]])], book, beta=0.001)
    assert loss.item() == 0.0
    with pytest.raises(ValueError):
        quant.vq_loss([Tensor([[1.0, 0.0]])], book, beta=-1.0)


def test_vq_stop_gradient_routing():
    rng = np.random.default_rng(1)
    theta0 = rng.normal(size=(3, 2))
    table0 = rng.normal(size=(2, 2))
    beta = 0.25
    with nc.tape_scope():
        th = Tensor(theta0, requires_grad=True)
        book = quant.Codebook([table0])
        loss, codes = quant.vq_loss([th], book, beta)
        nc.backward(loss)
    v = table0[codes[0]]
    # theta sees only the commitment term, the codebook only the pull term
    assert np.allclose(th.grad, 2 * beta * (theta0 - v) / 3, atol=1e-14)
    expected = np.zeros_like(table0)
    np.add.at(expected, codes[0], 2 * (v - theta0) / 3)
    assert np.allclose(book.tensors[0].grad, expected, atol=1e-14)


def test_vq_stop_gradient_exactness_under_perturbation():
    # perturbing v changes the commitment value but the pull term's theta-gradient stays zero
    rng = np.random.default_rng(2)
    theta0 = rng.normal(size=(4, 3))
    table0 = rng.normal(size=(2, 3))
    codes = [quant.nearest_all(theta0, table0)]

    def grads(table, beta):
        with nc.tape_scope():
            th = Tensor(theta0, requires_grad=True)
            book = quant.Codebook([table])
            loss, _ = quant.vq_loss([th], book, beta, codes)
            nc.backward(loss)
        return loss.item(), th.grad.copy(), book.tensors[0].grad.copy()

    l0, g_th0, _ = grads(table0, 0.0)
    l1, g_th1, g_v1 = grads(table0 + 0.1, 0.0)
    assert l0 != l1 and not g_th0.any() and not g_th1.any() and g_v1.any()
    _, _, g_v = grads(table0, 1.0)
    _, _, g_v_pull = grads(table0, 0.0)
    assert np.array_equal(g_v, g_v_pull)


def test_straight_through_forward_and_identity_backward():
    rng = np.random.default_rng(3)
    table = rng.normal(size=(3, 4))
    theta0 = rng.normal(size=(5, 4))
    w = rng.normal(size=(4, 1))
    with nc.tape_scope():
        th = Tensor(theta0, requires_grad=True)
        q = quant.straight_through(th, table)
        loss = nc.tsum(nc.tanh(nc.matmul(q, w)))
        nc.backward(loss)
    codes = quant.nearest_all(theta0, table)
    assert np.array_equal(q.data, table[codes])
    dq = (1 - np.tanh(table[codes] @ w) ** 2) * w.T
    assert np.allclose(th.grad, dq, atol=1e-14)


def test_bce_through_quantizer_matches_fd_with_fixed_assignment():
    rng = np.random.default_rng(4)
    book = quant.Codebook([rng.normal(size=(3, 4))])
    theta0 = rng.normal(size=(6, 4))
    codes = quant.nearest_all(theta0, book.tables[0])
    rec = quant.SurrogateRec([4], n_items=5, seed=0)
    items = rng.integers(0, 5, 6)
    labels = rng.integers(0, 2, 6)

    with nc.tape_scope():
        th = Tensor(theta0, requires_grad=True)
        l = quant.surrogate_loss(rec.forward([quant.straight_through(th, book.tables[0], codes)],
                                             items), labels)
        nc.backward(l)
    # FD through the relaxation q(th) = v + (th - th0): same gradient at th0
    rep = nc.grad_check(lambda t: quant.surrogate_loss(
        rec.forward([Tensor(book.tables[0][codes]) + (t - Tensor(theta0))], items), labels),
        theta0)
    assert rep.max_rel_err < 1e-4
    assert np.allclose(th.grad, rep.analytic, rtol=1e-10, atol=1e-14)


def test_surrogate_loss_values():
    assert quant.surrogate_loss(Tensor([0.5, 0.5]), [0, 1]).item() == pytest.approx(math.log(2))
    assert quant.surrogate_loss(Tensor([1.0, 0.0]), [1, 0]).item() < 1e-11
    rng = np.random.default_rng(5)
    p = rng.uniform(0.01, 0.99, 8)
    y = rng.integers(0, 2, 8)
    oracle = 0.0
    for pi, yi in zip(p, y):
        oracle -= math.log(pi) if yi else math.log(1 - pi)
    assert quant.surrogate_loss(Tensor(p), y).item() == pytest.approx(oracle / 8, abs=1e-12)
    with pytest.raises(ValueError):
        quant.surrogate_loss(Tensor([0.5]), [2])


def test_total_loss_examples():
    assert quant.total_loss(Tensor(2.0), Tensor(1.001), 0.001).item() == pytest.approx(
        2.001001, abs=1e-15)
    assert quant.total_loss(Tensor(2.0), Tensor(7.0), 0.0).item() == 2.0
    assert quant.total_loss(Tensor(2.0), Tensor(0.0), 1.0).item() == 2.0
    with pytest.raises(ValueError):
        quant.total_loss(Tensor(2.0), Tensor(1.0), -1.0)


def test_total_loss_single_backward_reaches_all_parts():
    rng = np.random.default_rng(6)
    book = quant.Codebook([rng.normal(size=(2, 3))])
    rec = quant.SurrogateRec([3], n_items=4, seed=1)
    with nc.tape_scope():
        th = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        llm = nc.tsum(th ** 2)
        vq, codes = quant.vq_loss([th], book, 0.001)
        q = quant.straight_through(th, book.tensors[0], codes[0])
        vec = vq + quant.surrogate_loss(rec.forward([q], [0, 1, 2, 3]), [1, 0, 1, 0])
        nc.backward(quant.total_loss(llm, vec, 0.001))
    assert th.grad.any() and book.tensors[0].grad.any()
    assert all(p.grad.any() for p in rec.parameters() if p.data.ndim > 1)


def test_assign_all_examples():
    book = _book([[0.0], [1.0], [2.0]], [[0.0, 0.0], [3.0, 3.0]])
    same = [np.ones((5, 1)) * 1.1, np.ones((5, 2))]
    a = quant.assign_all(same, book)
    assert (a.codes == a.codes[0]).all()
    assert [int((u > 0).sum()) for u in book.usage] == [1, 1]
    assert a.dead == [[0, 2], [1]]


def test_assign_all_permutation_invariant():
    rng = np.random.default_rng(7)
    book = quant.Codebook([rng.normal(size=(4, 3))])
    x = rng.normal(size=(20, 3))
    perm = rng.permutation(20)
    a = quant.assign_all([x], book)
    b = quant.assign_all([x[perm]], book, user_ids=perm)
    assert a.as_dict() == b.as_dict()


def test_assignment_validation():
    with pytest.raises(ValueError):
        quant.Assignment(np.array([[4]]), (4,))
    with pytest.raises(ValueError):
        quant.Assignment(np.array([[0], [1]]), (4,), np.array([3, 3]))


def test_codebook_checkpoint_round_trip(tmp_path):
    book = quant.Codebook.random((4, 3), (8, 8), seed=0)
    quant.assign_all([np.random.default_rng(0).normal(size=(10, 8))] * 2, book)
    book.save(tmp_path / "c.ckpt")
    loaded = quant.Codebook.load(tmp_path / "c.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(loaded.tables, book.tables))
    assert all(np.array_equal(a, b) for a, b in zip(loaded.usage, book.usage))


def test_codebook_invariants():
    with pytest.raises(ValueError):
        quant.Codebook([np.zeros((0, 2))])
    with pytest.raises(ValueError):
        quant.Codebook([np.array([[np.nan, 0.0]])])


def _blobs(seed, n=120, k=4, d=6):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 3, (k, d))
    labels = rng.integers(0, k, n)
    return centers[labels] + rng.normal(0, 0.5, (n, d)), labels


def test_kmeans_pp_seeds_distinct_rows_of_input():
    x, _ = _blobs(0)
    c = quant.kmeans_pp(x, 4, np.random.default_rng(0))
    assert c.shape == (4, 6)
    assert all(any(np.array_equal(r, xi) for xi in x) for r in c)
    assert len({tuple(r) for r in c}) == 4


def test_codebook_pull_never_raises_quantization_error_with_fixed_vectors():
    # codebook-only updates on fixed vectors: the pull term is a k-means step
    finals = []
    for seed in range(5):
        x, _ = _blobs(seed)
        rng = np.random.default_rng(seed)
        book = quant.Codebook([quant.kmeans_pp(x, 4, rng)])
        opt = nc.Adam(book.parameters(), lr=0.05)
        errs = [quant.quantization_error([x], book)]
        for _ in range(30):
            for b in range(0, len(x), 32):
                opt.zero_grad()
                with nc.tape_scope():
                    loss, _ = quant.vq_loss([Tensor(x[b:b + 32])], book, beta=0.001)
                    nc.backward(loss)
                opt.step()
                book.tables[0] = book.tensors[0].data
            errs.append(quant.quantization_error([x], book))
        finals.append(np.diff(errs))
    assert np.median(np.stack(finals), axis=0).max() <= 1e-3


def test_purity_and_ari_against_oracles():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(2, 60))
        pred = rng.integers(0, int(rng.integers(1, 6)), n)
        truth = rng.integers(0, int(rng.integers(1, 6)), n)
        assert quant.adjusted_rand_index(pred, truth) == pytest.approx(
            adjusted_rand_score(truth, pred), abs=1e-12)
        best = sum(max(int(np.sum((pred == k) & (truth == c))) for c in set(truth))
                   for k in set(pred))
        assert quant.purity(pred, truth) == best / n
    assert quant.purity([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0


def _interactions(n_users, n_items, rng):
    return [(rng.integers(0, n_items, 5), rng.integers(0, 2, 5)) for _ in range(n_users)]


class _Table:
    def __init__(self, data, widths):
        self.data, self.widths = data, widths

    def profile(self, m):
        a = sum(self.widths[:m])
        return self.data[:, a:a + self.widths[m]].reshape(len(self.data), -1)


def test_joint_quantizer_seeds_then_adds_weighted_term():
    rng = np.random.default_rng(9)
    jq = quant.JointQuantizer(quant.QuantConfig(sizes=(2, 2)), (1, 1), 4, 6,
                              _interactions(8, 6, rng), seed=0)
    theta = Tensor(rng.normal(size=(8, 2, 4)), requires_grad=True)
    assert jq.loss(0, np.arange(8), theta).item() == 0.0
    jq.epoch_end(0, _Table(theta.data, (1, 1)))
    assert jq.seeded and len(jq.errors) == 1
    with nc.tape_scope():
        term = jq.loss(1, np.arange(8), theta)
        nc.backward(term)
    assert term.item() > 0 and theta.grad.any()
    before = [t.copy() for t in jq.book.tables]
    jq.after_step()
    assert any(not np.array_equal(a, b) for a, b in zip(before, jq.book.tables))


def test_joint_quantizer_reseeds_dead_codes():
    rng = np.random.default_rng(10)
    jq = quant.JointQuantizer(quant.QuantConfig(sizes=(3,)), (1,), 2, 4,
                              _interactions(6, 4, rng), seed=0)
    data = np.zeros((6, 1, 2))
    jq.epoch_end(0, _Table(data + rng.normal(size=data.shape), (1,)))
    jq.epoch_usage[0][:] = [6, 0, 0]
    jq.epoch_end(1, _Table(data, (1,)))
    assert jq.reseeded == [2]
    assert np.abs(jq.book.tables[0][1:]).max() < 0.1  # moved onto live vectors (all zero)


def test_surrogate_rec_rejects_unknown_fields():
    with pytest.raises(ValueError):
        quant.SurrogateRec([2], 3, quant.SurrogateRecConfig(obs_fields=("item", "age")))
