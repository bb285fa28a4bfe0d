import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toothfuse.losses import (EmbeddingBatch, LossConfig, LossError, PrototypeBank, awohem_ce, boundary_loss,
                              boundary_points, centroid_loss, kl_div_scores, kld, knn_graph, lovasz_softmax,
                              lovasz_softmax_bruteforce, seg_loss, tec_loss, tec_penalties, threshold_probs,
                              update_prototypes)
from toothfuse.losses_check import central_difference, random_batch, relative_error


def _batch(emb, pred, gt, classes=2):
    probs = np.full((len(pred), classes), 0.1 / (classes - 1))
    probs[np.arange(len(pred)), pred] = 0.9
    return EmbeddingBatch(np.asarray(emb, dtype=float), probs, np.asarray(gt))


def _random(rng):
    p, g, e, mu = random_batch(rng)
    return EmbeddingBatch(e, p, g), PrototypeBank(mu)


def test_defaults():
    c = LossConfig()
    assert (c.th_l, c.th_u, c.knn, c.boundary_fraction, c.tec_weight) == (0.38, 0.6, 5, 0.05, 0.1)
    with pytest.raises(LossError):
        LossConfig(tau=0)


def test_prototype_ema():
    b = _batch([[1, 0], [0, 1]], [0, 0], [0, 0])
    bank = PrototypeBank(np.array([[5.0, 5.0], [2.0, 3.0]]), rho=1.0)
    assert np.array_equal(update_prototypes(bank, b).prototypes, bank.prototypes)
    out = update_prototypes(PrototypeBank(bank.prototypes, 0.0), b).prototypes
    assert np.allclose(out[0], [0.5, 0.5]) and np.array_equal(out[1], [2.0, 3.0])
    b2 = _batch([[0, 1]], [0], [0])
    assert np.allclose(update_prototypes(PrototypeBank([[1.0, 0], [0, 1.0]], 0.9), b2).prototypes[0], [0.9, 0.1])


def test_penalty_examples():
    assert tec_penalties(_batch([[1, 0], [0, 1]], [0, 1], [0, 1]), 0) == (0.0, 0.0)
    # pixel 1 is predicted 0 but is class 1: a false positive for class 0, antipodal to the anchor
    t_fp, t_fn = tec_penalties(_batch([[1, 0], [-2, 0]], [0, 0], [0, 1]), 0)
    assert t_fp == pytest.approx(0.0, abs=1e-15) and t_fn == 0.0
    # pixel 1 is class 0 but predicted 1: a false negative, orthogonal to the anchor
    t_fp, t_fn = tec_penalties(_batch([[1, 0], [0, 3]], [0, 1], [0, 0]), 0)
    assert t_fp == 0.0 and t_fn == pytest.approx(1.0, abs=1e-15)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_penalty_ranges(seed):
    b, _ = _random(np.random.default_rng(seed))
    for i in range(len(b.gt)):
        t_fp, t_fn = tec_penalties(b, i)
        assert -1e-12 <= t_fp <= 2 + 1e-12 and -1e-12 <= t_fn <= 2 + 1e-12


def test_tec_scalar_example():
    b = _batch([[1.0, 0.0]], [0], [0])
    bank = PrototypeBank([[1.0, 0.0], [0.0, 1.0]])
    loss, grad = tec_loss(b, bank, LossConfig(tau=1.0))
    assert loss == pytest.approx(-2 * np.log(np.e / (np.e + 1)), abs=1e-12)
    assert grad.shape == (1, 2)


def test_tec_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(5):
        b, bank = _random(rng)
        _, grad = tec_loss(b, bank)
        fd = central_difference(lambda e: tec_loss(b.with_embeddings(e), bank)[0], b.embeddings)
        assert relative_error(grad, fd) < 1e-4


def test_tec_errors():
    b = _batch([[0.0, 0.0]], [0], [0])
    with pytest.raises(LossError):
        tec_loss(b, PrototypeBank([[1.0, 0.0], [0.0, 1.0]]))


def test_awohem_examples():
    p = np.array([[np.exp(-0.1), 1 - np.exp(-0.1)], [1 - np.exp(-2.3), np.exp(-2.3)]])
    g = np.array([0, 1])
    assert awohem_ce(p, g, kept_fraction=0.5, class_weights=(1, 1)) == pytest.approx(2.3)
    assert awohem_ce(p, g, kept_fraction=1.0, class_weights=(1, 1)) == pytest.approx(1.2)
    # weight 2 on class 1 doubles that pixel's contribution
    assert awohem_ce(p, g, kept_fraction=1.0, class_weights=(1, 2)) == pytest.approx((0.1 + 4.6) / 2)
    with pytest.raises(LossError):
        awohem_ce(p, g, kept_fraction=0)


def test_seg_loss_combines():
    rng = np.random.default_rng(1)
    b, bank = _random(rng)
    c = LossConfig()
    assert seg_loss(b, bank, c) == pytest.approx(awohem_ce(b.probs, b.gt, c) + 0.1 * tec_loss(b, bank, c)[0])


def test_lovasz_examples():
    assert lovasz_softmax(np.eye(3)[[0, 1, 2, 1]], [0, 1, 2, 1]) == 0.0
    assert lovasz_softmax([[0.3, 0.7]], [0]) == pytest.approx(0.7)


@given(st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_lovasz_matches_bruteforce_and_range(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=n)
    g = rng.integers(0, 3, size=n)
    v = lovasz_softmax(p, g)
    assert v == pytest.approx(lovasz_softmax_bruteforce(p, g), abs=1e-12)
    assert 0 <= v <= 1


def test_lovasz_monotone_in_correct_probability():
    g = np.array([0, 1, 0, 1])
    vals = []
    for q in np.linspace(0.5, 1.0, 6):
        p = np.array([[q, 1 - q], [1 - q, q], [q, 1 - q], [1 - q, q]])
        vals.append(lovasz_softmax(p, g))
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_threshold_examples():
    assert threshold_probs([0.7, 0.3, 0.5, 0.6, 0.38]).tolist() == [1.0, 0.0, 0.5, 0.6, 0.38]


def test_centroid_examples():
    pos = np.array([[0, 0, 0], [2, 0, 0.0]])
    # class 1 predicted on both points, gold class 1 only at x = 0
    probs = np.array([[0.1, 0.9], [0.1, 0.9]])
    loss, _ = centroid_loss(probs, pos, np.array([1, 0]))
    assert loss == pytest.approx(1.0)
    loss, grad = centroid_loss(probs, pos, np.array([1, 1]))
    assert loss == 0.0 and not grad.any()


def test_centroid_translation_invariant_and_gradient():
    rng = np.random.default_rng(2)
    for _ in range(5):
        p = rng.dirichlet(np.ones(3) * 0.5, size=12)
        s = rng.normal(size=(12, 3)) * 4
        g = rng.integers(0, 3, size=12)
        a, grad = centroid_loss(p, s, g)
        b, _ = centroid_loss(p, s + rng.normal(size=3) * 10, g)
        assert abs(a - b) < 1e-9
        fd = central_difference(lambda x: centroid_loss(p, x, g)[0], s)
        assert relative_error(grad, fd) < 1e-4


def test_kld_and_scores():
    assert kld([1.0, 0.0], [0.5, 0.5], eps=1e-12) == pytest.approx(np.log(2), abs=1e-9)
    p = np.array([[1.0, 0.0]] + [[1.0, 0.0]] * 4 + [[0.5, 0.5]])
    nb = np.array([[1, 2, 3, 4, 5]] + [[0, 1, 2, 3, 4]] * 5)
    assert kl_div_scores(p, nb, eps=1e-12)[0] == pytest.approx(np.log(2), abs=1e-9)


def test_knn_excludes_self():
    s = np.random.default_rng(3).normal(size=(30, 3))
    nb = knn_graph(s, 5)
    assert nb.shape == (30, 5) and not np.any(nb == np.arange(30)[:, None])
    with pytest.raises(LossError):
        knn_graph(s[:5], 5)


def test_boundary_count_and_tiebreak():
    rng = np.random.default_rng(4)
    pos = rng.normal(size=(40, 3))
    probs = np.tile([0.7, 0.3], (40, 1))
    gt = np.zeros(40, dtype=int)
    loss, sel = boundary_loss(probs, pos, gt)
    assert sel.tolist() == [0, 1]
    assert loss == pytest.approx(-np.log(0.7))
    assert len(boundary_points(np.zeros(41))) == 3


def test_boundary_selects_interface():
    x = np.arange(40, dtype=float)
    pos = np.c_[x, np.zeros(40), np.zeros(40)]
    probs = np.where(x[:, None] < 20, [0.9, 0.1], [0.1, 0.9])
    gt = (x >= 20).astype(int)
    _, sel = boundary_loss(probs, pos, gt)
    assert set(sel.tolist()) <= set(range(17, 23))
