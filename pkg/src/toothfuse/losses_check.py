"""Self-checks for the loss module: constants, worked examples, finite
difference gradients and the exhaustive Lovasz oracle.

``run_checks`` returns a JSON-ready report; every entry carries ``passed``.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import losses as L

GRAD_STEP = 1e-5
GRAD_TOL = 1e-4


def central_difference(f, x, h=GRAD_STEP):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6):
    """``max |a - f|`` over the largest gradient magnitude (at least ``floor``).

    Scaling by the whole gradient keeps near-zero components, where central
    differences only carry truncation noise, from dominating the figure.
    """
    a = np.asarray(analytic)
    f = np.asarray(numeric)
    return float(np.max(np.abs(a - f)) / max(np.max(np.abs(a)), np.max(np.abs(f)), floor))


def random_batch(rng, n=10, classes=3, dim=4):
    logits = 2.0 * rng.normal(size=(n, classes))
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    gt = rng.integers(0, classes, n)
    return p, gt, rng.normal(size=(n, dim)), rng.normal(size=(classes, dim))


def _check(name, passed, **detail):
    return {"name": name, "passed": bool(passed), **detail}


def check_constants():
    c = L.LossConfig()
    want = {"th_l": 0.38, "th_u": 0.6, "knn": 5, "boundary_fraction": 0.05, "tec_weight": 0.1}
    got = {k: getattr(c, k) for k in want}
    return _check("constants", got == want, values=got)


def check_examples():
    out = []
    b = L.EmbeddingBatch(np.array([[1.0, 0.0]]), np.array([[0.9, 0.1]]), np.array([0]))
    bank = L.PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]))
    val = L.tec_loss(b, bank, L.LossConfig(tau=1.0))[0]
    want = -2.0 * np.log(np.e / (np.e + 1.0))
    out.append(_check("tec_example", abs(val - want) < 1e-12, value=val, expected=want))

    val = L.lovasz_softmax(np.array([[0.7, 0.3]]), np.array([1]))
    out.append(_check("lovasz_single_pixel", abs(val - 0.7) < 1e-12, value=val, expected=0.7))

    pos = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    val = L.centroid_loss(np.array([[0.0, 1.0], [0.0, 1.0]]), pos, np.array([1, 0]))[0]
    out.append(_check("centroid_example", abs(val - 1.0) < 1e-12, value=val, expected=1.0))

    p = np.tile([0.5, 0.5], (6, 1))
    p[0] = [1.0, 0.0]
    val = float(L.kl_div_scores(p, np.array([[1, 2, 3, 4, 5]] * 6))[0])
    out.append(_check("boundary_kld_example", abs(val - np.log(2)) < 1e-6, value=val, expected=float(np.log(2))))

    n_sel = len(L.boundary_points(np.zeros(40)))
    out.append(_check("boundary_count_40", n_sel == 2, value=n_sel, expected=2))

    ce = np.array([0.1, 2.3])
    val = L.awohem_ce(np.c_[np.exp(-ce), 1 - np.exp(-ce)], np.array([0, 0]), kept_fraction=0.5,
                      class_weights=(1.0, 1.0))
    out.append(_check("awohem_example", abs(val - 2.3) < 1e-12, value=val, expected=2.3))

    mu = L.update_prototypes(L.PrototypeBank(np.array([[1.0, 0.0], [0.0, 1.0]]), rho=0.9),
                             L.EmbeddingBatch(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]]), np.array([0])))
    ok = np.allclose(mu.prototypes, [[0.9, 0.1], [0.0, 1.0]], atol=1e-15)
    out.append(_check("prototype_ema", ok, value=mu.prototypes.tolist()))
    return out


def check_gradients(n_batches=50, seed=0):
    worst_tec = worst_cen = 0.0
    rng = np.random.default_rng(seed)
    cfg = L.LossConfig()
    for _ in range(n_batches):
        p, gt, e, mu = random_batch(rng)
        batch = L.EmbeddingBatch(e, p, gt)
        bank = L.PrototypeBank(mu)
        g = L.tec_loss(batch, bank, cfg)[1]
        f = central_difference(lambda x: L.tec_loss(batch.with_embeddings(x), bank, cfg)[0], e)
        worst_tec = max(worst_tec, relative_error(g, f))
        pos = 5.0 * rng.normal(size=(len(p), 3))
        g = L.centroid_loss(p, pos, gt, cfg)[1]
        f = central_difference(lambda x: L.centroid_loss(p, x, gt, cfg)[0], pos)
        worst_cen = max(worst_cen, relative_error(g, f))
    return [_check("tec_gradient", worst_tec < GRAD_TOL, max_relative_error=worst_tec, batches=n_batches),
            _check("centroid_gradient", worst_cen < GRAD_TOL, max_relative_error=worst_cen, batches=n_batches)]


def check_lovasz_exhaustive(max_pixels=6, grid=(0.0, 0.3, 0.65, 1.0)):
    """Every binary labelling of up to ``max_pixels`` pixels against every
    foreground probability on ``grid``."""
    worst = 0.0
    cases = 0
    g = np.asarray(grid)
    for n in range(1, max_pixels + 1):
        probs = np.array(list(itertools.product(g, repeat=n)))
        for lab in itertools.product((0, 1), repeat=n):
            lab = np.array(lab)
            for pv in probs:
                pr = np.c_[1.0 - pv, pv]
                worst = max(worst, abs(L.lovasz_softmax(pr, lab) - L.lovasz_softmax_bruteforce(pr, lab)))
                cases += 1
    return _check("lovasz_exhaustive", worst <= 1e-12, cases=cases, max_abs_error=worst)


def run_checks(n_batches=50, seed=0, lovasz_pixels=6):
    checks = [check_constants(), *check_examples(), *check_gradients(n_batches, seed),
              check_lovasz_exhaustive(lovasz_pixels)]
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
