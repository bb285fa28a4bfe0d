"""Training objectives of the segmentation networks, as plain numpy.

Each loss returns its value; the TEC and centroid losses also return the
analytic gradient (w.r.t. embeddings and point positions respectively).
Probabilities are ``(N, C)`` rows summing to one, labels are ``(N,)``
integer classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1  # TEC temperature
    rho: float = 0.999  # prototype momentum
    tec_weight: float = 0.1  # lambda in L_seg = L_awohem + lambda * L_tec
    th_l: float = 0.38
    th_u: float = 0.6
    boundary_fraction: float = 0.05
    knn: int = 5
    kld_eps: float = 1e-8
    kept_fraction: float = 0.25
    class_weights: tuple = (1.0, 2.0, 2.0)  # background, tooth, bone
    gingiva: int = 0

    def __post_init__(self):
        if not 0 < self.th_l < self.th_u < 1:
            raise LossError("need 0 < th_l < th_u < 1")
        if self.tau <= 0:
            raise LossError("tau must be positive")
        if not 0 <= self.rho <= 1:
            raise LossError("rho must lie in [0, 1]")
        if not 0 < self.kept_fraction <= 1:
            raise LossError("kept_fraction must lie in (0, 1]")
        if self.knn < 1 or not 0 < self.boundary_fraction <= 1:
            raise LossError("knn >= 1 and boundary_fraction in (0, 1] required")


def _check_probs(probs):
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise LossError("probabilities must be an (N, C) array")
    if np.any(p < -1e-12) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise LossError("probability rows must be non-negative and sum to 1")
    return p


# ---------------------------------------------------------------------------
# TEC

@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Pixel embeddings with predicted probabilities and ground truth.

    The prediction is the row-wise argmax of ``probs``; the TP/FN/FP index
    sets of every class follow from it.
    """
    embeddings: np.ndarray  # (N, D)
    probs: np.ndarray  # (N, C)
    gt: np.ndarray  # (N,)

    def __post_init__(self):
        e = np.asarray(self.embeddings, dtype=np.float64)
        p = _check_probs(self.probs)
        g = np.asarray(self.gt, dtype=np.int64)
        if e.ndim != 2 or len(e) != len(p) or g.shape != (len(p),):
            raise LossError("embeddings, probs and gt must agree in length")
        if np.any(g < 0) or np.any(g >= p.shape[1]):
            raise LossError("gt label outside the class range")
        object.__setattr__(self, "embeddings", e)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "gt", g)

    @property
    def pred(self):
        return np.argmax(self.probs, axis=1)

    def sets(self, k):
        """Boolean masks ``(tp, fn, fp)`` for class ``k``."""
        pred, gt = self.pred, self.gt
        return (pred == k) & (gt == k), (pred != k) & (gt == k), (pred == k) & (gt != k)

    def with_embeddings(self, e):
        return replace(self, embeddings=e)


@dataclass(frozen=True, eq=False)
class PrototypeBank:
    prototypes: np.ndarray  # (C, D)
    rho: float = 0.999

    def __post_init__(self):
        object.__setattr__(self, "prototypes", np.asarray(self.prototypes, dtype=np.float64))
        if not np.all(np.isfinite(self.prototypes)):
            raise LossError("prototypes must be finite")


def update_prototypes(bank: PrototypeBank, batch: EmbeddingBatch) -> PrototypeBank:
    """EMA update ``mu_k <- rho mu_k + (1 - rho) mean(TP embeddings of k)``.

    Classes without TP pixels in the batch keep their prototype.
    """
    mu = bank.prototypes.copy()
    for k in range(len(mu)):
        tp, _, _ = batch.sets(k)
        if tp.any():
            mu[k] = bank.rho * mu[k] + (1.0 - bank.rho) * batch.embeddings[tp].mean(axis=0)
    return PrototypeBank(mu, bank.rho)


def _unit(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise LossError("zero-norm embedding or prototype")
    return x / n, n


def tec_penalties(batch: EmbeddingBatch, i: int):
    """``(T_fp, T_fn)`` for anchor pixel ``i`` of its ground-truth class."""
    k = batch.gt[i]
    u, _ = _unit(batch.embeddings)
    _, fn, fp = batch.sets(k)
    t_fp = 1.0 + float(np.mean(u[fp] @ u[i])) if fp.any() else 0.0
    t_fn = 1.0 - float(np.mean(u[fn] @ u[i])) if fn.any() else 0.0
    return t_fp, t_fn


def tec_loss(batch: EmbeddingBatch, bank: PrototypeBank, cfg: LossConfig | None = None):
    """Mean TEC loss over all pixels (each pixel anchors its gt class).

    ``L_i = -log softmax_k(a_fn) - log softmax_k(a_fp)`` where the logit of
    the anchor class is ``cos(e_i, mu_k)/tau - (1 - p_ik) T_i`` and the
    other logits are ``cos(e_i, mu_l)/tau``. Returns ``(loss, grad)`` with
    ``grad`` the (N, D) gradient w.r.t. the embeddings; prototypes and
    probabilities are constants.
    """
    cfg = cfg or LossConfig()
    if cfg.tau <= 0:
        raise LossError("tau must be positive")
    mu = bank.prototypes
    if len(mu) < 2:
        raise LossError("TEC needs at least two classes")
    e = batch.embeddings
    n = len(e)
    u, en = _unit(e)
    mt, _ = _unit(mu)
    cos = u @ mt.T  # (N, C)
    k = batch.gt
    rows = np.arange(n)
    pk = batch.probs[rows, k]

    # penalties and the mean unit FP / FN embedding per class
    t_fp = np.zeros(n)
    t_fn = np.zeros(n)
    n_cls = len(mu)
    fbar = np.zeros((n_cls, e.shape[1]))
    nbar = np.zeros_like(fbar)
    masks = [batch.sets(c) for c in range(n_cls)]
    for c in range(n_cls):
        _, fn, fp = masks[c]
        a = k == c
        if fp.any():
            fbar[c] = u[fp].mean(axis=0)
            t_fp[a] = 1.0 + u[a] @ fbar[c]
        if fn.any():
            nbar[c] = u[fn].mean(axis=0)
            t_fn[a] = 1.0 - u[a] @ nbar[c]

    logits = cos / cfg.tau
    loss = 0.0
    d_cos = np.zeros_like(cos)
    d_t = {}
    for name, t in (("fn", t_fn), ("fp", t_fp)):
        z = logits.copy()
        z[rows, k] -= (1.0 - pk) * t
        zmax = z.max(axis=1, keepdims=True)
        ez = np.exp(z - zmax)
        q = ez / ez.sum(axis=1, keepdims=True)
        loss += float(np.sum(-np.log(q[rows, k])))
        g = q.copy()
        g[rows, k] -= 1.0  # d(-log q_k)/dz
        d_cos += g / cfg.tau
        d_t[name] = -g[rows, k] * (1.0 - pk)  # dz_k/dT = -(1 - p_ik)
    loss /= n
    d_cos /= n
    d_t = {key: v / n for key, v in d_t.items()}

    # chain rule onto unit embeddings
    d_u = d_cos @ mt
    for c in range(n_cls):
        _, fn, fp = masks[c]
        a = k == c
        if fp.any():
            d_u[a] += d_t["fp"][a, None] * fbar[c]
            d_u[fp] += (d_t["fp"][a] @ u[a]) / fp.sum()
        if fn.any():
            d_u[a] -= d_t["fn"][a, None] * nbar[c]
            d_u[fn] -= (d_t["fn"][a] @ u[a]) / fn.sum()
    grad = (d_u - np.einsum("ij,ij->i", d_u, u)[:, None] * u) / en
    return loss, grad


def awohem_ce(probs, gt, cfg: LossConfig | None = None, kept_fraction=None, class_weights=None):
    """Class-weighted cross entropy averaged over the hardest pixels.

    Per-pixel losses ``-w[g] log p[g]`` are ranked in descending order and
    the mean of the top ``max(1, floor(kept_fraction * N))`` is returned.
    """
    cfg = cfg or LossConfig()
    p = _check_probs(probs)
    g = np.asarray(gt, dtype=np.int64)
    f = cfg.kept_fraction if kept_fraction is None else kept_fraction
    if not 0 < f <= 1:
        raise LossError("kept_fraction must lie in (0, 1]")
    w = np.asarray(cfg.class_weights if class_weights is None else class_weights, dtype=np.float64)
    if len(w) < p.shape[1]:
        w = np.concatenate([w, np.ones(p.shape[1] - len(w))])
    ce = -w[g] * np.log(np.clip(p[np.arange(len(g)), g], 1e-300, 1.0))
    keep = max(1, int(np.floor(f * len(ce) + 1e-9)))
    top = np.sort(ce)[::-1][:keep]
    return float(top.mean())


def seg_loss(batch: EmbeddingBatch, bank: PrototypeBank, cfg: LossConfig | None = None):
    """``L_seg = L_awohem + lambda * L_tec``."""
    cfg = cfg or LossConfig()
    return awohem_ce(batch.probs, batch.gt, cfg) + cfg.tec_weight * tec_loss(batch, bank, cfg)[0]


# ---------------------------------------------------------------------------
# Lovasz-Softmax

def lovasz_grad(gt_sorted):
    """Jaccard-loss increments along an error-sorted foreground indicator."""
    gts = gt_sorted.sum()
    inter = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jac = 1.0 - inter / union
    jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs, gt, classes="present"):
    """Lovasz extension of the Jaccard loss, averaged over classes.

    For class ``c`` the errors are ``|[g == c] - p_c|``; with
    ``classes="present"`` only classes occurring in ``gt`` are averaged.
    """
    p = _check_probs(probs)
    g = np.asarray(gt, dtype=np.int64)
    losses = []
    for c in range(p.shape[1]):
        fg = (g == c).astype(np.float64)
        if classes == "present" and fg.sum() == 0:
            continue
        err = np.abs(fg - p[:, c])
        order = np.argsort(-err, kind="stable")
        losses.append(float(err[order] @ lovasz_grad(fg[order])))
    return float(np.mean(losses)) if losses else 0.0


def jaccard_set_loss(mispredicted, fg):
    """``|M| / |G u M|`` for a mispredicted set M and foreground G (bool arrays)."""
    union = np.count_nonzero(fg | mispredicted)
    return np.count_nonzero(mispredicted) / union if union else 0.0


def lovasz_extension_bruteforce(errors, fg):
    """Choquet integral of the Jaccard set loss over error thresholds.

    ``sum_t (m_(t) - m_(t+1)) * loss({i : m_i >= m_(t)})`` over the distinct
    error levels sorted in decreasing order (with ``m_(T+1) = 0``).
    """
    errors = np.asarray(errors, dtype=np.float64)
    fg = np.asarray(fg, dtype=bool)
    levels = sorted(set(errors.tolist()), reverse=True) + [0.0]
    total = 0.0
    for hi, lo in zip(levels[:-1], levels[1:]):
        total += (hi - lo) * jaccard_set_loss(errors >= hi, fg)
    return total


def lovasz_softmax_bruteforce(probs, gt):
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(gt)
    vals = []
    for c in range(p.shape[1]):
        fg = g == c
        if not fg.any():
            continue
        vals.append(lovasz_extension_bruteforce(np.abs(fg - p[:, c]), fg))
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# centroid loss

def threshold_probs(p, th_l=0.38, th_u=0.6):
    """1 above ``th_u``, 0 below ``th_l``, unchanged in between."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > th_u, 1.0, np.where(p < th_l, 0.0, p))


def centroid_loss(probs, positions, gt, cfg: LossConfig | None = None):
    """Mean distance between predicted and gold class centroids.

    For every non-gingiva class ``i`` present in ``gt``, the predicted
    centroid weights the positions of points predicted as ``i`` (argmax)
    by their thresholded probability of ``i``; the gold centroid is the
    mean position of the ground-truth members. A class with zero total
    weight uses the centroid of all points. Returns ``(loss, grad)`` with
    ``grad`` the (N, 3) gradient w.r.t. ``positions``.
    """
    cfg = cfg or LossConfig()
    p = _check_probs(probs)
    s = np.asarray(positions, dtype=np.float64)
    g = np.asarray(gt, dtype=np.int64)
    if s.shape != (len(p), 3) or g.shape != (len(p),):
        raise LossError("positions must be (N, 3) and gt (N,)")
    pred = np.argmax(p, axis=1)
    classes = [int(c) for c in np.unique(g) if c != cfg.gingiva]
    grad = np.zeros_like(s)
    if not classes:
        return 0.0, grad
    total = 0.0
    for c in classes:
        member = pred == c
        wt = threshold_probs(p[:, c], cfg.th_l, cfg.th_u) * member
        if wt.sum() > 0:
            wn = wt / wt.sum()
        else:
            wn = np.full(len(s), 1.0 / len(s))
        gold = g == c
        gn = gold / gold.sum()
        diff = wn @ s - gn @ s
        dist = float(np.linalg.norm(diff))
        total += dist
        if dist > 0:
            u = diff / dist
            grad += np.outer(wn - gn, u)
    m = len(classes)
    return total / m, grad / m


# ---------------------------------------------------------------------------
# boundary loss

def kld(p, q, eps=1e-8):
    """Row-wise KL(p || q) after adding ``eps`` to both and renormalising."""
    p = np.asarray(p, dtype=np.float64) + eps
    q = np.asarray(q, dtype=np.float64) + eps
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    return np.sum(p * np.log(p / q), axis=-1)


def knn_graph(positions, k=5):
    """Indices (N, k) of each point's k nearest other points."""
    s = np.asarray(positions, dtype=np.float64)
    n = len(s)
    if n <= k:
        raise LossError(f"need more than {k} points for a {k}-NN graph")
    _, idx = cKDTree(s).query(s, k=k + 1)
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = [j for j in idx[i] if j != i]
        out[i] = row[:k]
    return out


def kl_div_scores(probs, neighbours, eps=1e-8):
    """``KL_div_i = max_j KLD(c_i, k_j)`` over the neighbour lists."""
    p = _check_probs(probs)
    nb = np.asarray(neighbours, dtype=np.int64)
    return kld(p[:, None, :], p[nb], eps).max(axis=1)


def boundary_points(scores, fraction=0.05):
    """Indices of the top ``ceil(fraction * N)`` scores, ties to lower index."""
    scores = np.asarray(scores)
    n_sel = int(np.ceil(fraction * len(scores) - 1e-9))
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:n_sel])


def boundary_loss(probs, positions, gt, cfg: LossConfig | None = None, neighbours=None):
    """Cross entropy over the points with the largest neighbourhood KL
    divergence. Returns ``(loss, selected_indices)``."""
    cfg = cfg or LossConfig()
    p = _check_probs(probs)
    g = np.asarray(gt, dtype=np.int64)
    nb = knn_graph(positions, cfg.knn) if neighbours is None else neighbours
    sel = boundary_points(kl_div_scores(p, nb, cfg.kld_eps), cfg.boundary_fraction)
    ce = -np.log(np.clip(p[sel, g[sel]], 1e-300, 1.0))
    return float(ce.mean()), sel
