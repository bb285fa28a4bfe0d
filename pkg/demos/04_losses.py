"""The segmentation losses on small hand-made batches.

Run with ``python demos/04_losses.py``.
"""
import numpy as np

from toothfuse.losses import (EmbeddingBatch, LossConfig, PrototypeBank, awohem_ce, boundary_loss, centroid_loss,
                              lovasz_softmax, tec_loss, tec_penalties, threshold_probs)
from toothfuse.losses_check import run_checks

rng = np.random.default_rng(0)

# Embedding contrast: each pixel is pulled toward its class prototype.
# Errors of the current prediction shift the logits: false negatives
# pull toward the anchor, false positives push away.
probs = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.1, 0.2, 0.7]])
gt = np.array([0, 1, 1, 2])  # pixel 2 is class 1 predicted as 0
batch = EmbeddingBatch(rng.normal(size=(4, 8)), probs, gt)
bank = PrototypeBank(rng.normal(size=(3, 8)))
loss, grad = tec_loss(batch, bank)
print("TEC penalties (T_fp, T_fn) of pixel 1:", tuple(round(t, 3) for t in tec_penalties(batch, 1)))
print(f"TEC loss {loss:.4f}, gradient norm {np.linalg.norm(grad):.4f}")

# Hard-example cross entropy keeps the worst quarter of pixels, with
# tooth classes weighted twice as much as gingiva.
print(f"AWOHEM CE (kept 25%): {awohem_ce(probs, gt):.4f}; plain mean CE: "
      f"{awohem_ce(probs, gt, kept_fraction=1.0, class_weights=(1, 1, 1)):.4f}")

# Lovasz-Softmax: a convex surrogate of 1 - IoU per class.
print(f"Lovasz-Softmax: {lovasz_softmax(probs, gt):.4f} (perfect prediction: "
      f"{lovasz_softmax(np.eye(3)[gt], gt):.1f})")

# Centroid loss: predicted class centroids from thresholded probabilities.
print("threshold(0.7, 0.3, 0.5) =", threshold_probs([0.7, 0.3, 0.5]).tolist())
pos = rng.normal(size=(4, 3)) * 5
cl, _ = centroid_loss(probs, pos, gt)
print(f"centroid loss {cl:.4f} mm")

# Boundary loss: points whose class distribution differs most from a
# neighbour's (KL divergence, max over 5 neighbours) get extra CE.
x = np.arange(60, dtype=float)
pts = np.c_[x, np.zeros(60), np.zeros(60)]
p = np.where(x[:, None] < 30, [0.9, 0.1], [0.2, 0.8])
bl, sel = boundary_loss(p, pts, (x >= 30).astype(int), LossConfig())
print(f"boundary points selected: {sel.tolist()} (the class interface is at 29.5); loss {bl:.4f}")

# The same oracles the acceptance suite uses, at reduced size.
rep = run_checks(n_batches=5, lovasz_pixels=4)
print("\noracle checks:", "all passed" if rep["passed"] else "FAILED")
for c in rep["checks"]:
    print(f"  {'PASS' if c['passed'] else 'FAIL'} {c['name']}")
