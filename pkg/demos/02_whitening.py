"""Whitening walkthrough: standardize descriptor dimensions, then decorrelate.

Raw pooled descriptors have wildly different per-dimension scales, and
neighboring dimensions co-vary. Plain whitening fixes the scales; PCA
whitening additionally rotates into the covariance eigenbasis so the
dimensions stop being redundant. Both are fit once on a reference
corpus and then applied to everything, queries included.
"""
import tempfile
from pathlib import Path

import numpy as np

from poolrank import Descriptor, apply_whitener_batch, fit_whitener, load_model, save_model

rng = np.random.default_rng(1)

# Correlated 2-D cloud: dimension 1 is mostly dimension 0 plus noise.
n = 2000
a = rng.standard_normal(n)
raw = np.stack([3.0 * a + 10.0, 1.5 * a + 0.4 * rng.standard_normal(n) - 2.0], axis=1)
corpus = [
    Descriptor(f"d{i}", "rot0", row.astype(np.float32), "avg", "none")
    for i, row in enumerate(raw)
]

print("raw corpus:    mean", np.round(raw.mean(axis=0), 2), " cov")
print(np.round(np.cov(raw.T, bias=True), 2))

plain = fit_whitener(corpus, use_pca=False)
z = np.stack([d.values for d in apply_whitener_batch(plain, corpus)]).astype(np.float64)
print()
print("plain whitened: mean", np.round(z.mean(axis=0), 4), " cov")
print(np.round((z.T @ z) / n, 3))
# variances are 1 now, but the off-diagonal correlation survives

pca = fit_whitener(corpus, use_pca=True)
z = np.stack([d.values for d in apply_whitener_batch(pca, corpus)]).astype(np.float64)
print()
print("pca whitened:   mean", np.round(z.mean(axis=0), 4), " cov")
print(np.round((z.T @ z) / n, 3))
# now the covariance is the identity: decorrelated and unit variance

# Every model knows what it is and what it was fit on. The provenance
# string is stamped onto whitened descriptors so an index refuses
# queries whitened with a different model.
print()
print("plain provenance:", plain.provenance)
print("pca   provenance:", pca.provenance)

path = Path(tempfile.mkdtemp(prefix="poolrank_demo_")) / "model.pwm"
save_model(pca, path)
assert load_model(path) == pca
print(f"model saved to {path} and re-loaded identical")
