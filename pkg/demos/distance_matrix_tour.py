"""
A tour of the column distance matrix
====================================

Horizontal pooling turns a (C, H, W) feature map into one C-dim vector per
row. After L2 normalisation, their Gram matrix D holds the cosine similarity
between every pair of rows. This script builds D for a few hand-made maps and
checks the properties that make it a stable descriptor of body layout.
"""

import math
from pathlib import Path
import tempfile

import numpy as np

from rldnet.autodiff import Tensor
from rldnet.evaluation import band_mass
from rldnet.rld import compute_rld, export_rld_pixmap, load_rld_pixmap, rld_matrix

# Two unit columns at cosine 0.2, and two orthogonal ones.
x1 = np.array([1.0, 0.0])
x2 = np.array([0.2, math.sqrt(0.96)])
print(compute_rld(Tensor(np.stack([x1, x2], axis=1))).data)
print(compute_rld(Tensor(np.eye(2))).data)

# A feature map whose rows drift slowly: neighbours look alike.
rng = np.random.default_rng(0)
steps = 0.5 * rng.standard_normal((16, 8))
steps[:, 0] = rng.standard_normal(16)
fmap = np.cumsum(steps, axis=1)[:, :, None].repeat(4, axis=2)  # random walk down the rows; (C=16, H=8, W=4)
D = rld_matrix(Tensor(fmap)).D.data
np.set_printoptions(precision=2, suppress=True)
print(D)

# Shuffling columns along the width or rescaling the map leaves D unchanged.
D_perm = rld_matrix(Tensor(fmap[:, :, ::-1])).D.data
D_scaled = rld_matrix(Tensor(17.0 * fmap)).D.data
print("width permutation:", np.abs(D - D_perm).max(), " rescale:", np.abs(D - D_scaled).max())

# Band mass: how much off-diagonal similarity sits next to the diagonal.
for b in (1, 2, 4):
    print(f"band mass b={b}: {band_mass(D, b).mass:.3f}")

# D as an 8-bit image with a min/max sidecar; reconstruction error <= span / 255.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "D.pgm"
    lo, hi = export_rld_pixmap(D, path)
    back = load_rld_pixmap(path)
    print(f"pixmap round trip error {np.abs(back - D).max():.4f} (bound {(hi - lo) / 255:.4f})")
