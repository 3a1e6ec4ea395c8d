"""Relative local distance: horizontal pooling, column Gram matrix, structure head and joint loss.

Shapes: a feature map is ``(C, H, W)`` or batched ``(N, C, H, W)``. Horizontal
pooling averages over width, leaving one ``C``-dim column vector per row, so
the column matrix is ``(C, H)`` (or ``(N, C, H)``) and the distance matrix is
``(H, H)`` per sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from . import pixmap
from .autodiff import Tensor
from .checkpoint import atomic_write_text
from .nn import BatchNorm, Dropout, Linear, Module

NORM_EPS = 1e-12


@dataclass(frozen=True)
class JointLossConfig:
    lam: float = 0.2
    structure_hidden_dim: int = 256

    def __post_init__(self):
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError(f"lambda must be a finite non-negative number, got {self.lam}")
        if self.structure_hidden_dim < 1:
            raise ValueError("structure_hidden_dim must be positive")


@dataclass
class ColumnMatrix:
    """Horizontally pooled columns ``X`` of shape ``(..., C, H)``."""

    X: Tensor
    normalized: bool = False

    @property
    def h_out(self) -> int:
        return self.X.shape[-1]

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.X.data, axis=-2)


@dataclass
class RldMatrix:
    D: Tensor
    normalized: bool = False
    clamped: np.ndarray | None = None  # columns whose norm fell below the eps guard

    def check(self, sym_tol: float = 1e-9, tol: float = 1e-6) -> None:
        """Raise ``AssertionError`` if a structural invariant fails."""
        d = self.D.data
        assert d.shape[-1] == d.shape[-2], f"D must be square, got {d.shape}"
        asym = np.abs(d - np.swapaxes(d, -1, -2)).max()
        assert asym < sym_tol, f"D is not symmetric (max deviation {asym:.3g})"
        if self.normalized:
            diag = np.diagonal(d, axis1=-2, axis2=-1)
            live = np.ones(diag.shape, bool) if self.clamped is None else ~self.clamped
            assert np.all(np.abs(diag[live] - 1) <= tol), "diagonal of normalized D deviates from 1"
            assert np.all(np.abs(d) <= 1 + tol), "normalized D has entries outside [-1, 1]"


def horizontal_pool(f: Tensor) -> Tensor:
    """Mean over the width axis: ``(..., C, H, W) -> (..., C, H)``."""
    if f.ndim < 3:
        raise ValueError(f"horizontal_pool needs (C, H, W) or (N, C, H, W), got {f.shape}")
    w = f.shape[-1]
    out = f.data.mean(axis=-1)
    return Tensor._from_op(
        out, (f,), lambda g: (np.repeat(g[..., None] / w, w, axis=-1).astype(f.dtype, copy=False),)
    )


def normalize_columns(X: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Divide each column (axis -2) by ``max(||x_i||, eps)``."""
    norm = np.sqrt((X.data * X.data).sum(axis=-2, keepdims=True))
    clamped = norm <= eps
    denom = np.where(clamped, eps, norm)
    y = X.data / denom

    def backward(g):
        proj = (g * y).sum(axis=-2, keepdims=True)
        gx = np.where(clamped, g / denom, (g - y * proj) / denom)
        return (gx,)

    return Tensor._from_op(y, (X,), backward)


def compute_rld(X: Tensor) -> Tensor:
    """Gram matrix of columns, ``D = X^T X``; gradient ``X (G + G^T)``."""
    if X.ndim < 2:
        raise ValueError(f"compute_rld needs a (C, H) column matrix, got {X.shape}")
    xd = X.data
    D = np.swapaxes(xd, -1, -2) @ xd
    return Tensor._from_op(D, (X,), lambda g: (xd @ (g + np.swapaxes(g, -1, -2)),))


def column_matrix(f: Tensor, normalize: bool = True) -> ColumnMatrix:
    X = horizontal_pool(f)
    if normalize:
        X = normalize_columns(X)
    return ColumnMatrix(X, normalized=normalize)


def rld_matrix(f: Tensor, normalize: bool = True) -> RldMatrix:
    """Feature map -> horizontal pooling -> (optional) L2 column normalization -> Gram."""
    pooled = horizontal_pool(f)
    clamped = np.linalg.norm(pooled.data, axis=-2) <= NORM_EPS
    X = normalize_columns(pooled) if normalize else pooled
    return RldMatrix(compute_rld(X), normalized=normalize, clamped=clamped if normalize else None)


class ClassifierHead(Module):
    """FC -> BN -> ReLU -> dropout -> FC, the layout shared by both branches."""

    def __init__(self, in_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator,
                 dropout: float = 0.5, dtype=np.float32):
        super().__init__()
        self.in_dim = in_dim
        self.fc1 = self.add_child("fc1", Linear(in_dim, hidden_dim, rng, dtype))
        self.bn = self.add_child("bn", BatchNorm(hidden_dim, dtype))
        self.drop = self.add_child("drop", Dropout(dropout, rng.integers(2**63)))
        self.fc2 = self.add_child("fc2", Linear(hidden_dim, num_classes, rng, dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"head expects {self.in_dim} inputs, got {x.shape[-1]}")
        return self.fc2(self.drop(F.relu(self.bn(self.fc1(x)))))

    @staticmethod
    def count(in_dim: int, hidden_dim: int, num_classes: int) -> int:
        return in_dim * hidden_dim + hidden_dim + 2 * hidden_dim + hidden_dim * num_classes + num_classes


class StructureHead(ClassifierHead):
    """Classifies identities from the flattened ``h_out x h_out`` distance matrix."""

    def __init__(self, h_out: int, num_classes: int, rng: np.random.Generator, hidden_dim: int = 256,
                 dropout: float = 0.5, dtype=np.float32):
        super().__init__(h_out * h_out, hidden_dim, num_classes, rng, dropout, dtype)
        self.h_out = h_out

    def forward(self, D: Tensor) -> Tensor:
        if D.shape[-2:] != (self.h_out, self.h_out):
            raise ValueError(f"structure head built for {self.h_out}x{self.h_out} D, got {D.shape[-2:]}")
        batched = D.ndim == 3
        flat = D.reshape(D.shape[0] if batched else 1, -1)
        return super().forward(flat)


def structure_loss(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy of the structure logits (batch mean)."""
    labels = np.atleast_1d(np.asarray(labels))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    return F.cross_entropy(logits, labels)


def joint_loss(l_id: Tensor, l_stru: Tensor, cfg: JointLossConfig) -> Tensor:
    """``L = L_id + lambda * L_stru``."""
    for label, t in (("identity", l_id), ("structure", l_stru)):
        v = float(np.asarray(t.data if isinstance(t, Tensor) else t))
        if not math.isfinite(v):
            raise FloatingPointError(f"{label} loss is not finite ({v})")
        if v < 0:
            raise ValueError(f"{label} loss must be non-negative, got {v}")
    if not isinstance(l_id, Tensor):
        return float(l_id) + cfg.lam * float(l_stru)
    dtype = l_id.dtype
    return l_id + l_stru * Tensor(np.asarray(cfg.lam, dtype=dtype))


def export_rld_pixmap(D: np.ndarray, path: str | Path) -> tuple[float, float]:
    """Write ``D`` as an 8-bit P5 image plus a ``.txt`` sidecar holding min/max.

    Returns ``(min, max)``. Values are mapped affinely ``[min, max] -> [0, 255]``.
    """
    D = np.asarray(D, dtype=np.float64)
    lo, hi = float(D.min()), float(D.max())
    span = hi - lo
    q = np.zeros(D.shape, np.uint8) if span == 0 else np.rint((D - lo) / span * 255).astype(np.uint8)
    path = Path(path)
    pixmap.write_pgm(path, q)
    atomic_write_text(path.with_suffix(".txt"), f"min = {lo!r}\nmax = {hi!r}\n")
    return lo, hi


def load_rld_pixmap(path: str | Path) -> np.ndarray:
    """Reconstruct ``D`` from an exported pixmap and its sidecar."""
    path = Path(path)
    q = pixmap.read_pnm(path).astype(np.float64)
    meta = {}
    for line in path.with_suffix(".txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = float(v)
    return meta["min"] + q / 255.0 * (meta["max"] - meta["min"])
