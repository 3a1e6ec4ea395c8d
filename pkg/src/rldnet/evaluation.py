"""Retrieval metrics (CMC / mAP) and diagnostics of spatial structure in feature maps."""

from __future__ import annotations

import csv
import io
from fractions import Fraction
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .checkpoint import atomic_write_text

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    cmc: np.ndarray  # cmc[r - 1] = fraction of queries whose first true match is within rank r
    map: float
    num_valid_queries: int
    num_excluded: int = 0
    diagnostics: dict[str, float] = field(default_factory=dict)

    def rank(self, r: int) -> float:
        return float(self.cmc[min(r, len(self.cmc)) - 1]) if len(self.cmc) else 0.0

    def to_csv(self) -> str:
        lines = ["rank,cmc"]
        lines += [f"{r},{v!r}" for r, v in enumerate(self.cmc.tolist(), start=1)]
        lines.append(f"map,{self.map!r}")
        lines += [f"{k},{v!r}" for k, v in self.diagnostics.items()]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        rows = list(csv.reader(io.StringIO(Path(path).read_text())))
        if rows[0] != ["rank", "cmc"]:
            raise ValueError(f"{path}: not an evaluation report")
        cmc, diag, mAP = [], {}, None
        for key, value in rows[1:]:
            if mAP is None and key.isdigit():
                cmc.append(float(value))
            elif key == "map" and mAP is None:
                mAP = float(value)
            else:
                diag[key] = float(value)
        return cls(np.array(cmc), float(mAP), -1, diagnostics=diag)


def cosine_distance(query: np.ndarray, gallery: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """``1 - cos`` between rows; all-zero rows are treated as orthogonal to everything."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), eps)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), eps)
    return np.clip(1.0 - qn @ gn.T, 0.0, 2.0)


def cmc_map(dist: np.ndarray, q_pids, g_pids, q_camids, g_camids, max_rank: int | None = None,
            junk_pids: Sequence[int] = (0,)) -> EvalReport:
    """Single-query CMC and mAP under the cross-camera protocol.

    For each query the gallery is sorted by ascending distance (stable, so ties
    keep gallery order). Gallery items sharing both pid and camera with the
    query, and items whose pid is in ``junk_pids``, are dropped. Queries with
    no remaining true match are excluded and counted.
    """
    dist = np.asarray(dist, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    nq, ng = dist.shape
    if len(q_pids) != nq or len(q_camids) != nq or len(g_pids) != ng or len(g_camids) != ng:
        raise ValueError(f"label arrays do not match the {nq}x{ng} distance matrix")
    if np.isnan(dist).any():
        raise ValueError("distance matrix contains NaN")
    max_rank = ng if max_rank is None else max_rank

    order = np.argsort(dist, axis=1, kind="stable")
    junk_g = np.isin(g_pids, junk_pids)
    curves, aps = [], []
    excluded = 0
    for i in range(nq):
        idx = order[i]
        keep = ~((g_pids[idx] == q_pids[i]) & (g_camids[idx] == q_camids[i])) & ~junk_g[idx]
        matches = (g_pids[idx] == q_pids[i])[keep]
        if not matches.any():
            excluded += 1
            continue
        hits = np.flatnonzero(matches)
        curve = np.zeros(max_rank)
        if hits[0] < max_rank:
            curve[hits[0]:] = 1.0
        curves.append(curve)
        # exact rational mean of precision-at-hit, rounded once
        ap = sum((Fraction(m + 1, int(r) + 1) for m, r in enumerate(hits)), Fraction(0)) / len(hits)
        aps.append(float(ap))
    if excluded:
        logger.warning("%d of %d queries had no valid gallery match and were excluded", excluded, nq)
    if not curves:
        return EvalReport(np.zeros(max_rank), 0.0, 0, excluded)
    return EvalReport(np.mean(curves, axis=0), float(np.mean(aps)), len(curves), excluded)


def evaluate_features(q_feat, g_feat, q_pids, g_pids, q_camids, g_camids, max_rank: int | None = 50,
                      junk_pids=(0,)) -> EvalReport:
    dist = cosine_distance(q_feat, g_feat)
    return cmc_map(dist, q_pids, g_pids, q_camids, g_camids, min(max_rank or dist.shape[1], dist.shape[1]),
                   junk_pids)


def random_rank1_baseline(g_pids, junk_pids=(0,)) -> float:
    """Expected rank-1 of a random ranking: ``1 / #gallery identities``."""
    ids = {int(p) for p in np.asarray(g_pids) if p not in junk_pids}
    return 1.0 / len(ids)


# ---------------------------------------------------------------------------
# diagnostics


def spatial_map_feature(f: np.ndarray) -> np.ndarray:
    """Channel mean of a ``(C, H, W)`` (or batched) feature map, flattened to ``H*W``."""
    f = np.asarray(f)
    m = f.mean(axis=-3)
    return m.reshape(m.shape[:-2] + (-1,))


@dataclass
class SimilarityProfile:
    offsets: np.ndarray
    similarity: np.ndarray  # mean cosine similarity of columns at each offset
    spearman: float | None  # correlation over offsets >= 1; None when undefined

    @property
    def degenerate(self) -> bool:
        return self.spearman is None


def column_similarity_profile(feature_maps: np.ndarray, eps: float = 1e-12) -> SimilarityProfile:
    """Mean cosine similarity of horizontally pooled columns grouped by row offset ``|i - j|``."""
    f = np.asarray(feature_maps, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    h = f.shape[2]
    if h < 3:
        raise ValueError(f"need at least 3 rows for a similarity profile, got h_out={h}")
    X = f.mean(axis=3)
    X = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), eps)
    D = np.einsum("nci,ncj->nij", X, X).mean(axis=0)
    offsets = np.arange(h)
    sim = np.array([np.diagonal(D, k).mean() for k in offsets])
    rest = sim[1:]
    if np.ptp(rest) < 1e-12:
        rho = None
    else:
        rho = float(spearmanr(offsets[1:], rest).statistic)
    return SimilarityProfile(offsets, sim, rho)


@dataclass
class BandMassStat:
    band_width: int
    mass: float | None  # None when there is no off-diagonal mass at all

    @property
    def degenerate(self) -> bool:
        return self.mass is None


def band_mass(Ds, b: int) -> BandMassStat:
    """Share of off-diagonal ``|D_ij|`` with ``|i - j| <= b``, pooled over a set of matrices."""
    if b < 1:
        raise ValueError("band width must be at least 1")
    D = np.abs(np.asarray(Ds, dtype=np.float64))
    if D.ndim == 2:
        D = D[None]
    h = D.shape[-1]
    off = np.abs(np.subtract.outer(np.arange(h), np.arange(h)))
    inside = D[:, (off > 0) & (off <= b)].sum()
    outside = D[:, off > b].sum()
    if inside + outside <= 0:
        return BandMassStat(b, None)
    return BandMassStat(b, float(inside / (inside + outside)))


# ---------------------------------------------------------------------------
# feature files


def write_features(path, feats: np.ndarray, pids, camids, paths: Sequence[str] | None = None) -> None:
    feats = np.asarray(feats)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "pid", "camid"] + [f"f{i}" for i in range(feats.shape[1])])
    for i in range(len(feats)):
        name = paths[i] if paths is not None else f"sample{i:06d}"
        w.writerow([name, int(pids[i]), int(camids[i])] + [repr(float(v)) for v in feats[i]])
    atomic_write_text(path, buf.getvalue())


def read_features(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0][:3] != ["path", "pid", "camid"]:
        raise ValueError(f"{path}: not a feature file")
    body = rows[1:]
    names = [r[0] for r in body]
    pids = np.array([int(r[1]) for r in body])
    camids = np.array([int(r[2]) for r in body])
    feats = np.array([[float(v) for v in r[3:]] for r in body])
    return names, pids, camids, feats
