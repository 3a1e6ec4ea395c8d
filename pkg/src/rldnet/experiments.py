"""Train/evaluate runs shared by the command line and the acceptance tests."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import AugmentConfig, DatasetIndex, SynthSpec, augment_batch, generate_synth, standardize
from .evaluation import (EvalReport, band_mass, column_similarity_profile, evaluate_features, random_rank1_baseline,
                         spatial_map_feature)
from .model import EpochLog, ModelConfig, RLDNet, TrainConfig, train

logger = logging.getLogger(__name__)

# 20-epoch desk schedule; decay at 2/3 of the run mirrors 40 of 60 epochs
DESK_TRAIN = TrainConfig(epochs=20, lr_decay_epoch=13)


def retrieval_images(ds: DatasetIndex, config: ModelConfig, augment: AugmentConfig) -> np.ndarray:
    """Eval-mode preprocessing: upscale by ``augment.scale`` and standardize (no crop)."""
    return augment_batch(ds.load_images(config.input_size), "eval", cfg=augment)


def diagnostic_images(ds: DatasetIndex, config: ModelConfig, augment: AugmentConfig) -> np.ndarray:
    """Standardized images at training resolution, so feature maps have the trained ``h_out``."""
    return standardize(ds.load_images(config.input_size), augment)


def evaluate_model(model: RLDNet, ds: DatasetIndex, augment: AugmentConfig, max_rank: int = 20) -> EvalReport:
    """Cross-camera retrieval of query against gallery using GAP features."""
    q, g = ds.subset("query"), ds.subset("gallery")
    if len(q) == 0 or len(g) == 0:
        raise ValueError("dataset needs non-empty query and gallery splits")
    cfg = model.config
    qf = model.extract_feature(retrieval_images(q, cfg, augment))
    gf = model.extract_feature(retrieval_images(g, cfg, augment))
    return evaluate_features(qf, gf, q.pids, g.pids, q.camids, g.camids, max_rank)


def diagnostics(model: RLDNet, ds: DatasetIndex, augment: AugmentConfig, n_band: int = 64) -> dict[str, float]:
    """Spatial-structure statistics on held-out images.

    ``band_mass`` uses the first ``n_band`` gallery images and ``b = max(1, h_out // 4)``.
    """
    cfg = model.config
    q, g = ds.subset("query"), ds.subset("gallery")
    out: dict[str, float] = {}

    # spatial map (channel mean) as a retrieval feature
    qs = spatial_map_feature(model.feature_map(retrieval_images(q, cfg, augment)))
    gs = spatial_map_feature(model.feature_map(retrieval_images(g, cfg, augment)))
    rep = evaluate_features(qs, gs, q.pids, g.pids, q.camids, g.camids, 1)
    out["spatial_rank1"] = rep.rank(1)
    out["random_rank1"] = random_rank1_baseline(g.pids)

    sample = g.select(np.arange(min(n_band, len(g))))
    fmaps = model.feature_map(diagnostic_images(sample, cfg, augment))
    D = _rld_batch(fmaps, cfg.normalize_columns)
    b = max(1, fmaps.shape[2] // 4)
    stat = band_mass(D, b)
    out["band_width"] = float(b)
    out["band_mass"] = float("nan") if stat.degenerate else stat.mass
    if fmaps.shape[2] >= 3:
        prof = column_similarity_profile(fmaps)
        out["column_spearman"] = float("nan") if prof.degenerate else prof.spearman
    return out


def _rld_batch(fmaps: np.ndarray, normalize: bool = True) -> np.ndarray:
    from .autodiff import Tensor
    from .rld import rld_matrix

    return rld_matrix(Tensor(fmaps.astype(np.float64)), normalize).D.data


@dataclass
class RunResult:
    seed: int
    lam: float
    structure_branch: bool
    log: list[EpochLog]
    report: EvalReport
    diagnostics: dict[str, float]
    model: RLDNet | None = None
    augment: AugmentConfig | None = None

    @property
    def rank1(self) -> float:
        return self.report.rank(1)


def run_once(ds: DatasetIndex, seed: int, lam: float, tcfg: TrainConfig = DESK_TRAIN,
             structure_branch: bool = True, base: ModelConfig | None = None, keep_model: bool = True,
             checkpoint_path=None, log_path=None) -> RunResult:
    n_classes = len(np.unique(ds.subset("train").pids))
    cfg = base if base is not None else ModelConfig(num_classes=n_classes)
    cfg = replace(cfg, num_classes=n_classes, lam=lam, structure_branch=structure_branch)
    res = train(cfg, replace(tcfg, seed=seed), ds, checkpoint_path=checkpoint_path, log_path=log_path)
    report = evaluate_model(res.model, ds, res.augment)
    diag = diagnostics(res.model, ds, res.augment)
    report.diagnostics.update(diag)
    return RunResult(seed, lam, structure_branch, res.log, report, diag,
                     res.model if keep_model else None, res.augment)


def _run_job(args):
    spec, data_seed, seed, lam, tcfg = args
    return run_once(generate_synth(spec, data_seed), seed, lam, tcfg, keep_model=False)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("RLD_THREADS", "1")))
    except ValueError:
        return 1


def sweep(spec: SynthSpec, seeds, lams, tcfg: TrainConfig = DESK_TRAIN, data_seed: int = 0,
          workers: int | None = None) -> list[RunResult]:
    """Train and evaluate every (lambda, seed) pair on one synthetic dataset."""
    jobs = [(spec, data_seed, s, lam, tcfg) for lam in lams for s in seeds]
    workers = workers or max_workers()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_job, jobs))
    ds = generate_synth(spec, data_seed)
    return [run_once(ds, s, lam, tcfg, keep_model=False) for (_, _, s, lam, _) in jobs]
