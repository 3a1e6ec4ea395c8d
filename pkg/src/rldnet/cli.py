"""Command-line front end: ``rldnet {train,eval,ablate,viz,params,synth}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (non-finite loss). Every file is written under ``--out``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import Tensor
from .checkpoint import atomic_write_text
from .data import (DatasetIndex, SynthSpec, export_dataset, generate_synth, load_market_dir, resize_bilinear,
                   standardize)
from .evaluation import band_mass, random_rank1_baseline
from .experiments import DESK_TRAIN, diagnostics, evaluate_model, sweep
from .model import RLDNet, count_params, resnet50_reference, train
from .pixmap import from_uint8, read_pnm
from .rld import export_rld_pixmap, rld_matrix

logger = logging.getLogger("rldnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# argument helpers


def _seed_list(raw: str) -> list[int]:
    try:
        seeds = [int(s) for s in raw.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be integers: {raw!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def _lambda_list(raw: str) -> list[float]:
    try:
        lams = [float(s) for s in raw.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda values must be numbers: {raw!r}")
    if not lams or any(not (v >= 0) for v in lams):
        raise argparse.ArgumentTypeError("lambda values must be non-negative")
    return lams


def _add_data_args(p):
    g = p.add_argument_group("dataset (synthetic by default)")
    g.add_argument("--synth", metavar="FILE", help="synthetic dataset spec (key = value); defaults if omitted")
    g.add_argument("--data", metavar="DIR", help="Market-1501 style directory of P6 pixmaps instead of synthetic data")
    g.add_argument("--data-seed", type=int, default=0, help="seed for synthetic generation (default 0)")


def _add_out(p, required=True):
    p.add_argument("--out", required=required, metavar="DIR", help="output directory; all files are written here")


def _load_dataset(args) -> DatasetIndex:
    if args.synth and args.data:
        raise UsageError("--synth and --data are mutually exclusive")
    try:
        if args.data:
            return load_market_dir(args.data)
        spec = cfgmod.synth_spec(cfgmod.read_kv(args.synth)) if args.synth else SynthSpec()
        return generate_synth(spec, args.data_seed)
    except cfgmod.ConfigError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(checkpoint: Path) -> Path:
    return checkpoint.with_suffix(".cfg")


def _load_checkpoint(path: str, config_path: str | None):
    ckpt = Path(path)
    if not ckpt.is_file():
        raise DataError(f"checkpoint not found: {ckpt}")
    side = Path(config_path) if config_path else _sidecar(ckpt)
    values = cfgmod.read_kv(side)
    cfg = cfgmod.model_config(values)
    augment = cfgmod.augment_config(values)
    if augment is None:
        raise cfgmod.ConfigError(f"{side}: mean/std normalization statistics are required for evaluation")
    try:
        model = RLDNet.load(ckpt, cfg)
    except ValueError as exc:
        raise DataError(f"{ckpt}: {exc}") from exc
    train_pids = set(cfgmod._ints(values.get("train_pids", "")))
    return model, augment, train_pids


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    values = cfgmod.read_kv(args.config) if args.config else {}
    cfgmod.check_keys(values, cfgmod.MODEL_KEYS | cfgmod.TRAIN_KEYS, args.config or "config")
    ds = _load_dataset(args)
    train_ds = ds.subset("train") if (ds.splits == "train").any() else ds
    if len(train_ds) == 0:
        raise DataError("dataset has no training samples")
    train_pids = np.unique(train_ds.pids)
    overrides = {}
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.no_structure_branch:
        overrides["structure_branch"] = False
    cfg = replace(cfgmod.model_config({k: v for k, v in values.items() if k != "num_classes"}, len(train_pids)),
                  **overrides)
    tcfg = cfgmod.train_config(values, DESK_TRAIN if not args.config else None)
    if args.epochs is not None:
        decay = tcfg.lr_decay_epoch if tcfg.lr_decay_epoch < args.epochs else max(1, round(args.epochs * 2 / 3))
        tcfg = replace(tcfg, epochs=args.epochs, lr_decay_epoch=min(decay, max(1, args.epochs - 1)))
        cfgmod.train_config({}, tcfg)
    out = _out_dir(args)
    rows = []
    for seed in args.seeds:
        run_dir = out / f"seed_{seed}"
        ckpt = run_dir / "checkpoint.rld"
        try:
            res = train(cfg, replace(tcfg, seed=seed), ds, checkpoint_path=ckpt, log_path=run_dir / "loss.csv")
        except FloatingPointError:
            raise
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        atomic_write_text(_sidecar(ckpt), cfgmod.format_kv(
            cfgmod.describe(cfg, replace(tcfg, seed=seed), res.augment, train_pids)))
        last = res.log[-1]
        rows.append((seed, last.mean_id_loss, last.mean_stru_loss))
        print(f"seed {seed}: final L_id {last.mean_id_loss:.4f} -> {ckpt}")
    lines = ["seed,final_mean_id_loss,final_mean_stru_loss"]
    lines += [f"{s},{_fmt(i)},{_fmt(st)}" for s, i, st in rows]
    stru = [r[2] for r in rows if r[2] is not None]
    lines.append(f"mean,{_fmt(np.mean([r[1] for r in rows]))},{_fmt(np.mean(stru)) if stru else ''}")
    atomic_write_text(out / "summary.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def _train_split_as_eval(ds: DatasetIndex) -> DatasetIndex:
    """Re-split training samples: first image of each (pid, camera) is a query, the rest gallery."""
    tr = ds.subset("train")
    seen = set()
    splits = []
    for pid, cam in zip(tr.pids, tr.camids):
        key = (int(pid), int(cam))
        splits.append("gallery" if key in seen else "query")
        seen.add(key)
    return replace(tr, splits=np.array(splits))


def cmd_eval(args) -> int:
    model, augment, train_pids = _load_checkpoint(args.checkpoint, args.config)
    ds = _load_dataset(args)
    if args.split == "train":
        logger.warning("evaluating on the training split: protocol violation, results are not held-out")
        ds = _train_split_as_eval(ds)
    else:
        held = set(np.unique(ds.pids[ds.splits != "train"]).tolist())
        overlap = held & train_pids
        if overlap:
            logger.warning("%d evaluation identities were seen in training: protocol violation", len(overlap))
    try:
        report = evaluate_model(model, ds, augment, max_rank=args.max_rank)
        if args.diagnostics:
            report.diagnostics.update(diagnostics(model, ds, augment))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    report.diagnostics.setdefault("random_rank1", random_rank1_baseline(ds.subset("gallery").pids))
    out = _out_dir(args)
    report.write_csv(out / "eval.csv")
    print(f"rank-1 {report.rank(1):.4f}  mAP {report.map:.4f}  ({report.num_valid_queries} queries)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.data:
        raise UsageError("ablate runs on synthetic data; use --synth")
    spec = cfgmod.synth_spec(cfgmod.read_kv(args.synth)) if args.synth else SynthSpec()
    tcfg = DESK_TRAIN
    if args.config:
        values = cfgmod.read_kv(args.config)
        cfgmod.check_keys(values, cfgmod.TRAIN_KEYS, args.config)
        tcfg = cfgmod.train_config(values, DESK_TRAIN)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs, lr_decay_epoch=max(1, min(round(args.epochs * 2 / 3), args.epochs - 1)))
    results = sweep(spec, args.seeds, args.lam, tcfg, data_seed=args.data_seed)
    lines = ["lambda,seed,rank1,map"] + [f"{r.lam!r},{r.seed},{r.rank1!r},{r.report.map!r}" for r in results]
    out = _out_dir(args)
    atomic_write_text(out / "ablate.csv", "\n".join(lines) + "\n")
    for lam in args.lam:
        sel = [r for r in results if r.lam == lam]
        print(f"lambda {lam:g}: mean rank-1 {np.mean([r.rank1 for r in sel]):.4f}  "
              f"mean mAP {np.mean([r.report.map for r in sel]):.4f}")
    return EXIT_OK


def _viz_images(args, model: RLDNet) -> tuple[list[str], np.ndarray]:
    size = model.config.input_size
    if args.images:
        names, imgs = [], []
        for p in args.images:
            try:
                arr = read_pnm(p)
                if arr.ndim != 3:
                    raise ValueError("not an RGB (P6) pixmap")
            except (OSError, ValueError) as exc:
                logger.warning("skipping unreadable image %s: %s", p, exc)
                continue
            img = from_uint8(arr)
            names.append(Path(p).stem)
            imgs.append(resize_bilinear(img, *size) if img.shape[1:] != tuple(size) else img)
        if not imgs:
            raise DataError("none of the given images could be read")
        return names, np.stack(imgs)
    ds = _load_dataset(args)
    pool = ds.subset("gallery") if (ds.splits == "gallery").any() else ds
    n = min(args.random_n, len(pool))
    idx = np.sort(np.random.default_rng(args.seed).choice(len(pool), n, replace=False))
    sel = pool.select(idx)
    return [f"img{int(i):05d}_pid{int(p)}" for i, p in zip(idx, sel.pids)], sel.load_images(size)


def cmd_viz(args) -> int:
    out = _out_dir(args)
    lines = ["image,mode,band_width,band_mass"]
    for k, ck in enumerate(args.checkpoint):
        model, augment, _ = _load_checkpoint(ck, None)
        mode = args.labels[k] if args.labels and k < len(args.labels) else f"model{k}"
        names, imgs = _viz_images(args, model)
        fmaps = model.feature_map(standardize(imgs, augment)).astype(np.float64)
        D = rld_matrix(Tensor(fmaps), model.config.normalize_columns).D.data
        b = max(1, D.shape[-1] // 4)
        for name, d in zip(names, D):
            export_rld_pixmap(d, out / f"{name}_{mode}.pgm")
            stat = band_mass(d, b)
            lines.append(f"{name},{mode},{b},{'' if stat.degenerate else repr(stat.mass)}")
    atomic_write_text(out / "band_mass.csv", "\n".join(lines) + "\n")
    print(f"wrote {len(lines) - 1} pixmaps to {out}")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.resnet50:
        cfg = resnet50_reference(args.num_classes or 751)
    else:
        values = cfgmod.read_kv(args.config) if args.config else {}
        cfgmod.check_keys(values, cfgmod.MODEL_KEYS | cfgmod.TRAIN_KEYS | cfgmod.AUGMENT_KEYS | cfgmod.RUN_KEYS,
                          args.config or "config")
        n = args.num_classes or int(values.get("num_classes", 20))
        cfg = cfgmod.model_config({k: v for k, v in values.items() if k in cfgmod.MODEL_KEYS}, n)
    rep = count_params(cfg)
    print(f"baseline_params = {rep.baseline_params}")
    print(f"structure_branch_params = {rep.structure_branch_params}")
    print(f"overhead_ratio = {rep.overhead_ratio!r}")
    print(f"overhead_percent = {100 * rep.overhead_ratio:.3f}%")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = cfgmod.synth_spec(cfgmod.read_kv(args.synth)) if args.synth else SynthSpec()
    ds = generate_synth(spec, args.seed)
    export_dataset(ds, _out_dir(args))
    print(f"wrote {len(ds)} images ({spec.num_ids} ids, {spec.num_cams} cameras) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rldnet", description="Two-branch re-identification network with a relative-local-distance "
                                                "structure branch: training, evaluation and diagnostics.")
    parser.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model per seed", description="Train one model per seed; writes "
                       "seed_<s>/checkpoint.rld, its .cfg sidecar, seed_<s>/loss.csv and summary.csv.")
    p.add_argument("--config", metavar="FILE", help="model/training config (key = value)")
    _add_data_args(p)
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3], help="comma-separated seeds (default 0,1,2,3)")
    p.add_argument("--lambda", dest="lam", type=float, help="structure loss weight (overrides the config)")
    p.add_argument("--no-structure-branch", action="store_true", help="build the model without the structure branch")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    _add_out(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint", description="Extract eval-mode features, rank the "
                       "gallery by cosine distance and write eval.csv (CMC rows, mAP, diagnostics).")
    p.add_argument("--checkpoint", required=True, metavar="FILE", help="RLD1 checkpoint")
    p.add_argument("--config", metavar="FILE", help="config sidecar (default: checkpoint path with .cfg)")
    _add_data_args(p)
    p.add_argument("--split", choices=("test", "train"), default="test",
                   help="evaluate held-out query/gallery (default) or the training split (flagged)")
    p.add_argument("--max-rank", type=int, default=20, help="longest CMC rank reported (default 20)")
    p.add_argument("--diagnostics", action="store_true", help="append spatial-map, band-mass and profile statistics")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation is deterministic")
    _add_out(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="lambda sweep on synthetic data", description="Train and evaluate every "
                       "(lambda, seed) pair; writes ablate.csv with columns lambda,seed,rank1,map.")
    p.add_argument("--config", metavar="FILE", help="training config (key = value)")
    p.add_argument("--synth", metavar="FILE", help="synthetic dataset spec")
    p.add_argument("--data", help=argparse.SUPPRESS)
    p.add_argument("--data-seed", type=int, default=0, help="seed for synthetic generation (default 0)")
    p.add_argument("--lambda", dest="lam", type=_lambda_list, default=[0.0, 0.2],
                   help="comma-separated lambda values (default 0,0.2)")
    p.add_argument("--seeds", type=_seed_list, default=[0, 1, 2, 3], help="comma-separated seeds (default 0,1,2,3)")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    _add_out(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz", help="distance-matrix pixmaps", description="Write one P5 pixmap (+ min/max sidecar) "
                       "per image per checkpoint and band_mass.csv.")
    p.add_argument("--checkpoint", required=True, action="append", metavar="FILE",
                   help="checkpoint to visualise; repeat to compare models")
    p.add_argument("--labels", type=lambda s: s.split(","), help="comma-separated mode names, one per checkpoint")
    p.add_argument("--images", nargs="+", metavar="PPM", help="explicit P6 image paths")
    p.add_argument("--random-n", type=int, default=5, help="number of random gallery images (default 5)")
    p.add_argument("--seed", type=int, default=0, help="seed for the random image choice")
    _add_data_args(p)
    _add_out(p)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("params", help="analytic parameter counts", description="Print baseline and structure-branch "
                       "parameter counts and the overhead ratio.")
    p.add_argument("--config", metavar="FILE", help="model config (key = value)")
    p.add_argument("--resnet50", action="store_true", help="use the ResNet-50 reference (256x128 input, 751 ids)")
    p.add_argument("--num-classes", type=int, help="number of identities")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("synth", help="export a synthetic dataset", description="Render a synthetic dataset as P6 "
                       "files in Market-1501 layout plus index.csv.")
    p.add_argument("--synth", metavar="FILE", help="synthetic dataset spec (key = value)")
    p.add_argument("--seed", type=int, default=0, help="generation seed")
    _add_out(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"rldnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"rldnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"rldnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
