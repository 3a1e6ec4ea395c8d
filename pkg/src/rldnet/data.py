"""Synthetic structured-person images, Market-1501 style directories, augmentation.

A synthetic person is four stacked horizontal bands (head, upper body, lower
body, feet), each with an identity-specific palette colour and texture. The
renderer reproduces three detection/pose nuisances: vertical shifts with
band-height jitter, partial (bottom-cut) detections and loose boxes, plus a
per-camera colour gain.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import pixmap

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")

# well separated base colours; identities differ mostly by arrangement
PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],  # red
        [0.15, 0.25, 0.80],  # blue
        [0.92, 0.92, 0.90],  # white
        [0.10, 0.10, 0.12],  # black
        [0.20, 0.70, 0.25],  # green
        [0.90, 0.80, 0.20],  # yellow
        [0.50, 0.50, 0.50],  # grey
        [0.55, 0.35, 0.15],  # brown
        [0.60, 0.20, 0.65],  # purple
        [0.20, 0.75, 0.80],  # cyan
    ]
)

PHOTO_MEAN = (0.485, 0.456, 0.406)
PHOTO_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class SynthSpec:
    num_ids: int = 40
    images_per_id_per_cam: int = 4
    num_cams: int = 4
    height: int = 64
    width: int = 32
    band_fractions: tuple[float, float, float, float] = (0.15, 0.35, 0.35, 0.15)
    palette_size: int = 6
    texture_amplitude: float = 0.12
    shift_range: float = 0.08
    band_jitter: float = 0.04
    partial_crop_prob: float = 0.2
    partial_crop_max: float = 0.2
    loose_box_prob: float = 0.2
    loose_box_max: float = 0.12
    camera_gain: float = 0.15
    noise_sigma: float = 0.03
    body_width: tuple[float, float] = (0.55, 0.8)
    train_fraction: float = 0.5

    def __post_init__(self):
        if self.num_cams < 2:
            raise ValueError("synthetic dataset needs at least 2 cameras so every id is seen twice")
        if self.num_ids < 2:
            raise ValueError("need at least 2 identities")
        if self.images_per_id_per_cam < 1:
            raise ValueError("images_per_id_per_cam must be positive")
        if len(self.band_fractions) != 4 or abs(sum(self.band_fractions) - 1) > 1e-9:
            raise ValueError("band_fractions must be 4 values summing to 1")
        if min(self.band_fractions) <= 0:
            raise ValueError("band fractions must be positive")
        if not 0 <= self.shift_range < 0.3:
            raise ValueError("shift_range must lie in [0, 0.3)")
        if not 2 <= self.palette_size <= len(PALETTE):
            raise ValueError(f"palette_size must lie in [2, {len(PALETTE)}]")
        if self.palette_size * (self.palette_size - 1) ** 3 < self.num_ids:
            raise ValueError("palette too small for the requested number of distinct identities")
        for name in ("partial_crop_prob", "loose_box_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be a probability")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.height < 8 or self.width < 4:
            raise ValueError("image too small")

    @classmethod
    def clean(cls, **overrides) -> "SynthSpec":
        """A deformation-free spec: no shift, jitter, crops, gain, texture or noise."""
        base = dict(
            texture_amplitude=0.0, shift_range=0.0, band_jitter=0.0, partial_crop_prob=0.0,
            loose_box_prob=0.0, camera_gain=0.0, noise_sigma=0.0, body_width=(0.75, 0.75),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def num_train_ids(self) -> int:
        return max(1, min(self.num_ids - 1, int(round(self.num_ids * self.train_fraction))))

    def expected_split_sizes(self) -> dict[str, int]:
        held = self.num_ids - self.num_train_ids
        per_id = self.num_cams * self.images_per_id_per_cam
        query = held * (self.num_cams if self.images_per_id_per_cam >= 2 else 1)
        return {
            "train": self.num_train_ids * per_id,
            "query": query,
            "gallery": held * per_id - query,
        }


@dataclass
class Identity:
    pid: int
    colors: np.ndarray  # (4, 3)
    textures: list[tuple[int, float, float]]  # (pattern, frequency, phase) per band


@dataclass
class DatasetIndex:
    """Immutable-by-convention table of samples.

    ``images`` is ``(N, 3, H, W)`` float32 in [0, 1] or ``None`` for lazily
    decoded directories (see :meth:`load_images`).
    """

    pids: np.ndarray
    camids: np.ndarray
    splits: np.ndarray
    images: np.ndarray | None = None
    paths: list[str] | None = None
    junk: np.ndarray | None = None
    identities: dict[int, Identity] = field(default_factory=dict)
    band_rows: np.ndarray | None = None  # (N, 3) ground-truth band boundaries, synthetic only
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.pids)

    def subset(self, split: str) -> "DatasetIndex":
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return self.select(self.splits == split)

    def select(self, mask) -> "DatasetIndex":
        """Rows picked by a boolean mask or an integer index array."""
        sel = np.asarray(mask)
        idx = np.flatnonzero(sel) if sel.dtype == bool else sel.astype(np.int64).reshape(-1)
        return DatasetIndex(
            pids=self.pids[idx], camids=self.camids[idx], splits=self.splits[idx],
            images=None if self.images is None else self.images[idx],
            paths=None if self.paths is None else [self.paths[i] for i in idx],
            junk=None if self.junk is None else self.junk[idx],
            identities=self.identities,
            band_rows=None if self.band_rows is None else self.band_rows[idx],
        )

    def load_images(self, size: tuple[int, int] | None = None) -> np.ndarray:
        """Return images as ``(N, 3, H, W)``; decodes P6 files when not in memory."""
        if self.images is None:
            if self.paths is None:
                raise ValueError("dataset has neither images nor paths")
            decoded = []
            for p in self.paths:
                if not p.lower().endswith((".ppm", ".pnm")):
                    raise ValueError(f"{p}: only P6 pixmaps are decoded; convert JPEGs first (see README)")
                img = pixmap.from_uint8(pixmap.read_pnm(p))
                if size is not None and img.shape[1:] != tuple(size):
                    img = resize_bilinear(img, *size)
                decoded.append(img)
            self.images = np.stack(decoded).astype(np.float32)
        if size is not None and self.images.shape[2:] != tuple(size):
            return resize_bilinear(self.images, *size)
        return self.images


# ---------------------------------------------------------------------------
# synthesis


def _make_identities(spec: SynthSpec, rng: np.random.Generator) -> list[Identity]:
    combos = set()
    out = []
    pid = 1  # pid 0 is reserved for junk images in evaluation
    while len(out) < spec.num_ids:
        combo = tuple(int(c) for c in rng.integers(spec.palette_size, size=4))
        if combo in combos or any(a == b for a, b in zip(combo, combo[1:])):
            continue
        combos.add(combo)
        textures = [(int(rng.integers(4)), float(rng.uniform(2, 5)), float(rng.uniform(0, 2 * np.pi))) for _ in range(4)]
        out.append(Identity(pid, PALETTE[list(combo)].copy(), textures))
        pid += 1
    return out


def _texture(pattern: int, freq: float, phase: float, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    if pattern == 0:
        return np.zeros(np.broadcast(v, u).shape)
    if pattern == 1:
        return np.broadcast_to(np.sin(2 * np.pi * freq * v + phase), np.broadcast(v, u).shape)
    if pattern == 2:
        return np.broadcast_to(np.sin(2 * np.pi * freq * u + phase), np.broadcast(v, u).shape)
    return np.sign(np.sin(2 * np.pi * freq * v + phase) * np.sin(2 * np.pi * freq * u + phase))


def render_person(ident: Identity, spec: SynthSpec, rng: np.random.Generator, gain: np.ndarray):
    """Render one image; returns ``(image (3,H,W), band boundary rows (3,))``."""
    H, W = spec.height, spec.width
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.08, 0.08, size=3) if spec.noise_sigma or spec.camera_gain else np.full(3, 0.5)

    top, bottom = 0.0, float(H)
    left_margin = 0.0
    if spec.loose_box_prob and rng.random() < spec.loose_box_prob:
        top += rng.uniform(0, spec.loose_box_max) * H
        bottom -= rng.uniform(0, spec.loose_box_max) * H
        left_margin = rng.uniform(0, spec.loose_box_max)
    if spec.partial_crop_prob and rng.random() < spec.partial_crop_prob:
        cut = rng.uniform(0.05, spec.partial_crop_max)
        bottom = top + (bottom - top) / (1 - cut)
    shift = rng.uniform(-spec.shift_range, spec.shift_range) * H if spec.shift_range else 0.0
    top += shift
    bottom += shift

    frac = np.asarray(spec.band_fractions, dtype=np.float64)
    if spec.band_jitter:
        frac = np.clip(frac + rng.uniform(-spec.band_jitter, spec.band_jitter, size=4), 0.05, None)
        frac = frac / frac.sum()
    edges = np.concatenate([[0.0], np.cumsum(frac)])

    lo, hi = spec.body_width
    bw = rng.uniform(lo, hi) * (1 - left_margin) if hi > lo else lo * (1 - left_margin)
    cx = 0.5 + (rng.uniform(-0.05, 0.05) if spec.shift_range else 0.0)
    left, right = (cx - bw / 2) * W, (cx + bw / 2) * W

    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    v = (ys - top) / (bottom - top)  # 0..1 along the body
    u = (xs - left) / (right - left)
    inside = ((v >= 0) & (v < 1))[:, None] & ((u >= 0) & (u < 1))[None, :]
    band = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, 3)

    img = np.empty((3, H, W))
    img[:] = bg[:, None, None]
    for b in range(4):
        rows = (band == b)[:, None] & inside
        if not rows.any():
            continue
        local_v = ((v - edges[b]) / (edges[b + 1] - edges[b]))[:, None]
        shade = 1.0
        if spec.texture_amplitude:
            shade = 1.0 + spec.texture_amplitude * _texture(*ident.textures[b], local_v, u[None, :])
        for c in range(3):
            img[c][rows] = (ident.colors[b, c] * shade * np.ones((H, W)))[rows]
    img *= gain[:, None, None]
    if spec.noise_sigma:
        img += rng.normal(0, spec.noise_sigma, size=img.shape)
    boundary_rows = top + edges[1:4] * (bottom - top)
    return np.clip(img, 0, 1).astype(np.float32), boundary_rows


def generate_synth(spec: SynthSpec, seed: int = 0) -> DatasetIndex:
    """Deterministically render a dataset and split it Market-style.

    The first ``num_train_ids`` identities are training ids. For each held-out
    id, one image per camera becomes a query and the rest go to the gallery
    (with one image per camera, only the first camera's image is a query).
    """
    rng = np.random.default_rng(seed)
    idents = _make_identities(spec, rng)
    gains = 1.0 + rng.uniform(-spec.camera_gain, spec.camera_gain, size=(spec.num_cams, 3)) if spec.camera_gain \
        else np.ones((spec.num_cams, 3))
    n_train = spec.num_train_ids
    ipc = spec.images_per_id_per_cam

    images, pids, camids, splits, bands = [], [], [], [], []
    for k, ident in enumerate(idents):
        held_out = k >= n_train
        for cam in range(1, spec.num_cams + 1):
            for j in range(ipc):
                img, rows = render_person(ident, spec, rng, gains[cam - 1])
                images.append(img)
                bands.append(rows)
                pids.append(ident.pid)
                camids.append(cam)
                if not held_out:
                    splits.append("train")
                elif j == 0 and (ipc >= 2 or cam == 1):
                    splits.append("query")
                else:
                    splits.append("gallery")
    return DatasetIndex(
        pids=np.array(pids), camids=np.array(camids), splits=np.array(splits),
        images=np.stack(images), identities={i.pid: i for i in idents}, band_rows=np.array(bands),
    )


def detect_band_rows(image: np.ndarray, column: int | None = None, tol: float = 1e-6) -> list[int]:
    """Rows where the colour along ``column`` changes (first row of each new segment)."""
    col = image.shape[2] // 2 if column is None else column
    strip = image[:, :, col]
    diff = np.abs(np.diff(strip, axis=1)).max(axis=0)
    return [int(r) + 1 for r in np.flatnonzero(diff > tol)]


# ---------------------------------------------------------------------------
# Market-1501 style directories

MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(jpg|jpeg|png|ppm|pnm)$", re.IGNORECASE)
MARKET_DIRS = {"train": "bounding_box_train", "gallery": "bounding_box_test", "query": "query"}


def parse_market_name(name: str) -> tuple[int, int] | None:
    """``0002_c1s1_000451_03.jpg -> (2, 1)``; ``None`` if the name does not follow the convention."""
    m = MARKET_NAME.match(name)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def load_market_dir(path: str | Path, distractor_pid: int = -1, junk_pid: int = 0) -> DatasetIndex:
    """Index a Market-1501 style directory without decoding images.

    Distractors are kept in the gallery only; junk ids are kept and flagged.
    """
    root = Path(path)
    pids, camids, splits, paths = [], [], [], []
    skipped = 0
    for split in ("train", "query", "gallery"):
        folder = root / MARKET_DIRS[split]
        if not folder.is_dir():
            raise FileNotFoundError(f"missing subfolder {folder}")
        count = 0
        for f in sorted(folder.iterdir()):
            if f.is_dir() or f.name.startswith("."):
                continue
            parsed = parse_market_name(f.name)
            if parsed is None:
                logger.warning("skipping unparseable file name %s", f)
                skipped += 1
                continue
            pid, cam = parsed
            if pid == distractor_pid and split != "gallery":
                logger.warning("distractor %s outside the gallery ignored", f)
                skipped += 1
                continue
            pids.append(pid)
            camids.append(cam)
            splits.append(split)
            paths.append(str(f))
            count += 1
        if count == 0 and split == "query":
            raise ValueError(f"query folder {folder} contains no usable images")
    pids_arr = np.array(pids, dtype=np.int64)
    return DatasetIndex(
        pids=pids_arr, camids=np.array(camids, dtype=np.int64), splits=np.array(splits),
        paths=paths, junk=pids_arr == junk_pid, skipped=skipped,
    )


def export_dataset(ds: DatasetIndex, out_dir: str | Path) -> Path:
    """Write images as P6 files named by the Market convention plus ``index.csv``."""
    out = Path(out_dir)
    images = ds.load_images()
    rows = []
    counters: dict[tuple[int, int], int] = {}
    for i in range(len(ds)):
        pid, cam, split = int(ds.pids[i]), int(ds.camids[i]), str(ds.splits[i])
        n = counters.get((pid, cam), 0)
        counters[(pid, cam)] = n + 1
        name = f"{pid:04d}_c{cam}s1_{i:06d}_{n:02d}.ppm"
        rel = Path(MARKET_DIRS[split]) / name
        (out / rel.parent).mkdir(parents=True, exist_ok=True)
        pixmap.write_ppm(out / rel, pixmap.to_uint8(images[i]))
        rows.append((rel.as_posix(), pid, cam, split))
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "pid", "camid", "split"])
        w.writerows(rows)
    return out


# ---------------------------------------------------------------------------
# augmentation


def resize_bilinear(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize over the last two axes (half-pixel centres, edge clamped)."""
    h, w = images.shape[-2:]
    if (h, w) == (out_h, out_w):
        return images.copy()

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, wy = axis(h, out_h)
    x0, x1, wx = axis(w, out_w)
    top = images[..., y0, :] * (1 - wy)[:, None] + images[..., y1, :] * wy[:, None]
    out = top[..., x0] * (1 - wx) + top[..., x1] * wx
    return out.astype(images.dtype, copy=False)


@dataclass(frozen=True)
class AugmentConfig:
    """Train/eval preprocessing.

    ``crop_jitter`` is the maximum crop offset as a fraction of image height;
    the ±3% default is our own guess for an unquantified "small perturbation".
    """

    scale: float = 1.125
    crop_jitter: float = 0.03
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = PHOTO_MEAN
    std: tuple[float, float, float] = PHOTO_STD

    def with_stats(self, images: np.ndarray) -> "AugmentConfig":
        mean, std = channel_stats(images)
        return replace(self, mean=tuple(float(m) for m in mean), std=tuple(float(s) for s in std))

    def resized(self, h: int, w: int) -> tuple[int, int]:
        return int(round(h * self.scale)), int(round(w * self.scale))


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return images.mean(axis=(0, 2, 3)), images.std(axis=(0, 2, 3))


def standardize(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    mean = np.asarray(cfg.mean, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(cfg.std, dtype=np.float32).reshape(3, 1, 1)
    return ((images - mean) / std).astype(np.float32)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment_batch(images: np.ndarray, mode: str, rng: np.random.Generator | None = None,
                  cfg: AugmentConfig = AugmentConfig(), pre_resized: bool = False,
                  out_size: tuple[int, int] | None = None, force_flip: bool | None = None) -> np.ndarray:
    """Batch version of :func:`augment` for ``(N, 3, H, W)`` arrays.

    In train mode ``out_size`` (default: the input size) is the crop size;
    pass ``pre_resized=True`` when ``images`` are already scaled up.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval":
        h, w = images.shape[-2:]
        big = images if pre_resized else resize_bilinear(images, *cfg.resized(h, w))
        return standardize(big, cfg)

    if rng is None:
        raise ValueError("train-mode augmentation needs a random generator")
    if pre_resized:
        big = images
        oh, ow = out_size
    else:
        oh, ow = out_size or images.shape[-2:]
        big = resize_bilinear(images, *cfg.resized(oh, ow))
    bh, bw = big.shape[-2:]
    cy, cx = (bh - oh) // 2, (bw - ow) // 2
    j = int(round(cfg.crop_jitter * oh))
    n = images.shape[0]
    dy = rng.integers(-j, j + 1, size=n) if j else np.zeros(n, int)
    dx = rng.integers(-j, j + 1, size=n) if j else np.zeros(n, int)
    flips = rng.random(n) < cfg.flip_prob if force_flip is None else np.full(n, force_flip)
    out = np.empty(big.shape[:-2] + (oh, ow), dtype=np.float32)
    for i in range(n):
        y = int(np.clip(cy + dy[i], 0, bh - oh))
        x = int(np.clip(cx + dx[i], 0, bw - ow))
        crop = big[i, :, y:y + oh, x:x + ow]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return standardize(out, cfg)


def augment(image: np.ndarray, mode: str, seed=None, cfg: AugmentConfig = AugmentConfig(),
            force_flip: bool | None = None) -> np.ndarray:
    """Preprocess one ``(3, H, W)`` image.

    train: resize by ``cfg.scale``, jittered centre crop back to ``(H, W)``,
    random horizontal flip, standardise. eval: resize and standardise only.
    """
    rng = np.random.default_rng(seed) if mode == "train" else None
    return augment_batch(image[None], mode, rng, cfg, force_flip=force_flip)[0]


def spec_from_mapping(values: dict) -> SynthSpec:
    """Build a :class:`SynthSpec` from string values (config-file input)."""
    kwargs = {}
    for f in fields(SynthSpec):
        if f.name not in values:
            continue
        raw = values[f.name]
        default = getattr(SynthSpec(), f.name)
        if isinstance(default, tuple):
            kwargs[f.name] = tuple(float(x) for x in str(raw).replace(",", " ").split())
        elif isinstance(default, int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    unknown = set(values) - {f.name for f in fields(SynthSpec)}
    if unknown:
        raise ValueError(f"unknown synth spec keys: {', '.join(sorted(unknown))}")
    return SynthSpec(**kwargs)
