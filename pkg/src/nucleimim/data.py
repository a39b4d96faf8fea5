"""Annotated images, dataset folders, a synthetic nuclei corpus and tiling geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .rng import Rng

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MIN_BOX_FRACTION = 0.25


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class NucleusBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: int | None = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DatasetError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass
class AnnotatedSample:
    """An RGB image in [0, 1] (H, W, C) with its nucleus boxes.

    ``centroids`` (N, 2) holds generator ground truth (x, y) when known and
    is carried through every geometric transform.
    """

    image: np.ndarray
    boxes: list[NucleusBox]
    source_id: str = ""
    centroids: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def labels(self) -> list[int | None]:
        return [b.label for b in self.boxes]

    def box_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64).reshape(-1, 4)


# ---------------------------------------------------------------------------
# resampling

def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at pixel-index coordinates (pixel (i, j) centred at (i, j))."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, h - 1)
    xs = np.clip(xs, 0.0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly = (ys - y0)[:, None, None]
    lx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - lx) + image[y0][:, x1] * lx
    bot = image[y1][:, x0] * (1 - lx) + image[y1][:, x1] * lx
    return top * (1 - ly) + bot * ly


def crop_resize(image: np.ndarray, region: Sequence[float], out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample the pixel-edge region (x0, y0, x1, y1) to out_h x out_w."""
    x0, y0, x1, y1 = (float(v) for v in region)
    if not (x1 > x0 and y1 > y0):
        raise DatasetError(f"degenerate crop region {tuple(region)}")
    ys = y0 + (np.arange(out_h) + 0.5) * ((y1 - y0) / out_h) - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * ((x1 - x0) / out_w) - 0.5
    return _sample_bilinear(image, ys, xs)


def resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if image.shape[:2] == (out_h, out_w):
        return image.copy()
    return crop_resize(image, (0, 0, image.shape[1], image.shape[0]), out_h, out_w)


def resize_sample(sample: AnnotatedSample, out_h: int, out_w: int) -> AnnotatedSample:
    sy, sx = out_h / sample.height, out_w / sample.width
    boxes = [NucleusBox(b.x_min * sx, b.y_min * sy, min(b.x_max * sx, out_w), min(b.y_max * sy, out_h), b.label)
             for b in sample.boxes]
    cents = None if sample.centroids is None else sample.centroids * np.array([sx, sy])
    return AnnotatedSample(resize(sample.image, out_h, out_w), boxes, sample.source_id, cents)


def _window_boxes(sample: AnnotatedSample, window: Sequence[float], scale: tuple[float, float] = (1.0, 1.0),
                  out_size: tuple[float, float] | None = None):
    """Clip boxes to ``window`` (x0, y0, x1, y1), keep survivors, map to window coordinates.

    A box survives when at least MIN_BOX_FRACTION of its area remains and
    its centre stays inside the window.
    """
    wx0, wy0, wx1, wy1 = window
    sx, sy = scale
    boxes, cents = [], []
    for i, b in enumerate(sample.boxes):
        cx0, cy0 = max(b.x_min, wx0), max(b.y_min, wy0)
        cx1, cy1 = min(b.x_max, wx1), min(b.y_max, wy1)
        if cx1 <= cx0 or cy1 <= cy0:
            continue
        if (cx1 - cx0) * (cy1 - cy0) < MIN_BOX_FRACTION * b.area:
            continue
        mx, my = b.center
        if not (wx0 <= mx <= wx1 and wy0 <= my <= wy1):
            continue
        out_w, out_h = out_size or ((wx1 - wx0) * sx, (wy1 - wy0) * sy)
        nb = NucleusBox((cx0 - wx0) * sx, (cy0 - wy0) * sy, min((cx1 - wx0) * sx, out_w),
                        min((cy1 - wy0) * sy, out_h), b.label)
        boxes.append(nb)
        if sample.centroids is not None:
            # a crop can cut the centroid off; keep it on the surviving part
            cx, cy = sample.centroids[i]
            cents.append((float(np.clip((cx - wx0) * sx, nb.x_min, nb.x_max)),
                          float(np.clip((cy - wy0) * sy, nb.y_min, nb.y_max))))
    centroids = None if sample.centroids is None else np.array(cents, dtype=np.float64).reshape(-1, 2)
    return boxes, centroids


def clip_boxes(sample: AnnotatedSample) -> AnnotatedSample:
    boxes, cents = _window_boxes(sample, (0, 0, sample.width, sample.height))
    return replace(sample, boxes=boxes, centroids=cents)


# ---------------------------------------------------------------------------
# folders on disk

def _read_sidecar(path: Path) -> list[NucleusBox]:
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path.name}: invalid JSON ({exc.msg})") from None
    if not isinstance(meta, dict) or not isinstance(meta.get("boxes"), list):
        raise DatasetError(f"{path.name}: field 'boxes' missing or not a list")
    boxes = []
    for i, entry in enumerate(meta["boxes"]):
        try:
            coords = [float(entry[k]) for k in ("x_min", "y_min", "x_max", "y_max")]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path.name}: boxes[{i}] has bad or missing field {exc}") from None
        label = entry.get("label")
        if label is not None and not isinstance(label, int):
            raise DatasetError(f"{path.name}: boxes[{i}].label must be int or null")
        try:
            boxes.append(NucleusBox(*coords, label=label))
        except DatasetError:
            raise DatasetError(f"{path.name}: boxes[{i}] violates x_min < x_max, y_min < y_max") from None
    return boxes


def load_dataset(root: str | Path, split: str | None = None) -> Iterator[AnnotatedSample]:
    """Yield samples from ``root[/split]`` in lexicographic file-name order.

    Each ``<name>.json`` sidecar must be paired with ``<name>.png``.
    """
    folder = Path(root) if split is None else Path(root) / split
    if not folder.is_dir():
        raise DatasetError(f"dataset folder not found: {folder}")
    for sidecar in sorted(folder.glob("*.json")):
        if sidecar.name == "manifest.json":
            continue
        png = sidecar.with_suffix(".png")
        if not png.exists():
            raise DatasetError(f"{sidecar.name}: missing image {png.name}")
        boxes = _read_sidecar(sidecar)
        with Image.open(png) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        yield AnnotatedSample(image, boxes, sidecar.stem)


def save_dataset(samples: Sequence[AnnotatedSample], root: str | Path, split: str | None = None,
                 manifest: dict | None = None) -> Path:
    folder = Path(root) if split is None else Path(root) / split
    folder.mkdir(parents=True, exist_ok=True)
    for s in samples:
        pixels = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(folder / f"{s.source_id}.png")
        boxes = [{"x_min": b.x_min, "y_min": b.y_min, "x_max": b.x_max, "y_max": b.y_max, "label": b.label}
                 for b in s.boxes]
        (folder / f"{s.source_id}.json").write_text(json.dumps({"boxes": boxes}))
    if manifest is not None:
        (folder / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return folder


# ---------------------------------------------------------------------------
# synthetic corpus

@dataclass(frozen=True)
class ClassRecipe:
    hue: tuple[float, float, float]
    radius: tuple[float, float]
    rim_darkness: float
    texture_freq: float
    texture_amp: float = 0.12
    elongation: tuple[float, float] = (0.75, 1.0)


# Classes share overlapping radii and close mean colours; the rim and the
# interior texture carry most of the class signal.
DEFAULT_RECIPES = (
    ClassRecipe(hue=(0.34, 0.20, 0.52), radius=(3.0, 6.0), rim_darkness=0.0, texture_freq=0.0),
    ClassRecipe(hue=(0.40, 0.22, 0.55), radius=(3.5, 6.5), rim_darkness=0.30, texture_freq=0.0),
    ClassRecipe(hue=(0.32, 0.24, 0.56), radius=(3.0, 6.0), rim_darkness=0.0, texture_freq=1.4),
    ClassRecipe(hue=(0.38, 0.20, 0.50), radius=(3.5, 6.5), rim_darkness=0.30, texture_freq=1.4),
)


@dataclass
class SyntheticConfig:
    n_images: int = 64
    height: int = 64
    width: int = 64
    nuclei_per_image: tuple[int, int] = (4, 10)
    n_classes: int = 4
    recipes: tuple[ClassRecipe, ...] = DEFAULT_RECIPES
    hue_jitter: float = 0.05
    dominant_class_prob: float = 0.7
    background_noise: float = 0.01
    max_retries: int = 500
    prefix: str = "syn"

    def recipe(self, k: int) -> ClassRecipe:
        if k < len(self.recipes):
            return self.recipes[k]
        # extra classes: deterministic variations of the base table
        base = self.recipes[k % len(self.recipes)]
        shift = 0.03 * (k // len(self.recipes))
        return replace(base, hue=tuple(min(1.0, h + shift) for h in base.hue))


def _background(cfg: SyntheticConfig, rng: Rng) -> np.ndarray:
    h, w = cfg.height, cfg.width
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.array([0.88, 0.62, 0.78]) + rng.uniform(-0.04, 0.04, 3)
    field_ = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, 2)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    img = base[None, None, :] + 0.03 * field_[..., None]
    img += rng.normal(0.0, cfg.background_noise, (h, w, 3))
    return img


def _render_nucleus(img, cx, cy, ax, ay, recipe: ClassRecipe, tint, rng: Rng):
    h, w = img.shape[:2]
    x0, x1 = max(0, int(math.floor(cx - ax))), min(w, int(math.ceil(cx + ax)) + 1)
    y0, y1 = max(0, int(math.floor(cy - ay))), min(h, int(math.ceil(cy + ay)) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    px, py = xx + 0.5, yy + 0.5
    r = np.sqrt(((px - cx) / ax) ** 2 + ((py - cy) / ay) ** 2)
    inside = r <= 1.0
    if not inside.any():
        return None
    color = np.clip(np.asarray(recipe.hue) + tint, 0.0, 1.0)
    shade = np.ones_like(r)
    if recipe.texture_freq > 0:
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        u = np.cos(theta) * (px - cx) + np.sin(theta) * (py - cy)
        shade += recipe.texture_amp * np.sin(recipe.texture_freq * u + phase) * 2.0
    if recipe.rim_darkness > 0:
        rim = np.clip((r - 0.55) / 0.45, 0.0, 1.0)
        # darken the rim and lift the interior so the mean stays close
        shade *= (1.0 + 0.5 * recipe.rim_darkness) - 1.5 * recipe.rim_darkness * rim
    pix = np.clip(color[None, None, :] * shade[..., None], 0.0, 1.0)
    region = img[y0:y1, x0:x1]
    region[inside] = pix[inside]
    ys, xs = np.nonzero(inside)
    return (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)


def generate_synthetic(cfg: SyntheticConfig, rng: Rng) -> tuple[list[AnnotatedSample], dict]:
    """Render ``cfg.n_images`` images of non-overlapping elliptical nuclei.

    Returns the samples and a manifest holding the seed and per-nucleus
    ground-truth centroids. Each image is drawn from its own labelled
    sub-stream so results do not depend on generation order.
    """
    samples = []
    records = []
    k = cfg.n_classes
    lo, hi = cfg.nuclei_per_image
    for idx in range(cfg.n_images):
        r = rng.child(f"image{idx}")
        img = _background(cfg, r)
        count = int(r.integers(lo, hi + 1)) if hi > 0 else 0
        dominant = int(r.integers(0, k)) if k > 0 else 0
        occupied: list[tuple[float, float, float, float]] = []
        boxes, cents = [], []
        for n in range(count):
            label = dominant if r.uniform() < cfg.dominant_class_prob else int(r.integers(0, k))
            recipe = cfg.recipe(label)
            for _ in range(cfg.max_retries):
                rad = r.uniform(*recipe.radius)
                el = r.uniform(*recipe.elongation)
                ax, ay = (rad, rad * el) if r.uniform() < 0.5 else (rad * el, rad)
                cx = r.uniform(ax + 1, cfg.width - ax - 1)
                cy = r.uniform(ay + 1, cfg.height - ay - 1)
                ext = (cx - ax - 1, cy - ay - 1, cx + ax + 1, cy + ay + 1)
                if all(ext[2] <= o[0] or o[2] <= ext[0] or ext[3] <= o[1] or o[3] <= ext[1] for o in occupied):
                    break
            else:
                raise DatasetError(
                    f"could not place nucleus {n + 1}/{count} in image {idx} after {cfg.max_retries} retries; "
                    "lower nuclei_per_image or enlarge the image")
            tint = r.normal(0.0, cfg.hue_jitter, 3)
            tight = _render_nucleus(img, cx, cy, ax, ay, recipe, tint, r)
            occupied.append(ext)
            boxes.append(NucleusBox(*map(float, tight), label=label))
            cents.append((cx, cy))
        img = np.clip(img, 0.0, 1.0)
        sid = f"{cfg.prefix}_{idx:05d}"
        samples.append(AnnotatedSample(img, boxes, sid, np.array(cents, dtype=np.float64).reshape(-1, 2)))
        records.append({"source_id": sid, "centroids": [list(c) for c in cents],
                        "labels": [b.label for b in boxes]})
    manifest = {"seed": rng.seed, "stream": list(rng.path), "config": _config_dict(cfg), "images": records}
    return samples, manifest


def _config_dict(cfg: SyntheticConfig) -> dict:
    return {"n_images": cfg.n_images, "height": cfg.height, "width": cfg.width,
            "nuclei_per_image": list(cfg.nuclei_per_image), "n_classes": cfg.n_classes,
            "hue_jitter": cfg.hue_jitter, "dominant_class_prob": cfg.dominant_class_prob}


def attach_centroids(samples: Sequence[AnnotatedSample], manifest: dict) -> list[AnnotatedSample]:
    """Re-attach generator centroids (from a manifest) to samples loaded from disk."""
    by_id = {rec["source_id"]: rec for rec in manifest["images"]}
    return [replace(s, centroids=np.array(by_id[s.source_id]["centroids"], dtype=np.float64).reshape(-1, 2))
            for s in samples]


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugConfig:
    crop_scale: tuple[float, float] | None = None
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip: float = 0.0
    vflip: float = 0.0
    color_jitter: float = 0.0
    patch_size: int = 1

    @classmethod
    def pretrain_default(cls, patch_size: int) -> "AugConfig":
        return cls(crop_scale=(0.6, 1.0), hflip=0.5, vflip=0.5, color_jitter=0.4, patch_size=patch_size)


def hflip(sample: AnnotatedSample) -> AnnotatedSample:
    w = sample.width
    boxes = [NucleusBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max, b.label) for b in sample.boxes]
    cents = None
    if sample.centroids is not None:
        cents = sample.centroids.copy()
        cents[:, 0] = w - cents[:, 0]
    return AnnotatedSample(sample.image[:, ::-1].copy(), boxes, sample.source_id, cents)


def vflip(sample: AnnotatedSample) -> AnnotatedSample:
    h = sample.height
    boxes = [NucleusBox(b.x_min, h - b.y_max, b.x_max, h - b.y_min, b.label) for b in sample.boxes]
    cents = None
    if sample.centroids is not None:
        cents = sample.centroids.copy()
        cents[:, 1] = h - cents[:, 1]
    return AnnotatedSample(sample.image[::-1].copy(), boxes, sample.source_id, cents)


def _color_jitter(image: np.ndarray, strength: float, rng: Rng) -> np.ndarray:
    b, c, s = rng.uniform(1 - strength, 1 + strength, 3)
    img = image * b
    gray = img @ np.array([0.299, 0.587, 0.114])
    img = (img - gray.mean()) * c + gray.mean()
    gray = img @ np.array([0.299, 0.587, 0.114])
    img = (img - gray[..., None]) * s + gray[..., None]
    return np.clip(img, 0.0, 1.0)


def random_resized_crop(sample: AnnotatedSample, rng: Rng, scale, ratio, min_size: int = 1) -> AnnotatedSample:
    h, w = sample.height, sample.width
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            break
    else:
        cw, ch, x0, y0 = w, h, 0, 0
    if cw < min_size or ch < min_size:
        raise DatasetError(f"crop {ch}x{cw} smaller than patch size {min_size}")
    window = (x0, y0, x0 + cw, y0 + ch)
    boxes, cents = _window_boxes(sample, window, scale=(w / cw, h / ch), out_size=(w, h))
    image = crop_resize(sample.image, window, h, w)
    return AnnotatedSample(image, boxes, sample.source_id, cents)


def augment(sample: AnnotatedSample, rng: Rng, aug: AugConfig) -> AnnotatedSample:
    """Random resized crop, flips and colour jitter; boxes follow the geometry."""
    out = sample
    if aug.crop_scale is not None:
        out = random_resized_crop(out, rng.child("crop"), aug.crop_scale, aug.crop_ratio, aug.patch_size)
    if aug.hflip > 0 and rng.uniform() < aug.hflip:
        out = hflip(out)
    if aug.vflip > 0 and rng.uniform() < aug.vflip:
        out = vflip(out)
    if aug.color_jitter > 0:
        out = replace(out, image=_color_jitter(out.image, aug.color_jitter, rng.child("jitter")))
    return out


# ---------------------------------------------------------------------------
# tiling geometry

def pretrain_crop_tiles(tiles: Sequence[AnnotatedSample], crops_per_group: int, rng: Rng,
                        crop_size: int | None = None) -> list[AnnotatedSample]:
    """Treat four tiles (TL, TR, BL, BR) as a 2x2 mosaic and sample overlapping crops.

    Returns the four tiles resized to ``crop_size`` followed by
    ``crops_per_group`` crops drawn uniformly inside the mosaic.
    """
    if len(tiles) != 4:
        raise DatasetError("pretrain_crop_tiles needs exactly four tiles")
    th, tw = tiles[0].height, tiles[0].width
    if any(t.image.shape != tiles[0].image.shape for t in tiles):
        raise DatasetError("mosaic tiles must share one size: " + ", ".join(str(t.image.shape) for t in tiles))
    cs = crop_size or th
    if cs > 2 * min(th, tw):
        raise DatasetError(f"crop size {cs} exceeds mosaic {2 * th}x{2 * tw}")
    mosaic = np.concatenate([np.concatenate([tiles[0].image, tiles[1].image], axis=1),
                             np.concatenate([tiles[2].image, tiles[3].image], axis=1)], axis=0)
    offsets = [(0, 0), (tw, 0), (0, th), (tw, th)]
    seen = set()
    boxes, cents = [], []
    for t, (ox, oy) in zip(tiles, offsets):
        for i, b in enumerate(t.boxes):
            key = (round(b.x_min + ox, 6), round(b.y_min + oy, 6), round(b.x_max + ox, 6), round(b.y_max + oy, 6))
            if key in seen:
                continue
            seen.add(key)
            boxes.append(NucleusBox(*key, label=b.label))
            if t.centroids is not None:
                cents.append((t.centroids[i, 0] + ox, t.centroids[i, 1] + oy))
    have_cents = all(t.centroids is not None for t in tiles)
    merged = AnnotatedSample(mosaic, boxes, tiles[0].source_id + "_mosaic",
                             np.array(cents).reshape(-1, 2) if have_cents else None)
    out = [resize_sample(clip_boxes(t), cs, cs) for t in tiles]
    for c in range(crops_per_group):
        x0 = rng.uniform(0, 2 * tw - cs)
        y0 = rng.uniform(0, 2 * th - cs)
        window = (x0, y0, x0 + cs, y0 + cs)
        cb, cc = _window_boxes(merged, window, out_size=(cs, cs))
        img = crop_resize(mosaic, window, cs, cs)
        out.append(AnnotatedSample(img, cb, f"{merged.source_id}_crop{c}", cc))
    return out


@dataclass
class EvalTiles:
    tiles: list[AnnotatedSample]
    windows: list[tuple[int, int, int, int]]
    assignment: np.ndarray
    tile_box_ids: list[list[int]] = field(default_factory=list)


def eval_tile_split(sample: AnnotatedSample, tile_size: int = 448, min_overlap: int = 32) -> EvalTiles:
    """Split an image into four corner-anchored overlapping windows.

    Windows are ``max(tile_size, ceil((S + min_overlap) / 2))`` pixels wide
    so that the four corners always cover the image; each window is then
    resized to ``tile_size``. Every nucleus is assigned to the first window
    (TL, TR, BL, BR order) containing its box centre and appears in that
    tile only.
    """
    h, w = sample.height, sample.width
    if tile_size > min(h, w):
        raise DatasetError(f"tile size {tile_size} exceeds image {h}x{w}")
    wh = min(h, max(tile_size, math.ceil((h + min_overlap) / 2)))
    ww = min(w, max(tile_size, math.ceil((w + min_overlap) / 2)))
    windows = [(0, 0, ww, wh), (w - ww, 0, w, wh), (0, h - wh, ww, h), (w - ww, h - wh, w, h)]
    assignment = np.full(len(sample.boxes), -1, dtype=np.int64)
    for i, b in enumerate(sample.boxes):
        cx, cy = b.center
        for t, (x0, y0, x1, y1) in enumerate(windows):
            if x0 <= cx <= x1 and y0 <= cy <= y1:
                assignment[i] = t
                break
        else:
            raise RuntimeError(f"nucleus {i} centre {b.center} outside all tiles")
    tiles, ids = [], []
    for t, win in enumerate(windows):
        x0, y0, x1, y1 = win
        sx, sy = tile_size / (x1 - x0), tile_size / (y1 - y0)
        keep = [i for i in range(len(sample.boxes)) if assignment[i] == t]
        boxes = []
        for i in keep:
            b = sample.boxes[i]
            boxes.append(NucleusBox((max(b.x_min, x0) - x0) * sx, (max(b.y_min, y0) - y0) * sy,
                                    (min(b.x_max, x1) - x0) * sx, (min(b.y_max, y1) - y0) * sy, b.label))
        cents = None
        if sample.centroids is not None:
            cents = ((sample.centroids[keep] - np.array([x0, y0])) * np.array([sx, sy])).reshape(-1, 2)
        img = crop_resize(sample.image, win, tile_size, tile_size)
        tiles.append(AnnotatedSample(img, boxes, f"{sample.source_id}_t{t}", cents))
        ids.append(keep)
    return EvalTiles(tiles, windows, assignment, ids)


# ---------------------------------------------------------------------------
# normalisation

def normalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"normalisation std must be positive, got {std.tolist()}")
    return (image - np.asarray(mean)) / std


def denormalize(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    return image * np.asarray(std) + np.asarray(mean)
