"""Synthetic shapes dataset, augmentation, and on-disk dataset storage."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from ._validation import IGNORE_INDEX
from .config import SynthSpec, TrainConfig

SHAPE_KINDS = ("disk", "rectangle", "triangle", "ring", "cross")
DATASET_MEAN = (0.5, 0.5, 0.5)


@dataclass
class SegmentationSample:
    image: np.ndarray    # [3, H, W] float32 in roughly [0, 1]
    labels: np.ndarray   # [H, W] int64, values in 0..K-1 or IGNORE_INDEX
    present: np.ndarray  # [K] float32 multi-hot


def present_vector(labels: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    vals = np.unique(labels)
    vals = vals[(vals != ignore_index) & (vals < num_classes)]
    out = np.zeros(num_classes, dtype=np.float32)
    out[vals] = 1.0
    return out


def _draw_shape(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of one randomly placed shape of the given kind."""
    lo, hi = max(size // 8, 3), max(size // 4, 4)
    if hi <= lo or size < 12:
        raise ValueError(f"image_size {size} is too small to place shapes")
    rad = int(rng.integers(lo, hi + 1))
    cx = int(rng.integers(rad, size - rad))
    cy = int(rng.integers(rad, size - rad))
    canvas = Image.new("L", (size, size), 0)
    d = ImageDraw.Draw(canvas)
    if kind == "disk":
        d.ellipse([cx - rad, cy - rad, cx + rad, cy + rad], fill=1)
    elif kind == "rectangle":
        ax = int(rng.integers(rad // 2 + 1, rad + 1))
        d.rectangle([cx - rad, cy - ax, cx + rad, cy + ax], fill=1)
    elif kind == "triangle":
        phi = rng.uniform(0, 2 * math.pi)
        pts = [(cx + rad * math.cos(phi + k * 2 * math.pi / 3), cy + rad * math.sin(phi + k * 2 * math.pi / 3))
               for k in range(3)]
        d.polygon(pts, fill=1)
    elif kind == "ring":
        d.ellipse([cx - rad, cy - rad, cx + rad, cy + rad], fill=1)
        inner = max(rad // 2, 1)
        d.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)
    elif kind == "cross":
        t = max(rad // 3, 1)
        d.rectangle([cx - rad, cy - t, cx + rad, cy + t], fill=1)
        d.rectangle([cx - t, cy - rad, cx + t, cy + rad], fill=1)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return np.asarray(canvas, dtype=bool)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    slope = rng.uniform(-0.2, 0.2, size=(3, 2))
    bg = base[:, None, None] + slope[:, 0, None, None] * yy + slope[:, 1, None, None] * xx
    bg = bg + rng.normal(0, 0.08, size=(3, size, size))
    return bg


def generate_sample(spec: SynthSpec, rng: np.random.Generator) -> SegmentationSample:
    kinds = SHAPE_KINDS[: spec.num_classes - 1]
    size = spec.image_size
    image = _background(size, rng)
    labels = np.zeros((size, size), dtype=np.int64)
    dominant = int(rng.integers(len(kinds)))
    for _ in range(int(rng.integers(spec.min_shapes, spec.max_shapes + 1))):
        cls = dominant if rng.random() < spec.scene_coherence else int(rng.integers(len(kinds)))
        mask = _draw_shape(kinds[cls], size, rng)
        color = rng.uniform(0.0, 1.0, size=3)
        image[:, mask] = color[:, None] + rng.normal(0, 0.04, size=(3, int(mask.sum())))
        labels[mask] = cls + 1
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegmentationSample(image, labels, present_vector(labels, spec.num_classes))


def generate_synth_dataset(spec: SynthSpec) -> List[SegmentationSample]:
    """Seeded images of randomly coloured shapes on a textured background.

    Class 0 is background; class ``k >= 1`` is the k-th entry of ``SHAPE_KINDS``.
    Shape colour is independent of class, so classes are told apart by form.
    Each image has a dominant kind; every shape takes it with probability
    ``spec.scene_coherence`` and is drawn uniformly otherwise, so the rest
    of the scene carries evidence about any one shape.
    """
    if spec.num_classes - 1 > len(SHAPE_KINDS):
        raise ValueError(f"at most {len(SHAPE_KINDS) + 1} classes supported, got {spec.num_classes}")
    rng = np.random.default_rng(spec.seed)
    return [generate_sample(spec, rng) for _ in range(spec.num_images)]


def stack(samples: List[SegmentationSample]):
    """Stack samples into ``(images [n,3,H,W], labels [n,H,W], present [n,K])`` arrays."""
    return (np.stack([s.image for s in samples]),
            np.stack([s.labels for s in samples]),
            np.stack([s.present for s in samples]))


# ----------------------------------------------------------------------------
# augmentation


def hflip(sample: SegmentationSample) -> SegmentationSample:
    return SegmentationSample(sample.image[:, :, ::-1].copy(), sample.labels[:, ::-1].copy(),
                              sample.present.copy())


def _affine_params(h: int, w: int, scale: float, angle_deg: float):
    out_h, out_w = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    t = math.radians(angle_deg)
    # output (row, col) -> input (row, col)
    inv = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) / scale
    c_in = np.array([(h - 1) / 2, (w - 1) / 2])
    c_out = np.array([(out_h - 1) / 2, (out_w - 1) / 2])
    return inv, c_in - inv @ c_out, (out_h, out_w)


def warp(sample: SegmentationSample, scale: float, angle_deg: float) -> SegmentationSample:
    """Scale and rotate image (bilinear) and labels (nearest) with one shared affine map.

    Pixels exposed by rotation are filled with the dataset mean (image) and
    the ignore index (labels).
    """
    h, w = sample.labels.shape
    if scale == 1.0 and angle_deg == 0.0:
        return sample
    matrix, offset, shape = _affine_params(h, w, scale, angle_deg)
    image = np.stack([
        ndimage.affine_transform(sample.image[c], matrix, offset, output_shape=shape, order=1,
                                 mode="constant", cval=DATASET_MEAN[c])
        for c in range(3)
    ]).astype(np.float32)
    labels = ndimage.affine_transform(sample.labels, matrix, offset, output_shape=shape, order=0,
                                      mode="constant", cval=IGNORE_INDEX).astype(np.int64)
    return SegmentationSample(image, labels, present_vector(labels, len(sample.present)))


def crop_or_pad(sample: SegmentationSample, crop: int, rng: np.random.Generator) -> SegmentationSample:
    h, w = sample.labels.shape
    ph, pw = max(crop - h, 0), max(crop - w, 0)
    image, labels = sample.image, sample.labels
    if ph or pw:
        image = np.stack([np.pad(image[c], ((0, ph), (0, pw)), constant_values=DATASET_MEAN[c])
                          for c in range(3)])
        labels = np.pad(labels, ((0, ph), (0, pw)), constant_values=IGNORE_INDEX)
    h, w = labels.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    labels = labels[top:top + crop, left:left + crop]
    image = image[:, top:top + crop, left:left + crop]
    return SegmentationSample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(labels),
                              present_vector(labels, len(sample.present)))


@dataclass
class AugParams:
    flip: bool
    scale: float
    angle: float
    blur_sigma: float  # 0 means no blur


def draw_augmentation(cfg: TrainConfig, rng: np.random.Generator) -> AugParams:
    flip = bool(cfg.mirror and rng.random() < 0.5)
    scale = float(rng.uniform(*cfg.scale_range))
    angle = float(rng.uniform(*cfg.rotation_range))
    sigma = float(rng.uniform(0.0, 1.0)) if cfg.blur and rng.random() < 0.5 else 0.0
    return AugParams(flip, scale, angle, sigma)


def apply_augmentation(sample: SegmentationSample, params: AugParams) -> SegmentationSample:
    if params.flip:
        sample = hflip(sample)
    sample = warp(sample, params.scale, params.angle)
    if params.blur_sigma > 0:
        image = ndimage.gaussian_filter(sample.image, sigma=(0, params.blur_sigma, params.blur_sigma))
        sample = SegmentationSample(image.astype(np.float32), sample.labels, sample.present)
    return sample


def augment(sample: SegmentationSample, cfg: TrainConfig, rng: np.random.Generator,
            crop: bool = True) -> SegmentationSample:
    """Random mirror, scale + rotation, optional Gaussian blur, then crop/pad to ``cfg.crop_size``."""
    sample = apply_augmentation(sample, draw_augmentation(cfg, rng))
    if crop:
        sample = crop_or_pad(sample, cfg.crop_size, rng)
    return sample


# ----------------------------------------------------------------------------
# storage


def save_dataset(samples: List[SegmentationSample], directory) -> Path:
    """Write PNG images/labels plus ``manifest.json`` listing paths and present vectors."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name, lab_name = f"image_{i:05d}.png", f"label_{i:05d}.png"
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, "RGB").save(directory / img_name)
        Image.fromarray(s.labels.astype(np.uint8), "L").save(directory / lab_name)
        entries.append({"image": img_name, "label": lab_name, "present": s.present.astype(int).tolist()})
    manifest = {"num_classes": int(len(samples[0].present)) if samples else 0, "samples": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_dataset(directory, num_classes: Optional[int] = None) -> List[SegmentationSample]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    k = num_classes or manifest["num_classes"]
    out = []
    for e in manifest["samples"]:
        image = np.asarray(Image.open(directory / e["image"]).convert("RGB"), dtype=np.float32) / 255.0
        labels = np.asarray(Image.open(directory / e["label"]), dtype=np.int64)
        out.append(SegmentationSample(image.transpose(2, 0, 1).copy(), labels,
                                      np.asarray(e["present"], dtype=np.float32)))
    return out
