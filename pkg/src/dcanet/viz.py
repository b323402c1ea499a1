"""PNG export of attention masks and predicted label maps."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .dca import resize


def mask_to_uint8(mask: np.ndarray, size: Optional[tuple] = None) -> np.ndarray:
    """Channel-average a ``[C, h, w]`` mask and map [0, 1] linearly onto [0, 255]."""
    plane = torch.as_tensor(np.asarray(mask, dtype=np.float32)).mean(dim=0, keepdim=True)[None]
    if size is not None:
        plane = resize(plane, tuple(size))
    plane = plane[0, 0].numpy()
    return np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_masks(masks: Sequence, structure: str, out_dir, size: Optional[tuple] = None,
                 per_channel: bool = False) -> list:
    """Write ``mask_<structure>_<index>.png`` (1-based, structure order) for one image.

    ``masks`` holds one ``[C, h, w]`` array per DCA module. With
    ``per_channel`` every channel is also written as
    ``mask_<structure>_<index>_c<channel>.png``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(masks, start=1):
        m = np.asarray(m)
        p = out_dir / f"mask_{structure}_{i}.png"
        Image.fromarray(mask_to_uint8(m, size), "L").save(p)
        paths.append(p)
        if per_channel:
            for c in range(m.shape[0]):
                Image.fromarray(mask_to_uint8(m[c:c + 1], size), "L").save(out_dir / f"mask_{structure}_{i}_c{c}.png")
    return paths


def _palette(k: int = 256) -> list:
    rng = np.random.default_rng(12345)
    colors = rng.integers(0, 256, size=(k, 3))
    colors[0] = 0
    colors[255] = 255
    return colors.astype(np.uint8).ravel().tolist()


def save_label_map(labels: np.ndarray, path) -> Path:
    """Save an ``[H, W]`` label map as a palette-indexed PNG (pixel value = class id)."""
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), "P")
    img.putpalette(_palette())
    img.save(path)
    return Path(path)
