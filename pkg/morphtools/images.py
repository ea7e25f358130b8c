"""PNG images and morph pair lists."""
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from PIL import Image, UnidentifiedImageError

from morphtools.errors import DataError

PAIR_COLUMNS = ["morph_id", "subject1_image", "subject2_image"]


def load_image(path, side=None):
    """8-bit PNG as a float64 array of shape 3×h×w in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if side is not None and rgb.size != (side, side):
                raise DataError(f"{path}: image is {rgb.size[0]}×{rgb.size[1]}, expected {side}×{side}")
            pixels = np.asarray(rgb, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return pixels.transpose(2, 0, 1) / 255.0


def save_image(image, path):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3×h×w image, got {image.shape}")
    pixels = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(pixels).save(path, format="PNG")
    return Path(path)


def read_pairs(path):
    """Pair list with image paths resolved relative to the CSV."""
    path = Path(path)
    try:
        pairs = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read pair list {path}: {exc}") from exc
    missing = [c for c in PAIR_COLUMNS if c not in pairs.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if pairs.empty:
        raise DataError(f"{path}: no morph pairs")
    pairs = pairs[PAIR_COLUMNS].apply(lambda col: col.str.strip())
    if pairs["morph_id"].eq("").any():
        raise DataError(f"{path}: empty morph_id")
    duplicated = pairs["morph_id"][pairs["morph_id"].duplicated()].tolist()
    if duplicated:
        raise DataError(f"{path}: duplicate morph ids {duplicated}")
    for column in ("subject1_image", "subject2_image"):
        pairs[column] = [str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                         for p in pairs[column]]
    logger.info("read {} morph pairs from {}", len(pairs), path)
    return pairs.reset_index(drop=True)
