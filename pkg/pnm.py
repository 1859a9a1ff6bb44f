"""Binary portable pixmap (P6, RGB images) and graymap (P5, label maps) IO."""

import logging
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

import numerics
from errors import FormatError, ShapeMismatch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _open(path: PathLike, mode: str, kind: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != 'PPM' or im.mode != mode:
                raise FormatError(f"{path}: expected a binary 8-bit {kind} file, got {im.format} {im.mode}")
            return np.array(im)
    except (UnidentifiedImageError, OSError) as e:
        raise FormatError(f"{path}: cannot read {kind} file ({e})") from e


def read_ppm(path: PathLike) -> torch.Tensor:
    """P6 file -> [H, W, 3] float64 in [0, 1]."""
    pixels = _open(path, 'RGB', 'P6')
    return numerics.as_tensor(pixels.astype(np.float64) / 255.0)


def write_ppm(path: PathLike, img: torch.Tensor):
    """[H, W, 3] values in [0, 1], quantized to the nearest byte."""
    if img.dim() != 3 or img.shape[2] != 3:
        raise ShapeMismatch(f"P6 needs an HxWx3 image, got {tuple(img.shape)}")
    pixels = np.clip(np.rint(img.detach().numpy() * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, 'RGB').save(path, format='PPM')


def read_pgm(path: PathLike) -> torch.Tensor:
    """P5 file -> [H, W] long label map."""
    return torch.from_numpy(_open(path, 'L', 'P5').astype(np.int64))


def write_pgm(path: PathLike, labels: torch.Tensor):
    """One byte per pixel, the class index."""
    if labels.dim() != 2:
        raise ShapeMismatch(f"P5 needs an HxW label map, got {tuple(labels.shape)}")
    values = labels.detach().numpy()
    if values.size and (values.min() < 0 or values.max() > 255):
        raise FormatError(f"Label values outside [0, 255] cannot be stored in {path}")
    Image.fromarray(values.astype(np.uint8), 'L').save(path, format='PPM')
