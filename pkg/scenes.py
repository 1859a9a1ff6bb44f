"""
Synthetic aerial scenes.

Each scene is a background class with one geometric region per remaining
class (axis-aligned rectangles, rotated rectangles, discs), painted in
well-separated base colours with seeded texture noise. Rotated shapes make
the toy backbone with positional embeddings orientation sensitive.
"""

import colorsys
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import torch

import numerics
from config import read_utf8
from errors import ConfigError
from numerics import RandomStream
from pnm import write_pgm, write_ppm
from scl import SynonymLibrary, parse_synonyms, write_synonyms

logger = logging.getLogger(__name__)

SHAPES = ('rectangle', 'rotated_rectangle', 'disc')

CATEGORY_POOL = (
    'background',
    'building',
    'road',
    'water',
    'tree',
    'large vehicle',
    'low vegetation',
    'bare soil',
    'agriculture',
    'rangeland',
)

BUILTIN_SYNONYMS = """\
background: clutter, unlabeled area, miscellaneous ground, other land, void
building: house, roof, rooftop, residential building, industrial building
road: street, highway, paved road, lane, pavement
water: river, lake, pond, sea, reservoir
tree: forest, woodland, tree canopy, grove, vegetation cover
large vehicle: truck, lorry, bus, heavy vehicle, transport vehicle
low vegetation: grass, lawn, shrub, meadow, bush
bare soil: dirt, barren land, sand, exposed earth, bare ground
agriculture: farmland, cropland, field, plantation, cultivated land
rangeland: grassland, pasture, prairie, steppe, savanna
"""


def builtin_library() -> SynonymLibrary:
    return parse_synonyms(BUILTIN_SYNONYMS, CATEGORY_POOL)


@dataclass
class Region:
    """A shape in pixel coordinates; pixel (i, j) is sampled at its centre."""
    shape: str
    label: int
    cy: float
    cx: float
    half_h: float
    half_w: float
    angle: float = 0.0

    def area(self) -> float:
        if self.shape == 'disc':
            return math.pi * self.half_h ** 2
        return 4.0 * self.half_h * self.half_w

    def perimeter(self) -> float:
        if self.shape == 'disc':
            return 2.0 * math.pi * self.half_h
        return 4.0 * (self.half_h + self.half_w)

    def mask(self, H: int, W: int) -> torch.Tensor:
        ys = torch.arange(H, dtype=numerics.DTYPE).unsqueeze(1) + 0.5 - self.cy
        xs = torch.arange(W, dtype=numerics.DTYPE).unsqueeze(0) + 0.5 - self.cx
        if self.shape == 'disc':
            return ys ** 2 + xs ** 2 <= self.half_h ** 2
        cos, sin = math.cos(self.angle), math.sin(self.angle)
        u = xs * cos + ys * sin
        v = -xs * sin + ys * cos
        return (u.abs() <= self.half_w) & (v.abs() <= self.half_h)


@dataclass
class SyntheticScene:
    image: torch.Tensor
    gt: torch.Tensor
    J: int
    seed: int
    categories: List[str]
    regions: List[Region] = field(default_factory=list)


def class_colors(J: int, rng: RandomStream) -> torch.Tensor:
    """J RGB colours evenly spaced on the hue wheel from a seeded offset."""
    offset = rng.random()
    colors = []
    for j in range(J):
        hue = (offset + j / J) % 1.0
        value = 0.55 + 0.35 * (j % 2)
        colors.append(colorsys.hsv_to_rgb(hue, 0.75, value))
    return torch.tensor(colors, dtype=numerics.DTYPE)


def _random_region(rng: RandomStream, label: int, H: int, W: int, shape: str) -> Region:
    short = min(H, W)
    cy = H * (0.3 + 0.4 * rng.random())
    cx = W * (0.3 + 0.4 * rng.random())
    if shape == 'disc':
        radius = short * (0.08 + 0.12 * rng.random())
        return Region(shape, label, cy, cx, radius, radius)
    half_h = short * (0.06 + 0.14 * rng.random())
    half_w = short * (0.06 + 0.14 * rng.random())
    angle = rng.random() * math.pi if shape == 'rotated_rectangle' else 0.0
    return Region(shape, label, cy, cx, half_h, half_w, angle)


def gen_scene(seed: int, H: int = 224, W: int = 224, J: int = 4, texture_noise: float = 0.05,
              shapes: Optional[Sequence[str]] = None, min_size: int = 224) -> SyntheticScene:
    """
    Generate one scene.

    Args:
        seed: scene seed; the same (seed, params) gives the same scene
        H, W: image size (both >= min_size)
        J: class count, background included
        texture_noise: amplitude of the additive Gaussian texture
        shapes: shape per foreground class; seeded choice when omitted

    Returns:
        SyntheticScene with an image quantized to 8 bits and its exact gt
    """
    if J < 2:
        raise ConfigError(f"A scene needs at least 2 classes, got {J}")
    if J > len(CATEGORY_POOL):
        raise ConfigError(f"At most {len(CATEGORY_POOL)} classes are available, got {J}")
    if H < min_size or W < min_size:
        raise ConfigError(f"Scene size {H}x{W} below {min_size}")
    if texture_noise < 0:
        raise ConfigError(f"texture_noise must be >= 0, got {texture_noise}")
    if shapes is not None and len(shapes) != J - 1:
        raise ConfigError(f"{J - 1} shapes needed, got {len(shapes)}")

    rng = numerics.seeded_rng(seed)
    layout = rng.child('layout')
    colors = class_colors(J, rng.child('colors'))

    regions = []
    for label in range(1, J):
        shape = shapes[label - 1] if shapes is not None else SHAPES[layout.integers(0, len(SHAPES))]
        if shape not in SHAPES:
            raise ConfigError(f"Unknown shape '{shape}'")
        regions.append(_random_region(layout, label, H, W, shape))

    gt = torch.zeros((H, W), dtype=torch.long)
    for region in regions:
        gt[region.mask(H, W)] = region.label

    image = colors[gt]
    if texture_noise > 0:
        image = image + texture_noise * rng.child('texture').normal((H, W, 3))
    image = torch.round(image.clamp(0.0, 1.0) * 255.0) / 255.0

    return SyntheticScene(image, gt, J, seed, list(CATEGORY_POOL[:J]), regions)


def scene_seed(base_seed: int, index: int) -> int:
    """Seed of scene `index` in a suite seeded with `base_seed`."""
    return numerics.seeded_rng(base_seed).child('scene').child(index).integers(0, 2 ** 31 - 1)


def save_scenes(scenes: Sequence[SyntheticScene], out_dir: Union[str, Path]) -> Path:
    """
    Write scene_XXXX.ppm, scene_XXXX_gt.pgm, categories.txt, synonyms.txt
    and manifest.csv into out_dir.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, scene in enumerate(scenes):
        stem = f"scene_{index:04d}"
        write_ppm(out / f"{stem}.ppm", scene.image)
        write_pgm(out / f"{stem}_gt.pgm", scene.gt)
        rows.append([stem, scene.seed, scene.image.shape[0], scene.image.shape[1], scene.J])

    J = max((s.J for s in scenes), default=2)
    (out / 'categories.txt').write_text('\n'.join(CATEGORY_POOL[:J]) + '\n', encoding='utf-8')
    write_synonyms(builtin_library(), out / 'synonyms.txt')
    with open(out / 'manifest.csv', 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh, lineterminator='\n')
        writer.writerow(['scene_id', 'seed', 'height', 'width', 'classes'])
        writer.writerows(rows)
    logger.info(f"Wrote {len(scenes)} scenes to {out}")
    return out


def load_categories(path: Union[str, Path]) -> List[str]:
    """One category per line; blank lines and `#` comments skipped."""
    names = []
    for raw in read_utf8(path).splitlines():
        line = raw.split('#', 1)[0].strip()
        if line:
            names.append(line)
    if not names:
        raise ConfigError(f"No categories in {path}")
    return names
