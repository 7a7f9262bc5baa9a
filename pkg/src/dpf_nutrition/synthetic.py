"""Synthetic plate scenes with analytic depth and nutrient labels.

Each scene is a plate seen from above carrying half-ellipsoid food blobs.
The depth map is the height of the food surface above the plate, and the
nutrient target is the sum over blobs of ``volume * class density``.  RGB
carries class color and footprint only, so blob height (and therefore
portion) is recoverable from depth alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    INGREDIENTS_FILE,
    TOTALS_FILE,
    DishRecord,
    IngredientRecord,
    NutrientVector,
    RGBDSample,
    serialize_metadata,
    write_depth_file,
    write_rgb_file,
    write_split,
)


def _per_volume(cal_per_g, fat, carb, protein, g_per_voxel):
    return NutrientVector(
        calories=cal_per_g * g_per_voxel,
        mass=g_per_voxel,
        fat=fat * g_per_voxel,
        carb=carb * g_per_voxel,
        protein=protein * g_per_voxel,
    )


# grain-like, meat-like and vegetable-like classes; units are per pixel^3
DEFAULT_DENSITIES = {
    0: _per_volume(1.3, 0.003, 0.28, 0.027, 0.20),
    1: _per_volume(2.5, 0.15, 0.0, 0.26, 0.25),
    2: _per_volume(0.3, 0.003, 0.06, 0.02, 0.15),
}

CLASS_COLORS = np.array(
    [
        [0.95, 0.93, 0.80],
        [0.62, 0.28, 0.20],
        [0.25, 0.62, 0.22],
        [0.90, 0.70, 0.15],
        [0.55, 0.35, 0.65],
        [0.85, 0.45, 0.10],
    ],
    dtype=np.float32,
)
PLATE_COLOR = np.array([0.80, 0.80, 0.84], dtype=np.float32)
TABLE_COLOR = np.array([0.22, 0.16, 0.12], dtype=np.float32)


@dataclass(frozen=True)
class Blob:
    """Half-ellipsoid with in-plane semi-axes (a, b) and height c, in pixels."""

    cx: float
    cy: float
    a: float
    b: float
    c: float
    cls: int

    @property
    def volume(self) -> float:
        return 2.0 / 3.0 * math.pi * self.a * self.b * self.c


@dataclass(frozen=True)
class SyntheticSceneSpec:
    seed: int
    n_blobs: int = 3
    blob_class_densities: dict = field(default_factory=lambda: dict(DEFAULT_DENSITIES))
    plate_radius: float = 28.0
    image_size: tuple[int, int] = (64, 80)
    radius_range: tuple[float, float] = (5.0, 10.0)
    height_range: tuple[float, float] = (2.0, 10.0)
    noise: float = 0.02
    # explicit geometry; when given, n_blobs is ignored and nothing is sampled
    blobs: tuple[Blob, ...] | None = None

    def __post_init__(self):
        if self.blobs is None and self.n_blobs < 1:
            raise ValueError("n_blobs must be >= 1")
        if not self.blob_class_densities:
            raise ValueError("at least one blob class is required")
        for cls, dens in self.blob_class_densities.items():
            if not isinstance(dens, NutrientVector):
                raise TypeError(f"density for class {cls} must be a NutrientVector")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blob_class_densities"] = {
            str(k): asdict(v) for k, v in self.blob_class_densities.items()
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["blob_class_densities"] = {
            int(k): NutrientVector(**v) for k, v in d["blob_class_densities"].items()
        }
        for key in ("image_size", "radius_range", "height_range"):
            d[key] = tuple(d[key])
        if d.get("blobs") is not None:
            d["blobs"] = tuple(Blob(**b) for b in d["blobs"])
        return cls(**d)


def _footprint(blob: Blob, shape) -> int:
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]] + 0.5
    return int(np.count_nonzero(((xx - blob.cx) / blob.a) ** 2 + ((yy - blob.cy) / blob.b) ** 2 < 1))


def sample_blobs(spec: SyntheticSceneSpec) -> tuple[Blob, ...]:
    """Draw non-overlapping blobs inside the plate, deterministic in ``spec.seed``."""
    if spec.blobs is not None:
        return tuple(spec.blobs)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    cy0, cx0 = h / 2, w / 2
    classes = sorted(spec.blob_class_densities)
    for _ in range(1000):
        blobs: list[Blob] = []
        for _ in range(spec.n_blobs):
            for _ in range(200):
                a, b = rng.uniform(*spec.radius_range, size=2)
                c = rng.uniform(*spec.height_range)
                cls = int(classes[rng.integers(len(classes))])
                reach = spec.plate_radius - max(a, b)
                if reach < 0:
                    continue
                rho = reach * math.sqrt(rng.random())
                theta = rng.uniform(0, 2 * math.pi)
                cand = Blob(cx0 + rho * math.cos(theta), cy0 + rho * math.sin(theta), a, b, c, cls)
                clear = all(
                    math.hypot(cand.cx - o.cx, cand.cy - o.cy) >= max(a, b) + max(o.a, o.b) + 1
                    for o in blobs
                )
                # a blob too thin to cover any pixel center is redrawn
                if clear and _footprint(cand, spec.image_size) > 0:
                    blobs.append(cand)
                    break
            else:
                break
        if len(blobs) == spec.n_blobs:
            return tuple(blobs)
    raise RuntimeError("could not place blobs; plate too small for the requested count")


def heightfield(blobs, image_size) -> np.ndarray:
    """Analytic height of the food surface above the plate at pixel centers."""
    h, w = image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    out = np.zeros((h, w))
    for blob in blobs:
        q = 1.0 - ((xx - blob.cx) / blob.a) ** 2 - ((yy - blob.cy) / blob.b) ** 2
        out = np.maximum(out, blob.c * np.sqrt(np.clip(q, 0, None)))
    return out


def scene_target(blobs, densities) -> NutrientVector:
    total = np.zeros(5)
    for blob in blobs:
        total += blob.volume * densities[blob.cls].as_array()
    return NutrientVector.from_array(total)


def render_rgb(spec: SyntheticSceneSpec, blobs) -> np.ndarray:
    h, w = spec.image_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    rgb = np.broadcast_to(TABLE_COLOR, (h, w, 3)).copy()
    plate = np.hypot(xx - w / 2, yy - h / 2) <= spec.plate_radius
    rgb[plate] = PLATE_COLOR
    for blob in blobs:
        inside = ((xx - blob.cx) / blob.a) ** 2 + ((yy - blob.cy) / blob.b) ** 2 < 1
        rgb[inside] = CLASS_COLORS[blob.cls % len(CLASS_COLORS)]
    if spec.noise > 0:
        noise_rng = np.random.default_rng([spec.seed, 1])
        rgb = rgb + noise_rng.normal(0, spec.noise, rgb.shape)
    return np.clip(rgb, 0, 1).astype(np.float32)


def generate_synthetic(spec: SyntheticSceneSpec, dish_id: str | None = None) -> RGBDSample:
    blobs = sample_blobs(spec)
    return RGBDSample(
        dish_id=dish_id or f"synth_{spec.seed}",
        rgb=render_rgb(spec, blobs),
        depth=heightfield(blobs, spec.image_size).astype(np.float32),
        target=scene_target(blobs, spec.blob_class_densities),
        scene=spec,
    )


def synthetic_specs(n: int, seed: int, blob_range=(1, 3), **kwargs) -> list[SyntheticSceneSpec]:
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    counts = rng.integers(blob_range[0], blob_range[1] + 1, size=n)
    return [SyntheticSceneSpec(seed=int(s), n_blobs=int(k), **kwargs) for s, k in zip(seeds, counts)]


def synthetic_dataset(n: int, seed: int = 0, blob_range=(1, 3), **kwargs) -> list[RGBDSample]:
    """``n`` independent scenes with ids ``synth<seed>_<index>``."""
    return [
        generate_synthetic(spec, dish_id=f"synth{seed}_{i:04d}")
        for i, spec in enumerate(synthetic_specs(n, seed, blob_range, **kwargs))
    ]


SCENES_FILE = "scenes.json"


def write_synthetic_dataset(samples, root, split=None) -> list:
    """Write samples in the canonical directory layout plus ``scenes.json``.

    Each blob becomes one ingredient row, so ingredient sums equal the totals.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records, scenes, written = [], {}, []
    for s in samples:
        spec = s.scene
        blobs = sample_blobs(spec)
        ingredients = tuple(
            IngredientRecord(f"class{b.cls}", spec.blob_class_densities[b.cls].scaled(b.volume))
            for b in blobs
        )
        records.append(DishRecord(s.dish_id, s.target, ingredients))
        scenes[s.dish_id] = spec.to_dict()
        folder = root / s.dish_id
        folder.mkdir(exist_ok=True)
        write_rgb_file(folder / "rgb.png", s.rgb)
        write_depth_file(folder / "depth.raw", s.depth)
        written += [folder / "rgb.png", folder / "depth.raw"]
    totals, ingredients = serialize_metadata(records)
    (root / TOTALS_FILE).write_bytes(totals)
    (root / INGREDIENTS_FILE).write_bytes(ingredients)
    (root / SCENES_FILE).write_text(json.dumps(scenes), encoding="utf-8")
    written += [root / TOTALS_FILE, root / INGREDIENTS_FILE, root / SCENES_FILE]
    if split is not None:
        write_split(split, root)
        written += [root / "train_ids.txt", root / "test_ids.txt"]
    return written


def read_scenes(root) -> dict:
    path = Path(root) / SCENES_FILE
    if not path.exists():
        return {}
    return {k: SyntheticSceneSpec.from_dict(v) for k, v in json.loads(path.read_text()).items()}
