"""Dish metadata, RGB-D samples, splits and augmentation.

The on-disk layout is::

    <root>/dish_totals.csv          dish_id,calories,mass,fat,carb,protein
    <root>/dish_ingredients.csv     dish_id,name,calories,mass,fat,carb,protein
    <root>/train_ids.txt            one dish id per line (optional)
    <root>/test_ids.txt
    <root>/<dish_id>/rgb.png
    <root>/<dish_id>/depth.png      16-bit, or depth.raw (float32, H*W, little endian)
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import (
    AugmentationError,
    DuplicateDishError,
    MetadataParseError,
    NutrientValueError,
    SplitError,
)

NUTRIENTS = ("calories", "mass", "fat", "carb", "protein")
UNITS = {"calories": "kcal", "mass": "g", "fat": "g", "carb": "g", "protein": "g"}

TOTALS_HEADER = ("dish_id",) + NUTRIENTS
INGREDIENTS_HEADER = ("dish_id", "name") + NUTRIENTS
TOTALS_FILE = "dish_totals.csv"
INGREDIENTS_FILE = "dish_ingredients.csv"
TRAIN_IDS_FILE = "train_ids.txt"
TEST_IDS_FILE = "test_ids.txt"


@dataclass(frozen=True)
class NutrientVector:
    """Calories (kcal) and mass, fat, carb, protein (g)."""

    calories: float = 0.0
    mass: float = 0.0
    fat: float = 0.0
    carb: float = 0.0
    protein: float = 0.0

    def __post_init__(self):
        for name in NUTRIENTS:
            value = getattr(self, name)
            try:
                value = float(value)
            except (TypeError, ValueError):
                raise NutrientValueError(name, value) from None
            if not math.isfinite(value) or value < 0:
                raise NutrientValueError(name, value)
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in NUTRIENTS], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "NutrientVector":
        values = [float(v) for v in values]
        if len(values) != len(NUTRIENTS):
            raise ValueError(f"expected {len(NUTRIENTS)} values, got {len(values)}")
        return cls(*values)

    def __add__(self, other: "NutrientVector") -> "NutrientVector":
        return NutrientVector.from_array(self.as_array() + other.as_array())

    def scaled(self, k: float) -> "NutrientVector":
        return NutrientVector.from_array(self.as_array() * k)


@dataclass(frozen=True)
class IngredientRecord:
    name: str
    nutrients: NutrientVector


@dataclass(frozen=True)
class DishRecord:
    dish_id: str
    totals: NutrientVector
    ingredients: tuple[IngredientRecord, ...] = ()

    def __post_init__(self):
        if not self.dish_id:
            raise ValueError("dish_id must be non-empty")
        object.__setattr__(self, "ingredients", tuple(self.ingredients))

    def ingredient_sum(self) -> NutrientVector:
        total = NutrientVector()
        for ing in self.ingredients:
            total = total + ing.nutrients
        return total


@dataclass
class RGBDSample:
    """A model-ready pair. ``rgb`` is H x W x 3 in [0, 1], ``depth`` H x W or None.

    ``scene`` is set for synthetic samples so the analytic depth can be recomputed.
    """

    dish_id: str
    rgb: np.ndarray
    depth: np.ndarray | None
    target: NutrientVector
    scene: object | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("rgb contains non-finite values")
        if self.depth is not None:
            self.depth = np.asarray(self.depth, dtype=np.float32)
            if self.depth.shape != self.rgb.shape[:2]:
                raise ValueError(
                    f"depth shape {self.depth.shape} != rgb shape {self.rgb.shape[:2]}"
                )
            if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
                raise ValueError("depth must be finite and non-negative")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[0], self.rgb.shape[1]


@dataclass(frozen=True)
class SplitManifest:
    train_ids: frozenset[str]
    test_ids: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "train_ids", frozenset(self.train_ids))
        object.__setattr__(self, "test_ids", frozenset(self.test_ids))
        if not self.train_ids or not self.test_ids:
            raise SplitError("train and test sets must both be non-empty")
        overlap = self.train_ids & self.test_ids
        if overlap:
            raise SplitError(f"{len(overlap)} ids appear in both train and test")


@dataclass
class ValidationReport:
    """Non-fatal findings accumulated while parsing metadata."""

    # dish_id -> per-nutrient |sum(ingredients) - totals|
    sum_mismatch: dict[str, dict[str, float]] = field(default_factory=dict)
    # ingredient rows whose dish_id has no totals row
    missing_ids: list[str] = field(default_factory=list)
    tolerance: float = 1e-6

    @property
    def warnings(self) -> list[str]:
        out = [
            f"{dish}: ingredient sum differs from totals "
            + ", ".join(f"{k}={v:g}" for k, v in diffs.items() if v > self.tolerance)
            for dish, diffs in self.sum_mismatch.items()
            if any(v > self.tolerance for v in diffs.values())
        ]
        out += [f"ingredient rows for unknown dish {d}" for d in self.missing_ids]
        return out


# --------------------------------------------------------------------------
# metadata


def _text_stream(stream) -> IO[str]:
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if isinstance(stream, io.TextIOBase):
        return stream
    return io.TextIOWrapper(stream, encoding="utf-8", newline="")


def _nutrients_from_row(row: dict, line: int) -> NutrientVector:
    values = {}
    for name in NUTRIENTS:
        raw = row.get(name)
        if raw is None or raw.strip() == "":
            raise MetadataParseError(f"missing value for '{name}'", line)
        try:
            value = float(raw)
        except ValueError:
            raise MetadataParseError(f"non-numeric value {raw!r} for '{name}'", line) from None
        if not math.isfinite(value) or value < 0:
            raise NutrientValueError(name, raw, line)
        values[name] = value
    return NutrientVector(**values)


def _read_rows(stream, header: Sequence[str]):
    reader = csv.reader(_text_stream(stream))
    try:
        first = next(reader)
    except StopIteration:
        return
    if tuple(h.strip() for h in first) != tuple(header):
        raise MetadataParseError(f"expected header {','.join(header)}", 1)
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise MetadataParseError(f"expected {len(header)} columns, got {len(row)}", line)
        yield line, dict(zip(header, (c.strip() for c in row)))


def parse_metadata(totals_file, ingredients_file=None, report: ValidationReport | None = None) -> list[DishRecord]:
    """Parse the canonical totals / ingredients CSV pair into dish records.

    Sum mismatches and ingredient rows for unknown dishes go into ``report``
    rather than raising, since upstream values are rounded.
    """
    if report is None:
        report = ValidationReport()
    order: list[str] = []
    totals: dict[str, NutrientVector] = {}
    for line, row in _read_rows(totals_file, TOTALS_HEADER):
        dish_id = row["dish_id"]
        if not dish_id:
            raise MetadataParseError("empty dish_id", line)
        if dish_id in totals:
            raise DuplicateDishError(f"duplicate dish_id {dish_id!r}", line)
        totals[dish_id] = _nutrients_from_row(row, line)
        order.append(dish_id)

    ingredients: dict[str, list[IngredientRecord]] = {}
    if ingredients_file is not None:
        for line, row in _read_rows(ingredients_file, INGREDIENTS_HEADER):
            dish_id = row["dish_id"]
            ing = IngredientRecord(row["name"], _nutrients_from_row(row, line))
            if dish_id not in totals:
                if dish_id not in report.missing_ids:
                    report.missing_ids.append(dish_id)
                continue
            ingredients.setdefault(dish_id, []).append(ing)

    records = []
    for dish_id in order:
        rec = DishRecord(dish_id, totals[dish_id], tuple(ingredients.get(dish_id, ())))
        if rec.ingredients:
            diff = np.abs(rec.ingredient_sum().as_array() - rec.totals.as_array())
            report.sum_mismatch[dish_id] = dict(zip(NUTRIENTS, diff.tolist()))
        records.append(rec)
    return records


def serialize_metadata(records: Iterable[DishRecord]) -> tuple[bytes, bytes]:
    """Inverse of :func:`parse_metadata`: returns (totals_csv, ingredients_csv)."""
    tot, ing = io.StringIO(), io.StringIO()
    tw = csv.writer(tot, lineterminator="\n")
    iw = csv.writer(ing, lineterminator="\n")
    tw.writerow(TOTALS_HEADER)
    iw.writerow(INGREDIENTS_HEADER)
    for rec in records:
        tw.writerow([rec.dish_id] + [repr(v) for v in rec.totals.as_array().tolist()])
        for item in rec.ingredients:
            iw.writerow([rec.dish_id, item.name] + [repr(v) for v in item.nutrients.as_array().tolist()])
    return tot.getvalue().encode("utf-8"), ing.getvalue().encode("utf-8")


def import_nutrition5k(stream) -> list[DishRecord]:
    """Map an upstream Nutrition5k ``dish_metadata_cafe*.csv`` onto dish records.

    Upstream rows have no header: ``dish_id, total_calories, total_mass,
    total_fat, total_carb, total_protein`` followed by repeated
    ``ingr_id, ingr_name, grams, calories, fat, carb, protein`` groups.
    """
    records = []
    seen = set()
    for line, row in enumerate(csv.reader(_text_stream(stream)), start=1):
        if not row:
            continue
        if len(row) < 6 or (len(row) - 6) % 7:
            raise MetadataParseError(f"unexpected column count {len(row)}", line)
        dish_id = row[0].strip()
        if dish_id in seen:
            raise DuplicateDishError(f"duplicate dish_id {dish_id!r}", line)
        seen.add(dish_id)
        totals = _nutrients_from_row(dict(zip(NUTRIENTS, row[1:6])), line)
        ingredients = []
        for k in range(6, len(row), 7):
            _, name, grams, cal, fat, carb, prot = (c.strip() for c in row[k:k + 7])
            vals = dict(calories=cal, mass=grams, fat=fat, carb=carb, protein=prot)
            ingredients.append(IngredientRecord(name, _nutrients_from_row(vals, line)))
        records.append(DishRecord(dish_id, totals, tuple(ingredients)))
    return records


# --------------------------------------------------------------------------
# splits


def read_id_file(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def write_split(split: SplitManifest, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ids in ((TRAIN_IDS_FILE, split.train_ids), (TEST_IDS_FILE, split.test_ids)):
        (directory / name).write_text("".join(f"{i}\n" for i in sorted(ids)), encoding="utf-8")


def build_split(dish_ids: Sequence[str], ratio=(5, 1), seed: int = 0, manifest_files=None) -> SplitManifest:
    """Split ids into train/test.

    ``manifest_files`` is a (train_path, test_path) pair or a directory holding
    ``train_ids.txt`` / ``test_ids.txt``; when given it wins over the random split.
    """
    dish_ids = list(dish_ids)
    if len(set(dish_ids)) != len(dish_ids):
        raise SplitError("dish ids must be unique")
    if manifest_files is not None:
        if isinstance(manifest_files, (str, os.PathLike)):
            manifest_files = (Path(manifest_files) / TRAIN_IDS_FILE, Path(manifest_files) / TEST_IDS_FILE)
        train_ids, test_ids = (read_id_file(p) for p in manifest_files)
        known = set(dish_ids)
        unknown = [i for i in train_ids + test_ids if i not in known]
        if unknown:
            raise SplitError(f"manifest references unknown dish ids: {unknown[:5]}")
        return SplitManifest(frozenset(train_ids), frozenset(test_ids))

    a, b = ratio
    if a <= 0 or b <= 0:
        raise SplitError(f"ratio parts must be positive, got {ratio}")
    if len(dish_ids) < 2:
        raise SplitError("need at least 2 dish ids to split")
    n = len(dish_ids)
    n_train = min(max(round(n * a / (a + b)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    ids = sorted(dish_ids)
    train = frozenset(ids[i] for i in order[:n_train])
    test = frozenset(ids[i] for i in order[n_train:])
    return SplitManifest(train, test)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    resize_to: tuple[int, int] | None = (336, 448)
    crop_to: tuple[int, int] | None = (336, 448)
    flip_prob: float = 0.5


def _resize(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if arr.shape[:2] == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t[None, None] if t.ndim == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0]
    out = out[0] if arr.ndim == 2 else out.permute(1, 2, 0)
    return out.numpy()


def _center_crop(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[:2]
    th, tw = size
    top, left = (h - th) // 2, (w - tw) // 2
    return arr[top:top + th, left:left + tw]


def hflip(sample: RGBDSample) -> RGBDSample:
    return replace(
        sample,
        rgb=sample.rgb[:, ::-1].copy(),
        depth=None if sample.depth is None else sample.depth[:, ::-1].copy(),
    )


def augment(sample: RGBDSample, config: AugmentConfig, rng: np.random.Generator) -> RGBDSample:
    """Resize, center crop and random horizontal flip, applied identically to depth."""
    rgb, depth = sample.rgb, sample.depth
    if config.resize_to is not None:
        rgb = _resize(rgb, config.resize_to)
        depth = None if depth is None else _resize(depth, config.resize_to)
    if config.crop_to is not None:
        h, w = rgb.shape[:2]
        if h < config.crop_to[0] or w < config.crop_to[1]:
            raise AugmentationError(f"image {h}x{w} smaller than crop {config.crop_to}")
        rgb = _center_crop(rgb, config.crop_to)
        depth = None if depth is None else _center_crop(depth, config.crop_to)
    if depth is not None:
        # bilinear resampling can undershoot by rounding only
        depth = np.maximum(depth, 0)
    out = replace(sample, rgb=np.clip(rgb, 0, 1), depth=depth)
    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        out = hflip(out)
    return out


# --------------------------------------------------------------------------
# image io


def read_depth_file(path, shape: tuple[int, int] | None = None, scale: float = 1.0) -> np.ndarray:
    """Read a 16-bit PNG or a raw float32 grid (needs ``shape``)."""
    path = Path(path)
    if path.suffix == ".raw":
        data = np.fromfile(path, dtype="<f4")
        if shape is None:
            raise ValueError("shape is required for raw depth files")
        if data.size != shape[0] * shape[1]:
            raise IOError(f"{path}: expected {shape[0] * shape[1]} values, found {data.size}")
        return data.reshape(shape).astype(np.float32) * scale
    with Image.open(path) as im:
        arr = np.asarray(im).astype(np.float32)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr * scale


def write_depth_file(path, depth: np.ndarray, scale: float = 1.0) -> None:
    path = Path(path)
    if path.suffix == ".raw":
        np.ascontiguousarray(depth, dtype="<f4").tofile(path)
        return
    q = np.clip(np.round(np.asarray(depth) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_rgb_file(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(path)


def read_rgb_file(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_sample(record: DishRecord, image_root, depth_policy: str = "sensor", depth_scale: float = 1.0) -> RGBDSample:
    if depth_policy not in ("sensor", "none"):
        raise ValueError(f"unknown depth policy {depth_policy!r}")
    folder = Path(image_root) / record.dish_id
    rgb_path = folder / "rgb.png"
    if not rgb_path.exists():
        raise LookupError(f"missing rgb image: {rgb_path}")
    try:
        rgb = read_rgb_file(rgb_path)
    except (OSError, ValueError) as exc:
        raise IOError(f"unreadable image {rgb_path}: {exc}") from exc
    depth = None
    if depth_policy == "sensor":
        for name in ("depth.png", "depth.raw"):
            if (folder / name).exists():
                depth = read_depth_file(folder / name, rgb.shape[:2], depth_scale)
                break
        else:
            raise LookupError(f"missing depth file: {folder / 'depth.png'} (or depth.raw)")
    return RGBDSample(record.dish_id, rgb, depth, record.totals)


def load_samples(records: Sequence[DishRecord], image_root, depth_policy="sensor", depth_scale=1.0, workers: int = 1) -> list[RGBDSample]:
    def load(rec):
        return load_sample(rec, image_root, depth_policy, depth_scale)

    if workers <= 1:
        return [load(r) for r in records]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(load, records))

