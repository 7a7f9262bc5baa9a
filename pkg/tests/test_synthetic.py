import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpf_nutrition.dataset import NutrientVector
from dpf_nutrition.synthetic import (
    Blob,
    SyntheticSceneSpec,
    generate_synthetic,
    heightfield,
    read_scenes,
    sample_blobs,
    synthetic_dataset,
    write_synthetic_dataset,
)

UNIT = NutrientVector(1.0, 1.0, 1.0, 1.0, 1.0)


def _hemisphere_spec(r, density=UNIT, size=(64, 64)):
    blob = Blob(size[1] / 2, size[0] / 2, r, r, r, 0)
    return SyntheticSceneSpec(seed=0, blob_class_densities={0: density}, image_size=size, blobs=(blob,))


@pytest.mark.parametrize("r", [6.0, 10.0, 20.0])
def test_hemisphere_target_matches_closed_form_and_voxel_sum(r):
    d = NutrientVector(2.0, 0.5, 0.1, 0.3, 0.05)
    sample = generate_synthetic(_hemisphere_spec(r, d))
    closed = 2 / 3 * math.pi * r**3
    np.testing.assert_allclose(sample.target.as_array(), closed * d.as_array(), rtol=1e-12)
    # independent route: integrate the rendered heightfield one pixel column at a time
    voxel = float(np.sum(sample.depth, dtype=np.float64))
    assert abs(voxel - closed) / closed < 0.02


def test_zero_density_class_gives_zero_target():
    spec = SyntheticSceneSpec(seed=4, n_blobs=1, blob_class_densities={0: NutrientVector()})
    assert generate_synthetic(spec).target == NutrientVector()


def test_zero_blobs_rejected():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(seed=0, n_blobs=0)


def test_same_spec_is_bit_identical():
    spec = SyntheticSceneSpec(seed=11, n_blobs=3)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth) and a.target == b.target


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_doubling_volume_doubles_target(seed, n):
    spec = SyntheticSceneSpec(seed=seed, n_blobs=n, height_range=(2, 5))
    blobs = sample_blobs(spec)
    base = generate_synthetic(replace(spec, blobs=blobs))
    doubled = generate_synthetic(replace(spec, blobs=tuple(replace(b, c=2 * b.c) for b in blobs)))
    np.testing.assert_allclose(doubled.target.as_array(), 2 * base.target.as_array(), rtol=1e-12)
    # the heightfield integral doubles too, so depth alone carries the portion size
    assert abs(doubled.depth.sum() / base.depth.sum() - 2) < 0.01


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_blobs_are_disjoint_and_visible(seed, n):
    spec = SyntheticSceneSpec(seed=seed, n_blobs=n)
    blobs = sample_blobs(spec)
    assert len(blobs) == n
    for i, p in enumerate(blobs):
        assert heightfield([p], spec.image_size).max() > 0
        for q in blobs[i + 1:]:
            assert math.hypot(p.cx - q.cx, p.cy - q.cy) >= max(p.a, p.b) + max(q.a, q.b)


def test_rgb_does_not_depend_on_height():
    spec = SyntheticSceneSpec(seed=2, n_blobs=2)
    blobs = sample_blobs(spec)
    taller = replace(spec, blobs=tuple(replace(b, c=b.c * 3) for b in blobs))
    low = generate_synthetic(replace(spec, blobs=blobs))
    assert np.array_equal(low.rgb, generate_synthetic(taller).rgb)


def test_spec_dict_round_trip():
    spec = SyntheticSceneSpec(seed=9, n_blobs=2)
    again = SyntheticSceneSpec.from_dict(spec.to_dict())
    assert again == spec
    explicit = _hemisphere_spec(5.0)
    assert SyntheticSceneSpec.from_dict(explicit.to_dict()) == explicit


def test_dataset_ids_and_disk_layout(tmp_path):
    samples = synthetic_dataset(4, seed=5)
    assert [s.dish_id for s in samples] == [f"synth5_{i:04d}" for i in range(4)]
    written = write_synthetic_dataset(samples, tmp_path)
    assert all(p.exists() for p in written)
    scenes = read_scenes(tmp_path)
    assert set(scenes) == {s.dish_id for s in samples}
    regenerated = generate_synthetic(scenes[samples[0].dish_id], samples[0].dish_id)
    assert np.array_equal(regenerated.depth, samples[0].depth)
