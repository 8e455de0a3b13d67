import numpy as np
import pytest

from segdesc.pipeline import load_prepared, preprocess_segments, save_prepared, split_groups
from segdesc.preprocessing import PreprocessConfig, VoxelGridSpec
from segdesc.synthetic import SyntheticSpec, generate_synthetic

SPEC = VoxelGridSpec((20, 20, 12), 0.25)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(n_groups=12, views_per_group=4, seed=9))


def test_split_groups_atomic_and_deterministic():
    split = split_groups(range(100), (0.6, 0.2, 0.2), seed=3)
    assert split == split_groups(range(100), (0.6, 0.2, 0.2), seed=3)
    counts = {s: sum(v == s for v in split.values()) for s in ("train", "validation", "test")}
    assert counts == {"train": 60, "validation": 20, "test": 20}


def test_augmentation_only_on_train(dataset):
    angles = tuple(np.deg2rad([-10.0, 0.0, 10.0]))
    data = preprocess_segments(dataset.segments, PreprocessConfig(th_H=0, augmentation_angles=angles), SPEC, seed=1)
    aug = data.segment_ids != data.source_ids
    assert aug.any() and set(data.splits[aug]) == {"train"}
    assert data.segment_ids[aug].min() > max(s.segment_id for s in dataset.segments)
    n_train_src = len(data.originals("train"))
    assert aug.sum() == 2 * n_train_src  # the 0-degree copy is the original itself
    for split in ("validation", "test"):
        assert (data.segment_ids[data.splits == split] == data.source_ids[data.splits == split]).all()


def test_normalizer_fitted_on_train_only(dataset):
    data = preprocess_segments(dataset.segments, PreprocessConfig(augmentation_angles=(0.0,)), SPEC, seed=1)
    tr = data.indices("train")
    np.testing.assert_allclose(data.stats.mean, data.grids[tr].mean(0), atol=1e-12)


def test_dedup_report(dataset):
    data = preprocess_segments(dataset.segments, PreprocessConfig(th_H=10_000, augmentation_angles=(0.0,)), SPEC)
    assert len(data.segment_ids) == len(np.unique(data.group_ids))  # one survivor per group
    assert data.report["duplicates_removed"] == len(dataset.segments) - len(data.segment_ids)


def test_save_load_round_trip(dataset, tmp_path):
    cfg = PreprocessConfig(augmentation_angles=(0.0,))
    data = preprocess_segments(dataset.segments, cfg, SPEC, seed=2)
    save_prepared(tmp_path, data, dataset.segments, cfg)
    back, segs = load_prepared(tmp_path)
    for name in ("segment_ids", "source_ids", "group_ids", "splits", "grids"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
    np.testing.assert_array_equal(back.stats.std, data.stats.std)
    assert back.grid_spec == SPEC and len(segs) == len(data.segment_ids)
