"""Dataset-level glue: preprocessing a whole dataset, persisting it, model
checkpoints and the evaluation protocols applied per method."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .eigen import EigenvalueDescriptor
from .evaluation import (
    DescriptorIndex, EvalReport, PairClassifier, candidate_match_accuracy, pair_features, roc_auc,
)
from .exceptions import DataFormatError, PreprocessingError
from .geometry import Segment
from .io import build_manifest, read_dataset, read_manifest, write_dataset, write_manifest
from .models import (
    ContrastiveDescriptor, DescriptorNet, GroupClassifierDescriptor, SiameseDescriptor,
)
from .nn import load_checkpoint, save_checkpoint
from .pairs import groups_from_labels, sample_pairs
from .preprocessing import (
    NormalizationStats, PreprocessConfig, VoxelGridSpec, align_segment, augment_rotations,
    build_groups, check_groups, fit_normalizer, hamming_dedup, voxelize,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
METHODS = {
    "group": GroupClassifierDescriptor,
    "siamese": SiameseDescriptor,
    "contrastive": ContrastiveDescriptor,
}


def split_groups(group_ids, fractions=(0.6, 0.2, 0.2), seed=0) -> dict[int, str]:
    """Assign whole groups to train/validation/test."""
    gids = np.array(sorted(set(int(g) for g in group_ids)))
    order = np.random.default_rng([seed, 7]).permutation(len(gids))
    n_train = int(round(fractions[0] * len(gids)))
    n_val = int(round(fractions[1] * len(gids)))
    out = {}
    for rank, i in enumerate(order):
        out[int(gids[i])] = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
    return out


@dataclass
class PreparedData:
    segment_ids: np.ndarray
    source_ids: np.ndarray
    group_ids: np.ndarray
    splits: np.ndarray
    grids: np.ndarray
    stats: NormalizationStats
    grid_spec: VoxelGridSpec
    report: dict = field(default_factory=dict)

    def indices(self, split) -> np.ndarray:
        return np.flatnonzero(self.splits == split)

    def originals(self, split) -> np.ndarray:
        """Rows of un-augmented segments in ``split``."""
        return np.flatnonzero((self.splits == split) & (self.segment_ids == self.source_ids))

    def normalized(self, rows, dtype=np.float32):
        return self.stats.apply(self.grids[rows], dtype=dtype)

    def occupancy(self, rows):
        return self.stats.occupancy(self.grids[rows])


def preprocess_segments(segments: list[Segment], cfg: PreprocessConfig = PreprocessConfig(),
                        spec: VoxelGridSpec = VoxelGridSpec(), fractions=(0.6, 0.2, 0.2), seed=0,
                        regroup=True) -> PreparedData:
    """Group, split, align, augment (training split only), voxelize,
    deduplicate within groups and fit the normalizer on the training split."""
    segments = sorted(segments, key=lambda s: (s.frame_index, s.segment_id))
    if regroup:
        groups = build_groups(segments, cfg)
        check_groups(groups, segments)
        group_of = {sid: g.group_id for g in groups for sid in g.member_ids}
    else:
        group_of = {s.segment_id: s.group_id for s in segments}
    split_of = split_groups(group_of.values(), fractions, seed)
    next_id = max(s.segment_id for s in segments) + 1
    angles = cfg.augmentation_angles or (0.0,)
    if 0.0 not in angles:
        angles = (0.0, *angles)

    records = []  # (segment_id, source_id, group, split, grid)
    report = {"input_segments": len(segments), "groups": len(split_of), "alignment_failures": 0,
              "empty_voxelizations": 0}
    for seg in sorted(segments, key=lambda s: s.segment_id):
        gid = group_of[seg.segment_id]
        split = split_of[gid]
        try:
            aligned = align_segment(seg)
        except PreprocessingError:
            report["alignment_failures"] += 1
            continue
        for angle in angles if split == "train" else (0.0,):
            if angle == 0.0:
                sid, copy = seg.segment_id, aligned
            else:
                sid, next_id = next_id, next_id + 1
                copy = augment_rotations(aligned, [angle])[0]
            try:
                vox = voxelize(copy, spec)
            except PreprocessingError:
                report["empty_voxelizations"] += 1
                continue
            records.append((sid, seg.segment_id, gid, split, vox))
            vox.segment_id = sid

    by_group: dict[int, list] = {}
    for rec in records:
        by_group.setdefault(rec[2], []).append(rec)
    kept = []
    for gid in sorted(by_group):
        recs = {r[0]: r for r in by_group[gid]}
        survivors = hamming_dedup([r[4] for r in recs.values()], cfg.th_H)
        kept += [recs[v.segment_id] for v in survivors]
    kept.sort(key=lambda r: r[0])
    report["duplicates_removed"] = len(records) - len(kept)
    report["kept"] = len(kept)

    splits = np.array([r[3] for r in kept])
    grids = np.stack([r[4].grid for r in kept]) if kept else np.zeros((0, *spec.dims), dtype=np.uint8)
    train_rows = np.flatnonzero(splits == "train")
    if len(train_rows) == 0:
        raise PreprocessingError("training split is empty after preprocessing")
    stats = fit_normalizer(grids[train_rows])
    for s in SPLITS:
        report[f"{s}_segments"] = int((splits == s).sum())
    return PreparedData(
        segment_ids=np.array([r[0] for r in kept], dtype=np.int64),
        source_ids=np.array([r[1] for r in kept], dtype=np.int64),
        group_ids=np.array([r[2] for r in kept], dtype=np.int64),
        splits=splits,
        grids=grids,
        stats=stats,
        grid_spec=spec,
        report=report,
    )


def save_prepared(out_dir, data: PreparedData, segments: list[Segment], cfg: PreprocessConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        out / "voxels.npz", segment_ids=data.segment_ids, source_ids=data.source_ids,
        group_ids=data.group_ids, splits=data.splits, grids=data.grids,
    )
    np.savez(out / "stats.npz", mean=data.stats.mean, std=data.stats.std, epsilon=data.stats.epsilon)
    # keep source segments for the eigenvalue baseline, relabelled with the built groups
    group_of = dict(zip(data.source_ids.tolist(), data.group_ids.tolist()))
    kept = [s.copy(group_id=group_of[s.segment_id]) for s in segments if s.segment_id in group_of]
    write_dataset(out / "segments.sds", kept)
    split_of = {int(g): str(s) for g, s in zip(data.group_ids, data.splits)}
    manifest = build_manifest(
        split_of, dict(zip(data.segment_ids.tolist(), data.group_ids.tolist())),
        dict(zip(data.segment_ids.tolist(), data.splits.tolist())),
        preprocess=asdict(cfg), grid={"dims": list(data.grid_spec.dims), "voxel_size": data.grid_spec.voxel_size},
        stats="stats.npz", voxels="voxels.npz", segments="segments.sds", report=data.report,
    )
    write_manifest(out / "manifest.json", manifest)


def load_prepared(in_dir) -> tuple[PreparedData, list[Segment]]:
    d = Path(in_dir)
    if not (d / "manifest.json").exists():
        raise DataFormatError(f"{d} is not a preprocessed dataset (manifest.json missing)")
    manifest = read_manifest(d / "manifest.json")
    vox = np.load(d / manifest["voxels"])
    st = np.load(d / manifest["stats"])
    data = PreparedData(
        segment_ids=vox["segment_ids"], source_ids=vox["source_ids"], group_ids=vox["group_ids"],
        splits=vox["splits"], grids=vox["grids"],
        stats=NormalizationStats(st["mean"], st["std"], float(st["epsilon"])),
        grid_spec=VoxelGridSpec(tuple(manifest["grid"]["dims"]), manifest["grid"]["voxel_size"]),
        report=manifest.get("report", {}),
    )
    for g, s in zip(data.group_ids, data.splits):
        if manifest["splits"][str(int(g))] != s:
            raise DataFormatError(f"group {g} split disagrees with manifest")
    return data, read_dataset(d / manifest["segments"])


# --------------------------------------------------------------------------
# checkpoints


def save_model(path, model) -> None:
    stacks = {"descriptor": model.net_.stack}
    if hasattr(model, "head_"):
        stacks["head"] = model.head_
    meta = {"regime": model.regime, "params": model.get_params()}
    if hasattr(model, "classes_"):
        meta["classes"] = [int(c) for c in model.classes_]
    save_checkpoint(path, stacks, meta)


def load_model(path):
    stacks, meta = load_checkpoint(path)
    regime = meta.get("regime")
    if regime not in METHODS:
        raise DataFormatError(f"checkpoint has unknown regime {regime!r}")
    model = METHODS[regime](**meta["params"])
    model.net_ = DescriptorNet(stacks["descriptor"], model.preset)
    if "head" in stacks:
        model.head_ = stacks["head"]
    if "classes" in meta:
        model.classes_ = np.asarray(meta["classes"])
    return model


# --------------------------------------------------------------------------
# evaluation protocols


@dataclass
class PairSets:
    train: list
    test: list


def make_pair_sets(train_labels, test_labels, n_train_pos=2000, n_test_pos=1000, seed=0) -> PairSets:
    """Balanced pairs over row indices of the train and test subsets."""
    def draw(labels, n, s):
        groups = groups_from_labels(labels)
        n_max = sum(len(g.member_ids) * (len(g.member_ids) - 1) // 2 for g in groups)
        return sample_pairs(groups, min(n, n_max), seed=s)

    return PairSets(draw(train_labels, n_train_pos, [seed, 11]), draw(test_labels, n_test_pos, [seed, 12]))


def evaluate_descriptors(method, desc_train, y_train, desc_test, y_test, pairs: PairSets,
                         seed=0, pair_epochs=100) -> EvalReport:
    """Pair-classifier ROC on test pairs plus nearest-neighbor candidate
    matching over the test descriptors."""
    clf = PairClassifier(epochs=pair_epochs, random_state=seed).fit(*pair_features(desc_train, pairs.train))
    X, y = pair_features(desc_test, pairs.test)
    roc = roc_auc(clf.predict_proba(X)[:, 1], y)
    index = DescriptorIndex(np.arange(len(desc_test)), y_test, desc_test)
    return EvalReport(method, roc, candidate_match_accuracy(index, details=True))


def evaluate_siamese(model: SiameseDescriptor, X_test, y_test, pairs: PairSets) -> EvalReport:
    from .pairs import pairs_to_arrays

    a, b, y = pairs_to_arrays(pairs.test)
    desc = model.transform(X_test)
    roc = roc_auc(model.merge_proba(desc[a], desc[b]), y)
    index = DescriptorIndex(np.arange(len(desc)), y_test, desc)
    return EvalReport("siamese", roc, candidate_match_accuracy(index, details=True))


def evaluate_model(model, data: PreparedData, pairs: PairSets | None = None, seed=0):
    tr, te = data.originals("train"), data.originals("test")
    y_tr, y_te = data.group_ids[tr], data.group_ids[te]
    pairs = pairs or make_pair_sets(y_tr, y_te, seed=seed)
    X_te = data.occupancy(te)
    if model.regime == "siamese":
        return evaluate_siamese(model, X_te, y_te, pairs)
    desc_tr = model.transform(data.occupancy(tr))
    return evaluate_descriptors(model.regime, desc_tr, y_tr, model.transform(X_te), y_te, pairs, seed)


def evaluate_eigen(data: PreparedData, segments: list[Segment], pairs: PairSets | None = None, seed=0):
    by_id = {s.segment_id: s for s in segments}
    tr, te = data.originals("train"), data.originals("test")
    eig = EigenvalueDescriptor()
    desc_tr = eig.transform([by_id[i] for i in data.segment_ids[tr]])
    desc_te = eig.transform([by_id[i] for i in data.segment_ids[te]])
    y_tr, y_te = data.group_ids[tr], data.group_ids[te]
    pairs = pairs or make_pair_sets(y_tr, y_te, seed=seed)
    return evaluate_descriptors("eigen", desc_tr, y_tr, desc_te, y_te, pairs, seed)


def fit_method(method, data: PreparedData, params: dict | None = None, validate=True):
    model = METHODS[method](**(params or {}))
    tr = data.indices("train")
    X = data.occupancy(tr)
    val = None
    if validate and len(data.originals("validation")):
        v = data.originals("validation")
        val = (data.occupancy(v), data.group_ids[v])
    model.fit(X, data.group_ids[tr], validation_data=val)
    return model


def descriptors_csv(model, data: PreparedData, path) -> None:
    """``segment_id,group_id,split,d0..d{D-1}``, one row per preprocessed
    segment in id order, floats written with ``repr``."""
    rows = np.arange(len(data.segment_ids))
    desc = np.vstack([model.transform(data.occupancy(c)) for c in np.array_split(rows, max(1, len(rows) // 256))])
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(["segment_id", "group_id", "split"] + [f"d{i}" for i in range(desc.shape[1])]) + "\n")
        for sid, gid, split, row in zip(data.segment_ids, data.group_ids, data.splits, desc):
            fh.write(f"{sid},{gid},{split}," + ",".join(repr(float(v)) for v in row) + "\n")


def report_json(report) -> str:
    return json.dumps(asdict(report), default=float, sort_keys=True)
