"""Command-line interface.

Subcommands::

    segdesc generate   --out DIR [--spec FILE]
    segdesc preprocess --in DIR --out DIR [--config FILE]
    segdesc train      --method {group,siamese,contrastive} --data DIR --out CKPT
                       [--preset {default,small}] [--config FILE] [--epochs N] [--seed S]
    segdesc extract    --model CKPT --in DIR --out descriptors.csv
    segdesc evaluate   --method {group,siamese,contrastive,eigen} --in DIR --out REPORT_DIR
                       [--model CKPT] [--baseline-eigen] [--config FILE]
    segdesc bench      [--model CKPT] [--in DIR] [--preset {default,small,both}]
    segdesc gradcheck  [--seed S]

Config files hold one ``section.key = value`` per line (``#`` comments,
comma-separated tuples). Recognised sections:

``synthetic``
    any :class:`~segdesc.synthetic.SyntheticSpec` field (angles in radians).
``preprocess``
    ``d_same``, ``th_H``, ``cluster_radius``, ``min_cluster_points``,
    ``augmentation_degrees`` (list of rotation angles in degrees).
``grid``
    ``dims`` (three ints), ``voxel_size``.
``split``
    ``fractions`` (train, validation, test), ``seed``.
``train`` / ``train.<method>``
    estimator parameters (``epochs``, ``learning_rate``, ``batch_size``, ``dropout`` ...);
    the method-specific section wins.
``eval``
    ``n_train_pos``, ``n_test_pos``, ``pair_epochs``, ``seed``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure (diverged training, gradient check above tolerance).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import throughput_bench, write_reports_csv, write_reports_jsonl
from .exceptions import DataFormatError, NumericError, SegdescError
from .io import read_config, read_dataset, write_dataset
from .models import PRESETS, build_descriptor_stack
from .nn import gradcheck_suite
from .pipeline import (
    METHODS, descriptors_csv, evaluate_eigen, evaluate_model, fit_method, load_model, load_prepared,
    make_pair_sets, preprocess_segments, report_json, save_model, save_prepared,
)
from .preprocessing import PreprocessConfig, VoxelGridSpec
from .synthetic import SyntheticSpec, generate_synthetic

log = logging.getLogger("segdesc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return read_config(path)
    except (OSError, DataFormatError) as exc:
        raise UsageError(f"config {path}: {exc}") from exc


def _known(section: dict, allowed, where):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise UsageError(f"unknown {where} key(s): {', '.join(unknown)}")
    return section


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    sec = _known(cfg.get("synthetic", {}), [f.name for f in dataclasses.fields(SyntheticSpec)], "synthetic")
    try:
        return SyntheticSpec(**sec)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def preprocess_options(cfg: dict):
    sec = dict(cfg.get("preprocess", {}))
    _known(sec, ["d_same", "th_H", "cluster_radius", "min_cluster_points", "augmentation_degrees"], "preprocess")
    if "augmentation_degrees" in sec:
        sec["augmentation_angles"] = tuple(np.deg2rad(np.atleast_1d(sec.pop("augmentation_degrees"))).tolist())
    grid = _known(cfg.get("grid", {}), ["dims", "voxel_size"], "grid")
    split = _known(cfg.get("split", {}), ["fractions", "seed"], "split")
    try:
        pcfg = PreprocessConfig(**sec)
        spec = VoxelGridSpec(**{k: tuple(v) if k == "dims" else v for k, v in grid.items()})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return pcfg, spec, tuple(split.get("fractions", (0.6, 0.2, 0.2))), int(split.get("seed", 0))


def train_params(cfg: dict, method: str) -> dict:
    params = {**cfg.get("train", {}), **cfg.get(f"train.{method}", {})}
    _known(params, METHODS[method]().get_params(), f"train ({method})")
    return params


def eval_options(cfg: dict) -> dict:
    return _known(dict(cfg.get("eval", {})), ["n_train_pos", "n_test_pos", "pair_epochs", "seed"], "eval")


# --------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    spec = synthetic_spec(load_config(args.spec))
    ds = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "segments.sds", ds.segments)
    info = {"spec": dataclasses.asdict(spec), "segments": len(ds.segments), "groups": len(ds.groups),
            "dropped_views": [list(map(int, d)) for d in ds.dropped_views]}
    (out / "generate.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    print(f"wrote {len(ds.segments)} segments in {len(ds.groups)} groups "
          f"({len(ds.dropped_views)} views dropped) to {out}")
    return EXIT_OK


def _dataset_path(path) -> Path:
    p = Path(path)
    return p / "segments.sds" if p.is_dir() else p


def cmd_preprocess(args) -> int:
    pcfg, spec, fractions, seed = preprocess_options(load_config(args.config))
    segments = read_dataset(_dataset_path(args.input))
    data = preprocess_segments(segments, pcfg, spec, fractions=fractions, seed=seed)
    save_prepared(args.out, data, segments, pcfg)
    print(json.dumps(data.report, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    params = train_params(load_config(args.config), args.method)
    params["preset"] = args.preset
    if args.epochs is not None:
        params["epochs"] = args.epochs
    if args.seed is not None:
        params["random_state"] = args.seed
    data, _ = load_prepared(args.data)
    model = fit_method(args.method, data, params)
    save_model(args.out, model)
    Path(str(args.out) + ".report.json").write_text(report_json(model.report_) + "\n")
    for rec in model.report_.epochs:
        print(f"epoch {rec.epoch}: loss {rec.train_loss:.5f} {model.report_.metric} {rec.train_metric:.4f}"
              + ("" if rec.val_metric is None else f" val {rec.val_metric:.4f}"))
    return EXIT_OK


def cmd_extract(args) -> int:
    model = load_model(args.model)
    data, _ = load_prepared(args.input)
    descriptors_csv(model, data, args.out)
    print(f"wrote {len(data.segment_ids)} descriptors to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    opts = eval_options(load_config(args.config))
    seed = int(opts.get("seed", 0))
    data, segments = load_prepared(args.input)
    tr, te = data.originals("train"), data.originals("test")
    pairs = make_pair_sets(data.group_ids[tr], data.group_ids[te], int(opts.get("n_train_pos", 2000)),
                           int(opts.get("n_test_pos", 1000)), seed=seed)
    reports = []
    if args.method == "eigen" or args.baseline_eigen:
        reports.append(evaluate_eigen(data, segments, pairs, seed))
    if args.method != "eigen":
        if args.model is None:
            raise UsageError(f"--model is required for method {args.method}")
        model = load_model(args.model)
        if model.regime != args.method:
            raise UsageError(f"checkpoint holds a {model.regime} model, not {args.method}")
        reports.append(evaluate_model(model, data, pairs, seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(reports, out / "report.csv")
    write_reports_jsonl(reports, out / "report.jsonl")
    for r in reports:
        print(json.dumps(r.summary(), sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    presets = list(PRESETS) if args.preset == "both" else [args.preset]
    model = load_model(args.model) if args.model else None
    if model is not None:
        dims, dtype = model.net_.input_dims, model.net_.stack.dtype
    else:
        dims, dtype = VoxelGridSpec().dims, np.float32
    if args.input:
        data, _ = load_prepared(args.input)
        rows = np.arange(min(args.batch, len(data.segment_ids)))
        X = data.normalized(rows, dtype=dtype)
    else:
        rng = np.random.default_rng(args.seed)
        X = (rng.random((args.batch, *dims)) < 0.05).astype(dtype)
    results = {}
    for preset in presets:
        if model is not None and model.preset == preset:
            net = model.net_
        else:
            from .models import DescriptorNet

            net = DescriptorNet(build_descriptor_stack(dims, preset, seed=args.seed, dtype=dtype), preset)
        res = throughput_bench(net.describe, X, repetitions=args.repetitions)
        results[preset] = res.segments_per_second
        print(json.dumps({"preset": preset, "segments_per_second": res.segments_per_second,
                          "batch": res.batch_size, "repetitions": args.repetitions}))
    if len(results) == 2:
        print(json.dumps({"small_over_default": results["small"] / results["default"]}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = False
    for name, (err, tol) in gradcheck_suite(args.seed).items():
        ok = err < tol
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name}: max relative error {err:.3e} (tolerance {tol:g})")
    if failed:
        raise NumericError("gradient check above tolerance")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="segdesc", description="Learned 3D segment descriptors: data, training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate", help="write a synthetic segment dataset")
    s.add_argument("--spec", help="config file with synthetic.* keys")
    s.add_argument("--out", required=True, help="output directory (segments.sds, generate.json)")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("preprocess", help="group, align, augment, voxelize, deduplicate and normalize")
    s.add_argument("--in", dest="input", required=True, help="dataset file or directory holding segments.sds")
    s.add_argument("--config", help="config file with preprocess.*, grid.* and split.* keys")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a descriptor network")
    s.add_argument("--method", required=True, choices=sorted(METHODS))
    s.add_argument("--preset", default="default", choices=sorted(PRESETS))
    s.add_argument("--config", help="config file with train.* / train.<method>.* keys")
    s.add_argument("--data", required=True, help="preprocessed dataset directory")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--seed", type=int, help="override train.random_state")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="write descriptors of every preprocessed segment as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="input", required=True, help="preprocessed dataset directory")
    s.add_argument("--out", required=True, help="CSV path")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("evaluate", help="ROC and candidate-match evaluation on the test split")
    s.add_argument("--method", required=True, choices=sorted(METHODS) + ["eigen"])
    s.add_argument("--model", help="checkpoint (not needed for eigen)")
    s.add_argument("--baseline-eigen", action="store_true", help="also evaluate the eigenvalue baseline")
    s.add_argument("--in", dest="input", required=True, help="preprocessed dataset directory")
    s.add_argument("--config", help="config file with eval.* keys")
    s.add_argument("--out", required=True, help="report directory (report.csv, report.jsonl)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench", help="descriptor extraction throughput")
    s.add_argument("--model", help="checkpoint; its preset is benchmarked with its own weights")
    s.add_argument("--in", dest="input", help="preprocessed dataset to draw the batch from")
    s.add_argument("--preset", default="both", choices=sorted(PRESETS) + ["both"])
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--repetitions", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks of layers and losses")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"segdesc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"segdesc: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SegdescError, OSError, ValueError, KeyError) as exc:
        print(f"segdesc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
