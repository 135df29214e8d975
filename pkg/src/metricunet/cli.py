"""Command-line entry point."""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from .data import Mask, Volume, generate_dataset, preprocess, read_vvol, save_dataset, write_vvol
from .metrics import summarize, write_eval_csv
from .pipeline.ablation import ABLATION_MATRIX, SWEEP_GRID, ablate, config_for, sweep
from .pipeline.config import PROFILES, ExperimentConfig, profile_config
from .pipeline.experiment import (
    evaluate_regions,
    load_cases,
    load_model,
    make_regions,
    predict_case,
    prepare,
    save_model,
    split_cases,
    train_stage1,
    train_stage2,
)
from .pipeline.localize import crop_region, localize, paste_region
from .pipeline.report import summarize_csv, write_overlays
from .pipeline.training import infer

log = logging.getLogger("metricunet")


def _config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config, args.profile)
    else:
        cfg = profile_config(args.profile or "desk")
    if args.seed is not None:
        cfg.train.seed = cfg.stage1.train.seed = args.seed
        cfg.dataset.data_seed = cfg.dataset.split_seed = args.seed
    manifest = args.out_dir / "data" / "manifest.json"
    if not cfg.dataset.manifest and manifest.exists():
        cfg.dataset.manifest = str(manifest)
    cfg.validate()
    return cfg


def _detector(args: argparse.Namespace, cfg: ExperimentConfig):
    path = getattr(args, "detector", None) or args.out_dir / "stage1" / "detector.npz"
    if Path(path).exists():
        return load_model(cfg.detector_spec(), path)
    log.warning("no detector checkpoint at %s; localizing from landmarks only", path)
    return None


def _model_path(args: argparse.Namespace) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else args.out_dir / "stage2" / "model.npz"


def cmd_gen_data(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    n = args.n or cfg.dataset.n_volumes
    pairs = generate_dataset(cfg.dataset.scene, n, cfg.dataset.data_seed)
    manifest = save_dataset(pairs, args.out_dir / "data")
    cfg.dataset.manifest = str(manifest)
    cfg.dataset.n_volumes = n
    cfg.save(args.out_dir / "config.json")
    print(f"wrote {n} volumes; manifest {manifest}")


def cmd_train_stage1(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    splits = split_cases(load_cases(cfg), cfg)
    out = args.out_dir / "stage1"
    out.mkdir(parents=True, exist_ok=True)
    detector, result = train_stage1(cfg, splits.train, log_path=out / "train_log.csv")
    save_model(detector, out / "detector.npz")
    print(f"detector saved to {out / 'detector.npz'}; final ce {result.log[-1]['ce']:.4f}")


def cmd_train_stage2(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    if args.variant:
        cfg = config_for(cfg, args.variant)
    splits = split_cases(load_cases(cfg), cfg)
    detector = _detector(args, cfg)
    out = args.out_dir / "stage2"
    out.mkdir(parents=True, exist_ok=True)
    model, result = train_stage2(
        cfg, make_regions(splits.train, detector, cfg), make_regions(splits.val, detector, cfg), out / "train_log.csv"
    )
    save_model(model, out / "model.npz")
    cfg.save(out / "config.json")
    print(f"model saved to {out / 'model.npz'}; selected iteration {result.best_iter}")


def cmd_infer(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    voxels, spacing = read_vvol(args.volume)
    volume = Volume(voxels, spacing, Path(args.volume).stem)
    case = preprocess(volume, Mask(np.zeros(voxels.shape, np.uint8), volume.id), cfg.dataset.body_threshold)
    model = load_model(cfg.network, _model_path(args))
    loc = localize(_detector(args, cfg), case.volume, cfg.stage1.downsample, cfg.region_size, cfg.dataset.landmark_threshold)
    pred = paste_region(infer(model, crop_region(case.volume.voxels, loc)), loc, case.volume.shape)
    full = case.uncropped(pred)
    write_vvol(args.output, full, case.volume.spacing, "u8")
    print(f"wrote mask with {int(full.sum())} foreground voxels to {args.output}")


def cmd_eval(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    splits = split_cases(load_cases(cfg), cfg)
    model = load_model(cfg.network, _model_path(args))
    regions = make_regions(splits.test, _detector(args, cfg), cfg)
    reports = evaluate_regions(model, regions)
    out = args.out_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_eval_csv([r.case.id for r in regions], reports, out / "eval.csv")
    s = summarize(reports)["dsc"]
    print(f"test DSC {s.mean:.4f} ± {s.std:.4f} (median {s.median:.4f}) over {s.count} cases")


def cmd_ablate(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    prepared = prepare(cfg, detector=_detector(args, cfg), train_detector=False)
    path = args.out_dir / "ablation.csv"
    ablate(cfg, prepared, path, args.configs)
    print(summarize_csv(path))


def cmd_sweep(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    prepared = prepare(cfg, detector=_detector(args, cfg), train_detector=False)
    base = config_for(cfg, args.base)
    path = args.out_dir / "sweep.csv"
    params = list(SWEEP_GRID) if args.param == "all" else [args.param]
    sweep(base, prepared, path, params)
    print(summarize_csv(path))


def cmd_report(args: argparse.Namespace, cfg: ExperimentConfig) -> None:
    splits = split_cases(load_cases(cfg), cfg)
    model = load_model(cfg.network, _model_path(args))
    regions = make_regions(splits.test[: args.cases], _detector(args, cfg), cfg)
    out = args.out_dir / "report"
    written = []
    for rc in regions:
        written += write_overlays(out, rc.case.id, rc.case.volume.voxels, rc.case.mask.voxels, predict_case(model, rc))
    print(f"wrote {len(written)} overlays to {out}")
    for name in ("eval/eval.csv", "ablation.csv", "sweep.csv"):
        path = args.out_dir / name
        if path.exists():
            print(f"\n{name}\n{summarize_csv(path)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metricunet", description="Two-stage voxel-metric segmentation on synthetic CT.")
    parser.add_argument("--config", type=Path, help="experiment config JSON (keys override the profile)")
    parser.add_argument("--seed", type=int, help="override every data, split and training seed")
    parser.add_argument("--profile", choices=PROFILES, help="size profile (default desk)")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bitwise reruns")
    parser.add_argument("--out-dir", type=Path, default=Path("runs/default"))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--n", type=int, help="number of volumes (default from config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="train the localization network")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the fine segmentation network")
    p.add_argument("--detector", type=Path)
    p.add_argument("--variant", choices=list(ABLATION_MATRIX), help="apply a named configuration")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("infer", help="segment one VVOL volume")
    p.add_argument("--volume", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detector", type=Path)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detector", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the configuration matrix")
    p.add_argument("--configs", nargs="+", choices=list(ABLATION_MATRIX))
    p.add_argument("--detector", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="hyper-parameter sweep")
    p.add_argument("--param", choices=[*SWEEP_GRID, "all"], default="all")
    p.add_argument("--base", choices=list(ABLATION_MATRIX), default="MetricUNet-HCP")
    p.add_argument("--detector", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="overlays and result tables")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--detector", type=Path)
    p.add_argument("--cases", type=int, default=3)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    args.out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _config(args)
    limiter = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=1)
    with limiter:
        args.func(args, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
