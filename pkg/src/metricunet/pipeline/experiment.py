"""End-to-end two-stage runs: data preparation, stage 1, stage 2, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import Case, downsample, generate_dataset, load_dataset, preprocess, resample_mask
from ..losses import LossConfig
from ..metrics import MetricsReport, dsc, evaluate
from ..network import ModelState, build_unet
from ..tensor_core import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .localize import LocalizationResult, crop_region, localize, paste_region
from .training import PatchSource, TrainResult, infer, train_network

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: list[Case]
    val: list[Case]
    test: list[Case]


@dataclass
class RegionCase:
    case: Case
    loc: LocalizationResult
    region: np.ndarray
    labels: np.ndarray


def load_cases(cfg: ExperimentConfig) -> list[Case]:
    """Preprocessed cases from the manifest, or freshly generated when none is set."""
    ds = cfg.dataset
    if ds.manifest:
        pairs = load_dataset(ds.manifest)
    else:
        pairs = generate_dataset(ds.scene, ds.n_volumes, ds.data_seed)
    return [preprocess(v, m, ds.body_threshold) for v, m in pairs]


def split_cases(cases: list[Case], cfg: ExperimentConfig) -> Splits:
    n = len(cases)
    order = np.random.default_rng(cfg.dataset.split_seed).permutation(n)
    n_train = int(round(cfg.dataset.split[0] * n))
    n_val = int(round(cfg.dataset.split[1] * n))
    pick = lambda idx: [cases[i] for i in idx]  # noqa: E731
    return Splits(pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :]))


def stage1_source(cfg: ExperimentConfig, cases: list[Case]) -> PatchSource:
    f = cfg.stage1.downsample
    vols, labs = [], []
    for c in cases:
        low = downsample(c.volume, f)
        vols.append(low.voxels)
        labs.append(resample_mask(c.mask, c.volume.spacing, low.spacing).voxels)
    s1 = cfg.stage1
    return PatchSource(vols, labs, s1.patch_size, s1.channels, s1.train.patches_per_image, s1.train.seed)


def train_stage1(
    cfg: ExperimentConfig, cases: list[Case], log_path: str | Path | None = None
) -> tuple[ModelState, TrainResult]:
    """Train the lightweight detector on down-sampled volumes with cross-entropy only."""
    if not cases:
        raise ValueError("stage 1 needs at least one training case")
    detector = build_unet(cfg.detector_spec(), cfg.stage1.train.seed)
    result = train_network(detector, stage1_source(cfg, cases), LossConfig(lam=0.0), cfg.stage1.train, log_path=log_path)
    return detector, result


def make_regions(cases: list[Case], detector: ModelState | None, cfg: ExperimentConfig) -> list[RegionCase]:
    out = []
    for c in cases:
        loc = localize(detector, c.volume, cfg.stage1.downsample, cfg.region_size, cfg.dataset.landmark_threshold)
        out.append(
            RegionCase(c, loc, crop_region(c.volume.voxels, loc), crop_region(c.mask.voxels, loc, pad_mode="constant"))
        )
    return out


def predict_case(model: ModelState, rc: RegionCase) -> np.ndarray:
    """Full-volume prediction: the region segmentation pasted into an empty volume."""
    return paste_region(infer(model, rc.region), rc.loc, rc.case.mask.shape)


def mean_dsc(model: ModelState, regions: list[RegionCase]) -> float:
    return float(np.mean([dsc(rc.case.mask.voxels, predict_case(model, rc)) for rc in regions]))


def evaluate_regions(model: ModelState, regions: list[RegionCase]) -> list[MetricsReport]:
    return [evaluate(rc.case.mask.voxels, predict_case(model, rc), rc.case.volume.spacing) for rc in regions]


def train_stage2(
    cfg: ExperimentConfig,
    train_regions: list[RegionCase],
    val_regions: list[RegionCase] | None = None,
    log_path: str | Path | None = None,
) -> tuple[ModelState, TrainResult]:
    """Train the fine segmentation network on region crops.

    With validation regions, the checkpoint with the best validation mean DSC
    is kept.
    """
    cfg.validate()
    source = PatchSource(
        [r.region for r in train_regions],
        [r.labels for r in train_regions],
        cfg.patch_size,
        cfg.channels,
        cfg.train.patches_per_image,
        cfg.train.seed,
    )
    model = build_unet(cfg.network, cfg.train.seed)
    validate = (lambda m: mean_dsc(m, val_regions)) if val_regions else None
    result = train_network(model, source, cfg.loss, cfg.train, validate=validate, log_path=log_path)
    return model, result


@dataclass
class Prepared:
    splits: Splits
    detector: ModelState | None
    train: list[RegionCase]
    val: list[RegionCase]
    test: list[RegionCase]


def prepare(cfg: ExperimentConfig, detector: ModelState | None = None, train_detector: bool = True) -> Prepared:
    """Load and split the data, obtain a detector, and crop every case's region."""
    splits = split_cases(load_cases(cfg), cfg)
    if detector is None and train_detector:
        detector, _ = train_stage1(cfg, splits.train)
    return Prepared(
        splits,
        detector,
        make_regions(splits.train, detector, cfg),
        make_regions(splits.val, detector, cfg),
        make_regions(splits.test, detector, cfg),
    )


def save_model(model: ModelState, path: str | Path) -> None:
    save_checkpoint(path, model.state_arrays())


def load_model(spec, path: str | Path) -> ModelState:
    model = build_unet(spec, 0)
    model.load_state_arrays(load_checkpoint(path))
    model.eval()
    return model
