"""Configuration matrix of the ablation study, plus ablation and sweep runners."""
from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from ..errors import ValidationError
from ..metrics import METRIC_FIELDS, MetricsReport, summarize
from ..sampling import SamplingConfig
from .config import ExperimentConfig
from .experiment import Prepared, evaluate_regions, train_stage2

log = logging.getLogger(__name__)

FLAG_COLUMNS = ("random", "hard_negative", "contour_aware", "cross_entropy", "positive_pair", "triplet", "sep")


@dataclass(frozen=True)
class ConfigFlags:
    random: bool
    hard_negative: bool
    contour_aware: bool
    cross_entropy: bool
    positive_pair: bool
    triplet: bool
    sep: bool = False

    def as_row(self) -> list[int]:
        return [int(getattr(self, c)) for c in FLAG_COLUMNS]


def _flags(r: int, h: int, c: int, pair: int, trip: int, sep: int = 0) -> ConfigFlags:
    return ConfigFlags(bool(r), bool(h), bool(c), True, bool(pair), bool(trip), bool(sep))


# Sampling strategies and loss terms of every in-scope configuration.
ABLATION_MATRIX: dict[str, ConfigFlags] = {
    "UNet": _flags(0, 0, 0, 0, 0),
    "MetricUNet-R-Sep": _flags(1, 0, 0, 0, 1, sep=1),
    "MetricUNet-R": _flags(1, 0, 0, 0, 1),
    "MetricUNet-H": _flags(0, 1, 0, 0, 1),
    "MetricUNet-C": _flags(0, 0, 1, 0, 1),
    "MetricUNet-HR": _flags(1, 1, 0, 0, 1),
    "MetricUNet-HC": _flags(0, 1, 1, 0, 1),
    "MetricUNet-HP": _flags(0, 1, 0, 1, 1),
    "MetricUNet-HRP": _flags(1, 1, 0, 1, 1),
    "MetricUNet-HCP": _flags(0, 1, 1, 1, 1),
}

SWEEP_GRID: dict[str, tuple[float, ...]] = {
    "lambda": (0.1, 0.01, 0.001),
    "sigma": (0.1, 0.3, 0.5, 0.7, 1.0),
    "k": (20, 50, 100, 200),
}


def active_strategies(flags: ConfigFlags) -> list[str]:
    order = (("random", flags.random), ("focal_hard", flags.hard_negative), ("contour", flags.contour_aware))
    return [name for name, on in order if on]


def config_for(base: ExperimentConfig, name: str) -> ExperimentConfig:
    """``base`` with the sampling and loss settings of configuration ``name``.

    Sampler hyper-parameters (k, m, tau) come from ``base``'s first sampler
    when it has one.
    """
    if name not in ABLATION_MATRIX:
        raise ValidationError(f"unknown configuration {name!r}; expected one of {list(ABLATION_MATRIX)}")
    flags = ABLATION_MATRIX[name]
    cfg = copy.deepcopy(base)
    cfg.name = name
    template = base.loss.strategies[0] if base.loss.strategies else SamplingConfig()
    cfg.loss.strategies = [
        SamplingConfig(s, template.k, template.m, template.tau, template.seed) for s in active_strategies(flags)
    ]
    cfg.loss.use_pair_term = flags.positive_pair
    cfg.loss.sep_mode = flags.sep
    cfg.network.variant = "metric" if cfg.loss.strategies else "baseline"
    cfg.validate()
    return cfg


def _summary_columns() -> list[str]:
    return [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std", "median")]


def _summary_values(reports: Sequence[MetricsReport]) -> list[str]:
    summary = summarize(reports)
    out = []
    for m in METRIC_FIELDS:
        s = summary[m]
        out += ["NA" if v is None else f"{v:.6g}" for v in (s.mean, s.std, s.median)]
    return out


Runner = Callable[[ExperimentConfig, Prepared], Sequence[MetricsReport]]


def default_runner(cfg: ExperimentConfig, prepared: Prepared) -> Sequence[MetricsReport]:
    model, _ = train_stage2(cfg, prepared.train, prepared.val)
    return evaluate_regions(model, prepared.test)


def _run(cfg: ExperimentConfig, prepared: Prepared, runner: Runner) -> tuple[str, list[str]]:
    try:
        reports = runner(cfg, prepared)
    except Exception as exc:  # one failing configuration must not stop the grid
        log.exception("configuration %s failed", cfg.name)
        return f"failed: {type(exc).__name__}: {exc}", ["NA"] * (3 * len(METRIC_FIELDS))
    return "ok", _summary_values(reports)


def ablate(
    base: ExperimentConfig,
    prepared: Prepared,
    path: str | Path,
    names: Sequence[str] | None = None,
    runner: Runner = default_runner,
) -> list[list[str]]:
    """Train and evaluate each configuration with the same seed; write one CSV row each."""
    names = list(names) if names is not None else list(ABLATION_MATRIX)
    configs = [config_for(base, n) for n in names]
    header = ["config_name", *FLAG_COLUMNS, "status", *_summary_columns()]
    rows = []
    for cfg in configs:
        log.info("ablation: %s", cfg.name)
        status, values = _run(cfg, prepared, runner)
        rows.append([cfg.name, *map(str, ABLATION_MATRIX[cfg.name].as_row()), status, *values])
    _write(path, header, rows)
    return rows


def sweep_config(base: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    cfg = copy.deepcopy(base)
    if param == "lambda":
        cfg.loss.lam = float(value)
    elif param == "sigma":
        cfg.loss.sigma = float(value)
    elif param == "k":
        for s in cfg.loss.strategies:
            s.k = int(value)
    else:
        raise ValidationError(f"unknown sweep parameter {param!r}; expected one of {list(SWEEP_GRID)}")
    cfg.name = f"{base.name}:{param}={value:g}"
    cfg.validate()
    return cfg


def sweep(
    base: ExperimentConfig,
    prepared: Prepared,
    path: str | Path,
    params: Sequence[str] | None = None,
    runner: Runner = default_runner,
) -> list[list[str]]:
    """One row per grid point of each parameter in ``params`` (default: all)."""
    params = list(params) if params is not None else list(SWEEP_GRID)
    if not base.loss.strategies:
        raise ValidationError("sweeps need a configuration with at least one sampler")
    header = ["config_name", "param", "value", "status", *_summary_columns()]
    rows = []
    for param in params:
        if param not in SWEEP_GRID:
            raise ValidationError(f"unknown sweep parameter {param!r}; expected one of {list(SWEEP_GRID)}")
        for value in SWEEP_GRID[param]:
            cfg = sweep_config(base, param, value)
            log.info("sweep: %s", cfg.name)
            status, values = _run(cfg, prepared, runner)
            rows.append([base.name, param, f"{value:g}", status, *values])
    _write(path, header, rows)
    return rows


def _write(path: str | Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
