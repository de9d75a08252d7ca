"""Ablation drivers: fusion modes, encoder transfer, noise detection and label smoothing settings.

Each driver loops over seeds, regenerates the synthetic scene for every seed, and returns one row per
(seed, arm, modality) that is also written as CSV when an output directory is given.
"""
import csv
import math
import os
import logging
from dataclasses import replace
from typing import Dict, List, Optional, Sequence
import numpy as np
from nlss.utils import exporter, optional_params, register, ConfigError
from nlss.tensor import Tensor
from nlss.data import SyntheticDataset, CleanSplit, generate
from nlss.models import ModelPair
from nlss.selection import schedule, selection_masks
from nlss.smoothing import SmoothingParams
from nlss.analytics import MetricsReport, NoiseDetection, evaluate_model, noise_detection_report
from nlss.train import MODES, eval_batch, pretrain, transfer
from nlss.config import ExperimentConfig


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

NLSS_EXPERIMENTS = {}

SMOOTHING_SETTINGS = {
    "none": SmoothingParams(beta=0.0, mu=0.0),
    "uniform": SmoothingParams(beta=0.05, mu=0.0),
    "spatial_temporal": SmoothingParams(beta=0.0, mu=0.15),
    "combined": SmoothingParams(beta=0.05, mu=0.15),
}


@export
@optional_params
def register_experiment(fn, name=None):
    return register(fn, NLSS_EXPERIMENTS, name, "experiment")


@export
def create_experiment(name: str):
    if name not in NLSS_EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}, expected one of {sorted(NLSS_EXPERIMENTS)}")
    return NLSS_EXPERIMENTS[name]


def _seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.with_overrides(seed=seed)


def evaluate_pair(pair: ModelPair, test: CleanSplit, num_classes: int) -> Dict[int, MetricsReport]:
    """Clean-label test metrics of every modality of a pair"""
    reports = {}
    for d in pair.modalities:
        x, y = test.flatten(d)
        reports[d] = evaluate_model(pair, x, y, num_classes, d)
    return reports


def _row(report: MetricsReport, **keys) -> Dict:
    row = dict(keys)
    row.update(report.as_dict())
    return row


@export
def save_rows(outfile: str, rows: List[Dict]):
    if not rows:
        return
    fieldnames = list(rows[0])
    with open(outfile, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        for row in rows:
            w.writerow(row)


@export
def summarize(rows: List[Dict], by: Sequence[str], metric: str = "miou") -> Dict[tuple, float]:
    """Mean of `metric` over seeds for every combination of the `by` columns"""
    groups: Dict[tuple, List[float]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in by), []).append(row[metric])
    return {k: float(np.mean(v)) for k, v in groups.items()}


def _pretrain_arm(config: ExperimentConfig, dataset: SyntheticDataset, arm: str, out_dir: Optional[str], **train):
    train_config = replace(config.train, **train)
    arm_dir = None if out_dir is None else os.path.join(out_dir, f"seed{train_config.seed}", arm)
    pair, _ = pretrain(
        dataset.split("train"), dataset.split("val"), train_config, config.model_config(), out_dir=arm_dir
    )
    return pair


@export
@register_experiment(name="fusion")
def fusion_ablation(
    config: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2), modes: Sequence[str] = MODES, out_dir=None
) -> List[Dict]:
    """Single-modal against middle / late fusion, with and without cross-modal selection"""
    rows = []
    for seed in seeds:
        cfg = _seeded(config, seed)
        dataset = generate(cfg.scene)
        test = dataset.clean_split("test")
        for mode in modes:
            for modality in (1, 2) if mode == "single" else (cfg.train.modality,):
                arm = f"single{modality}" if mode == "single" else mode
                pair = _pretrain_arm(cfg, dataset, arm, out_dir, mode=mode, modality=modality)
                for d, report in evaluate_pair(pair, test, cfg.scene.output_classes).items():
                    rows.append(_row(report, seed=seed, mode=mode, modality=d))
                    logger.info("fusion seed %d %s modality %d: miou %.4f", seed, mode, d, report.miou)
    if out_dir is not None:
        save_rows(os.path.join(out_dir, "fusion_ablation.csv"), rows)
    return rows


@export
@register_experiment(name="transfer")
def transfer_ablation(
    config: ExperimentConfig,
    seeds: Sequence[int] = (0, 1, 2),
    modes: Sequence[str] = ("cromss_midF",),
    frozen: bool = True,
    out_dir=None,
) -> List[Dict]:
    """Pretrained encoders against randomly initialized ones on the clean downstream task"""
    rows = []
    for seed in seeds:
        cfg = _seeded(config, seed)
        dataset = generate(cfg.scene)
        downstream = generate(replace(cfg.downstream, seed=cfg.downstream.seed + seed))
        train, test = downstream.clean_split("train"), downstream.clean_split("test")
        num_classes = downstream.spec.output_classes
        sources = {"random": None}
        for mode in modes:
            sources[mode] = _pretrain_arm(cfg, dataset, mode, out_dir, mode=mode)
        for name, source in sources.items():
            for d in (1, 2) if source is None else source.modalities:
                _, report = transfer(
                    source, d, train, test, frozen, cfg.train, num_classes, model_config=cfg.model_config()
                )
                rows.append(_row(report, seed=seed, encoder=name, modality=d, frozen=frozen))
                logger.info("transfer seed %d %s modality %d: miou %.4f", seed, name, d, report.miou)
    if out_dir is not None:
        save_rows(os.path.join(out_dir, "transfer_ablation.csv"), rows)
    return rows


@export
def detect_noise(
    pair: ModelPair, dataset: SyntheticDataset, alpha: float, gamma: float, batch_size: int = 32
) -> Dict[int, NoiseDetection]:
    """Selection masks of a trained pair over the training split, scored per modality against the clean labels"""
    split = dataset.split("train")
    clean = dataset.clean_labels(split.ids)
    weights = {1: [], 2: []}
    truth, noisy = [], []
    was_training = pair.training
    pair.eval()
    for start in range(0, len(split), batch_size):
        idx = np.arange(start, min(start + batch_size, len(split)))
        batch = eval_batch(split, idx)
        P1 = pair(1, Tensor(batch.x1)).detach()
        P2 = pair(2, Tensor(batch.x2)).detach()
        W_l = selection_masks(P1, P2, batch.labels, alpha, gamma)["W_l"]
        for d in (1, 2):
            weights[d].append(W_l[d].values)
        truth.append(clean[idx])
        noisy.append(batch.labels)
    pair.train(was_training)
    truth, noisy = np.concatenate(truth), np.concatenate(noisy)
    return {d: noise_detection_report(np.concatenate(w), truth, noisy) for d, w in weights.items()}


@export
@register_experiment(name="noise_detection")
def noise_detection_study(config: ExperimentConfig, seeds: Sequence[int] = (0, 1, 2), out_dir=None) -> List[Dict]:
    """Precision and recall of `W_l < 1` as a noisy-pixel detector once the selection ramp is complete"""
    rows = []
    for seed in seeds:
        cfg = _seeded(config, seed)
        cfg = replace(cfg, scene=replace(cfg.scene, noise_kind="symmetric"))
        dataset = generate(cfg.scene)
        pair = _pretrain_arm(cfg, dataset, "cromss_midF", out_dir, mode="cromss_midF")
        alpha, gamma = schedule(cfg.train.schedule.n_s, cfg.train.schedule)
        for d, detection in detect_noise(pair, dataset, alpha, gamma).items():
            row = _detection_row(detection, seed, d, cfg.scene.noise_rate)
            rows.append(row)
            logger.info("noise detection seed %d modality %d: precision %.4f", seed, d, row["precision"])
    if out_dir is not None:
        save_rows(os.path.join(out_dir, "noise_detection.csv"), rows)
    return rows


def _detection_row(detection: NoiseDetection, seed: int, d: int, rate: float) -> Dict:
    row = {"seed": seed, "modality": d, "noise_rate": rate}
    row.update(detection._asdict())
    row["lift"] = detection.precision / rate if rate > 0 else math.nan
    return row


@export
@register_experiment(name="smoothing")
def smoothing_ablation(
    config: ExperimentConfig,
    seeds: Sequence[int] = (0, 1, 2),
    settings: Sequence[str] = tuple(SMOOTHING_SETTINGS),
    mode: str = "cromss_midF",
    out_dir=None,
) -> List[Dict]:
    """No smoothing, uniform only, spatial-temporal only and both"""
    rows = []
    for seed in seeds:
        cfg = _seeded(config, seed)
        dataset = generate(cfg.scene)
        test = dataset.clean_split("test")
        for setting in settings:
            pair = _pretrain_arm(cfg, dataset, setting, out_dir, mode=mode, smoothing=SMOOTHING_SETTINGS[setting])
            for d, report in evaluate_pair(pair, test, cfg.scene.output_classes).items():
                rows.append(_row(report, seed=seed, smoothing=setting, modality=d))
                logger.info("smoothing seed %d %s modality %d: miou %.4f", seed, setting, d, report.miou)
    if out_dir is not None:
        save_rows(os.path.join(out_dir, "smoothing_ablation.csv"), rows)
    return rows
