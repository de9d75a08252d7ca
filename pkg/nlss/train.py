"""Pretraining of a modality pair on noisy labels and transfer of one encoder to a clean task.

A pretraining step augments a batch, runs both modalities, computes the cross-modal selection
masks from the detached predictions, smooths the labels and minimizes the weighted segmentation
plus consistency loss.  Epoch-level random streams are derived from `(seed, epoch)`, so two runs
with the same configuration (including a resumed one) produce the same losses.
"""
import copy
import csv
import math
import os
import time
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from itertools import islice
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Tuple, Union
import numpy as np
from nlss.utils import (
    exporter,
    derive_seed,
    dataclass_from_dict,
    get_num_threads,
    one_hot,
    ConfigError,
    DataError,
    TrainingDiverged,
    Offsets,
)
from nlss.tensor import Tensor
from nlss.models import MiniUNetConfig, FusionSpec, ModelPair, SegmentationModel, Encoder, Decoder, build
from nlss.selection import SelectionSchedule, WeightMask, schedule, selection_masks
from nlss.smoothing import SmoothingParams, smooth
from nlss.losses import LossBreakdown, compute_losses, seg_loss
from nlss.optz import OptimizerManager
from nlss.confusion import ConfusionMatrix
from nlss.analytics import MetricsReport, evaluate_model
from nlss.data import NoisyLabelSplit, CleanSplit, augment
from nlss.serialize import save_model, load_model, save_tensor
from nlss.progress import create_progress_bar


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

MODES = ("single", "midF", "lateF", "cromss_midF", "cromss_lateF")
FUSION_OF_MODE = {
    "single": "single",
    "midF": "middle",
    "lateF": "late",
    "cromss_midF": "middle",
    "cromss_lateF": "late",
}
TERMS = ("total", "seg1", "seg2", "kl12", "kl21")


@export
@dataclass
class TrainConfig:
    """Pretraining and transfer hyper-parameters"""

    mode: str = "cromss_midF"
    modality: int = 1
    lr: float = 5e-3
    transfer_lr: float = 5e-4
    batch_size: int = 16
    eval_batch_size: int = 32
    epochs: int = 60
    transfer_epochs: int = 20
    lr_scheduler_type: str = "plateau"
    patience: int = 9
    factor: float = 0.5
    threshold: float = 1e-4
    crop_size: Optional[int] = 48
    flip_prob: float = 0.5
    rotate_prob: float = 0.2
    consistency_weight: float = 1.0
    checkpoint_every: int = 10
    prefetch: int = 2
    seed: int = 0
    schedule: SelectionSchedule = field(default_factory=SelectionSchedule)
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.modality not in (1, 2):
            raise ConfigError(f"modality must be 1 or 2, got {self.modality}")
        if isinstance(self.schedule, dict):
            self.schedule = SelectionSchedule.from_dict(**self.schedule)
        if isinstance(self.smoothing, dict):
            self.smoothing = SmoothingParams.from_dict(**self.smoothing)
        for name in ("batch_size", "eval_batch_size", "epochs", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.transfer_epochs < 0 or self.prefetch < 0:
            raise ConfigError("transfer_epochs and prefetch must be >= 0")
        if self.lr <= 0 or self.transfer_lr <= 0:
            raise ConfigError(f"learning rates must be positive, got {self.lr}, {self.transfer_lr}")
        if self.consistency_weight < 0:
            raise ConfigError(f"consistency_weight must be >= 0, got {self.consistency_weight}")
        if not (0.0 <= self.flip_prob <= 1.0 and 0.0 <= self.rotate_prob <= 1.0):
            raise ConfigError("flip_prob and rotate_prob must lie in [0, 1]")

    @property
    def fusion(self) -> FusionSpec:
        return FusionSpec(FUSION_OF_MODE[self.mode], self.modality)

    @property
    def selection(self) -> bool:
        return self.mode.startswith("cromss")

    def scheduler_kwargs(self, lr: float) -> Dict:
        return {
            "lr": lr,
            "lr_scheduler_type": self.lr_scheduler_type,
            "patience": self.patience,
            "factor": self.factor,
            "threshold": self.threshold,
        }

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, **kwargs) -> "TrainConfig":
        return dataclass_from_dict(cls, kwargs)


@export
class RunLog:
    """Append-only per-epoch record, persisted as CSV with a fixed column order"""

    COLUMNS = (
        ["epoch", "lr", "alpha", "gamma"]
        + [f"train_{t}" for t in TERMS]
        + [f"val_{t}" for t in TERMS]
        + ["val_miou1", "val_miou2", "flagged_fraction", "wall_time"]
    )
    LOSS_COLUMNS = [f"train_{t}" for t in TERMS] + [f"val_{t}" for t in TERMS]

    def __init__(self, rows: Optional[List[Dict[str, float]]] = None):
        self.rows: List[Dict[str, float]] = []
        for row in rows or []:
            self.append(**row)

    def __len__(self):
        return len(self.rows)

    def append(self, **values):
        unknown = set(values) - set(self.COLUMNS)
        if unknown:
            raise ConfigError(f"unknown run log columns {sorted(unknown)}")
        epoch = int(values.get("epoch", len(self.rows)))
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise DataError(f"run log is append-only, epoch {epoch} follows {self.rows[-1]['epoch']}")
        row = {k: float(values.get(k, math.nan)) for k in self.COLUMNS}
        row["epoch"] = epoch
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def truncate(self, last_epoch: int) -> "RunLog":
        return RunLog([row for row in self.rows if row["epoch"] <= last_epoch])

    def save(self, outfile: str):
        with open(outfile, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=self.COLUMNS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: (row[k] if k == "epoch" else repr(row[k])) for k in self.COLUMNS})

    @classmethod
    def load(cls, infile: str) -> "RunLog":
        with open(infile, newline="") as f:
            return cls([{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)])


@export
class Batch(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray
    labels: np.ndarray
    seasons: np.ndarray

    def images(self, d: int) -> np.ndarray:
        return self.x1 if d == 1 else self.x2


def _season_stack(labels: np.ndarray) -> np.ndarray:
    """Clean splits carry one map per location; repeat it for every season"""
    return labels if labels.ndim == 4 else np.repeat(labels[:, None], Offsets.NUM_SEASONS, axis=1)


@export
def make_batch(
    split: Union[NoisyLabelSplit, CleanSplit], indices: np.ndarray, rng: np.random.Generator, config: TrainConfig
) -> Batch:
    """Augment the locations at `indices`, each with its own random season, crop, flip and rotation"""
    seasons = _season_stack(split.labels)
    items = [
        augment((split.x1[i], split.x2[i], seasons[i]), rng, config.crop_size, config.flip_prob, config.rotate_prob)
        for i in indices
    ]
    return Batch(
        np.stack([a.x1 for a in items]),
        np.stack([a.x2 for a in items]),
        np.stack([a.labels[a.season] for a in items]),
        np.stack([a.labels for a in items]),
    )


@export
def eval_batch(split: Union[NoisyLabelSplit, CleanSplit], indices: np.ndarray) -> Batch:
    """Whole tiles without augmentation; location `i` is shown in season `i mod S`"""
    seasons = _season_stack(split.labels)
    season = np.asarray(indices) % seasons.shape[1]
    return Batch(
        split.x1[indices, season],
        split.x2[indices, season],
        seasons[indices, season],
        seasons[indices],
    )


@export
def prefetch(fn: Callable, jobs: Iterable, size: int) -> Iterator:
    """Map `fn` over `jobs` in order, keeping at most `size` results in flight on worker threads"""
    if size <= 0:
        yield from map(fn, jobs)
        return
    it = iter(jobs)
    with ThreadPoolExecutor(max_workers=max(1, min(size, get_num_threads()))) as pool:
        pending = deque(pool.submit(fn, job) for job in islice(it, size))
        while pending:
            future = pending.popleft()
            for job in islice(it, 1):
                pending.append(pool.submit(fn, job))
            yield future.result()


@export
def train_batches(split, config: TrainConfig, epoch: int) -> Iterator[Batch]:
    """The epoch's shuffled, augmented batches; batch b draws from the stream `(seed, epoch, b + 1)`"""
    order = derive_seed(config.seed, epoch).permutation(len(split))
    jobs = [
        (order[start : start + config.batch_size], derive_seed(config.seed, epoch, b + 1))
        for b, start in enumerate(range(0, len(order), config.batch_size))
    ]
    return prefetch(lambda job: make_batch(split, job[0], job[1], config), jobs, config.prefetch)


def num_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def _check_split(split: NoisyLabelSplit, name: str):
    if split.labels.ndim != 4 or split.labels.shape[1] != Offsets.NUM_SEASONS:
        raise DataError(f"{name} split needs {Offsets.NUM_SEASONS} seasonal label maps, got {split.labels.shape}")


def _flagged_fraction(W_l: Dict[int, WeightMask], labels: np.ndarray) -> float:
    labeled = labels != Offsets.UNLABELED
    if not labeled.any():
        return 0.0
    return float(np.mean([np.mean(W_l[d].values[labeled] < 1.0) for d in W_l]))


@export
class CoTrainer:
    """Owns a model pair and its optimizer and runs epochs of (co-)training and validation"""

    def __init__(self, pair: ModelPair, config: TrainConfig):
        if pair.fusion != config.fusion:
            raise ConfigError(f"model fusion {pair.fusion} does not match mode {config.mode}")
        self.pair = pair
        self.config = config
        self.num_classes = pair.config.num_classes
        self.optimizer = OptimizerManager(pair.named_parameters(), **config.scheduler_kwargs(config.lr))

    def losses(
        self, batch: Batch, epoch: int, training: bool = True
    ) -> Tuple[LossBreakdown, Optional[Dict], Dict[int, Tensor]]:
        """Forward every modality of the pair and assemble the weighted losses

        :param batch: The batch
        :param epoch: Selects the schedule's alpha and gamma
        :param training: Validation uses unit weights instead of selection masks
        :return: The loss breakdown, the selection masks (`None` when not selecting) and the predictions
        """
        config = self.config
        Q = {d: self.pair(d, Tensor(batch.images(d))) for d in self.pair.modalities}
        Z = smooth(one_hot(batch.labels, self.num_classes), batch.seasons, config.smoothing)
        labeled = WeightMask.ones_like(batch.labels, "label", labeled_only=True)
        if config.mode == "single":
            d = config.modality
            seg = seg_loss(Q[d], Z, labeled)
            zero = Tensor(0.0)
            parts = {1: zero, 2: zero}
            parts[d] = seg
            return LossBreakdown(seg, parts[1], parts[2], zero, zero), None, Q
        masks = None
        W_l = {1: labeled, 2: labeled}
        W_e = {1: None, 2: None}
        if training and config.selection:
            alpha, gamma = schedule(epoch, config.schedule)
            masks = selection_masks(Q[1].detach(), Q[2].detach(), batch.labels, alpha, gamma)
            W_l, W_e = masks["W_l"], masks["W_e"]
        breakdown = compute_losses(
            Q[1], Q[2], Z, W_l[1], W_l[2], W_e[1], W_e[2], consistency_weight=config.consistency_weight
        )
        return breakdown, masks, Q

    def train_step(self, batch: Batch, epoch: int, step: int) -> Tuple[Dict[str, float], Optional[Dict]]:
        breakdown, masks, _ = self.losses(batch, epoch, training=True)
        values = breakdown.values()
        if not math.isfinite(values["total"]):
            raise TrainingDiverged(f"non-finite loss {values['total']}", epoch, step)
        if breakdown.total.requires_grad:
            breakdown.total.backward()
            try:
                self.optimizer.step()
            except TrainingDiverged as e:
                raise TrainingDiverged(str(e), epoch, step)
        else:
            logger.warning("epoch %d step %d: loss does not depend on any parameter, skipping update", epoch, step)
            self.pair.zero_grad()
        return values, masks

    def train_epoch(
        self, split: NoisyLabelSplit, epoch: int, mask_dir: Optional[str] = None, show_progress: bool = False
    ) -> Dict[str, float]:
        self.pair.train()
        sums = dict.fromkeys(TERMS, 0.0)
        flagged = []
        n = num_batches(len(split), self.config.batch_size)
        pg = create_progress_bar(n, show=show_progress, prefix=f"epoch {epoch}")
        for b, batch in enumerate(train_batches(split, self.config, epoch)):
            values, masks = self.train_step(batch, epoch, self.optimizer.global_step)
            logger.debug("epoch %d batch %d %s", epoch, b, " ".join("%s=%.6f" % kv for kv in values.items()))
            for k in TERMS:
                sums[k] += values[k]
            if masks is not None:
                flagged.append(_flagged_fraction(masks["W_l"], batch.labels))
                if mask_dir is not None:
                    dump_masks(mask_dir, epoch, b, masks)
            pg.update()
        pg.done()
        means = {k: v / max(n, 1) for k, v in sums.items()}
        means["flagged_fraction"] = float(np.mean(flagged)) if flagged else 0.0
        return means

    def validate(self, split: NoisyLabelSplit, epoch: int) -> Dict[str, float]:
        """Unit-weight losses and per-modality mIoU against the noisy labels, with frozen batch statistics"""
        self.pair.eval()
        sums = dict.fromkeys(TERMS, 0.0)
        cms = {d: ConfusionMatrix(self.num_classes) for d in self.pair.modalities}
        bs = self.config.eval_batch_size
        n = num_batches(len(split), bs)
        for start in range(0, len(split), bs):
            batch = eval_batch(split, np.arange(start, min(start + bs, len(split))))
            breakdown, _, Q = self.losses(batch, epoch, training=False)
            for k, v in breakdown.values().items():
                sums[k] += v
            for d, q in Q.items():
                cms[d].add_maps(batch.labels, np.argmax(q.data, axis=1))
        self.pair.train()
        means = {k: v / max(n, 1) for k, v in sums.items()}
        for d in (1, 2):
            means[f"miou{d}"] = cms[d].get_mean_iou() if d in cms else math.nan
        return means

    def state(self, epoch: int) -> Tuple[Dict, Dict[str, np.ndarray]]:
        scalars, arrays = self.optimizer.state_dict()
        return {"epoch": epoch, "optimizer": scalars, "train": self.config.to_dict()}, arrays

    def save(self, path: str, epoch: int):
        extra, arrays = self.state(epoch)
        save_model(path, self.pair, extra=extra, extra_tensors=arrays)


@export
def dump_masks(mask_dir: str, epoch: int, batch: int, masks: Dict):
    """Write every mask of one batch as NLT1 tensors, e.g. `e059_b003_W_l1.nlt`"""
    os.makedirs(mask_dir, exist_ok=True)
    for name, per_modality in masks.items():
        for d, mask in per_modality.items():
            save_tensor(os.path.join(mask_dir, f"e{epoch:03d}_b{batch:03d}_{name}{d}.nlt"), mask.values)


def _checkpoint_dir(out_dir: str) -> str:
    path = os.path.join(out_dir, "checkpoints")
    os.makedirs(path, exist_ok=True)
    return path


def _resume(trainer: CoTrainer, out_dir: str) -> Tuple[int, RunLog]:
    path = os.path.join(out_dir, "checkpoints", "last.nlck")
    if not os.path.exists(path):
        raise ConfigError(f"cannot resume, {path} does not exist")
    model, extra, arrays = load_model(path)
    if extra.get("train", {}).get("mode") != trainer.config.mode:
        raise ConfigError(f"checkpoint was written in mode {extra.get('train', {}).get('mode')!r}")
    trainer.pair.load_state_dict(model.state_dict())
    trainer.optimizer.load_state_dict(extra["optimizer"], arrays)
    epoch = int(extra["epoch"])
    runlog_file = os.path.join(out_dir, "runlog.csv")
    runlog = RunLog.load(runlog_file).truncate(epoch) if os.path.exists(runlog_file) else RunLog()
    logger.info("resuming from %s after epoch %d", path, epoch)
    return epoch + 1, runlog


@export
def pretrain(
    train: NoisyLabelSplit,
    val: NoisyLabelSplit,
    config: TrainConfig,
    model_config: MiniUNetConfig,
    out_dir: Optional[str] = None,
    dump_masks: bool = False,
    resume: bool = False,
    show_progress: bool = False,
) -> Tuple[ModelPair, RunLog]:
    """Train a modality pair on noisy labels

    :param train: Training split with four seasonal label maps per location
    :param val: Validation split, drives the plateau scheduler (the training loss does when it is empty)
    :param config: Mode, optimizer, schedule and smoothing settings
    :param model_config: Network shape, channels must match the splits
    :param out_dir: Where `runlog.csv`, `checkpoints/` and `masks/` go, nothing is written when `None`
    :param dump_masks: Write the selection masks of the final epoch
    :param resume: Continue from `checkpoints/last.nlck` in `out_dir`
    :return: The trained pair and its run log
    """
    _check_split(train, "train")
    if len(train) == 0:
        raise DataError("the training split is empty")
    for d, x in ((1, train.x1), (2, train.x2)):
        if x.shape[2] != model_config.in_channels[d - 1]:
            raise ConfigError(f"modality {d} has {x.shape[2]} channels, the model expects {model_config.in_channels}")
    trainer = CoTrainer(build(model_config, config.fusion, config.seed), config)
    runlog = RunLog()
    start = 0
    if resume:
        if out_dir is None:
            raise ConfigError("resume needs an output directory")
        start, runlog = _resume(trainer, out_dir)
    if len(val) == 0:
        logger.warning("no validation locations, the lr scheduler follows the training loss")
    for epoch in range(start, config.epochs):
        began = time.time()
        alpha, gamma = schedule(epoch, config.schedule) if config.selection else (1.0, 0.0)
        mask_dir = None
        if dump_masks and out_dir is not None and epoch == config.epochs - 1:
            mask_dir = os.path.join(out_dir, "masks")
        lr = trainer.optimizer.current_lr
        try:
            train_stats = trainer.train_epoch(train, epoch, mask_dir, show_progress)
        except TrainingDiverged as e:
            snapshot = None
            if out_dir is not None:
                snapshot = os.path.join(_checkpoint_dir(out_dir), "diverged.nlck")
                trainer.save(snapshot, epoch)
            logger.error("training diverged at epoch %d step %d: %s (snapshot %s)", e.epoch, e.step, e, snapshot)
            raise TrainingDiverged(str(e), e.epoch, e.step, snapshot)
        val_stats = trainer.validate(val, epoch) if len(val) else dict(train_stats, miou1=math.nan, miou2=math.nan)
        trainer.optimizer.end_epoch(val_stats["total"])
        row = {"epoch": epoch, "lr": lr, "alpha": alpha, "gamma": gamma}
        row.update({f"train_{t}": train_stats[t] for t in TERMS})
        row.update({f"val_{t}": val_stats[t] for t in TERMS})
        row.update(
            val_miou1=val_stats["miou1"],
            val_miou2=val_stats["miou2"],
            flagged_fraction=train_stats["flagged_fraction"],
            wall_time=time.time() - began,
        )
        runlog.append(**row)
        logger.info(
            "epoch %d/%d lr=%g alpha=%.4f gamma=%.4f train=%.6f val=%.6f flagged=%.4f",
            epoch + 1,
            config.epochs,
            lr,
            alpha,
            gamma,
            train_stats["total"],
            val_stats["total"],
            train_stats["flagged_fraction"],
        )
        if out_dir is not None:
            ckpt = _checkpoint_dir(out_dir)
            trainer.save(os.path.join(ckpt, "last.nlck"), epoch)
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                trainer.save(os.path.join(ckpt, f"epoch_{epoch + 1:03d}.nlck"), epoch)
            runlog.save(os.path.join(out_dir, "runlog.csv"))
    return trainer.pair, runlog


EncoderSource = Union[ModelPair, SegmentationModel, Encoder, None]


@export
def extract_encoder(source: EncoderSource, d: int, model_config: Optional[MiniUNetConfig] = None, seed: int = 0):
    """A private copy of modality d's encoder, or a freshly initialized one when `source` is `None`"""
    if source is None:
        if model_config is None:
            raise ConfigError("a random encoder needs a model config")
        return Encoder(model_config.in_channels[d - 1], model_config.widths, derive_seed(seed, 99, d))
    if isinstance(source, ModelPair):
        return copy.deepcopy(source.encoder(d))
    if isinstance(source, SegmentationModel):
        return copy.deepcopy(source.encoder)
    if isinstance(source, Encoder):
        return copy.deepcopy(source)
    raise ConfigError(f"cannot take an encoder from {type(source).__name__}")


@export
def transfer(
    source: EncoderSource,
    d: int,
    train: CleanSplit,
    test: CleanSplit,
    frozen: bool,
    config: TrainConfig,
    num_classes: int,
    model_config: Optional[MiniUNetConfig] = None,
    out_dir: Optional[str] = None,
    show_progress: bool = False,
) -> Tuple[SegmentationModel, MetricsReport]:
    """Train a fresh decoder (and the encoder unless `frozen`) on a clean downstream task

    :param source: Pretrained pair / model / encoder, or `None` for the random-init baseline
    :param d: Modality whose encoder and images are used
    :param train: Clean downstream training split
    :param test: Clean downstream test split, scored after training
    :param frozen: Keep encoder parameters and batch-norm statistics fixed
    :param config: Uses `transfer_lr`, `transfer_epochs`, batch size, augmentation and seed
    :param num_classes: Downstream class count
    :param model_config: Needed only for the random baseline
    :return: The trained model and its test metrics
    """
    if len(train) == 0:
        raise DataError("the downstream training split is empty")
    encoder = extract_encoder(source, d, model_config, config.seed)
    channels = train.images(d).shape[2]
    if encoder.in_channels != channels:
        raise ConfigError(f"encoder takes {encoder.in_channels} channels, downstream modality {d} has {channels}")
    model = SegmentationModel(encoder, Decoder(encoder.widths, num_classes, derive_seed(config.seed, 100 + d)))
    params = model.decoder.named_parameters() if frozen else model.named_parameters()
    kwargs = config.scheduler_kwargs(config.transfer_lr)
    kwargs["lr_scheduler_type"] = "default"
    optimizer = OptimizerManager(params, **kwargs)
    runlog = RunLog()
    logger.info(
        "transfer: %s encoder, modality %d, %s, %d epochs",
        "random" if source is None else "pretrained",
        d,
        "frozen" if frozen else "fine-tuned",
        config.transfer_epochs,
    )
    for epoch in range(config.transfer_epochs):
        began = time.time()
        model.train()
        if frozen:
            model.encoder.eval()
        total = 0.0
        n = num_batches(len(train), config.batch_size)
        pg = create_progress_bar(n, show=show_progress, prefix=f"transfer {epoch}")
        for batch in train_batches(train, config, epoch):
            Q = model(Tensor(batch.images(d)))
            loss = seg_loss(Q, one_hot(batch.labels, num_classes))
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite transfer loss {loss.item()}", epoch, optimizer.global_step)
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
            model.zero_grad()
            total += loss.item()
            pg.update()
        pg.done()
        runlog.append(epoch=epoch, lr=optimizer.current_lr, train_total=total / n, wall_time=time.time() - began)
        logger.info("transfer epoch %d/%d seg=%.6f", epoch + 1, config.transfer_epochs, total / n)
    x, y = test.flatten(d)
    report = evaluate_model(model, x, y, num_classes)
    logger.info("transfer test: %s", ", ".join("%s=%.4f" % kv for kv in report.as_dict().items()))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(_checkpoint_dir(out_dir), "transfer.nlck"), model, extra={"frozen": frozen, "d": d})
        runlog.save(os.path.join(out_dir, "runlog.csv"))
        report.save(os.path.join(out_dir, "metrics.csv"))
    return model, report
