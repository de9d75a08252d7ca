"""`nlss` command line: generate, pretrain, transfer, evaluate, analyze and selftest.

Exit status is 0 on success, 1 when a command fails on bad data or configuration and 2 on usage errors.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional
import numpy as np
from nlss.utils import get_logging_level, str2bool, NLSSError, ConfigError
from nlss.version import __version__
from nlss.config import ExperimentConfig
from nlss.data import generate, load_dataset, save_dataset
from nlss.models import ModelPair, predict
from nlss.serialize import load_model
from nlss.confusion import ConfusionMatrix
from nlss.analytics import (
    report_from_confusion,
    weight_kl,
    bn_statistics_kl,
    kl_display,
    moving_average,
    stage_pca,
    save_curve,
)
from nlss.train import MODES, RunLog, pretrain, transfer
from nlss.experiments import NLSS_EXPERIMENTS, create_experiment
from nlss.oracles import run_oracles


logger = logging.getLogger("nlss")

COMMANDS = ("generate", "pretrain", "transfer", "evaluate", "analyze", "selftest")


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlss", description="Cross-modal noisy-label segmentation pretraining on synthetic scenes"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", help="Experiment config: key = value file with [sections], or .yml/.json")
    parser.add_argument("--seed", type=int, help="Override the scene and training seed")
    parser.add_argument("--out", help="Output directory (default: [output] dir)")
    parser.add_argument("--mode", choices=MODES, help="Pretraining mode")
    parser.add_argument("--modality", type=int, choices=(1, 2), help="Modality to transfer, evaluate or analyze")
    parser.add_argument("--frozen", type=str2bool, default=True, help="Keep the transferred encoder fixed")
    parser.add_argument("--dump-masks", type=str2bool, default=False, help="Write the final epoch's selection masks")
    parser.add_argument("--data", help="Dataset directory (default: [output] data)")
    parser.add_argument("--checkpoint", help="Model checkpoint, or `random` for a randomly initialized encoder")
    parser.add_argument("--compare", help="Second checkpoint for weight and batch-norm statistics KL")
    parser.add_argument("--split", default="test", choices=("train", "val", "test"), help="Split to evaluate")
    parser.add_argument("--experiment", choices=sorted(NLSS_EXPERIMENTS), help="Ablation to run under `analyze`")
    parser.add_argument("--seeds", default="0,1,2", help="Comma separated seeds for `--experiment`")
    parser.add_argument("--force", action="store_true", help="Overwrite an existing dataset")
    parser.add_argument("--resume", action="store_true", help="Continue pretraining from checkpoints/last.nlck")
    parser.add_argument("--progress", type=str2bool, default=True, help="Show progress bars on a terminal")
    parser.add_argument("--log-level", default="info", help="Logging level")
    return parser


def _config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    return config.with_overrides(seed=args.seed, mode=args.mode, out=args.out)


def _with_data(config: ExperimentConfig, data_dir: str):
    """Load a dataset and let its scene replace the configured one"""
    dataset = load_dataset(data_dir)
    return replace(config, scene=dataset.spec), dataset


def _load(path: Optional[str]):
    if path is None:
        raise ConfigError("this command needs --checkpoint")
    model, _, _ = load_model(path)
    return model


def cmd_generate(args, config: ExperimentConfig) -> int:
    out = config.output.dir
    data_dir = args.data or config.output.data_dir
    targets = [(config.scene, data_dir), (config.downstream, config.output.downstream_dir)]
    for _, path in targets:
        if os.path.exists(os.path.join(path, "manifest.txt")) and not args.force:
            logger.warning("%s already holds a dataset, pass --force to overwrite it", path)
            return 1
    for scene, path in targets:
        save_dataset(generate(scene), path, force=args.force)
    config.write_resolved(out)
    return 0


def cmd_pretrain(args, config: ExperimentConfig) -> int:
    out = config.output.dir
    config, dataset = _with_data(config, args.data or config.output.data_dir)
    config.write_resolved(out)
    pretrain(
        dataset.split("train"),
        dataset.split("val"),
        config.train,
        config.model_config(),
        out_dir=out,
        dump_masks=args.dump_masks,
        resume=args.resume,
        show_progress=args.progress,
    )
    return 0


def cmd_transfer(args, config: ExperimentConfig) -> int:
    out = config.output.dir
    downstream = load_dataset(args.data or config.output.downstream_dir)
    config = replace(config, downstream=downstream.spec)
    config.write_resolved(out)
    source = None if args.checkpoint == "random" else _load(args.checkpoint)
    d = args.modality or config.train.modality
    _, report = transfer(
        source,
        d,
        downstream.clean_split("train"),
        downstream.clean_split("test"),
        args.frozen,
        config.train,
        downstream.spec.output_classes,
        model_config=config.model_config(),
        out_dir=out,
        show_progress=args.progress,
    )
    print(" ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return 0


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    out = config.output.dir
    config, dataset = _with_data(config, args.data or config.output.data_dir)
    config.write_resolved(out)
    model = _load(args.checkpoint)
    split = dataset.clean_split(args.split)
    num_classes = dataset.spec.output_classes
    modalities = [args.modality] if args.modality else (model.modalities if isinstance(model, ModelPair) else [1])
    for d in modalities:
        x, y = split.flatten(d)
        pred = predict(model, x, d if isinstance(model, ModelPair) else None)
        cm = ConfusionMatrix(num_classes)
        cm.add_maps(y, pred)
        report = report_from_confusion(cm)
        suffix = "" if len(modalities) == 1 else f"_modality{d}"
        report.save(os.path.join(out, f"metrics{suffix}.csv"))
        cm.save(os.path.join(out, f"confusion{suffix}.csv"))
        print(f"modality {d}: " + " ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    return 0


def _analyze_experiment(args, config: ExperimentConfig) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma separated integers, got {args.seeds!r}")
    out = os.path.join(config.output.dir, args.experiment)
    os.makedirs(out, exist_ok=True)
    config.write_resolved(out)
    create_experiment(args.experiment)(config, seeds=seeds, out_dir=out)
    return 0


def cmd_analyze(args, config: ExperimentConfig) -> int:
    if args.experiment:
        return _analyze_experiment(args, config)
    out = config.output.dir
    os.makedirs(out, exist_ok=True)
    model = _load(args.checkpoint)
    if not isinstance(model, ModelPair):
        raise ConfigError("analyze needs a pretrained pair checkpoint")
    runlog_file = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(args.checkpoint))), "runlog.csv")
    if os.path.exists(runlog_file):
        runlog = RunLog.load(runlog_file)
        for column in ("train_total", "val_total", "train_kl12", "train_kl21"):
            save_curve(
                os.path.join(out, f"curve_{column}.csv"),
                "epoch",
                column,
                runlog.column("epoch").astype(int),
                moving_average(runlog.column(column)),
            )
    config, dataset = _with_data(config, args.data or config.output.data_dir)
    split = dataset.clean_split(args.split)
    for d in [args.modality] if args.modality else model.modalities:
        x = split.images(d)[:, 0][:8]
        for k, curve in enumerate(stage_pca(model, d, x)):
            outfile = os.path.join(out, f"pca_modality{d}_stage{k}.csv")
            save_curve(outfile, "components", "variance", np.arange(1, len(curve.values) + 1), curve.values)
    if args.compare:
        other = _load(args.compare)
        for d in model.modalities:
            other_model = other.segmentation_model(d) if isinstance(other, ModelPair) else other
            kls = weight_kl(model.segmentation_model(d), other_model)
            save_curve(os.path.join(out, f"weight_kl_modality{d}.csv"), "layer", "kl", list(kls), list(kls.values()))
            save_curve(
                os.path.join(out, f"weight_kl_display_modality{d}.csv"),
                "layer",
                "display",
                list(kls),
                [kl_display(v) for v in kls.values()],
            )
            if isinstance(other, ModelPair) and d in other.modalities:
                stats = bn_statistics_kl(model.bn_stats(d), other.bn_stats(d))
                for part in ("mean", "std"):
                    outfile = os.path.join(out, f"bn_{part}_kl_modality{d}.csv")
                    save_curve(outfile, "layer", "kl", list(stats), [kl[part] for kl in stats.values()])
    return 0


def cmd_selftest(args, config: ExperimentConfig) -> int:
    results = run_oracles()
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
    "selftest": cmd_selftest,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code is None else int(e.code)
    logging.basicConfig(
        level=get_logging_level(args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        config = ExperimentConfig() if args.command == "selftest" else _config(args)
        return HANDLERS[args.command](args, config)
    except NLSSError as e:
        logger.error("%s failed: %s: %s", args.command, type(e).__name__, e)
        return 1
    except OSError as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
