"""Command line interface for disreg."""
from __future__ import annotations

import argparse
import json
import logging
import warnings
from pathlib import Path

import numpy as np
import pytorch_lightning as pl
import torch
from pytorch_lightning.callbacks import ModelCheckpoint
from pytorch_lightning.loggers import CSVLogger
from tabulate import tabulate

import disreg
from disreg.config import ConfigError, RunConfig, load_config
from disreg.data.group import (
    GroupDataLoader,
    GroupDataset,
    GroupFormatError,
    ImageGroup,
    MissingGroupFileError,
    load_group,
    load_manifest,
    save_group,
    split_paths,
)
from disreg.data.phantom import generate_dataset
from disreg.data.transformer import minmax_normalize
from disreg.diffeo import TransformField, jacobian_determinant, warp, warp_labels
from disreg.metrics import EvalReport, GroupMetrics, evaluate_group, paired_permutation_test
from disreg.models import MODEL_REGISTRY, GroupwiseVAE, ResUNet
from disreg.utils.training import APELightningModule, EpochLogWriter, GroupwiseVAELightningModule

warnings.filterwarnings("ignore", ".*does not have many workers.*")
logger = logging.getLogger("DREG")

MODEL_FILE = "model.dreg"
TRAINING_LOG = "training_log.jsonl"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4


def _resolve_config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
    if getattr(args, "device", None) is not None:
        overrides["train.device"] = args.device
    return load_config(args.config, **overrides)


def generate(args):
    """
    Generate a synthetic dataset.

    Args:
        args: Args from CLI.
    """
    config = _resolve_config(args)
    manifest = generate_dataset(config, args.out, force=args.force)
    print(f"{len(manifest['groups'])} groups written to {args.out}.")
    return EXIT_OK


def _check_dataset(config: RunConfig, dataset: str | Path) -> dict:
    manifest = load_manifest(dataset)
    size = tuple(manifest["image_size"])
    if size != tuple(config.model.image_size) or manifest["num_modalities"] != config.model.num_modalities:
        raise ConfigError(
            f"Dataset {dataset} holds {manifest['num_modalities']} modalities of size {size}, but the model is "
            f"configured for {config.model.num_modalities} modalities of size {tuple(config.model.image_size)}"
        )
    return manifest


def _build_module(config: RunConfig, arch: str) -> pl.LightningModule:
    train = config.train
    if arch == "proposed":
        model = GroupwiseVAE.from_config(config.model)
        return GroupwiseVAELightningModule(
            model,
            lambda_v=config.loss.lambda_v,
            beta_z=config.loss.beta_z,
            sigma_x2=config.loss.sigma_x2,
            beta_warmup_epochs=config.loss.beta_warmup_epochs,
            lr=train.lr,
            betas=(train.beta1, train.beta2),
        )
    baseline = config.baseline
    model = ResUNet(
        num_modalities=config.model.num_modalities,
        image_size=config.model.image_size,
        base_channels=baseline.base_channels,
        num_levels=baseline.num_levels,
        max_channels=baseline.max_channels,
        integration_steps=config.model.integration_steps,
        bn_momentum=config.model.bn_momentum,
        negative_slope=config.model.negative_slope,
    )
    return APELightningModule(
        model,
        lambda_v=config.loss.lambda_v,
        num_bins=baseline.num_bins,
        kernel_sigma=baseline.kernel_sigma,
        lr=train.lr,
        betas=(train.beta1, train.beta2),
    )


def train_model(
    config: RunConfig,
    dataset: str | Path,
    out: str | Path,
    arch: str = "proposed",
    resume: str | None = None,
    verbose: bool = False,
) -> Path:
    """Train one model and write its archive.

    Args:
        config: Run configuration.
        dataset: Dataset directory with train and val splits.
        out: Run directory receiving checkpoints, logs and the model archive.
        arch: Key of MODEL_REGISTRY.
        resume: Lightning checkpoint to resume from.
        verbose: Show the progress bar.

    Returns:
        Path of the model archive.
    """
    _check_dataset(config, dataset)
    out = Path(out)
    pl.seed_everything(config.train.seed, workers=True)

    train_data = GroupDataset.from_split(dataset, "train")
    val_data = GroupDataset.from_split(dataset, "val")
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError(f"Dataset {dataset} needs nonempty train and val splits")
    train_loader, val_loader = GroupDataLoader(
        train_data,
        val_data,
        batch_size=config.train.batch_size,
        num_workers=config.train.num_workers,
        generator=torch.Generator().manual_seed(config.train.seed),
    )

    module = _build_module(config, arch)
    has_masks = val_data.groups[0].masks is not None
    checkpoint = ModelCheckpoint(
        dirpath=out / "checkpoints",
        monitor="val_Dice" if has_masks else "val_Total_Loss",
        mode="max" if has_masks else "min",
        save_last=True,
    )
    on_cpu = config.train.device == "cpu"
    trainer = pl.Trainer(
        max_epochs=config.train.epochs,
        accelerator="cpu" if on_cpu else "gpu",
        devices=1,
        deterministic=True if on_cpu and config.train.deterministic else "warn",
        logger=CSVLogger(out, name="logs"),
        callbacks=[checkpoint, EpochLogWriter(out / TRAINING_LOG)],
        enable_progress_bar=verbose,
    )
    logger.info(f"Training {arch} model for {config.train.epochs} epochs on {len(train_data)} groups")
    trainer.fit(module, train_loader, val_loader, ckpt_path=resume)

    best = checkpoint.best_model_path or checkpoint.last_model_path
    if best:
        logger.info(f"Best checkpoint: {best}")
        module = type(module).load_from_checkpoint(best, model=module.model, map_location="cpu")
    metadata = {"config": config.to_dict(), "arch": arch, "best_checkpoint": best, "epochs": trainer.current_epoch}
    return module.model.cpu().save(out / MODEL_FILE, metadata=metadata)  # type: ignore


def train(args):
    """
    Train a registration model on a generated dataset.

    Args:
        args: Args from CLI.
    """
    config = _resolve_config(args)
    path = train_model(config, args.dataset, args.out, args.arch, resume=args.resume, verbose=args.verbose)
    print(f"Model written to {path}.")
    return EXIT_OK


def register_group(model, group: ImageGroup, device: str = "cpu") -> list[TransformField]:
    """Posterior-mean transforms of one group.

    Args:
        model: GroupwiseVAE or ResUNet.
        group: ImageGroup.
        device: Torch device.

    Returns:
        Forward transforms per modality, on cpu.
    """
    if group.num_modalities != model.num_modalities:
        raise ConfigError(
            f"Model expects {model.num_modalities} modalities but group {group.group_id} has {group.num_modalities}"
        )
    if tuple(group.shape) != tuple(model.image_size):
        raise ConfigError(
            f"Model expects images of size {tuple(model.image_size)} but group {group.group_id} has {group.shape}"
        )
    x = torch.from_numpy(np.stack([minmax_normalize(im) for im in group.images]))[None].to(device)
    model.eval()
    with torch.no_grad():
        transforms = model.register(x)
    return [TransformField(t.displacement.cpu()) for t in transforms]


def save_registration(group: ImageGroup, transforms: list[TransformField], out: str | Path, arch: str) -> Path:
    """Write a registered group: warped images and masks, estimated transforms (gt_ files) and Jacobian maps."""
    images = np.stack([warp(torch.from_numpy(im), t).numpy() for im, t in zip(group.images, transforms)])
    masks = None
    if group.masks is not None:
        masks = np.stack(
            [warp_labels(torch.from_numpy(m.astype(np.int64)), t).numpy() for m, t in zip(group.masks, transforms)]
        )
    registered = ImageGroup(
        images=images,
        modality_ids=group.modality_ids,
        masks=masks,
        gt_displacements=np.stack([t.displacement[0].numpy() for t in transforms]),
        pixel_spacing_mm=group.pixel_spacing_mm,
        group_id=group.group_id,
        distortion_degree=group.distortion_degree,
    )
    out = save_group(registered, out)
    jac_files = []
    for mid, t in zip(group.modality_ids, transforms):
        name = f"jac_{mid}.f32"
        jacobian_determinant(t)[0].numpy().astype("<f4").tofile(out / name)
        jac_files.append(name)
    with open(out / "group.json") as f:
        header = json.load(f)
    header["files"]["jacobian"] = jac_files
    header["arch"] = arch
    with open(out / "group.json", "w") as f:
        json.dump(header, f, indent=2)
    return out


def register(args):
    """
    Register groups with a trained model.

    Args:
        args: Args from CLI.
    """
    model = disreg.load_model(args.model)
    device = "cuda" if args.device == "gpu" else "cpu"
    model.to(device)
    if args.group:
        paths = [Path(p) for p in args.group]
    elif args.dataset:
        paths = split_paths(args.dataset, args.split)
    else:
        raise ConfigError("Give group directories with --group or a dataset with --dataset")
    out = Path(args.out)
    for path in paths:
        group = load_group(path)
        transforms = register_group(model, group, device)
        target = save_registration(group, transforms, out / group.group_id, model.arch)
        logger.info(f"Registered {group.group_id} -> {target}")
    print(f"{len(paths)} registered groups written to {out}.")
    return EXIT_OK


def _load_estimates(registered: Path, groups: list[ImageGroup]) -> list[list[TransformField]]:
    missing = [g.group_id for g in groups if not (registered / g.group_id / "group.json").is_file()]
    if missing:
        raise MissingGroupFileError(f"No registration outputs in {registered} for groups: {', '.join(missing)}")
    estimates = []
    for g in groups:
        reg = load_group(registered / g.group_id)
        if reg.gt_distortions is None:
            raise MissingGroupFileError(f"Registration output of {g.group_id} has no estimated transforms")
        estimates.append(reg.gt_distortions)
    return estimates


def _evaluate(dataset: str, split: str, registered: dict[str, str], classes) -> list[EvalReport]:
    groups = [load_group(p) for p in split_paths(dataset, split)]
    if not groups:
        raise MissingGroupFileError(f"Split {split!r} of {dataset} is empty")
    metadata = {"dataset": str(dataset), "split": split}
    reports = [EvalReport.from_groups("None", [evaluate_group(g, None, classes) for g in groups], metadata)]
    for method, path in registered.items():
        estimates = _load_estimates(Path(path), groups)
        rows = [evaluate_group(g, est, classes) for g, est in zip(groups, estimates)]
        reports.append(EvalReport.from_groups(method, rows, metadata))
        logger.info(f"Evaluated {method} on {len(rows)} groups")
    return reports


def _fmt(mean, std, digits=3) -> str:
    return "-" if mean is None else f"{mean:.{digits}f} ± {std:.{digits}f}"


def _table(reports: list[EvalReport]) -> str:
    rows = [
        [
            r.method,
            _fmt(r.gwi_mm, r.gwi_std),
            _fmt(r.mean_pairwise_dice, r.dice_std),
            f"{r.jacobian_positive_fraction:.4f}",
        ]
        for r in reports
    ]
    return tabulate(rows, headers=["Method", "gWI (mm)", "DSC", "|J|>0"], tablefmt="github")


def _write_reports(path: str | None, config: RunConfig, reports: list[EvalReport], extra: dict | None = None):
    if path is None:
        return
    doc = {"config": config.to_dict(), "reports": [r.to_dict() for r in reports], **(extra or {})}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
    logger.info(f"Report written to {path}")


def evaluate(args):
    """
    Evaluate registration outputs against ground truth, alongside the unregistered groups.

    Args:
        args: Args from CLI.
    """
    config = _resolve_config(args)
    split = args.split or config.eval.split
    registered = {args.method: args.registered} if args.registered else {}
    reports = _evaluate(args.dataset, split, registered, config.eval.classes)
    _write_reports(args.report, config, reports)
    print(_table(reports))
    return EXIT_OK


def compare(args):
    """
    Evaluate proposed and APE outputs on the same split and print a comparison table.

    Args:
        args: Args from CLI.
    """
    config = _resolve_config(args)
    split = args.split or config.eval.split
    reports = _evaluate(args.dataset, split, {"proposed": args.proposed, "ape": args.ape}, config.eval.classes)
    proposed, ape = reports[1], reports[2]
    p_dice = paired_permutation_test(
        [g.mean_pairwise_dice for g in proposed.groups], [g.mean_pairwise_dice for g in ape.groups]
    )
    _write_reports(args.report, config, reports, {"dice_permutation_p_value": p_dice})
    print(_table(reports))
    print(f"Paired permutation test on DSC (proposed vs ape): p = {p_dice:.4f}")
    return EXIT_OK


def _paired_tests(a: EvalReport, b: EvalReport) -> dict[str, float]:
    tests = {}
    for key in ("gwi_mm", "mean_pairwise_dice"):
        va, vb = [getattr(g, key) for g in a.groups], [getattr(g, key) for g in b.groups]
        if None not in va and None not in vb:
            tests[key] = paired_permutation_test(va, vb)
    return tests


def run_experiment(
    config: RunConfig,
    dataset: str | Path,
    out: str | Path,
    seeds: list[int],
    levels: list[int] | None = None,
    split: str = "test",
    verbose: bool = False,
) -> dict:
    """Train the proposed model at several hierarchy depths and the APE baseline for several seeds.

    Every trained model registers the same split, so rows of different methods pair up by (seed, group) for the
    permutation tests.

    Args:
        config: Base run configuration. Each run overrides train.seed and, for the proposed model, model.num_levels.
        dataset: Dataset directory.
        out: Experiment directory; run r of seed s goes to out/r/seed_s.
        seeds: Training seeds.
        levels: Hierarchy depths of the proposed model. Defaults to the configured depth and the one below it.
        split: Split registered by every model.
        verbose: Show progress bars.

    Returns:
        {"reports": list of EvalReport, "permutation_p_values": {comparison: {metric: p}}}.
    """
    if not seeds:
        raise ConfigError("An experiment needs at least one seed")
    depth = config.model.num_levels
    levels = sorted(set(levels or ([depth - 1, depth] if depth > 2 else [depth])))
    groups = [load_group(p) for p in split_paths(dataset, split)]
    if not groups:
        raise MissingGroupFileError(f"Split {split!r} of {dataset} is empty")
    classes = config.eval.classes
    runs = [(f"proposed_L{n}", "proposed", {"model.num_levels": n}) for n in levels] + [("ape", "ape", {})]
    rows: dict[str, list[GroupMetrics]] = {name: [] for name, _, _ in runs}
    for seed in seeds:
        for name, arch, overrides in runs:
            run_config = config.with_overrides(**{"train.seed": seed, **overrides})
            path = train_model(run_config, dataset, Path(out) / name / f"seed_{seed}", arch, verbose=verbose)
            model = disreg.load_model(path)
            rows[name].extend(evaluate_group(g, register_group(model, g), classes) for g in groups)
            logger.info(f"Evaluated {name} trained with seed {seed} on {len(groups)} groups")

    metadata = {"dataset": str(dataset), "split": split, "seeds": list(seeds)}
    reports = [EvalReport.from_groups("None", [evaluate_group(g, None, classes) for g in groups], metadata)]
    reports += [EvalReport.from_groups(name, rows[name], metadata) for name, _, _ in runs]
    by_method = {r.method: r for r in reports}
    deepest, shallowest = f"proposed_L{levels[-1]}", f"proposed_L{levels[0]}"
    p_values = {f"{deepest} vs ape": _paired_tests(by_method[deepest], by_method["ape"])}
    if len(levels) > 1:
        p_values[f"{deepest} vs {shallowest}"] = _paired_tests(by_method[deepest], by_method[shallowest])
    return {"reports": reports, "permutation_p_values": p_values}


def experiment(args):
    """
    Train proposed models of several depths and the APE baseline over several seeds, then compare them.

    Args:
        args: Args from CLI.
    """
    config = _resolve_config(args)
    split = args.split or config.eval.split
    result = run_experiment(config, args.dataset, args.out, args.seeds, args.levels, split, args.verbose)
    report = args.report or str(Path(args.out) / "experiment.json")
    _write_reports(report, config, result["reports"], {"permutation_p_values": result["permutation_p_values"]})
    print(_table(result["reports"]))
    for comparison, tests in result["permutation_p_values"].items():
        print(f"Paired permutation test ({comparison}): " + ", ".join(f"{k} p = {p:.4f}" for k, p in tests.items()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    """Handle main."""
    parser = argparse.ArgumentParser(
        description="""
    This script works based on several sub-commands with their own options. To see the options for the
    sub-commands, type "dreg sub-command -h".""",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", dest="config", default=None, help="YAML run configuration.")
    common.add_argument("--seed", dest="seed", type=int, default=None, help="Override train.seed.")
    common.add_argument("--device", dest="device", choices=["cpu", "gpu"], default=None, help="Override train.device.")
    common.add_argument("-v", "--verbose", dest="verbose", default=False, action="store_true", help="Verbose output.")

    subparsers = parser.add_subparsers()

    p_gen = subparsers.add_parser("generate", parents=[common], help="Generate a synthetic dataset.")
    p_gen.add_argument("-o", "--out", dest="out", required=True, help="Dataset directory.")
    p_gen.add_argument("--force", dest="force", action="store_true", help="Overwrite a non-empty directory.")
    p_gen.set_defaults(func=generate)

    p_train = subparsers.add_parser("train", parents=[common], help="Train a registration model.")
    p_train.add_argument("-d", "--dataset", dest="dataset", required=True, help="Dataset directory.")
    p_train.add_argument("-o", "--out", dest="out", required=True, help="Run directory.")
    p_train.add_argument("--arch", dest="arch", choices=sorted(MODEL_REGISTRY), default="proposed", help="Model type.")
    p_train.add_argument("--resume", dest="resume", default=None, help="Lightning checkpoint to resume from.")
    p_train.set_defaults(func=train)

    p_reg = subparsers.add_parser("register", parents=[common], help="Register groups with a trained model.")
    p_reg.add_argument("-m", "--model", dest="model", required=True, help="Model archive written by train.")
    p_reg.add_argument("-g", "--group", dest="group", nargs="+", help="Group directories.")
    p_reg.add_argument("-d", "--dataset", dest="dataset", help="Dataset directory.")
    p_reg.add_argument("--split", dest="split", default="test", help="Split registered with --dataset.")
    p_reg.add_argument("-o", "--out", dest="out", required=True, help="Output directory.")
    p_reg.set_defaults(func=register)

    p_eval = subparsers.add_parser("evaluate", parents=[common], help="Evaluate registration outputs.")
    p_eval.add_argument("-d", "--dataset", dest="dataset", required=True, help="Dataset directory.")
    p_eval.add_argument("--split", dest="split", default=None, help="Split to evaluate. Defaults to eval.split.")
    p_eval.add_argument("-r", "--registered", dest="registered", default=None, help="Output directory of register.")
    p_eval.add_argument("--method", dest="method", default="proposed", help="Row name of the registered outputs.")
    p_eval.add_argument("--report", dest="report", default=None, help="JSON report path.")
    p_eval.set_defaults(func=evaluate)

    p_cmp = subparsers.add_parser("compare", parents=[common], help="Compare proposed and APE outputs.")
    p_cmp.add_argument("-d", "--dataset", dest="dataset", required=True, help="Dataset directory.")
    p_cmp.add_argument("--split", dest="split", default=None, help="Split to evaluate. Defaults to eval.split.")
    p_cmp.add_argument("--proposed", dest="proposed", required=True, help="Registered outputs of the proposed model.")
    p_cmp.add_argument("--ape", dest="ape", required=True, help="Registered outputs of the APE baseline.")
    p_cmp.add_argument("--report", dest="report", default=None, help="JSON report path.")
    p_cmp.set_defaults(func=compare)

    p_exp = subparsers.add_parser(
        "experiment", parents=[common], help="Train and compare model depths and the APE baseline over seeds."
    )
    p_exp.add_argument("-d", "--dataset", dest="dataset", required=True, help="Dataset directory.")
    p_exp.add_argument("-o", "--out", dest="out", required=True, help="Experiment directory.")
    p_exp.add_argument("--seeds", dest="seeds", type=int, nargs="+", default=[0, 1, 2], help="Training seeds.")
    p_exp.add_argument("--levels", dest="levels", type=int, nargs="+", default=None, help="Depths L to compare.")
    p_exp.add_argument("--split", dest="split", default=None, help="Split to evaluate. Defaults to eval.split.")
    p_exp.add_argument("--report", dest="report", default=None, help="JSON report path.")
    p_exp.set_defaults(func=experiment)

    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_CONFIG
    if args.verbose:
        logging.basicConfig(level=logging.INFO)

    try:
        return args.func(args)
    except ConfigError as err:
        logger.error(f"Configuration error: {err}")
        return EXIT_CONFIG
    except GroupFormatError as err:
        logger.error(f"Data error ({err.code}): {err}")
        return EXIT_DATA
    except Exception as err:
        logger.error(f"{type(err).__name__}: {err}")
        return EXIT_RUNTIME
