"""Command-line entry points: pretrain, search, retrain, architecture files, sweeps."""

import argparse
import logging
from pathlib import Path
import sys
from typing import List, Optional

import peftscout
from .backbone import Backbone, build_backbone, pretrain_backbone
from .data_io.checkpoint import load_backbone, save_backbone
from .data_io.export import emit_trace, write_summary
from .data_io.tasks import generate_task
from .interfacer import (
    RunConfig,
    apply_overrides,
    export_architecture,
    import_architecture,
    load_config,
)
from .plots import plot_trace
from .search import SEARCH_MODES, retrain, run_search
from .sweep import SweepRunner

logger = logging.getLogger(__name__)

LOG_LEVELS = {0: logging.WARNING, 1: logging.INFO}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one sub-parser per command."""
    parser = argparse.ArgumentParser(
        prog="peftscout",
        description="Budget-guided search of parameter-efficient fine-tuning architectures.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(cmd: argparse.ArgumentParser, backbone: bool = True) -> None:
        cmd.add_argument("--config", type=Path, help="TOML or YAML run configuration")
        cmd.add_argument("--seed", type=int, help="Override the search seed")
        cmd.add_argument("--out", type=Path, help="Override the output directory")
        if backbone:
            cmd.add_argument("--backbone", type=Path, help="Pretrained backbone checkpoint")

    def search_flags(cmd: argparse.ArgumentParser) -> None:
        cmd.add_argument("--mode", choices=SEARCH_MODES, help="Search mode")
        cmd.add_argument(
            "--budget-ratio", type=float, help="Budget as fraction of the backbone"
        )

    common(sub.add_parser("pretrain", help="Pretrain a backbone and save it"), False)

    cmd = sub.add_parser("search", help="Pretrain, search, re-train, and write artifacts")
    common(cmd)
    search_flags(cmd)

    cmd = sub.add_parser("export-arch", help="Search and write the architecture only")
    common(cmd)
    search_flags(cmd)

    cmd = sub.add_parser("retrain", help="Re-train an architecture file")
    common(cmd)
    cmd.add_argument("--arch", type=Path, required=True, help="Architecture file")

    cmd = sub.add_parser("import-arch", help="Validate and summarize an architecture file")
    cmd.add_argument("--arch", type=Path, required=True, help="Architecture file")

    cmd = sub.add_parser("sweep", help="Search over the configured hyperparameter grid")
    common(cmd)
    cmd.add_argument("--mode", choices=SEARCH_MODES, help="Search mode")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line interface.

    :param argv: Arguments without the program name; ``sys.argv[1:]`` if None.

    :return: Exit status: 0 on success, 2 on configuration errors, 1 on file errors.
    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=LOG_LEVELS.get(peftscout.VERBOSITY, logging.DEBUG),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return COMMANDS[args.command](args)
    except ValueError as err:  # includes pydantic's ValidationError
        print(f"peftscout: configuration error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"peftscout: file error: {err}", file=sys.stderr)
        return 1


# COMMANDS #


def cmd_pretrain(args: argparse.Namespace) -> int:
    """Pretrain a backbone and write its checkpoint."""
    cfg = _config(args)
    backbone = _pretrained(cfg)
    out = Path(cfg.output.directory)
    fname = save_backbone(backbone, out / "backbone.json")
    if backbone.pretrain_loss is not None:
        print(f"pretrain loss: {backbone.pretrain_loss:.4f}")
    print(f"backbone written to {fname}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    """Pretrain (or load), search, re-train, and write all artifacts of a run."""
    cfg = _config(args)
    out = Path(cfg.output.directory)
    backbone = _backbone(cfg, args.backbone)
    data = generate_task(cfg.task_spec())
    logger.info("search run %s, artifacts go to %s", cfg.content_hash()[:12], out)

    arch, trace = run_search(
        backbone,
        cfg.space_config(),
        data,
        cfg.budget_config(),
        provenance={"config_hash": cfg.content_hash()},
    )
    export_architecture(arch, out / "architecture.json")
    emit_trace(trace, out)
    plot_trace(trace, trace.budget, out / "trace.png")

    metrics = _retrain(cfg, arch, backbone, data)
    ratio = arch.total_params / backbone.param_count
    summary = {
        "config_hash": cfg.content_hash(),
        "mode": cfg.budget.mode,
        "seed": cfg.budget.seed,
        "budget": trace.budget,
        "backbone_params": backbone.param_count,
        "total_params": arch.total_params,
        "param_ratio": ratio,
        "kept_sites": [entry.name for entry in arch.kept_entries],
        "triggers": len(trace.triggers),
        "projection_removed": list(trace.projection_removed),
        "warnings": list(trace.warnings),
        "retrain": metrics.to_dict(),
    }
    write_summary(summary, out / "summary.json")

    print(f"param ratio: {ratio:.6f} ({ratio * 1e4:.2f} per ten thousand)")
    print(f"test accuracy: {metrics.test_accuracy:.4f}")
    # wall-clock times are printed, never written
    print(f"search time: {trace.search_seconds:.2f} s, retrain time: {metrics.seconds:.2f} s")
    return 0


def cmd_export_arch(args: argparse.Namespace) -> int:
    """Search and write the architecture file, without re-training."""
    cfg = _config(args)
    out = Path(cfg.output.directory)
    backbone = _backbone(cfg, args.backbone)
    arch, _ = run_search(
        backbone,
        cfg.space_config(),
        generate_task(cfg.task_spec()),
        cfg.budget_config(),
        provenance={"config_hash": cfg.content_hash()},
    )
    fname = export_architecture(arch, out / "architecture.json")
    print(f"architecture with {arch.total_params} parameters written to {fname}")
    return 0


def cmd_retrain(args: argparse.Namespace) -> int:
    """Re-train an architecture file on the configured task."""
    cfg = _config(args)
    out = Path(cfg.output.directory)
    arch = import_architecture(args.arch)
    backbone = _backbone(cfg, args.backbone)
    metrics = _retrain(cfg, arch, backbone, generate_task(cfg.task_spec()))
    summary = {
        "architecture_provenance": dict(arch.provenance),
        "config_hash": cfg.content_hash(),
        "total_params": arch.total_params,
        "param_ratio": arch.total_params / backbone.param_count,
        "retrain": metrics.to_dict(),
    }
    write_summary(summary, out / "retrain_summary.json")
    print(f"test accuracy: {metrics.test_accuracy:.4f}")
    return 0


def cmd_import_arch(args: argparse.Namespace) -> int:
    """Validate an architecture file and print what it keeps."""
    arch = import_architecture(args.arch)
    print(f"{len(arch.kept_entries)} of {arch.num_sites} sites kept")
    for entry in arch.kept_entries:
        print(f"  {entry.name}: dim {entry.dim}, {entry.param_count} parameters")
    print(f"total parameters: {arch.total_params}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run the hyperparameter grid and write the sweep tables."""
    cfg = _config(args)
    backbone = _backbone(cfg, args.backbone)
    runner = SweepRunner(cfg, backbone)
    runner.run()
    fcsv, _ = runner.write(cfg.output.directory)
    if cfg.sweep.random_baselines > 0:
        gap = runner.accuracy_gap()
        print(
            f"median test accuracy: searched {gap['searched']:.4f}, "
            f"random {gap['random']:.4f}, gap {gap['gap']:+.4f}"
        )
    print(f"{len(runner.rows)} rows written to {fcsv}")
    return 0


COMMANDS = {
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "export-arch": cmd_export_arch,
    "retrain": cmd_retrain,
    "import-arch": cmd_import_arch,
    "sweep": cmd_sweep,
}


# HELPERS #


def _config(args: argparse.Namespace) -> RunConfig:
    """Load the configuration file (defaults if none is given) and apply the flags."""
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    return apply_overrides(
        cfg,
        mode=getattr(args, "mode", None),
        budget_ratio=getattr(args, "budget_ratio", None),
        seed=args.seed,
        out=args.out,
    )


def _pretrained(cfg: RunConfig) -> Backbone:
    """Build and pretrain the configured backbone."""
    backbone = build_backbone(cfg.backbone_config(), seed=cfg.pretrain.seed)
    return pretrain_backbone(
        backbone,
        cfg.pretrain_task(),
        steps=cfg.pretrain.steps,
        lr=cfg.pretrain.lr,
        batch_size=cfg.pretrain.batch_size,
        seed=cfg.pretrain.seed,
    )


def _backbone(cfg: RunConfig, fname: Optional[Path]) -> Backbone:
    """Load a checkpoint if given, otherwise pretrain.

    :raises ValueError: Checkpoint does not match the configured backbone.
    """
    if fname is None:
        return _pretrained(cfg)
    backbone = load_backbone(fname)
    if backbone.config != cfg.backbone_config():
        raise ValueError(
            f"Backbone checkpoint {fname} does not match the configured backbone."
        )
    if not backbone.frozen:
        raise ValueError(f"Backbone checkpoint {fname} is not frozen.")
    return backbone


def _retrain(cfg: RunConfig, arch, backbone, data):
    """Re-train with the configured settings and the search seed."""
    return retrain(
        arch,
        backbone,
        data,
        steps=cfg.retrain.steps,
        lr=cfg.retrain.lr,
        batch_size=cfg.retrain.batch_size,
        seed=cfg.budget.seed,
        weight_decay=cfg.retrain.weight_decay,
        adapter_nonlinearity=cfg.space.adapter_nonlinearity,
    )


if __name__ == "__main__":
    sys.exit(main())
