"""Command line interface: ``reid-robustness <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .augment import PREVIEW_OPS, AugMixParams, EraseParams, PatchMixParams, preview_grid
from .config import load_config
from .const import (
    EXIT_INVARIANT,
    EXIT_OK,
    LOG_FORMAT,
    MODE_A,
    MODE_B,
    SETTING_BOTH,
    SETTINGS,
    VERSION,
)
from .corruptions import CorruptionType, parse_spec
from .datafiles import (
    DatasetManifest,
    dumps_json,
    load_manifest,
    read_distances,
    read_json,
    read_logits,
    read_score_csv,
    validate_report,
    write_json,
)
from .errors import ToolkitError, UsageError
from .imaging import read_image, write_png
from .losses import loss_summary
from .metrics import pearson
from .protocol import (
    SWEEP_DIR,
    CorruptionPlan,
    EvalOptions,
    SyntheticEmbedder,
    build_plan,
    load_embedding_tree,
    load_plan,
    materialize,
    render_report,
    report_from_distances,
    report_to_csv,
    resolve_roles,
    run_eval,
    run_sweep,
    synthesize_tree,
)

_LOGGER = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """Raises :class:`UsageError` so bad arguments exit with the usage code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="Master seed (unsigned 64-bit)")
    common.add_argument("--repeats", type=int, help="Number of repeats (default 10, msmt17 3)")
    common.add_argument("--setting", choices=SETTINGS, help="Which side is corrupted")
    common.add_argument("--mode", choices=[MODE_A, MODE_B], help="Cross-modality search mode")
    common.add_argument("--config", type=Path, help="JSON file overriding the defaults")
    common.add_argument("--out", type=Path, help="Output file or directory")
    common.add_argument("--dataset", help="Dataset preset; checks split sizes")
    common.add_argument("--workers", type=int, help="Worker threads")
    common.add_argument("--debug", action="store_true", help="Verbose logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="reid-robustness", description="ReID corruption robustness benchmark")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    cmd = sub.add_parser("plan", parents=[common], help="Write corruption plans")
    cmd.add_argument("--manifest", type=Path, required=True)
    cmd.add_argument("--fixed", help="Corrupt every image with TYPE:SEVERITY")

    cmd = sub.add_parser("corrupt", parents=[common], help="Materialize corrupted images")
    cmd.add_argument("--manifest", type=Path, required=True)
    cmd.add_argument("--fixed", help="Corrupt every image with TYPE:SEVERITY")
    cmd.add_argument("--plan", type=Path, help="Materialize this plan file only")

    cmd = sub.add_parser("eval", parents=[common], help="Evaluate embeddings or distances")
    cmd.add_argument("--manifest", type=Path, required=True)
    group = cmd.add_mutually_exclusive_group(required=True)
    group.add_argument(
        "--embeddings", type=Path, action="append", help="Embedding tree, repeat per tap"
    )
    group.add_argument("--distances", type=Path, help="Distance matrix file")

    cmd = sub.add_parser("sweep", parents=[common], help="Fixed-corruption sweep table")
    cmd.add_argument("--manifest", type=Path, required=True)
    cmd.add_argument("--embeddings", type=Path, required=True)
    cmd.add_argument(
        "--cell", action="append", default=[], help="TYPE:SEVERITY, default all found"
    )
    cmd.add_argument("--csv", type=Path, help="Also write the table as CSV")

    cmd = sub.add_parser("synth-embed", parents=[common], help="Synthetic embeddings")
    cmd.add_argument("--manifest", type=Path, required=True)
    cmd.add_argument("--images", type=Path, required=True, help="Materialized image root")

    cmd = sub.add_parser("losses", parents=[common], help="Loss kernels on a logits file")
    cmd.add_argument("--logits", type=Path, required=True)
    cmd.add_argument("--splits", type=int, choices=[1, 3], default=1)
    cmd.add_argument("--lambda-cid", type=float, dest="lambda_cid")

    cmd = sub.add_parser("preview-aug", parents=[common], help="Augmentation contact sheet")
    cmd.add_argument("--image", type=Path, required=True)
    cmd.add_argument("--op", choices=PREVIEW_OPS, required=True)
    cmd.add_argument("--count", type=int, default=15)

    cmd = sub.add_parser("report", parents=[common], help="Show, export or correlate")
    cmd.add_argument("report", type=Path, nargs="?", help="Report JSON file")
    cmd.add_argument("--csv", type=Path, help="Write the report table as CSV")
    cmd.add_argument("--correlate", type=Path, nargs=2, metavar=("A_CSV", "B_CSV"))
    cmd.add_argument("--metric", help="CSV column to correlate (default mAP)")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "seed": args.seed,
        "repeats": args.repeats,
        "setting": args.setting,
        "mode": args.mode,
        "dataset": args.dataset,
        "workers": args.workers,
        "lambda_cid": getattr(args, "lambda_cid", None),
    }


def _setup(args: argparse.Namespace) -> Tuple[Dict[str, Any], DatasetManifest]:
    config = load_config(args.config, _overrides(args))
    manifest = load_manifest(args.manifest, config["dataset"])
    if args.repeats is None:
        config = load_config(args.config, _overrides(args), dataset_hint=manifest.dataset)
    return config, manifest


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def _fixed(text: Optional[str]):
    if text is None:
        return None
    ctype, severity = parse_spec(text)
    if severity == 0:
        raise UsageError("a fixed corruption needs severity 1..5")
    return ctype, severity


def _plans(args, config, manifest) -> List[CorruptionPlan]:
    roles = resolve_roles(manifest, config["mode"], config["dataset"])
    return [
        build_plan(
            roles,
            config["setting"],
            config["seed"],
            repeat,
            cross_modality=config["cross_modality_corruption"],
            fixed=_fixed(args.fixed),
        )
        for repeat in range(config["repeats"])
    ]


def cmd_plan(args: argparse.Namespace) -> int:
    config, manifest = _setup(args)
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    for plan in _plans(args, config, manifest):
        label = "-".join(plan.subdir.parts)
        path = out / f"plan-{label}-r{plan.repeat_index}.json"
        write_json(path, plan.as_dict())
        _LOGGER.info("Wrote %s with %s entries", path, len(plan))
    return EXIT_OK


def cmd_corrupt(args: argparse.Namespace) -> int:
    config, manifest = _setup(args)
    out = _require_out(args)
    plans = [load_plan(args.plan)] if args.plan else _plans(args, config, manifest)
    for plan in plans:
        materialize(plan, manifest, out, workers=config["workers"])
    return EXIT_OK


def _options(config: Dict[str, Any]) -> EvalOptions:
    return EvalOptions.from_config(config)


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        _LOGGER.info("Wrote %s", out)


def cmd_eval(args: argparse.Namespace) -> int:
    config, manifest = _setup(args)
    options = _options(config)
    if args.distances is not None:
        report = report_from_distances(
            manifest,
            read_distances(args.distances),
            config["setting"],
            config["seed"],
            config["mode"],
            dataset=config["dataset"],
            options=options,
        )
    else:
        roles = resolve_roles(manifest, config["mode"], config["dataset"])
        embeddings = [
            load_embedding_tree(
                root,
                roles,
                [config["setting"]],
                config["repeats"],
                cross_modality=config["cross_modality_corruption"],
            )
            for root in args.embeddings
        ]
        report = run_eval(
            manifest,
            embeddings,
            config["setting"],
            config["repeats"],
            config["seed"],
            config["mode"],
            dataset=config["dataset"],
            options=options,
        )
    obj = report.as_dict()
    validate_report(obj)
    _emit(dumps_json(obj), args.out)
    return EXIT_OK


def _sweep_cells(args: argparse.Namespace) -> List[Tuple[CorruptionType, int]]:
    if args.cell:
        return [_fixed(text) for text in args.cell]
    cells = []
    base = args.embeddings / SWEEP_DIR
    for directory in sorted(base.iterdir()) if base.is_dir() else []:
        name, _, level = directory.name.rpartition("-")
        cells.append(_fixed(f"{name}:{level}"))
    if not cells:
        raise UsageError(f"No sweep cells found under {base}")
    return sorted(cells, key=lambda cell: (cell[0].position, cell[1]))


def cmd_sweep(args: argparse.Namespace) -> int:
    config, manifest = _setup(args)
    roles = resolve_roles(manifest, config["mode"], config["dataset"])
    repeats = config["repeats"]
    xmodal = config["cross_modality_corruption"]
    embeddings = {
        (None, 0): load_embedding_tree(args.embeddings, roles, [], repeats)
    }
    for cell in _sweep_cells(args):
        embeddings[cell] = load_embedding_tree(
            args.embeddings, roles, [SETTING_BOTH], repeats, cross_modality=xmodal, fixed=cell
        )
    table = run_sweep(
        manifest,
        embeddings,
        repeats,
        config["seed"],
        config["mode"],
        dataset=config["dataset"],
        options=_options(config),
    )
    sys.stdout.write(table.render())
    if args.csv is not None:
        _emit(table.to_csv(), args.csv)
    return EXIT_OK


def cmd_synth_embed(args: argparse.Namespace) -> int:
    config, manifest = _setup(args)
    roles = resolve_roles(manifest, config["mode"], config["dataset"])
    embedder = SyntheticEmbedder.from_config(config["synthetic"], seed=config["seed"])
    synthesize_tree(manifest, roles, args.images, _require_out(args), embedder)
    return EXIT_OK


def cmd_losses(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    logits, labels = read_logits(args.logits)
    summary = loss_summary(
        logits, labels, splits=args.splits, lambda_cid=config["lambda_cid"]
    )
    _emit(json.dumps(summary, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_preview_aug(args: argparse.Namespace) -> int:
    config = load_config(args.config, _overrides(args))
    erase = config["erase"]
    augmix = config["augmix"]
    sheet = preview_grid(
        read_image(args.image),
        args.op,
        args.count,
        config["seed"],
        erase=EraseParams(
            probability=1.0,
            area_ratio_range=tuple(erase["area_ratio_range"]),
            aspect_ratio_range=tuple(erase["aspect_ratio_range"]),
            retain_ratio=erase["retain_ratio"],
            fill=erase["fill"],
            mean=tuple(erase["mean"]),
        ),
        patch=PatchMixParams(
            block_area_range=tuple(config["patch"]["block_area_range"]),
            mix_coef=config["patch"]["mix_coef"],
            pool_capacity=config["patch"]["pool_capacity"],
        ),
        mix=AugMixParams(
            width=augmix["width"],
            depth=augmix["depth"],
            dirichlet_alpha=augmix["dirichlet_alpha"],
            beta_alpha=augmix["beta_alpha"],
            severity=augmix["severity"],
        ),
    )
    write_png(sheet, _require_out(args))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    if args.correlate:
        first, second = (read_score_csv(path, args.metric) for path in args.correlate)
        shared = sorted(set(first) & set(second))
        if len(shared) < 2:
            raise UsageError(f"Only {len(shared)} shared rows, need at least 2")
        rho = pearson([first[k] for k in shared], [second[k] for k in shared])
        sys.stdout.write(f"pearson {rho:.6f} over {len(shared)} rows\n")
        return EXIT_OK
    if args.report is None:
        raise UsageError("report needs a report file or --correlate")
    report = read_json(args.report)
    validate_report(report, str(args.report))
    sys.stdout.write(render_report(report))
    if args.csv is not None:
        _emit(report_to_csv(report), args.csv)
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "corrupt": cmd_corrupt,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "synth-embed": cmd_synth_embed,
    "losses": cmd_losses,
    "preview-aug": cmd_preview_aug,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ToolkitError as err:
        _LOGGER.error("%s", err)
        return err.exit_code
    logging.basicConfig(level=logging.DEBUG if args.debug else logging.INFO, format=LOG_FORMAT)
    _LOGGER.info("reid-robustness %s: %s", VERSION, args.command)
    try:
        code = COMMANDS[args.command](args)
    except ToolkitError as err:
        _LOGGER.error("%s", err)
        return err.exit_code
    except Exception as err:  # pylint: disable=broad-except
        _LOGGER.error("Internal error: %s", err)
        _LOGGER.debug("Traceback", exc_info=True)
        return EXIT_INVARIANT
    _LOGGER.info("Finished %s", args.command)
    return code
