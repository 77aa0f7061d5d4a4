"""Command-line entry point: ``hgfx <command> [options]``.

Settings precedence is defaults < config file (``--config`` or
HGFX_CONFIG) < command-line flags. Every failure maps to an exit code:
1 config, 2 data, 3 numeric, 4 verification.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from hgfx.config import ABLATION_PRESETS, RunConfig, dump_run_config, get_settings, load_run_config, parse_run_config
from hgfx.errors import ConfigError, HGFXError, VerificationError
from hgfx.registry import LoadedModel, load_model, resolve_run_config
from hgfx.services.adaptive_scan import paint_scan_order
from hgfx.services.datasets import conform_channels, encode_pgm, load_dataset, read_image, synth_generate, write_file
from hgfx.services.graph_reason import HeteroGraphNet, image_adjacency, image_scan_plan
from hgfx.services.patch_embed import ImageSample
from hgfx.services.trainer import SWEEP_PARAMS, evaluate, run_ablation, run_sweep, train
from hgfx.services.verification import CHECKS, run_verification

logger = logging.getLogger(__name__)


# --- Config assembly ---


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_run_config(args: argparse.Namespace) -> RunConfig:
    path = getattr(args, "config", None) or get_settings().config
    cfg = load_run_config(path) if path else RunConfig()
    doc = cfg.model_dump(mode="json")
    flags = {
        ("data", "root"): getattr(args, "data", None),
        ("optim", "epochs"): getattr(args, "epochs", None),
        ("optim", "lr"): getattr(args, "lr", None),
        ("optim", "batch_size"): getattr(args, "batch_size", None),
        ("optim", "seed"): getattr(args, "seed", None),
    }
    for (section, key), value in flags.items():
        if value is not None:
            doc[section][key] = value
    if getattr(args, "out", None) is not None:
        doc["output_dir"] = args.out
    cfg = parse_run_config(json.dumps(doc))
    if getattr(args, "ablation", None):
        cfg = cfg.model_copy(update={"model": cfg.model.with_ablation(args.ablation)})
    return cfg


def _load_splits(cfg: RunConfig):
    if cfg.data.root is None:
        raise ConfigError("no dataset root; pass --data or set data.root in the config")
    return load_dataset(
        cfg.data.root, cfg.model.image_size, cfg.model.channels,
        cfg.data.val_fraction, cfg.data.seed, get_settings().threads, cfg.model.np_dtype,
    )


def _model_for_export(args: argparse.Namespace) -> LoadedModel:
    threads = get_settings().threads
    if args.checkpoint:
        return load_model(args.checkpoint, args.config or get_settings().config, threads)
    cfg = resolve_run_config(None, args.config or get_settings().config)
    logger.warning("no --checkpoint given; exporting from an untrained %s model", cfg.model.ablation)
    return LoadedModel(HeteroGraphNet(cfg.model, seed=cfg.optim.seed, threads=threads), cfg, "")


def _read_sample(path: str, channels: int) -> ImageSample:
    return ImageSample(conform_channels(read_image(path), channels), name=Path(path).name)


def _emit(doc):
    print(json.dumps(doc, sort_keys=True))


# --- Commands ---


def cmd_train(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    train_set, val_set, spec = _load_splits(cfg)
    logger.info("split %s: %d train / %d val", spec.class_names, len(train_set), len(val_set))
    if args.all_ablations:
        rows = run_ablation(cfg, train_set, val_set, seeds=args.seeds or [cfg.optim.seed], threads=get_settings().threads)
        for row in rows:
            _emit(row.model_dump())
        return 0
    model = HeteroGraphNet(cfg.model, seed=cfg.optim.seed, threads=get_settings().threads)
    print(f"parameters: {model.parameter_count()} ({model.parameter_megabytes():.3f} MB)")
    history = train(model, train_set, val_set, cfg.optim, cfg.output_dir, run_config=cfg)
    _emit(history[-1].model_dump())
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = load_model(args.checkpoint, args.config or get_settings().config, get_settings().threads)
    cfg = loaded.run_config
    if args.data is not None:
        cfg = cfg.model_copy(update={"data": cfg.data.model_copy(update={"root": args.data})})
    train_set, val_set, _ = _load_splits(cfg)
    dataset = {"train": train_set, "val": val_set}[args.split]
    acc = evaluate(loaded.model, dataset, cfg.optim.batch_size)
    _emit({"accuracy": acc, "split": args.split, "samples": len(dataset)})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = synth_generate(args.out, args.n, args.size, args.seed)
    _emit(spec.model_dump())
    return 0


def cmd_export_scan(args: argparse.Namespace) -> int:
    loaded = _model_for_export(args)
    cfg = loaded.run_config.model
    out_dir = Path(args.out)
    for path in args.image:
        img = _read_sample(path, cfg.channels)
        plan = image_scan_plan(img, loaded.model)
        stem = Path(path).stem
        write_file(out_dir / f"{stem}.scan.json", (json.dumps(plan.to_export()) + "\n").encode())
        painting = paint_scan_order(plan.order, cfg.grid, cfg.grid, cfg.patch_size)
        write_file(out_dir / f"{stem}.scan.pgm", encode_pgm(painting))
        logger.info("%s: scan of %d nodes written to %s", path, len(plan.order), out_dir)
    return 0


def cmd_export_graph(args: argparse.Namespace) -> int:
    loaded = _model_for_export(args)
    out_dir = Path(args.out)
    for path in args.image:
        adj = image_adjacency(_read_sample(path, loaded.run_config.model.channels), loaded.model, args.block)
        write_file(out_dir / f"{Path(path).stem}.graph.json", (json.dumps(adj.to_export()) + "\n").encode())
        logger.info("%s: %d edges written to %s", path, adj.edge_count, out_dir)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_verification(args.check, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<26} {r.seconds:7.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise VerificationError(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    train_set, val_set, _ = _load_splits(cfg)
    records = run_sweep(cfg, train_set, val_set, args.param, args.values,
                        seeds=args.seeds or [cfg.optim.seed], threads=get_settings().threads)
    for record in records:
        _emit(record.model_dump())
    return 0


def cmd_config(args: argparse.Namespace) -> int:
    sys.stdout.write(dump_run_config(build_run_config(args)))
    return 0


# --- Parser ---


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--data", help="dataset root, one subdirectory per class")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)


def _add_export_flags(p: argparse.ArgumentParser):
    p.add_argument("--image", nargs="+", required=True, help="PPM, PGM or PNG file(s)")
    p.add_argument("--checkpoint", help="HGFX checkpoint; an untrained model is used without it")
    p.add_argument("--config", help="RunConfig JSON; defaults to config.json beside the checkpoint")
    p.add_argument("--out", default=".", help="directory for the exported files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgfx", description="Semantic heterogeneous graph classifier for flexible objects.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, or the whole ablation matrix")
    _add_run_flags(p)
    p.add_argument("--ablation", choices=list(ABLATION_PRESETS))
    p.add_argument("--all-ablations", action="store_true", help="train every preset and write ablation.json")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds for --all-ablations")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write the synthetic cloud/smoke dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64, help="images per class")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export-scan", help="scan plan JSON and order painting per image")
    _add_export_flags(p)
    p.set_defaults(func=cmd_export_scan)

    p = sub.add_parser("export-graph", help="adjacency JSON of one block per image")
    _add_export_flags(p)
    p.add_argument("--block", type=int, default=0)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("verify", help="run the oracle and invariant suite")
    p.add_argument("--check", action="append", choices=list(CHECKS), help="run only this check (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="train full and base models across one hyperparameter")
    _add_run_flags(p)
    p.add_argument("--param", choices=list(SWEEP_PARAMS), required=True)
    p.add_argument("--values", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("config", help="print the effective RunConfig")
    _add_run_flags(p)
    p.add_argument("--ablation", choices=list(ABLATION_PRESETS))
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        level = "DEBUG" if args.verbose else get_settings().log_level
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except HGFXError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
