"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import evaluation as E
from . import stain
from . import synth as S
from .config import load_config, save_config
from .errors import DataError, InvalidConfig, PromptMILError
from .grouping import group_indices
from .selection import zero_shot_classify
from .store import load_manifest, load_prompts
from .trainer import DEFAULT_STROMA, bag_forward, component_matrix, prepare_bag, thread_limits, train

log = logging.getLogger("promptmil")

SUBCOMMANDS = ("synth", "normalize", "select", "group", "train", "eval", "sweep", "heatmap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {
            "ts": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(record.created)) + f".{int(record.msecs):03d}Z",
            "level": record.levelname.lower(),
            "logger": record.name,
            "event": record.getMessage(),
        }
        fields = getattr(record, "fields", None)
        if fields:
            doc["fields"] = fields
        return json.dumps(doc, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def _env_threads() -> int:
    raw = os.environ.get("PROMPTMIL_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise InvalidConfig(f"PROMPTMIL_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise InvalidConfig("PROMPTMIL_THREADS must be >= 1")
    return value


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="promptmil", description="Prompt-guided multiple-instance learning for slide-level biomarkers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                     help="single-threaded, bitwise reproducible training (default)")
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: $PROMPTMIL_THREADS or 1)")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic dataset with a planted signal")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("normalize", help="Macenko stain normalization of a directory of patches")
    sp.add_argument("--in", dest="in_dir", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--target", type=Path, help="profile.json (default: built-in reference)")

    sp = sub.add_parser("select", help="zero-shot tissue selection per bag")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)
    sp.add_argument("--stroma-name", default=DEFAULT_STROMA)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("group", help="prompt-guided component groups per bag")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)
    sp.add_argument("--beta", type=float, default=0.3)
    sp.add_argument("--checkpoint", type=Path, help="group projected features of a trained model")
    sp.add_argument("--stroma-name", default=DEFAULT_STROMA)
    sp.add_argument("--no-selection", action="store_true")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("train", help="train the classifier")
    _data_args(sp)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    _train_overrides(sp)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    _data_args(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--beta", type=float)
    sp.add_argument("--representations", action="store_true", help="also write representations.csv")
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("sweep", help="train and test once per beta")
    _data_args(sp)
    sp.add_argument("--config", type=Path)
    sp.add_argument("--betas", type=_floats, default=[0.1, 0.2, 0.3, 0.4, 0.5, 1.0])
    sp.add_argument("--out", type=Path, required=True)
    _train_overrides(sp, beta=False)

    sp = sub.add_parser("heatmap", help="per-patch attention and similarity export for one bag")
    _data_args(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--bag", required=True, help="bag_id")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--dump-trace", action="store_true", help="also write trace.npz")
    sp.add_argument("--out", type=Path, required=True)
    return p


def _data_args(sp):
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)


def _train_overrides(sp, beta: bool = True):
    g = sp.add_argument_group("config overrides")
    if beta:
        g.add_argument("--beta", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", dest="max_epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--schedule", choices=["cosine", "constant"])
    g.add_argument("--stroma-name")
    for flag in ("disable-selection", "disable-grouping", "kmeans-grouping", "disable-interaction"):
        g.add_argument(f"--{flag}", action="store_true", default=None)


def _overrides(args, keys) -> dict:
    out = {k: getattr(args, k, None) for k in keys}
    for flag in ("disable_selection", "disable_grouping", "kmeans_grouping", "disable_interaction"):
        if getattr(args, flag, None):
            out[f"ablation.{flag}"] = True
    if args.deterministic is not None:
        out["deterministic"] = args.deterministic
    out["threads"] = args.threads if args.threads is not None else _env_threads()
    return out


def _train_config(args, with_beta: bool = True):
    keys = ["lr", "max_epochs", "seed", "schedule", "stroma_name"] + (["beta"] if with_beta else [])
    cfg = load_config(args.config, _overrides(args, keys), kind="train")
    log.info("config resolved", extra={"fields": {"seed": cfg.seed, "deterministic": cfg.deterministic,
                                                   "threads": 1 if cfg.deterministic else cfg.threads}})
    return cfg


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = load_config(args.config, {"seed": args.seed}, kind="synth")
    args.out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out / "synth_config.json")
    path = S.write_dataset(S.generate(cfg), args.out)
    log.info("synth written", extra={"fields": {"manifest": str(path), "n_bags": cfg.n_bags, "seed": cfg.seed}})


def cmd_normalize(args) -> None:
    target = stain.load_profile(args.target) if args.target else stain.DEFAULT_TARGET
    status = stain.normalize_directory(args.in_dir, args.out, target)
    stain.save_profile(target, args.out / "profile.json")
    log.info("normalized", extra={"fields": {"files": len(status),
                                             "copied": sum(v == "copied" for v in status.values())}})


def cmd_select(args) -> None:
    manifest = load_manifest(args.manifest)
    tissue = load_prompts(args.prompts).by_role("tissue")
    args.out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries():
        bag = manifest.load(entry)
        if bag.text is None:
            raise DataError(f"{manifest.bag_path(entry)}: bag has no text-aligned channel")
        result = zero_shot_classify(bag.text, tissue, args.stroma_name)
        doc = {"bag_id": bag.bag_id, "n": bag.n, "selection_fallback": bool(result.kept_indices.size == 0),
               **result.to_json()}
        (args.out / f"{bag.bag_id}.selection.json").write_text(json.dumps(doc))
    log.info("selection written", extra={"fields": {"bags": len(manifest.bags), "out": str(args.out)}})


def cmd_group(args) -> None:
    from .model import load_checkpoint, project
    from .trainer import TrainConfig, Ablation

    manifest = load_manifest(args.manifest)
    prompts = load_prompts(args.prompts)
    comps = component_matrix(prompts)
    cfg = TrainConfig(beta=args.beta, stroma_name=args.stroma_name,
                      ablation=Ablation(disable_selection=args.no_selection))
    params = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    args.out.mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries():
        bag = prepare_bag(manifest.load(entry), prompts, cfg)
        if params is not None:
            feats = project(bag.features, params)
        elif bag.text is not None:
            # without a model, group on the text-aligned channel
            feats = bag.text
        else:
            raise DataError(f"{manifest.bag_path(entry)}: no text channel; pass --checkpoint")
        sim = kernels.cosine_similarity(feats, comps.astype(feats.dtype))
        groups = []
        for i, members in enumerate(group_indices(sim, args.beta)):
            groups.append({"component": prompts.by_role("component").names[i],
                           "members": bag.kept_indices[members].tolist(),
                           "scores": [float(s) for s in sim[members, i]]})
        (args.out / f"{bag.bag_id}.groups.json").write_text(json.dumps({"bag_id": bag.bag_id, "beta": args.beta,
                                                                        "groups": groups}))
    log.info("groups written", extra={"fields": {"bags": len(manifest.bags), "beta": args.beta}})


def cmd_train(args) -> None:
    cfg = _train_config(args)
    run = train(load_manifest(args.manifest), load_prompts(args.prompts), cfg, args.out)
    log.info("trained", extra={"fields": {"best_epoch": run.best_epoch, "best_val_auc": run.best_val_auc,
                                          "checkpoint": str(run.checkpoint_path)}})


def cmd_eval(args) -> None:
    manifest = load_manifest(args.manifest)
    prompts = load_prompts(args.prompts)
    model = E.load_model(args.checkpoint)
    report = E.evaluate(manifest, args.split, model, prompts, args.beta)
    args.out.mkdir(parents=True, exist_ok=True)
    report.save(args.out / "report.json")
    if args.representations:
        E.export_representations(manifest, args.split, model, prompts, args.out / "representations.csv", args.beta)
    log.info("evaluated", extra={"fields": {"split": args.split, "auc": report.auc}})


def cmd_sweep(args) -> None:
    cfg = _train_config(args, with_beta=False)
    for b in args.betas:
        if not 0 < b <= 1:
            raise InvalidConfig(f"beta must lie in (0, 1], got {b}")
    rows = E.beta_sweep(load_manifest(args.manifest), load_prompts(args.prompts), cfg, args.betas, args.out)
    for beta, value in rows:
        log.info("sweep point", extra={"fields": {"beta": beta, "test_auc": value}})


def cmd_heatmap(args) -> None:
    manifest = load_manifest(args.manifest)
    prompts = load_prompts(args.prompts)
    model = E.load_model(args.checkpoint)
    entry = next((e for e in manifest.entries() if e.bag_id == args.bag), None)
    if entry is None:
        raise DataError(f"{args.manifest}: no bag {args.bag!r}")
    bag = manifest.load(entry)
    cfg = model.config if args.beta is None else replace(model.config, beta=args.beta)
    prepared = prepare_bag(bag, prompts, cfg)
    comps = component_matrix(prompts)
    with thread_limits(model.config):
        trace = bag_forward(prepared, comps, model.params, model.model_config.heads, model.options(args.beta))
    export = E.heatmap_from_trace(bag, prepared, trace, model.params, comps)
    args.out.mkdir(parents=True, exist_ok=True)
    export.write_csv(args.out / "heatmap.csv")
    if args.dump_trace:
        E.dump_trace(trace, args.out / "trace.npz")
    log.info("heatmap written", extra={"fields": {"bag_id": bag.bag_id, "instances": bag.n}})


COMMANDS = {
    "synth": cmd_synth, "normalize": cmd_normalize, "select": cmd_select, "group": cmd_group,
    "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "heatmap": cmd_heatmap,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    if args.threads is not None and args.threads < 1:
        print("promptmil: error: --threads must be >= 1", file=sys.stderr)
        return 1
    _setup_logging(args.log_level)
    try:
        COMMANDS[args.command](args)
    except PromptMILError as exc:
        print(f"promptmil {args.command}: error: {exc}", file=sys.stderr)
        log.error("failed", extra={"fields": {"command": args.command, "reason": str(exc)}})
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
