"""Command-line entry point: ``versreid <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt_io
from .config import ConfigParseError, RunConfig, parse_config
from .data import DataError, generate_dataset, load_manifest
from .model import ConfigError
from .pipeline import (
    DataContractError,
    NumericalError,
    distill,
    evaluate,
    load_branch,
    pretrain,
    train_bank,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("versreid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad arguments; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="versreid", description="Multi-scene person re-identification at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render the synthetic multi-scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, default=40)
    g.add_argument("--per-scene", type=int, default=9,
                   help="images per identity per scene (query + gallery + train)")
    g.add_argument("--seed", type=int, default=0)

    pt = sub.add_parser("pretrain", help="contrastive backbone pretraining on unlabelled train images")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config")
    pt.add_argument("--mpda", type=_on_off, default=None, help="on|off (overrides the config)")
    pt.add_argument("--out", required=True)

    tb = sub.add_parser("train-bank", help="stage 1: prompt-based multi-scene joint training")
    tb.add_argument("--data", required=True)
    tb.add_argument("--config")
    tb.add_argument("--init", help="backbone checkpoint from pretrain")
    tb.add_argument("--out", required=True)

    d = sub.add_parser("distill", help="stage 2: distil the bank into the V-Branch")
    d.add_argument("--data", required=True)
    d.add_argument("--config")
    d.add_argument("--bank", required=True)
    d.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="CMC / mAP on the per-scene and joint test sets")
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="needed when the model shape differs from the defaults")
    e.add_argument("--model", required=True)
    e.add_argument("--branch", required=True, choices=("bank", "vbranch"))
    e.add_argument("--ensemble", choices=("hard", "soft", "concat"))
    e.add_argument("--classifier-noise", type=float, default=0.0)
    e.add_argument("--report", required=True)
    return p


def _config(path: str | None) -> RunConfig:
    if path is not None and not Path(path).is_file():
        raise UsageError(f"config file not found: {path}")
    return parse_config(path)


@contextlib.contextmanager
def _log_sink(out: str):
    path = Path(str(out) + ".log.jsonl")
    with open(path, "w") as fh:
        yield fh
    log.info("training log written to %s", path)


def _save(out: str, ckpt: ckpt_io.Checkpoint) -> None:
    digest = ckpt_io.save(out, ckpt)
    print(f"{out}\tsha256={digest}")


def cmd_gen_data(args) -> None:
    m = generate_dataset(args.out, args.ids, args.per_scene, args.seed)
    counts = {s: len(m.split(s)) for s in ("train", "query", "gallery")}
    print(f"{m.root}\t" + "\t".join(f"{k}={v}" for k, v in counts.items()))


def cmd_pretrain(args) -> None:
    cfg = _config(args.config)
    if args.mpda is not None:
        cfg = cfg.replace(mpda=args.mpda)
    manifest = load_manifest(args.data)
    images = manifest.images(manifest.split("train"))
    with _log_sink(args.out) as sink:
        res = pretrain(cfg, images, log_sink=sink)
    _save(args.out, res.checkpoint())


def cmd_train_bank(args) -> None:
    cfg = _config(args.config)
    manifest = load_manifest(args.data)
    init = ckpt_io.load(args.init).tensors if args.init else None
    with _log_sink(args.out) as sink:
        res = train_bank(cfg, manifest, init=init, log_sink=sink, checkpoint_path=args.out)
    _save(args.out, res.checkpoint())


def cmd_distill(args) -> None:
    cfg = _config(args.config)
    manifest = load_manifest(args.data)
    bank, _ = load_branch(args.bank, cfg.model)
    with _log_sink(args.out) as sink:
        res = distill(cfg, bank, manifest, log_sink=sink, checkpoint_path=args.out)
    _save(args.out, res.checkpoint())


def cmd_eval(args) -> None:
    cfg = _config(args.config)
    if not 0.0 <= args.classifier_noise <= 1.0:
        raise UsageError("--classifier-noise must lie in [0, 1]")
    if args.ensemble and args.branch != "bank":
        raise UsageError("--ensemble applies to the bank branch only")
    manifest = load_manifest(args.data)
    branch, _ = load_branch(args.model, cfg.model)
    if branch.kind != args.branch:
        raise UsageError(f"{args.model} holds a {branch.kind} checkpoint, not a {args.branch}")
    report = evaluate(cfg, branch, manifest, args.ensemble, args.classifier_noise,
                      checkpoint_id=ckpt_io.file_digest(args.model)[:16])
    report.write(args.report)
    for r in report.rows:
        print(f"{r.dataset:16s} R-1 {r.rank1:.3f}  R-5 {r.rank5:.3f}  mAP {r.map:.3f}")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-bank": cmd_train_bank,
            "distill": cmd_distill, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericalError as e:
        print(f"versreid: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ckpt_io.CheckpointError, DataContractError, OSError) as e:
        print(f"versreid: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ConfigParseError, ConfigError, ValueError) as e:
        # ConfigError and ConfigParseError are ValueErrors; named for the reader
        print(f"versreid: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
