"""Command-line entry point: ``dbda {generate,train,eval,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN loss or
failed gradient check), 4 I/O error. ``DBDA_LOG`` selects quiet, info or
debug logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from . import data as D
from . import gradcheck
from . import metrics as M
from . import model as Mdl
from . import train as Tr

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dbda")


def _setup_logging() -> None:
    level = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    name = os.environ.get("DBDA_LOG", "info").lower()
    logging.basicConfig(level=level.get(name, logging.INFO), format="%(levelname)s %(name)s: %(message)s")


def _load_config(args, seed_key: str = "train.seed") -> Tr.TrainConfig:
    overrides = {seed_key: args.seed} if args.seed is not None else {}
    cfg = C.load(args.config, overrides)
    try:
        Mdl.validate_config(cfg.model)
    except ValueError as e:
        raise C.ConfigError(f"{args.config}: {e}") from None
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_config(args, seed_key="data.seed")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise FileExistsError(f"output directory {out} is not empty; pass --force to overwrite")
    lines = ["# domain split image label"]
    for domain in (D.SOURCE, D.TARGET):
        train_imgs, test_imgs = Tr.synthetic_images(cfg.data, domain)
        for split, samples in (("train", train_imgs), ("test", test_imgs)):
            folder = out / domain / split
            folder.mkdir(parents=True, exist_ok=True)
            for s in samples:
                image, label = folder / f"{s.pid}.ppm", folder / f"{s.pid}.pgm"
                D.save_raster_pair(s, image, label)
                lines.append(f"{domain} {split} {image.relative_to(out).as_posix()} {label.relative_to(out).as_posix()}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    log.info("wrote %d image/label pairs to %s", len(lines) - 1, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    l1, l2 = cfg.lambdas
    log.info("preset %s: lambda_ent=%g lambda_dist=%g (pseudo_label=%s)", cfg.preset, l1, l2, cfg.pseudo_label)
    result = Tr.run(cfg, args.out)
    for name, value in result.report.summary().items():
        print(f"target {name}: {value:.6f}")
    for name, path in result.paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.dataset:
        cfg = replace(cfg, data=replace(cfg.data, manifest=args.dataset))
    try:
        model = Mdl.load(args.checkpoint, expected=cfg.model)
    except ValueError as e:
        raise C.ConfigError(f"{args.checkpoint}: {e}") from None
    splits = Tr.load_splits(cfg)
    rep = Tr.evaluate(model, splits.target_test)
    text = M.report_csv(rep)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text, newline="")
        print(f"report: {out / 'report.csv'}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, elapsed = gradcheck.run(args.scope, seed=args.seed or 0)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {elapsed:.1f}s")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbda",
        description="Entropy minimisation and class-distribution alignment for segmentation domain adaptation.",
        epilog=C.keys_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment file (key = value)")
        p.add_argument("--seed", type=int, help="override the seed from the config file")
        return p

    kw = dict(epilog=C.keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p = common(sub.add_parser("generate", help="write a synthetic two-domain dataset", **kw))
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train and evaluate one preset", **kw))
    p.add_argument("--out", help="run directory (default: train.out_dir)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the target test split", **kw))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory with manifest.txt (overrides data.manifest)")
    p.add_argument("--out", help="directory for report.csv (default: print to stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=gradcheck.SCOPES, default="all")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    except Tr.NumericError as e:
        log.error("%s", e)
        return EXIT_NUMERIC
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    except ValueError as e:
        log.error("%s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
