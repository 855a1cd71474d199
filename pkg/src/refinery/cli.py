"""``refinery`` command-line interface.

Exit codes: 0 success, 1 validation failure (bad flags, config, input
files or checkpoint mismatch), 2 runtime failure (I/O, divergence, failed
gradient check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import rntb
from .errors import RefineryError, TrainingDiverged

log = logging.getLogger("refinery")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; usage problems are validation failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("scales must be positive")
    return vals


def _manifest(path) -> Path:
    p = Path(path)
    return p / "manifest.txt" if p.is_dir() else p


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .data import gen_synthetic, write_dataset
    h, w = args.size
    samples = gen_synthetic(args.samples, h, w, args.classes, args.seed)
    manifest = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {manifest}")
    return EXIT_OK


def _overrides(args):
    o = {"model": {}, "train": {}, "data": {}}
    if getattr(args, "variant", None):
        o["model"]["variant"] = args.variant
    for key in ("iterations", "lr", "seed"):
        if getattr(args, key, None) is not None:
            o["train"][key] = str(getattr(args, key))
    if getattr(args, "out", None):
        o["train"]["out_dir"] = args.out
    if getattr(args, "train_data", None):
        o["data"]["train"] = args.train_data
    if getattr(args, "val_data", None):
        o["data"]["val"] = args.val_data
    return o


def cmd_train(args) -> int:
    from .cascade import build, count_params
    from .config import load_config
    from .data import load_dataset
    from .errors import ConfigError
    from .evaluate import evaluate, report
    from .train import resume, train

    cfg = load_config(args.config, _overrides(args))
    if not cfg.train_data:
        raise ConfigError("no training data: set [data] train or pass --train-data")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.echo()
    (out / "config.ini").write_text(echo)
    for line in echo.splitlines():
        log.info("config: %s", line)
    dataset = load_dataset(_manifest(cfg.train_data))
    log.info("training %s on %d samples", cfg.spec.variant, len(dataset))
    if args.resume:
        result = resume(args.resume, dataset, cfg.train, spec=cfg.spec, out_dir=out)
    else:
        model = build(cfg.spec, cfg.model_seed)
        log.info("parameters: %s", count_params(model))
        result = train(model, dataset, cfg.train, out_dir=out)
    last = result.losses[-1] if result.losses else float("nan")
    print(f"trained to iteration {result.state.iteration}, final loss {last:.4f}, "
          f"{result.seconds:.1f}s; checkpoint {out / 'last.rntc'}")
    if cfg.val_data:
        val = load_dataset(_manifest(cfg.val_data))
        rep = report(evaluate(result.model, val, cfg.spec.num_classes))
        (out / "val_report.csv").write_text(rep.to_csv())
        print(rep.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .cascade import load_checkpoint
    from .data import load_dataset
    from .evaluate import evaluate, report

    model, _ = load_checkpoint(args.ckpt)
    samples = load_dataset(_manifest(args.data))
    cm = evaluate(model, samples, model.spec.num_classes, scales=args.scales)
    rep = report(cm)
    print(rep.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    else:
        print(rep.to_csv(), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .cascade import load_checkpoint
    from .data import read_image, write_pgm
    from .engine import no_grad
    from .evaluate import argmax_labels, multiscale_probs, predict_probs

    model, _ = load_checkpoint(args.ckpt)
    image = read_image(args.image)[None]
    if args.scales:
        probs = multiscale_probs(model, image, args.scales)
    else:
        probs = predict_probs(model, image)
    mask = argmax_labels(probs)[0]
    write_pgm(args.out, mask)
    if args.probs:
        with no_grad():
            scores = model(image).data
        rntb.save_blob(args.probs, scores.astype(np.float32))
    print(f"wrote {mask.shape[1]}x{mask.shape[0]} mask to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import SCOPES, run_suite

    scopes = SCOPES if args.scope == "all" else (args.scope,)
    results = run_suite(scopes, seed=args.seed, max_coords=args.coords)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.report.passed]
    print(f"{len(results) - len(failed)}/{len(results)} targets passed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import run_ablation, to_csv, to_table
    from .config import load_config
    from .data import load_dataset

    cfg = load_config(args.config, _overrides(args))
    data = load_dataset(_manifest(args.data))
    if args.val:
        train_set, val_set = data, load_dataset(_manifest(args.val))
    else:
        cut = len(data) - max(1, len(data) // 6)
        train_set, val_set = data[:cut], data[cut:]
    if not train_set:
        from .errors import ConfigError
        raise ConfigError("ablation needs at least 2 samples when --val is not given")
    seeds = list(range(args.seeds))
    results = run_ablation(cfg.spec, cfg.train, train_set, val_set, seeds, workers=args.workers,
                           scales=cfg.eval_scales)
    table, csv = to_table(results), to_csv(results)
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(csv)
        (out / "ablation.txt").write_text(table)
        (out / "config.ini").write_text(cfg.echo())
    else:
        print(csv, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="refinery", description="Multi-path refinement networks for dense labelling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic shapes dataset",
                       description="Write PPM images, PGM masks and manifest.txt to --out.")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=100)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a cascade variant",
                       description="Train from a config file; flags override file values.")
    t.add_argument("--config", required=True)
    t.add_argument("--variant", help="single, cascade2, cascade4 or cascade4-2scale")
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--out", help="output directory (overrides [train] out_dir)")
    t.add_argument("--train-data", dest="train_data", metavar="MANIFEST")
    t.add_argument("--val-data", dest="val_data", metavar="MANIFEST")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset",
                       description="Print an IoU / accuracy report; single-scale unless --scales.")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, metavar="MANIFEST")
    e.add_argument("--scales", type=_floats, help="comma-separated, e.g. 0.8,1.0,1.2")
    e.add_argument("--csv", help="write the CSV report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="label one image",
                        description="Write the argmax mask of one PPM image as PGM.")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, metavar="MASK.pgm")
    pr.add_argument("--probs", metavar="SCORES.rntb", help="also dump the raw score tensor")
    pr.add_argument("--scales", type=_floats)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites",
                        description="Check analytic gradients; exit 2 if any target fails.")
    gc.add_argument("--scope", choices=("op", "block", "model", "all"), default="all")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--coords", type=int, default=40, help="coordinates sampled per parameter")
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="cascade depth x chained pooling ablation",
                       description="Train {single, cascade2, cascade4} x {CRP on, off} x seeds "
                                   "and print a seed-averaged mean-IoU table.")
    a.add_argument("--data", required=True, help="dataset directory or manifest")
    a.add_argument("--val", help="validation set (default: last sixth of --data)")
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--config", help="model/train settings")
    a.add_argument("--iterations", type=int)
    a.add_argument("--out", help="directory for ablation.csv / ablation.txt")
    a.add_argument("--workers", type=int, help="parallel cells (default: REFINERY_THREADS or CPUs)")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RefineryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
