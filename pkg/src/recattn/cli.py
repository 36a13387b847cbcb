"""Command-line entry point: gen-data, train, eval, sweep, trace."""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from .backbone import read_raster
from .data import SceneSpec, default_splits, load_dataset, save_dataset
from .training import (CheckpointError, TrainingDiverged, Trainer, _resize, config_to_text,
                       evaluate, load_checkpoint, load_config, parse_config_text, save_checkpoint,
                       write_log)

log = logging.getLogger("recattn.cli")

DEFAULT_SEED = 0
MODE_ALIASES = {"random": "random-location", "A": "no-lstm-A", "B": "loc-lstm-only-B", "C": "full"}
SWEEP_COLUMNS = ("variant", "mAP", "OF1", "CF1", "wall_clock_s")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(verb, kind, message, status):
    msg = " ".join(str(message).split())
    print(f"error verb={verb or '-'} kind={kind} message={json.dumps(msg)}", file=sys.stderr)
    return status


def _add_common(p, config=True):
    if config:
        p.add_argument("--config", help="key=value config file (every TrainConfig field)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field; repeatable")
    p.add_argument("--seed", type=int, help=f"master seed (default: config value, else {DEFAULT_SEED})")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")


def build_parser():
    parser = _Parser(prog="recattn", description=__doc__)
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic multi-label dataset",
                       description="Write <out>/train and <out>/test (index.tsv plus raster files).")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train", type=int, default=4000, help="training images (default 4000)")
    p.add_argument("--test", type=int, default=1000, help="test images (default 1000)")
    p.add_argument("--canvas-size", type=int, default=64, help="image side in pixels (default 64)")
    p.add_argument("--objects", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"),
                   help="objects per image (default 1 3)")
    _add_common(p, config=False)

    p = sub.add_parser("train", help="train a model",
                       description="Train on <data>/train; writes log.csv, config.txt, checkpoint/ "
                                   "and a test report under --out.")
    p.add_argument("--data", help="dataset root from gen-data (default: $RECATTN_DATA)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint")
    p.add_argument("--no-eval", action="store_true", help="skip the final test evaluation")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint",
                       description="Ten-view evaluation on <data>/test; writes <out>.txt and <out>.json.")
    p.add_argument("--checkpoint", help="checkpoint directory (required)")
    p.add_argument("--data", help="dataset root (default: $RECATTN_DATA)")
    p.add_argument("--out", help="report stem (default: <checkpoint>/report)")
    p.add_argument("--views", choices=("ten", "single"), default="ten", help="view protocol")
    p.add_argument("--predictions", help="also write per-image probabilities as CSV")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("sweep", help="train and evaluate variants along one axis",
                       description="Axis syntax: T=1,5,10 or mode=full,random,single-region,A,B,C. "
                                   "Writes <out>/<variant>/ and appends one row per finished "
                                   "variant to <out>/sweep.tsv.")
    p.add_argument("--axis", required=True, help="AXIS=v1,v2,...")
    p.add_argument("--data", help="dataset root (default: $RECATTN_DATA)")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--parallel", type=int, default=1, metavar="N",
                   help="run up to N variants concurrently (default 1: sequential)")
    _add_common(p)

    p = sub.add_parser("trace", help="dump the regions visited on one image",
                       description="Writes <out>.jsonl (one record per iteration) and "
                                   "<out>.plot.tsv (rectangles for external plotting).")
    p.add_argument("--checkpoint", help="checkpoint directory (required)")
    p.add_argument("--image", required=True, help="8-bit RGB raster (u32 width, u32 height, RGB bytes)")
    p.add_argument("--out", required=True, help="output stem")
    p.add_argument("--sample", action="store_true", help="sample locations instead of using the mean")
    p.add_argument("--seed", type=int, help=f"sampling seed (default {DEFAULT_SEED})")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    cfg = load_config(args.config)
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    if args.set:
        cfg = parse_config_text("\n".join(args.set), cfg)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
        log.info("seed=%d (flag)", cfg.seed)
    else:
        log.info("seed=%d (default)", cfg.seed)
    return cfg


def _data_root(args):
    root = args.data or os.environ.get("RECATTN_DATA")
    if not root:
        raise UsageError("--data is required (or set RECATTN_DATA)")
    return root


def _load_split(root, split):
    path = os.path.join(root, split)
    if not os.path.exists(os.path.join(path, "index.tsv")):
        raise FileNotFoundError(f"{path}/index.tsv not found")
    return load_dataset(path)


def cmd_gen_data(args):
    seed = DEFAULT_SEED if args.seed is None else args.seed
    log.info("seed=%d (%s)", seed, "flag" if args.seed is not None else "default")
    spec = SceneSpec(canvas_size=args.canvas_size, objects_per_image=tuple(args.objects), seed=seed)
    train, test = default_splits(spec, args.train, args.test)
    save_dataset(os.path.join(args.out, "train"), train)
    save_dataset(os.path.join(args.out, "test"), test)
    print(f"wrote {len(train)} train and {len(test)} test images to {args.out}")
    return 0


def _train_run(cfg, root, out, resume=False, final_eval=True):
    """Train one configuration into ``out``; returns the test report or None."""
    os.makedirs(out, exist_ok=True)
    train = _load_split(root, "train")
    ck = os.path.join(out, "checkpoint")
    trainer = load_checkpoint(ck, cfg) if resume else Trainer(cfg)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(config_to_text(cfg))
    trainer.fit(train, log_path=os.path.join(out, "log.csv"), checkpoint_dir=ck)
    if not trainer.history:
        # zero epochs still leaves an initial checkpoint and an empty log
        write_log(os.path.join(out, "log.csv"), [])
        save_checkpoint(ck, trainer)
    if not final_eval:
        return None
    report = evaluate(trainer.model, _load_split(root, "test"), report_stem=os.path.join(out, "report"))
    if trainer.history:
        trainer.history[-1]["mAP"] = report.map
        write_log(os.path.join(out, "log.csv"), trainer.history)
    return report


def cmd_train(args):
    cfg = _config(args)
    root = _data_root(args)
    report = _train_run(cfg, root, args.out, resume=args.resume, final_eval=not args.no_eval)
    if report is not None:
        print(f"mAP={report.map!r} OF1={report.of1!r} CF1={report.cf1!r}")
    return 0


def cmd_eval(args):
    if not args.checkpoint:
        raise UsageError("eval requires --checkpoint")
    root = _data_root(args)
    trainer = load_checkpoint(args.checkpoint)
    test = _load_split(root, "test")
    stem = args.out or os.path.join(args.checkpoint, "report")
    report = evaluate(trainer.model, test, views=args.views, report_stem=stem,
                      predictions_path=args.predictions)
    print(f"mAP={report.map!r} OF1={report.of1!r} CF1={report.cf1!r}")
    return 0


def parse_axis(text):
    """``T=1,5`` or ``mode=full,A`` -> (field, [values])."""
    if "=" not in text:
        raise UsageError(f"--axis expects AXIS=v1,v2,..., got {text!r}")
    name, values = (s.strip() for s in text.split("=", 1))
    items = [v.strip() for v in values.split(",") if v.strip()]
    if not items:
        raise UsageError("--axis has no values")
    if name == "T":
        try:
            return "T", [int(v) for v in items]
        except ValueError:
            raise UsageError(f"--axis T values must be integers: {values!r}") from None
    if name == "mode":
        return "mode", [MODE_ALIASES.get(v, v) for v in items]
    raise UsageError(f"--axis must be T or mode, got {name!r}")


def _variant(job):
    cfg, root, out = job
    t0 = time.perf_counter()
    report = _train_run(cfg, root, out)
    return report.map, report.of1, report.cf1, time.perf_counter() - t0


def cmd_sweep(args):
    field_name, values = parse_axis(args.axis)
    base = _config(args)
    root = _data_root(args)
    configs = [base.replace(**{field_name: v}) for v in values]
    os.makedirs(args.out, exist_ok=True)
    # repeated variants share a name but get disjoint directories
    names, jobs = [], []
    for i, (v, cfg) in enumerate(zip(values, configs)):
        name = f"{field_name}={v}"
        names.append(name)
        jobs.append((cfg, root, os.path.join(args.out, f"{i:02d}_{field_name}_{v}")))
    table = os.path.join(args.out, "sweep.tsv")
    with open(table, "w") as fh:
        fh.write("\t".join(SWEEP_COLUMNS) + "\n")

    def record(name, res):
        with open(table, "a") as fh:
            fh.write(f"{name}\t{res[0]!r}\t{res[1]!r}\t{res[2]!r}\t{res[3]:.1f}\n")
        print(f"{name}\tmAP={res[0]:.4f}\tOF1={res[1]:.4f}\tCF1={res[2]:.4f}\t{res[3]:.1f}s", flush=True)

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for name, res in zip(names, pool.map(_variant, jobs)):
                record(name, res)
    else:
        for name, job in zip(names, jobs):
            record(name, _variant(job))
    return 0


def trace_records(model, image, rng=None):
    """Per-iteration region records for one image.

    Returns:
        list of dicts, one per glimpse iteration 1..T, each with the location
        that produced it and k regions (normalized cx, cy, w, h; pixel
        x0, y0, x1, y1; top-3 (class, score) pairs).
    """
    n = image.shape[0]
    with ad.no_grad():
        fmap = model.features(image[None])
        traj = model.run(fmap, rng=rng, greedy=rng is None)
    records = []
    for t in range(traj.T):
        boxes = traj.boxes[t][0]
        scores = traj.scores[t].data[0]
        regions = []
        for r, (cx, cy, w, h) in enumerate(boxes):
            top = np.lexsort((np.arange(scores.shape[1]), -scores[r]))[:3]
            regions.append({
                "region": r,
                "norm": [float(cx), float(cy), float(w), float(h)],
                "pixels": [float((cx - w / 2) * n), float((cy - h / 2) * n),
                           float((cx + w / 2) * n), float((cy + h / 2) * n)],
                "top3": [[int(c), float(scores[r, c])] for c in top],
            })
        loc = traj.locations[t][0]
        records.append({"iteration": t + 1, "location": [float(loc[0]), float(loc[1])],
                        "regions": regions})
    return records


def cmd_trace(args):
    if not args.checkpoint:
        raise UsageError("trace requires --checkpoint")
    trainer = load_checkpoint(args.checkpoint)
    image = read_raster(args.image)
    size = trainer.cfg.input_size
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"{args.image}: image must be square, got {image.shape[1]}x{image.shape[0]}")
    x = image if image.shape[0] == size else _resize(image[None] / 255.0, size)[0]
    rng = None
    if args.sample:
        rng = np.random.default_rng([DEFAULT_SEED if args.seed is None else args.seed, 4])
    records = trace_records(trainer.model, x, rng)
    with open(f"{args.out}.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(f"{args.out}.plot.tsv", "w") as fh:
        fh.write("iteration\tregion\tx0\ty0\tx1\ty1\ttop_class\n")
        for rec in records:
            for reg in rec["regions"]:
                x0, y0, x1, y1 = reg["pixels"]
                fh.write(f"{rec['iteration']}\t{reg['region']}\t{x0!r}\t{y0!r}\t{x1!r}\t{y1!r}\t"
                         f"{reg['top3'][0][0]}\n")
    print(f"wrote {len(records)} records to {args.out}.jsonl")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "trace": cmd_trace}


def main(argv=None):
    parser = build_parser()
    verb = None
    try:
        args = parser.parse_args(argv)
        verb = args.verb
        if verb is None:
            raise UsageError("a verb is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        # the seed choice is always reported
        log.setLevel(logging.INFO)
        return COMMANDS[verb](args)
    except SystemExit as exc:
        return exc.code
    except UsageError as exc:
        return _fail(verb, "usage", exc, 2)
    except (CheckpointError, ad.BlobError) as exc:
        return _fail(verb, "checkpoint", exc, 3)
    except TrainingDiverged as exc:
        return _fail(verb, "diverged", exc, 4)
    except (OSError, ValueError) as exc:
        return _fail(verb, "input", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
