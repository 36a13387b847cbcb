"""Cached multi-seed training runs for the ablation comparisons."""

import json
import os
import time

from .data import SceneSpec, default_splits
from .training import Trainer, evaluate, write_log

_SPLITS = {}


def splits(n_train=4000, n_test=1000, spec=SceneSpec()):
    key = (n_train, n_test, spec)
    if key not in _SPLITS:
        _SPLITS[key] = default_splits(spec, n_train, n_test)
    return _SPLITS[key]


def run_variant(cfg, cache_dir=None, n_train=4000, n_test=1000, spec=SceneSpec()):
    """Train ``cfg`` on the default synthetic splits and evaluate ten-view.

    Results are cached as ``<cache_dir>/<fingerprint>-e<epochs>-<n_train>-<n_test>.json``
    together with the per-epoch log, so repeated calls are free.

    Returns:
        dict with map, of1, cf1, seconds, history and the config fingerprint.
    """
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        stem = f"{cfg.fingerprint()}-e{cfg.epochs}-{n_train}-{n_test}-s{spec.seed}"
        path = os.path.join(cache_dir, stem + ".json")
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)
    train, test = splits(n_train, n_test, spec)
    t0 = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.fit(train)
    report = evaluate(trainer.model, test)
    result = {
        "mode": cfg.mode, "T": cfg.T, "seed": cfg.seed, "fingerprint": cfg.fingerprint(),
        "map": report.map, "of1": report.of1, "cf1": report.cf1,
        "seconds": time.perf_counter() - t0,
        "history": [{k: float(v) for k, v in r.items()} for r in trainer.history],
    }
    if path:
        write_log(path[:-5] + ".csv", trainer.history)
        with open(path + ".tmp", "w") as fh:
            json.dump(result, fh, indent=1)
        os.replace(path + ".tmp", path)
    return result


def seed_average(base, seeds=(0, 1, 2), cache_dir=None, **kw):
    """Mean test mAP over seeds plus the per-seed results."""
    runs = [run_variant(base.replace(seed=s), cache_dir=cache_dir, **kw) for s in seeds]
    return sum(r["map"] for r in runs) / len(runs), runs


DEFAULT_CACHE = os.environ.get("RECATTN_RESULTS", os.path.join(os.getcwd(), "results", "trends"))
SEEDS = (0, 1, 2)


def trend_variants(base=None):
    """Named configurations compared by the ablation trends, in run order."""
    from .training import TrainConfig
    base = base or TrainConfig()
    return {
        "full": base,
        "random-location": base.replace(mode="random-location"),
        "T=1": base.replace(T=1),
        "T=10": base.replace(T=10),
        "single-region": base.replace(mode="single-region"),
        "no-lstm-A": base.replace(mode="no-lstm-A"),
        "loc-lstm-only-B": base.replace(mode="loc-lstm-only-B"),
    }


def main(argv=None):
    import argparse
    p = argparse.ArgumentParser(prog="python -m recattn.experiments",
                                description="Fill the result cache for every trend variant and seed.")
    p.add_argument("--cache", default=DEFAULT_CACHE, help="result directory")
    p.add_argument("--only", nargs="*", help="variant names to run (default all)")
    args = p.parse_args(argv)
    for name, cfg in trend_variants().items():
        if args.only and name not in args.only:
            continue
        for seed in SEEDS:
            r = run_variant(cfg.replace(seed=seed), cache_dir=args.cache)
            print(f"{name}\tseed={seed}\tmAP={r['map']:.4f}\t{r['seconds']:.0f}s", flush=True)


if __name__ == "__main__":
    main()
