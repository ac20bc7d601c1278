"""Run every (attribute, engine) pair from one base config, each in its own run directory.

    python scripts/run_grid.py configs/smoke.yaml --engines baseline undersample geometric
    python scripts/run_grid.py configs/smoke.yaml --jobs 3

Prints one line per run with native mean accuracy and its std across classes.
"""
import argparse
import copy
import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from facebias.config import ENGINES, ExperimentConfig
from facebias.ingest import ATTRIBUTES
from facebias.pipeline import run_pipeline


def run_one(raw, base_dir, attribute, engine, out_root):
    raw = copy.deepcopy(raw)
    raw.update(attribute=attribute, engine=engine, output_dir=str(Path(out_root) / f"{attribute}_{engine}"))
    blocks = raw.get("engine_config") or {}
    raw["engine_config"] = {engine: blocks[engine]} if engine in blocks else {}
    run_dir = run_pipeline(ExperimentConfig.from_dict(raw, base_dir))
    metrics = json.loads((run_dir / "06_report" / "metrics.json").read_text())
    native = metrics["utkface"][0]
    return attribute, engine, native["mean_accuracy"], native["accuracy_std"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("config", type=Path)
    p.add_argument("--attributes", nargs="+", default=sorted(ATTRIBUTES))
    p.add_argument("--engines", nargs="+", default=list(ENGINES), choices=ENGINES)
    p.add_argument("--out", type=Path, default=Path("runs/grid"))
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)

    raw = yaml.safe_load(args.config.read_text())
    base_dir = args.config.parent
    out_root = args.out if args.out.is_absolute() else Path.cwd() / args.out
    pairs = [(a, e) for a in args.attributes for e in args.engines]
    with ProcessPoolExecutor(args.jobs) as pool:
        futures = [pool.submit(run_one, raw, base_dir, a, e, out_root) for a, e in pairs]
        for f in futures:
            attribute, engine, mean, std = f.result()
            print(f"{attribute:10s} {engine:12s} mean acc {mean:.3f}  std {std:.3f}")


if __name__ == "__main__":
    main()
