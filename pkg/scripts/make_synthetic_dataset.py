"""Write small synthetic UTKFace / LFWA+ / CelebA stand-ins and a matching config.

    python scripts/make_synthetic_dataset.py data/synthetic --utk 600 --lfwa 200 --celeba 200
    facebias run --config data/synthetic/experiment.yaml
"""
import argparse
from pathlib import Path

import yaml

from facebias import synthetic


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("out", type=Path)
    p.add_argument("--utk", type=int, default=600)
    p.add_argument("--lfwa", type=int, default=200)
    p.add_argument("--celeba", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--engine", default="geometric")
    p.add_argument("--attribute", default="gender")
    args = p.parse_args(argv)

    out = args.out
    synthetic.make_utkface(out / "UTKFace", args.utk, seed=args.seed)
    synthetic.make_lfwa(out / "lfwa", args.lfwa, seed=args.seed + 1)
    synthetic.make_celeba(out / "celeba", args.celeba, seed=args.seed + 2)
    per_class = max(1, min(args.lfwa, args.celeba) // 10)
    config = {
        "seed": args.seed,
        "output_dir": f"runs/{args.attribute}_{args.engine}",
        "attribute": args.attribute,
        "engine": args.engine,
        "datasets": {
            "utkface": {"images": "UTKFace"},
            "lfwa": {"attributes": "lfwa/lfw_attributes.txt", "images": "lfwa/images"},
            "celeba": {"attributes": "celeba/list_attr_celeba.txt", "images": "celeba/img_align_celeba"},
        },
        "classifier": {"backbone": "tiny", "pretrained": False, "epochs": 5, "batch": 32, "lr": 0.01},
        "evaluation": {"external": {"lfwa": per_class, "celeba": per_class}, "plots": False},
    }
    (out / "experiment.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    print(out / "experiment.yaml")


if __name__ == "__main__":
    main()
