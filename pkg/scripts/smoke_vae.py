"""Train the VAE on synthetic blobs and save a grid of generated samples per class.

    python scripts/smoke_vae.py --epochs 5 --out vae_smoke
"""
import argparse
import time
from pathlib import Path

import numpy as np
from PIL import Image

from facebias import synthetic
from facebias.vae import VaeTrainConfig, fit_class_latents, generate_vae_samples, train_vae


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("vae_smoke"))
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    genders = rng.integers(0, 2, args.images)
    images = np.stack([synthetic.blob_image(rng, 75, int(g), int(rng.integers(4))) for g in genders])
    t0 = time.perf_counter()
    trained = train_vae(images.astype(np.float32), VaeTrainConfig(epochs=args.epochs, batch=args.batch, seed=args.seed))
    print(f"trained in {time.perf_counter() - t0:.1f}s; loss per epoch: {[round(v, 2) for v in trained.history]}")
    fit_class_latents(trained, images, ["Male" if g == 0 else "Female" for g in genders])

    args.out.mkdir(parents=True, exist_ok=True)
    trained.save(args.out / "vae.pt")
    for cls in ("Male", "Female"):
        row = np.concatenate(generate_vae_samples(cls, 8, trained, seed=args.seed), axis=1)
        Image.fromarray(np.round(row * 255).astype(np.uint8)).save(args.out / f"samples_{cls}.png")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
