"""Single-layer variational autoencoder used to synthesize per-class balancing images.

The KL term is the literal formula ``sum(sigma^2 + mu^2 - log(sigma) - 1)``
(no 1/2 factor, log of sigma rather than of sigma^2) while sampling uses
``z = mu + exp(sigma) * eps``. Both are kept as written; ``standard_kl``
switches the KL term to the textbook Gaussian form.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    EmptyDataset,
    LengthMismatch,
    NonFiniteLoss,
    NonPositiveSigma,
    ShapeMismatch,
    UnknownClass,
)
from .ingest import FaceRecord, Source, synthetic_record
from .preprocess import CANONICAL_SHAPE, ImageSet

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-4


@dataclass(frozen=True)
class VaeTrainConfig:
    epochs: int = 20
    batch: int = 128
    lr: float = 1e-3
    latent_dim: int = 128
    seed: int = 0
    standard_kl: bool = False
    jitter: float = 0.5
    image_shape: tuple[int, int, int] = CANONICAL_SHAPE

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.latent_dim < 1:
            raise ValueError(f"epochs, batch and latent_dim must be >= 1: {self}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class LatentCode:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise LengthMismatch(f"mu {tuple(self.mu.shape)} vs sigma {tuple(self.sigma.shape)}")


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def reparameterize(code: LatentCode, eps) -> torch.Tensor:
    """z = mu + exp(sigma) * eps, elementwise."""
    eps = _t(eps).to(code.mu.dtype)
    if eps.shape != code.mu.shape:
        raise LengthMismatch(f"eps {tuple(eps.shape)} vs mu {tuple(code.mu.shape)}")
    return code.mu + torch.exp(code.sigma) * eps


def kl_loss(code: LatentCode, standard: bool = False) -> torch.Tensor:
    """KL regularizer, summed over latent dims and averaged over any leading batch dims."""
    mu, sigma = _t(code.mu), _t(code.sigma)
    if bool((sigma <= 0).any()):
        raise NonPositiveSigma("kl_loss needs sigma > 0")
    if standard:
        terms = 0.5 * (sigma ** 2 + mu ** 2 - 2 * torch.log(sigma) - 1)
    else:
        terms = sigma ** 2 + mu ** 2 - torch.log(sigma) - 1
    total = terms.sum(dim=-1)
    return total.mean() if total.dim() else total


def recon_loss(x, x_hat) -> torch.Tensor:
    x, x_hat = _t(x), _t(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return torch.mean((x - x_hat) ** 2)


class VAE(nn.Module):
    """One linear layer per encoder head and one linear decoder layer.

    The sigma head goes through softplus (plus a small floor) so the log in the
    KL term is always defined; the decoder ends in a sigmoid to stay in [0, 1].
    """

    def __init__(self, image_shape: Sequence[int] = CANONICAL_SHAPE, latent_dim: int = 128):
        super().__init__()
        self.image_shape = tuple(image_shape)
        n = math.prod(self.image_shape)
        self.latent_dim = latent_dim
        self.fc_mu = nn.Linear(n, latent_dim)
        self.fc_sigma = nn.Linear(n, latent_dim)
        self.fc_dec = nn.Linear(latent_dim, n)

    def encode(self, x: torch.Tensor) -> LatentCode:
        flat = x.reshape(x.shape[0], -1)
        return LatentCode(self.fc_mu(flat), F.softplus(self.fc_sigma(flat)) + SIGMA_FLOOR)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc_dec(z)).reshape(z.shape[0], *self.image_shape)

    def forward(self, x: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, LatentCode]:
        code = self.encode(x)
        return self.decode(reparameterize(code, eps)), code


def _check_shape(images, expected):
    if tuple(images.shape[1:]) != tuple(expected):
        raise ShapeMismatch(f"expected images of shape {tuple(expected)}, got {tuple(images.shape[1:])}")


def encode(image, model: VAE) -> LatentCode:
    """Latent code of a single HxWx3 image (or a batch)."""
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    single = x.dim() == 3
    if single:
        x = x[None]
    _check_shape(x, model.image_shape)
    with torch.no_grad():
        code = model.encode(x)
    return LatentCode(code.mu[0], code.sigma[0]) if single else code


@dataclass
class TrainedVae:
    model: VAE
    config: VaeTrainConfig
    history: list[float]
    class_means: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        torch.save({
            "state_dict": self.model.state_dict(),
            "config": dataclasses.asdict(self.config),
            "seed": self.config.seed,
            "history": self.history,
            "class_means": {k: v.tolist() for k, v in self.class_means.items()},
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedVae":
        blob = torch.load(path, weights_only=False)
        cfg = dict(blob["config"])
        cfg["image_shape"] = tuple(cfg["image_shape"])
        config = VaeTrainConfig(**cfg)
        model = VAE(config.image_shape, config.latent_dim)
        model.load_state_dict(blob["state_dict"])
        means = {k: np.asarray(v) for k, v in blob["class_means"].items()}
        return cls(model, config, list(blob["history"]), means)


def train_vae(images: np.ndarray, config: VaeTrainConfig = VaeTrainConfig()) -> TrainedVae:
    """Adam on reconstruction MSE + KL; ``history`` holds the mean loss of each epoch."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise EmptyDataset("train_vae got no images")
    _check_shape(images, config.image_shape)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = VAE(config.image_shape, config.latent_dim)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    data = torch.from_numpy(images)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = torch.randperm(len(data), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(data), config.batch):
            x = data[order[start:start + config.batch]]
            eps = torch.randn(x.shape[0], config.latent_dim, generator=gen)
            x_hat, code = model(x, eps)
            rec = recon_loss(x, x_hat)
            kl = kl_loss(code, standard=config.standard_kl)
            loss = rec + kl
            for name, value in (("recon", rec), ("kl", kl)):
                if not torch.isfinite(value):
                    raise NonFiniteLoss(name, step, float(value))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
            seen += x.shape[0]
            step += 1
        history.append(total / seen)
        log.info("vae epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    return TrainedVae(model, config, history)


def fit_class_latents(trained: TrainedVae, images: np.ndarray, labels: Sequence[str]) -> dict[str, np.ndarray]:
    """Mean latent ``mu`` of each class; stored on ``trained`` and returned."""
    code = encode(np.asarray(images, dtype=np.float32), trained.model)
    mu = code.mu.numpy().astype(np.float64)
    labels = np.asarray(labels)
    trained.class_means = {str(c): mu[labels == c].mean(axis=0) for c in sorted(set(labels.tolist()))}
    return trained.class_means


def generate_vae_samples(cls: str, count: int, trained: TrainedVae, jitter: float | None = None,
                         seed: int = 0) -> list[np.ndarray]:
    """Decode ``count`` points drawn around the class-mean latent with isotropic Gaussian jitter."""
    if cls not in trained.class_means:
        raise UnknownClass(f"no latent mean for class {cls!r}")
    if count == 0:
        return []
    jitter = trained.config.jitter if jitter is None else jitter
    rng = np.random.default_rng(seed)
    center = trained.class_means[cls]
    z = center + jitter * rng.standard_normal((count, center.shape[0]))
    with torch.no_grad():
        out = trained.model.decode(torch.as_tensor(z, dtype=torch.float32)).numpy()
    return [np.clip(o, 0.0, 1.0) for o in out]


class VaeGenerator:
    """Balancing callback: decodes new images for a class and stores them in an ``ImageSet``.

    Generated records assert only the requested class; their other labels are unknown.
    """

    engine = "vae"

    def __init__(self, images: ImageSet, attribute: str, trained: TrainedVae, seed: int = 0,
                 source: Source = Source.UTKFACE):
        self.images = images
        self.attribute = attribute
        self.trained = trained
        self.seed = seed
        self.source = source

    def __call__(self, cls: str, count: int) -> list[FaceRecord]:
        class_seed = int(np.random.default_rng([self.seed, *cls.encode()]).integers(2**31))
        out = []
        for k, image in enumerate(generate_vae_samples(cls, count, self.trained, seed=class_seed)):
            rec = synthetic_record(f"vae/{self.attribute}/{cls}/{k:06d}", self.attribute, cls, self.source,
                                   {"engine": self.engine, "seed": self.seed,
                                    "jitter": self.trained.config.jitter})
            self.images.add(rec, image)
            out.append(rec)
        return out


def config_metadata(config: VaeTrainConfig) -> Mapping[str, object]:
    return {"epochs": config.epochs, "batch": config.batch, "lr": config.lr, "optimizer": "adam",
            "latent_dim": config.latent_dim, "seed": config.seed, "standard_kl": config.standard_kl}
