"""Label-conditioned multi-domain image translation GAN and its loss terms.

One generator translates a face into any of eight domains (two genders, two
age classes, four ethnicities); one discriminator outputs a real/fake
probability and a softmax over the domains. Losses follow the plain
adversarial + domain-classification + cycle set, without gradient penalty.

Images cross this module's boundary in [0, 1]; the networks work in [-1, 1].
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn
from torch.nn import functional as F

from .errors import EmptyDataset, InvalidDomain, NonFiniteLoss, ShapeMismatch, UnknownClass
from .ingest import FaceRecord, Source, synthetic_record
from .preprocess import CANONICAL_SHAPE, ImageSet

log = logging.getLogger(__name__)

DOMAINS = ("male", "female", "young", "old", "white", "black", "asian", "indian")
DOMAIN_CLASS = {
    "male": ("gender", "Male"), "female": ("gender", "Female"),
    "young": ("age", "Young"), "old": ("age", "Old"),
    "white": ("ethnicity", "White"), "black": ("ethnicity", "Black"),
    "asian": ("ethnicity", "Asian"), "indian": ("ethnicity", "Indian"),
}
CLASS_DOMAIN = {v: k for k, v in DOMAIN_CLASS.items()}

PROB_EPS = 1e-7


def domain_label(domain: str | int) -> np.ndarray:
    idx = DOMAINS.index(domain) if isinstance(domain, str) and domain in DOMAINS else domain
    if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(DOMAINS):
        raise InvalidDomain(f"unknown domain {domain!r}")
    out = np.zeros(len(DOMAINS))
    out[idx] = 1.0
    return out


def domain_index(label) -> int:
    label = np.asarray(label, dtype=np.float64)
    if label.shape != (len(DOMAINS),) or np.count_nonzero(label == 1) != 1 or np.count_nonzero(label) != 1:
        raise InvalidDomain(f"not a one-hot vector over {len(DOMAINS)} domains: {label}")
    return int(np.argmax(label))


def domain_for(attribute: str, cls: str) -> str:
    try:
        return CLASS_DOMAIN[(attribute, cls)]
    except KeyError:
        raise UnknownClass(f"no translation domain for {attribute}={cls!r}") from None


# losses -----------------------------------------------------------------------

def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def adv_loss(src_real, src_fake) -> torch.Tensor:
    """mean log D_src(x) + mean log(1 - D_src(G(x, c)))."""
    src_real, src_fake = _t(src_real), _t(src_fake)
    return torch.log(_clamp(src_real)).mean() + torch.log(1 - _clamp(src_fake)).mean()


def _true_class_prob(d_cls: torch.Tensor, domain) -> torch.Tensor:
    domain = domain if isinstance(domain, torch.Tensor) else torch.as_tensor(np.asarray(domain))
    if not domain.is_floating_point():
        # integer domain indices
        return d_cls.gather(-1, domain.long().reshape(*d_cls.shape[:-1], 1)).squeeze(-1)
    if domain.shape != d_cls.shape:
        raise ShapeMismatch(f"domain labels {tuple(domain.shape)} vs class probabilities {tuple(d_cls.shape)}")
    return (d_cls * domain.to(d_cls.dtype)).sum(-1)


def cls_loss_real(d_cls, true_domain) -> torch.Tensor:
    """mean -log D_cls(c' | x) for real images with their own domain c'.

    ``true_domain`` is one-hot (same shape as ``d_cls``) or integer indices.
    """
    return -torch.log(_clamp(_true_class_prob(_t(d_cls), true_domain))).mean()


def cls_loss_fake(d_cls_on_generated, target_domain) -> torch.Tensor:
    """mean -log D_cls(c | G(x, c)) for translated images and their target domain c."""
    return -torch.log(_clamp(_true_class_prob(_t(d_cls_on_generated), target_domain))).mean()


def cycle_loss(x, x_reconstructed) -> torch.Tensor:
    """L1 distance between an image and its round trip, averaged per element."""
    x, x_reconstructed = _t(x), _t(x_reconstructed)
    if x.shape != x_reconstructed.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(x_reconstructed.shape)}")
    return (x - x_reconstructed).abs().mean()


def disc_loss(adv, cls_real, lambda_cls: float = 1.0):
    return -adv + lambda_cls * cls_real


def gen_loss(adv, cls_fake, rec, lambda_cls: float = 1.0, lambda_rec: float = 10.0):
    return adv + lambda_cls * cls_fake + lambda_rec * rec


# networks ---------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class Generator(nn.Module):
    """Encoder / residual bottleneck / decoder that predicts a residual on the input.

    The domain label is tiled over the image as extra input channels. The
    decoder upsamples back to the exact pre-downsampling sizes, so odd sizes
    such as 75 round-trip. With ``identity_init`` the last conv starts at
    zero and the untrained generator is the identity map.
    """

    def __init__(self, num_domains: int = len(DOMAINS), conv_dim: int = 64, repeat_num: int = 6,
                 down_num: int = 2, identity_init: bool = True, image_shape=CANONICAL_SHAPE):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.num_domains = num_domains
        self.stem = nn.Sequential(
            nn.Conv2d(3 + num_domains, conv_dim, 7, 1, 3, bias=False),
            nn.InstanceNorm2d(conv_dim, affine=True),
            nn.ReLU(inplace=True),
        )
        dims = [conv_dim * 2 ** i for i in range(down_num + 1)]
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(a, b, 4, 2, 1, bias=False), nn.InstanceNorm2d(b, affine=True),
                          nn.ReLU(inplace=True))
            for a, b in zip(dims[:-1], dims[1:])
        )
        self.bottleneck = nn.Sequential(*[ResidualBlock(dims[-1]) for _ in range(repeat_num)])
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(b, a, 3, 1, 1, bias=False), nn.InstanceNorm2d(a, affine=True),
                          nn.ReLU(inplace=True))
            for a, b in reversed(list(zip(dims[:-1], dims[1:])))
        )
        self.head = nn.Conv2d(conv_dim, 3, 7, 1, 3)
        if identity_init:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def residual(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """Additive change in [-1, 1] units for NCHW ``x`` and (N, domains) ``c``."""
        c_map = c.to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        h = self.stem(torch.cat([x, c_map], dim=1))
        sizes = []
        for layer in self.down:
            sizes.append(h.shape[-2:])
            h = layer(h)
        h = self.bottleneck(h)
        for layer, size in zip(self.up, reversed(sizes)):
            h = layer(F.interpolate(h, size=tuple(size), mode="nearest"))
        return self.head(h)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        return (x + self.residual(x, c)).clamp(-1, 1)


@dataclass
class DiscriminatorOutput:
    src: torch.Tensor   # probability the input is real, shape (N,)
    cls: torch.Tensor   # softmax over domains, shape (N, domains)


class Discriminator(nn.Module):
    def __init__(self, num_domains: int = len(DOMAINS), conv_dim: int = 64, num_layers: int = 4):
        super().__init__()
        layers, dim = [], 3
        for i in range(num_layers):
            out = conv_dim * 2 ** i
            layers += [nn.Conv2d(dim, out, 4, 2, 1), nn.LeakyReLU(0.01)]
            dim = out
        self.main = nn.Sequential(*layers)
        self.src_head = nn.Conv2d(dim, 1, 3, 1, 1, bias=False)
        self.cls_head = nn.Linear(dim, num_domains)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        h = self.main(x)
        src = torch.sigmoid(self.src_head(h).mean(dim=(1, 2, 3)))
        cls = F.softmax(self.cls_head(h.mean(dim=(2, 3))), dim=-1)
        return DiscriminatorOutput(_clamp(src), cls)


# training ---------------------------------------------------------------------

@dataclass(frozen=True)
class StarganTrainConfig:
    iterations: int = 20000
    batch: int = 16
    per_class_images: int = 2000
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    checkpoint_every: int = 1000
    seed: int = 0
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps: int = 1
    g_conv_dim: int = 64
    g_repeat: int = 6
    d_conv_dim: int = 64
    d_layers: int = 4
    identity_init: bool = True
    image_shape: tuple[int, int, int] = CANONICAL_SHAPE

    def __post_init__(self):
        counts = (self.iterations, self.batch, self.per_class_images, self.checkpoint_every, self.d_steps)
        if min(counts) < 1:
            raise ValueError(f"iteration/batch/checkpoint counts must be >= 1: {self}")
        if self.lambda_cls <= 0 or self.lambda_rec <= 0:
            raise ValueError("lambda_cls and lambda_rec must be positive")


LOSS_TERMS = ("d_adv", "d_cls", "d_loss", "g_adv", "g_cls", "g_rec", "g_loss")


@dataclass
class TrainedStargan:
    generator: Generator
    discriminator: Discriminator
    config: StarganTrainConfig
    history: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in LOSS_TERMS})
    checkpoints: list[int] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)
    iteration: int = 0

    @property
    def checkpoint_id(self) -> str:
        return f"iter_{self.iteration:06d}"

    def save(self, path: str | Path) -> None:
        torch.save(_snapshot(self), path)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedStargan":
        blob = torch.load(path, weights_only=False)
        cfg = dict(blob["config"])
        cfg["image_shape"] = tuple(cfg["image_shape"])
        config = StarganTrainConfig(**cfg)
        g, d = build_networks(config)
        g.load_state_dict(blob["generator"])
        d.load_state_dict(blob["discriminator"])
        return cls(g, d, config, history=blob.get("history", {}), iteration=blob["iteration"])


def build_networks(config: StarganTrainConfig) -> tuple[Generator, Discriminator]:
    g = Generator(len(DOMAINS), config.g_conv_dim, config.g_repeat, identity_init=config.identity_init,
                  image_shape=config.image_shape)
    d = Discriminator(len(DOMAINS), config.d_conv_dim, config.d_layers)
    return g, d


def _snapshot(trained: TrainedStargan) -> dict:
    # clone before writing so a checkpoint never sees a half-applied update
    return {
        "generator": {k: v.detach().clone() for k, v in trained.generator.state_dict().items()},
        "discriminator": {k: v.detach().clone() for k, v in trained.discriminator.state_dict().items()},
        "config": dataclasses.asdict(trained.config),
        "iteration": trained.iteration,
        "history": {k: list(v) for k, v in trained.history.items()},
    }


def to_internal(images: np.ndarray) -> torch.Tensor:
    """NHWC [0, 1] numpy -> NCHW [-1, 1] tensor."""
    return torch.as_tensor(np.asarray(images, dtype=np.float32)).permute(0, 3, 1, 2) * 2 - 1


def sample_grid(generator: Generator, reference: np.ndarray) -> np.ndarray:
    """Reference image followed by its translation into every domain, side by side."""
    tiles = [np.asarray(reference, dtype=np.float64)]
    tiles += [translate(reference, domain_label(d), generator) for d in DOMAINS]
    return np.concatenate(tiles, axis=1)


def _save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(path)


def train_stargan(domain_datasets: Mapping[str, np.ndarray], config: StarganTrainConfig = StarganTrainConfig(),
                  out_dir: str | Path | None = None) -> TrainedStargan:
    """Alternate discriminator and generator updates for ``config.iterations`` iterations.

    ``domain_datasets`` maps each of the eight domain names to an (N, H, W, 3)
    array in [0, 1]. Every ``checkpoint_every`` iterations a snapshot is
    recorded (and, with ``out_dir``, written together with a sample grid).
    """
    missing = [d for d in DOMAINS if d not in domain_datasets]
    if missing:
        raise EmptyDataset(f"missing domains: {missing}")
    for d in DOMAINS:
        shape = np.shape(domain_datasets[d])
        if shape[0] < config.batch:
            raise EmptyDataset(f"domain {d!r} has {shape[0]} images, need at least batch={config.batch}")
        if tuple(shape[1:]) != tuple(config.image_shape):
            raise ShapeMismatch(f"domain {d!r} images are {shape[1:]}, config expects {config.image_shape}")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    data = [to_internal(domain_datasets[d]) for d in DOMAINS]
    reference = np.asarray(domain_datasets[DOMAINS[0]][0], dtype=np.float64)
    g, d = build_networks(config)
    g_opt = torch.optim.Adam(g.parameters(), config.lr_g, betas=(config.beta1, config.beta2))
    d_opt = torch.optim.Adam(d.parameters(), config.lr_d, betas=(config.beta1, config.beta2))
    trained = TrainedStargan(g, d, config)
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "samples").mkdir(parents=True, exist_ok=True)
    n_dom = len(DOMAINS)
    eye = torch.eye(n_dom)

    def batch():
        org = rng.integers(n_dom, size=config.batch)
        x = torch.stack([data[k][rng.integers(len(data[k]))] for k in org])
        trg = (org + rng.integers(1, n_dom, size=config.batch)) % n_dom
        return x, torch.as_tensor(org), torch.as_tensor(trg)

    def check(it, **terms):
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise NonFiniteLoss(name, it, float(value))

    for it in range(1, config.iterations + 1):
        for _ in range(config.d_steps):
            x, org, trg = batch()
            out_real = d(x)
            with torch.no_grad():
                fake = g(x, eye[trg])
            out_fake = d(fake)
            d_adv = adv_loss(out_real.src, out_fake.src)
            d_cls = cls_loss_real(out_real.cls, org)
            d_total = disc_loss(d_adv, d_cls, config.lambda_cls)
            check(it, d_adv=d_adv, d_cls=d_cls)
            d_opt.zero_grad()
            d_total.backward()
            d_opt.step()

        x, org, trg = batch()
        fake = g(x, eye[trg])
        out_fake = d(fake)
        with torch.no_grad():
            src_real = d(x).src
        g_adv = adv_loss(src_real, out_fake.src)
        g_cls = cls_loss_fake(out_fake.cls, trg)
        g_rec = cycle_loss(x, g(fake, eye[org]))
        g_total = gen_loss(g_adv, g_cls, g_rec, config.lambda_cls, config.lambda_rec)
        check(it, g_adv=g_adv, g_cls=g_cls, g_rec=g_rec)
        g_opt.zero_grad()
        g_total.backward()
        g_opt.step()

        for name, value in zip(LOSS_TERMS, (d_adv, d_cls, d_total, g_adv, g_cls, g_rec, g_total)):
            trained.history[name].append(value.item())
        trained.iteration = it
        if it % config.checkpoint_every == 0:
            trained.checkpoints.append(it)
            if out_dir is not None:
                path = out_dir / "checkpoints" / f"{trained.checkpoint_id}.pt"
                torch.save(_snapshot(trained), path)
                trained.checkpoint_paths.append(path)
                _save_png(sample_grid(g, reference), out_dir / "samples" / f"{trained.checkpoint_id}.png")
            log.info("stargan it %d: d_loss %.4f g_loss %.4f g_rec %.4f",
                     it, d_total.item(), g_total.item(), g_rec.item())
    return trained


def translate(x: np.ndarray, c, generator: Generator) -> np.ndarray:
    """Translate one HxWx3 image in [0, 1] into domain ``c`` (one-hot); output in [0, 1].

    Computed as ``x + residual / 2``, the [0, 1] image of ``G(x, c)``, so an
    identity generator returns ``x`` exactly.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape != generator.image_shape:
        raise ShapeMismatch(f"expected {generator.image_shape}, got {x.shape}")
    idx = domain_index(c)
    was_training = generator.training
    generator.eval()
    with torch.no_grad():
        x01 = torch.as_tensor(x).permute(2, 0, 1)[None]
        delta = generator.residual(x01 * 2 - 1, torch.eye(len(DOMAINS))[[idx]])
        out = (x01 + delta / 2).clamp(0, 1)[0].permute(1, 2, 0).numpy()
    generator.train(was_training)
    return out


def generate_balanced_set(sources: Sequence[FaceRecord], deficits: Mapping[str, int], trained: TrainedStargan,
                          images: ImageSet, seed: int = 0, source: Source = Source.UTKFACE) -> list[FaceRecord]:
    """Fill each domain's deficit by translating uniformly drawn source images into it.

    Sources already in the target class are skipped when others exist, so each
    synthetic image is a genuine translation. Synthetic records assert only
    the targeted attribute; every other label is left unknown.
    """
    for dom, n in deficits.items():
        if dom not in DOMAIN_CLASS:
            raise UnknownClass(f"unknown domain {dom!r}")
        if n < 0:
            raise ValueError(f"negative deficit for {dom!r}")
    out = []
    for dom in DOMAINS:
        n = deficits.get(dom, 0)
        if n == 0:
            continue
        attribute, cls = DOMAIN_CLASS[dom]
        pool = [r for r in sources if r.label(attribute) != cls] or list(sources)
        if not pool:
            raise EmptyDataset("no source images to translate")
        rng = np.random.default_rng([seed, DOMAINS.index(dom)])
        for k, i in enumerate(rng.integers(len(pool), size=n)):
            src = pool[int(i)]
            image = translate(images.image(src.image_ref), domain_label(dom), trained.generator)
            rec = synthetic_record(
                f"stargan/{dom}/{k:06d}", attribute, cls, source,
                {"engine": "stargan", "seed": seed, "source": src.image_ref, "target_domain": dom,
                 "checkpoint": trained.checkpoint_id},
            )
            images.add(rec, image)
            out.append(rec)
    return out


class StarganGenerator:
    """``balance_by_generation`` callback backed by a trained translator."""

    engine = "stargan"

    def __init__(self, images: ImageSet, attribute: str, trained: TrainedStargan, seed: int = 0):
        self.images = images
        self.attribute = attribute
        self.trained = trained
        self.seed = seed
        self._real = [r for r in images.records if not r.synthetic]

    def __call__(self, cls: str, count: int) -> list[FaceRecord]:
        return generate_balanced_set(self._real, {domain_for(self.attribute, cls): count}, self.trained,
                                     self.images, self.seed)


def config_metadata(config: StarganTrainConfig) -> dict:
    return dataclasses.asdict(config)
