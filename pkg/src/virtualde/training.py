"""Hybrid L1 + adversarial training with the alternating D/G schedule.

One epoch walks through ``n`` mini-batches.  Each cycle spends ``n_d``
consecutive mini-batches on discriminator updates and the following
``n_g`` on generator updates; every update consumes a fresh mini-batch and
a tail cycle may be cut short.

Losses (``eps``-clamped probabilities)::

    L_D = mean(-log D(real)) + mean(-log(1 - D(fake)))
    L_G = mean(-log D(fake)) + lambda * mean|G(x) - bone| + scale terms

The discriminator is trained to minimize ``L_D``; the generator uses the
non-saturating ``-log D(fake)`` term.  Optional scale terms compare the
coarse-to-fine partial output at each intermediate scale against the
area-downsampled target.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imagecore import Image, ImageError, augment, normalize
from .model import (Discriminator, DiscriminatorSpec, Generator, GeneratorSpec,
                    build_discriminator, build_generator, save_checkpoint, sobel_torch)
from .phantom import load_manifest, load_sample

log = logging.getLogger(__name__)

EPS = 1e-7
LOSS_LOG_FIELDS = ["epoch", "step", "kind", "l_d", "l_g_adv", "l_g_l1", "l_g_total"]


class TrainingError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainingConfig:
    lambda_l1: float = 1000.0
    n_g: int = 3
    n_d: int = 1
    batch_size: int = 3
    learning_rate: float = 1e-4
    epochs: int = 100
    patch_count_per_image: int = 4
    scale_supervision_weights: list = field(default_factory=list)
    seed: int = 0
    tx_range: float = 80.0
    rot_range: float = 15.0
    augment_reference_size: int = 2022
    beta1: float = 0.9
    beta2: float = 0.999
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise ValueError("lambda must be >= 0")
        if self.n_g < 1 or self.n_d < 1 or self.batch_size < 1:
            raise ValueError("n_g, n_d and batch_size must be >= 1")
        if self.epochs < 0 or self.patch_count_per_image < 1:
            raise ValueError("epochs must be >= 0 and patch_count_per_image >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        self.scale_supervision_weights = [float(w) for w in self.scale_supervision_weights]

    @classmethod
    def from_dict(cls, data: dict) -> "TrainingConfig":
        data = dict(data)
        if "lambda" in data:
            data["lambda_l1"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise KeyError(f"unknown training config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lambda_l1")
        return d


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    step: int
    kind: str
    l_d: float
    l_g_adv: float
    l_g_l1: float
    l_g_total: float
    l_g_scale: float = 0.0

    def row(self):
        return [self.epoch, self.step, self.kind] + [
            repr(float(v)) for v in (self.l_d, self.l_g_adv, self.l_g_l1, self.l_g_total)]


# -- losses ----------------------------------------------------------------


def l1_loss(generated, target) -> float:
    """Mean absolute difference of two equally sized images or arrays."""
    a = generated.pixels if isinstance(generated, Image) else np.asarray(generated)
    b = target.pixels if isinstance(target, Image) else np.asarray(target)
    if a.shape != b.shape:
        raise ImageError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def adversarial_losses(d_real, d_fake, eps: float = EPS):
    """``(l_d, l_g_adv)`` from discriminator probabilities on real and fake inputs."""
    r = np.clip(np.asarray(d_real, dtype=np.float64), eps, 1 - eps)
    f = np.clip(np.asarray(d_fake, dtype=np.float64), eps, 1 - eps)
    l_d = float(np.mean(-np.log(r)) + np.mean(-np.log1p(-f)))
    l_g = float(np.mean(-np.log(f)))
    return l_d, l_g


def _clamp(p):
    return torch.clamp(p, EPS, 1 - EPS)


def _d_loss(d_real, d_fake):
    return (-torch.log(_clamp(d_real))).mean() + (-torch.log(1 - _clamp(d_fake))).mean()


def _g_adv(d_fake):
    return (-torch.log(_clamp(d_fake))).mean()


# -- schedule --------------------------------------------------------------


def schedule(n: int, n_d: int, n_g: int) -> list[str]:
    """Step kinds for ``n`` mini-batches: ``n_d`` D-steps then ``n_g`` G-steps, repeated."""
    kinds = []
    while len(kinds) < n:
        kinds += ["D"] * n_d + ["G"] * n_g
    return kinds[:n]


# -- batches ---------------------------------------------------------------


def _norm_tensor(img: Image):
    return torch.from_numpy(normalize(img).pixels.astype(np.float32))


def make_batch(samples, config: TrainingConfig | None = None, seeds=None):
    """Stack samples into ``(standard, bone)`` tensors of shape ``(B, 1, H, W)``.

    With ``config`` and ``seeds`` each sample is augmented first; the
    translation range is rescaled from ``augment_reference_size`` to the
    image size.
    """
    std, bone = [], []
    for i, s in enumerate(samples):
        if config is not None and seeds is not None:
            ratio = max(s.standard.shape) / config.augment_reference_size
            s = augment(s, int(seeds[i]), config.tx_range * ratio, config.rot_range)
        std.append(_norm_tensor(s.standard))
        bone.append(_norm_tensor(s.bone))
    return torch.stack(std)[:, None], torch.stack(bone)[:, None]


def epoch_batches(samples, config: TrainingConfig, epoch: int):
    """Shuffled, freshly augmented mini-batches for one epoch."""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(samples))
    seeds = rng.integers(0, 2 ** 31 - 1, size=len(samples))
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        yield make_batch([samples[i] for i in idx], config, seeds[idx])


def generator_objective(gen: Generator, disc: Discriminator, standard, bone, locs,
                        lambda_l1: float, scale_weights=()):
    """Generator loss ``-log D(fake) + lambda * L1`` plus optional per-scale L1 terms.

    ``locs`` lists ``(batch_index, y, x)`` patch corners for the
    discriminator.  D's parameters are frozen while it scores the fake
    patches, so backpropagation only reaches G.  Returns the differentiable
    loss and a dict of its parts as floats.
    """
    p = disc.spec.patch_size

    def patches(g):
        return torch.stack([g[b, :, y:y + p, x:x + p] for b, y, x in locs])

    fake, maps = gen(standard)
    with torch.no_grad():
        cond_p = patches(sobel_torch(standard))
        real_p = patches(sobel_torch(bone))
    fake_p = patches(sobel_torch(fake))
    for q in disc.parameters():
        q.requires_grad_(False)
    try:
        d_fake = disc(cond_p, fake_p)
        with torch.no_grad():
            d_real = disc(cond_p, real_p)
    finally:
        for q in disc.parameters():
            q.requires_grad_(True)
    adv = _g_adv(d_fake)
    l1 = (fake - bone).abs().mean()
    scale = []
    for k, w in enumerate(scale_weights, start=1):
        if k >= len(maps) or w == 0.0:
            continue
        target = F.avg_pool2d(bone, 2 ** k)
        scale.append(w * (gen.cumulative_scale(maps, k) - target).abs().mean())
    loss = adv + lambda_l1 * l1
    for t in scale:
        loss = loss + t
    parts = {"adv": adv.item(), "l1": l1.item(), "scale": [t.item() for t in scale],
             "l_d": _d_loss(d_real, d_fake.detach()).item()}
    return loss, parts


# -- trainer ---------------------------------------------------------------


class Trainer:
    """Owns both networks and their optimizers for the duration of training."""

    def __init__(self, generator: Generator, discriminator: Discriminator,
                 config: TrainingConfig):
        self.gen = generator
        self.disc = discriminator
        self.config = config
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(generator.parameters(), lr=config.learning_rate, betas=betas)
        self.opt_d = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate,
                                      betas=betas)
        self.patch_rng = torch.Generator().manual_seed(int(config.seed) + 7919)

    def _locations(self, batch_size, h, w):
        p = self.disc.spec.patch_size
        if p > h or p > w:
            raise ImageError(f"patch_size {p} exceeds image {h}x{w}")
        n = self.config.patch_count_per_image
        ys = torch.randint(0, h - p + 1, (batch_size, n), generator=self.patch_rng)
        xs = torch.randint(0, w - p + 1, (batch_size, n), generator=self.patch_rng)
        return [(b, int(ys[b, i]), int(xs[b, i])) for b in range(batch_size) for i in range(n)]

    def _patches(self, grads, locs):
        p = self.disc.spec.patch_size
        return torch.stack([grads[b, :, y:y + p, x:x + p] for b, y, x in locs])

    def _scale_terms(self, maps, bone):
        terms = []
        for k, w in enumerate(self.config.scale_supervision_weights, start=1):
            if k >= len(maps) or w == 0.0:
                continue
            target = F.avg_pool2d(bone, 2 ** k)
            terms.append(w * (self.gen.cumulative_scale(maps, k) - target).abs().mean())
        return terms

    def _record(self, epoch, step, kind, l_d, adv, l1, scale_terms):
        adv, l1 = float(adv), float(l1)
        scale = [float(t) for t in scale_terms]
        total = adv + self.config.lambda_l1 * l1
        for t in scale:
            total += t
        rec = LossRecord(epoch, step, kind, float(l_d), adv, l1, total, float(sum(scale)))
        if not all(math.isfinite(v) for v in (rec.l_d, rec.l_g_adv, rec.l_g_l1, rec.l_g_total)):
            raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {rec}", rec)
        return rec

    def discriminator_step(self, batch, epoch=0, step=0) -> LossRecord:
        standard, bone = batch
        with torch.no_grad():
            fake, maps = self.gen(standard)
            cond = sobel_torch(standard)
            real_g = sobel_torch(bone)
            fake_g = sobel_torch(fake)
            locs = self._locations(standard.shape[0], *standard.shape[-2:])
            cond_p = self._patches(cond, locs)
            real_p = self._patches(real_g, locs)
            fake_p = self._patches(fake_g, locs)
            l1 = (fake - bone).abs().mean()
            scale_terms = self._scale_terms(maps, bone)
        self.opt_d.zero_grad(set_to_none=True)
        d_real = self.disc(cond_p, real_p)
        d_fake = self.disc(cond_p, fake_p)
        l_d = _d_loss(d_real, d_fake)
        if not torch.isfinite(l_d):
            raise TrainingError(f"non-finite discriminator loss at epoch {epoch} step {step}")
        l_d.backward()
        self.opt_d.step()
        return self._record(epoch, step, "D", l_d.item(), _g_adv(d_fake).item(), l1.item(),
                            scale_terms)

    def generator_step(self, batch, epoch=0, step=0) -> LossRecord:
        standard, bone = batch
        self.opt_g.zero_grad(set_to_none=True)
        locs = self._locations(standard.shape[0], *standard.shape[-2:])
        loss, parts = generator_objective(self.gen, self.disc, standard, bone, locs,
                                          self.config.lambda_l1,
                                          self.config.scale_supervision_weights)
        rec = self._record(epoch, step, "G", parts["l_d"], parts["adv"], parts["l1"],
                           parts["scale"])
        loss.backward()
        self.opt_g.step()
        return rec

    def train_epoch(self, batches, epoch=0) -> list[LossRecord]:
        """Consume ``batches`` following the D/G cycle; returns one record per step."""
        records = []
        cycle = ["D"] * self.config.n_d + ["G"] * self.config.n_g
        for step, batch in enumerate(batches):
            kind = cycle[step % len(cycle)]
            fn = self.discriminator_step if kind == "D" else self.generator_step
            records.append(fn(batch, epoch, step))
        if not records:
            raise TrainingError("empty dataset: no mini-batches in epoch")
        return records


# -- full runs -------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    validation_log: Path
    val_l1: list
    records: list


def validation_l1(generator: Generator, samples) -> float:
    """Mean normalized-space L1 of the generator over ``samples``."""
    if not samples:
        return float("nan")
    total = 0.0
    with torch.no_grad():
        for s in samples:
            std, bone = make_batch([s])
            out, _ = generator(std)
            total += float((out - bone).abs().mean())
    return total / len(samples)


def apply_thread_cap():
    n = os.environ.get("VDE_NUM_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def train(config: TrainingConfig, manifest, out_dir, generator_spec: GeneratorSpec | None = None,
          discriminator_spec: DiscriminatorSpec | None = None, samples=None,
          val_samples=None) -> TrainResult:
    """Train from a manifest's ``train`` split, validating on its ``test`` split.

    Writes ``loss_log.csv``, ``validation.csv``, a checkpoint every
    ``checkpoint_every`` epochs and ``final.ckpt`` into ``out_dir``.
    ``samples``/``val_samples`` may be given directly instead of a manifest.
    """
    apply_thread_cap()
    torch.manual_seed(config.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if samples is None:
        entries, base = load_manifest(manifest)
        samples = [load_sample(e, base) for e in entries if e["split"] == "train"]
        val_samples = [load_sample(e, base) for e in entries if e["split"] == "test"]
    if not samples:
        raise TrainingError("manifest has no training samples")
    val_samples = val_samples or []
    size = samples[0].standard.shape
    gspec = generator_spec or GeneratorSpec()
    dspec = discriminator_spec or DiscriminatorSpec(patch_size=min(64, *size))
    gen = build_generator(gspec, config.seed)
    disc = build_discriminator(dspec, config.seed + 1)
    trainer = Trainer(gen, disc, config)

    extra = {"training_config": config.to_dict(), "image_size": list(size)}
    loss_path = out_dir / "loss_log.csv"
    val_path = out_dir / "validation.csv"
    records, val_hist = [], [validation_l1(gen, val_samples)]
    log.info("epoch 0 validation L1 %.5f", val_hist[0])
    for epoch in range(1, config.epochs + 1):
        gen.train()
        recs = trainer.train_epoch(epoch_batches(samples, config, epoch), epoch)
        records += recs
        val_hist.append(validation_l1(gen, val_samples))
        log.info("epoch %d: %d steps, validation L1 %.5f", epoch, len(recs), val_hist[-1])
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch:04d}.ckpt", gen, disc,
                            {**extra, "epoch": epoch})
    try:
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_LOG_FIELDS)
            w.writerows(r.row() for r in records)
        with open(val_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "val_l1"])
            w.writerows([e, repr(v)] for e, v in enumerate(val_hist))
        ckpt = save_checkpoint(out_dir / "final.ckpt", gen, disc,
                               {**extra, "epoch": config.epochs})
    except OSError as exc:
        raise OSError(f"writing training outputs to {out_dir}: {exc}") from exc
    return TrainResult(ckpt, loss_path, val_path, val_hist, records)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
