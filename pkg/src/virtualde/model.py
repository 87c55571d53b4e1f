"""Multi-scale generator and conditional gradient-patch discriminator.

Generator
    A stem convolution followed by ``depth`` stride-2 encoder convolutions.
    The decoder climbs back with transposed convolutions, concatenating the
    encoder feature map of matching resolution (skip connection) and fusing
    it with a 3x3 convolution.  The ``n_scales`` finest decoder levels each
    emit a single-channel map through a 1x1 head.  The maps are upsampled
    bilinearly to full resolution, summed and passed through ``tanh``.

Discriminator
    Sees a 4-channel patch: Sobel ``gx, gy`` of the standard image (the
    condition) and Sobel ``gx, gy`` of a real or generated bone image.  A
    stack of stride-2 convolutions produces a logit map whose spatial mean
    goes through a sigmoid, so each patch gets one probability of being a
    real bone patch.

Weights use a zero-mean Gaussian with variance ``gain**2 / fan_in`` drawn
from a seeded generator; biases start at zero.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import Image, ImageError, SOBEL_X, SOBEL_Y

CHECKPOINT_MAGIC = b"MCANET-CKPT-1\n"
LEAK = 0.2


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    n_scales: int = 3
    base_channels: int = 32
    depth: int = 4
    max_channels: int = 256
    encoder_activation: str = "leaky_relu"
    decoder_activation: str = "relu"

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise SpecError("depth and base_channels must be positive")
        if not 2 <= self.n_scales <= self.depth:
            raise SpecError(f"need 2 <= n_scales <= depth, got n_scales={self.n_scales}, "
                            f"depth={self.depth}")
        for act in (self.encoder_activation, self.decoder_activation):
            if act not in _ACTIVATIONS:
                raise SpecError(f"unknown activation {act!r}")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_channels)


@dataclass(frozen=True)
class DiscriminatorSpec:
    patch_size: int = 64
    n_layers: int = 3
    base_channels: int = 32
    max_channels: int = 256
    in_channels: int = 4

    def __post_init__(self):
        if self.n_layers < 1 or self.base_channels < 1:
            raise SpecError("n_layers and base_channels must be positive")
        if self.in_channels != 4:
            raise SpecError("the discriminator takes exactly 4 gradient channels")
        if self.patch_size % 2 ** self.n_layers:
            raise SpecError(f"patch_size {self.patch_size} not divisible by "
                            f"2**{self.n_layers}")

    def channels(self, layer: int) -> int:
        return min(self.base_channels * 2 ** layer, self.max_channels)


_ACTIVATIONS = {
    "leaky_relu": lambda: nn.LeakyReLU(LEAK),
    "relu": lambda: nn.ReLU(),
    "elu": lambda: nn.ELU(),
}
_GAINS = {"leaky_relu": math.sqrt(2.0 / (1 + LEAK ** 2)), "relu": math.sqrt(2.0),
          "elu": 1.0, "linear": 1.0}


def _init_conv(module, gain, gen):
    w = module.weight
    if isinstance(module, nn.ConvTranspose2d):
        # each output pixel of a stride-s transposed conv sees in*k*k/s^2 taps
        fan_in = w.shape[0] * w.shape[2] * w.shape[3] / (module.stride[0] * module.stride[1])
    else:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    std = gain / math.sqrt(fan_in)
    with torch.no_grad():
        w.copy_(torch.randn(w.shape, generator=gen, dtype=torch.float64).to(w.dtype) * std)
        if module.bias is not None:
            module.bias.zero_()


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        enc_act = _ACTIVATIONS[spec.encoder_activation]
        dec_act = _ACTIVATIONS[spec.decoder_activation]
        c = spec.channels
        self.stem = nn.Sequential(nn.Conv2d(1, c(0), 3, padding=1), enc_act())
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c(i - 1), c(i), 4, stride=2, padding=1), enc_act())
            for i in range(1, spec.depth + 1))
        self.up = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for j in range(spec.depth - 1, -1, -1):
            self.up.append(nn.Sequential(
                nn.ConvTranspose2d(c(j + 1), c(j), 4, stride=2, padding=1), dec_act()))
            self.fuse.append(nn.Sequential(nn.Conv2d(2 * c(j), c(j), 3, padding=1), dec_act()))
        # heads[k] emits the scale-k map at 1/2**k resolution
        self.heads = nn.ModuleList(nn.Conv2d(c(k), 1, 1) for k in range(spec.n_scales))

    def forward(self, x, scale_mask=None):
        """Return ``(output, scale_maps)``.

        ``scale_maps[k]`` is the pre-activation map of scale ``k`` at its
        native resolution ``H / 2**k``.  ``scale_mask`` (booleans, finest
        first) drops scales from the final sum.
        """
        d = self.spec.depth
        if x.shape[-1] % 2 ** d or x.shape[-2] % 2 ** d:
            raise ImageError(f"input {tuple(x.shape[-2:])} not divisible by 2**{d}")
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        y = feats[-1]
        maps = [None] * self.spec.n_scales
        for step, j in enumerate(range(d - 1, -1, -1)):
            y = self.up[step](y)
            y = self.fuse[step](torch.cat([y, feats[j]], dim=1))
            if j < self.spec.n_scales:
                maps[j] = self.heads[j](y)
        return torch.tanh(self.combine(maps, x.shape[-2:], scale_mask)), maps

    @staticmethod
    def combine(maps, size, scale_mask=None):
        total = None
        for k, m in enumerate(maps):
            if scale_mask is not None and not scale_mask[k]:
                continue
            up = m if k == 0 else F.interpolate(m, size=tuple(size), mode="bilinear",
                                                align_corners=False)
            total = up if total is None else total + up
        if total is None:
            total = torch.zeros_like(maps[0])
        return total

    def cumulative_scale(self, maps, k):
        """tanh of the coarse-to-fine partial sum of scales ``k..S-1`` at scale ``k``."""
        h, w = maps[k].shape[-2:]
        total = maps[k]
        for m in maps[k + 1:]:
            total = total + F.interpolate(m, size=(h, w), mode="bilinear", align_corners=False)
        return torch.tanh(total)


class Discriminator(nn.Module):
    input_scale = 0.125  # Sobel responses are 8x the derivative

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in = spec.in_channels
        for i in range(spec.n_layers):
            layers += [nn.Conv2d(c_in, spec.channels(i), 4, stride=2, padding=1),
                       nn.LeakyReLU(LEAK)]
            c_in = spec.channels(i)
        self.body = nn.Sequential(*layers)
        self.logit_head = nn.Conv2d(c_in, 1, 3, padding=1)

    def logit(self, cond_grad, bone_grad):
        p = self.spec.patch_size
        for t in (cond_grad, bone_grad):
            if t.shape[-2:] != (p, p) or t.shape[-3] != 2:
                raise ImageError(f"expected 2x{p}x{p} gradient patches, got "
                                 f"{tuple(t.shape[-3:])}")
        x = torch.cat([cond_grad, bone_grad], dim=1) * self.input_scale
        return self.logit_head(self.body(x)).mean(dim=(1, 2, 3))

    def forward(self, cond_grad, bone_grad):
        return torch.sigmoid(self.logit(cond_grad, bone_grad))


def _gen_init(module: nn.Module, seed: int, act_names):
    gen = torch.Generator().manual_seed(int(seed))
    for name, m in module.named_modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            _init_conv(m, _GAINS[act_names(name)], gen)
    return module


def build_generator(spec: GeneratorSpec, rng_seed: int = 0) -> Generator:
    """Construct a generator with deterministic fan-in-scaled Gaussian weights."""

    def act(name):
        if name.startswith("heads"):
            return "linear"
        if name.startswith(("stem", "down")):
            return spec.encoder_activation
        return spec.decoder_activation

    return _gen_init(Generator(spec), rng_seed, act)


def build_discriminator(spec: DiscriminatorSpec, rng_seed: int = 0) -> Discriminator:
    return _gen_init(Discriminator(spec), rng_seed,
                     lambda name: "linear" if name.startswith("logit") else "leaky_relu")


def expected_shapes(spec) -> dict[str, tuple]:
    """Parameter shapes implied by a spec, enumerated without building a model."""
    shapes = {}
    if isinstance(spec, GeneratorSpec):
        c = spec.channels
        shapes["stem.0.weight"] = (c(0), 1, 3, 3)
        shapes["stem.0.bias"] = (c(0),)
        for i in range(1, spec.depth + 1):
            shapes[f"down.{i - 1}.0.weight"] = (c(i), c(i - 1), 4, 4)
            shapes[f"down.{i - 1}.0.bias"] = (c(i),)
        for step, j in enumerate(range(spec.depth - 1, -1, -1)):
            shapes[f"up.{step}.0.weight"] = (c(j + 1), c(j), 4, 4)
            shapes[f"up.{step}.0.bias"] = (c(j),)
            shapes[f"fuse.{step}.0.weight"] = (c(j), 2 * c(j), 3, 3)
            shapes[f"fuse.{step}.0.bias"] = (c(j),)
        for k in range(spec.n_scales):
            shapes[f"heads.{k}.weight"] = (1, c(k), 1, 1)
            shapes[f"heads.{k}.bias"] = (1,)
    elif isinstance(spec, DiscriminatorSpec):
        c_in = spec.in_channels
        for i in range(spec.n_layers):
            shapes[f"body.{2 * i}.weight"] = (spec.channels(i), c_in, 4, 4)
            shapes[f"body.{2 * i}.bias"] = (spec.channels(i),)
            c_in = spec.channels(i)
        shapes["logit_head.weight"] = (1, c_in, 3, 3)
        shapes["logit_head.bias"] = (1,)
    else:
        raise TypeError(f"not a model spec: {spec!r}")
    return shapes


def shape_audit(model: nn.Module) -> list[str]:
    """List of problems (missing, unexpected, misshapen or non-finite weights)."""
    want = expected_shapes(model.spec)
    have = {k: v for k, v in model.state_dict().items()}
    problems = [f"missing {k}" for k in want if k not in have]
    problems += [f"unexpected {k}" for k in have if k not in want]
    for k, v in have.items():
        if k in want and tuple(v.shape) != want[k]:
            problems.append(f"{k}: shape {tuple(v.shape)} != {want[k]}")
        if not torch.isfinite(v).all():
            problems.append(f"{k}: non-finite values")
    return problems


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- image-level wrappers --------------------------------------------------

_SOBEL_KERNEL = torch.tensor(np.stack([SOBEL_X, SOBEL_Y])[:, None], dtype=torch.float64)


def sobel_torch(x: torch.Tensor) -> torch.Tensor:
    """Sobel ``(gx, gy)`` of ``(B, 1, H, W)`` images, edge-replicated borders."""
    k = _SOBEL_KERNEL.to(dtype=x.dtype, device=x.device)
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), k)


def _as_tensor(image: Image, like: nn.Module) -> torch.Tensor:
    p = next(like.parameters())
    return torch.from_numpy(np.array(image.pixels)).to(p.dtype).reshape(
        1, 1, *image.shape)


def generator_forward(params: Generator, standard_norm: Image):
    """Run the generator on one normalized image.

    Returns the normalized virtual bone image and the per-scale maps (as
    images at native resolution, finest first).  Both carry the input's raw
    bounds.
    """
    if not standard_norm.normalized:
        raise ImageError("generator input must be a normalized image")
    with torch.no_grad():
        out, maps = params(_as_tensor(standard_norm, params))

    def wrap(t):
        return Image(t[0, 0].double().numpy(), standard_norm.intensity_min,
                     standard_norm.intensity_max, normalized=True)

    return wrap(out), [wrap(m) for m in maps]


def discriminator_forward(params: Discriminator, cond_grad_patch, bone_grad_patch) -> float:
    """Probability that ``bone_grad_patch`` is a real bone patch given the condition."""

    def t(g):
        return torch.as_tensor(np.stack([g.gx, g.gy])[None], dtype=next(params.parameters()).dtype)

    with torch.no_grad():
        return float(params(t(cond_grad_patch), t(bone_grad_patch))[0])


# -- checkpoints -----------------------------------------------------------


def _tensor_blocks(prefix, module):
    for name, value in module.state_dict().items():
        arr = value.detach().cpu().numpy()
        yield f"{prefix}/{name}", arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, generator: Generator, discriminator: Discriminator | None = None,
                    extra: dict | None = None) -> Path:
    """Write both networks to one file.

    Layout: the magic line ``MCANET-CKPT-1``, a decimal byte length, a JSON
    header holding the specs, ``extra`` and a table of contents, then raw
    little-endian float blocks at the listed offsets.
    """
    blocks = list(_tensor_blocks("generator", generator))
    if discriminator is not None:
        blocks += list(_tensor_blocks("discriminator", discriminator))
    toc, offset = [], 0
    for name, arr in blocks:
        toc.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                    "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "generator_spec": asdict(generator.spec),
        "discriminator_spec": asdict(discriminator.spec) if discriminator is not None else None,
        "extra": extra or {},
        "tensors": toc,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(f"{len(head)}\n".encode())
    buf.write(head)
    for _, arr in blocks:
        buf.write(np.ascontiguousarray(arr).tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    """Return ``(generator, discriminator_or_None, extra)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an MCANET-CKPT-1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    nl = data.index(b"\n", pos)
    n = int(data[pos:nl])
    header = json.loads(data[nl + 1:nl + 1 + n])
    base = nl + 1 + n
    arrays = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]), count=int(
            np.prod(entry["shape"], dtype=np.int64)), offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"])

    def restore(prefix, module):
        state = {k.split("/", 1)[1]: torch.from_numpy(v.copy())
                 for k, v in arrays.items() if k.startswith(prefix + "/")}
        first = next(iter(state.values()))
        module = module.to(first.dtype)
        module.load_state_dict(state)
        return module

    gen = restore("generator", Generator(GeneratorSpec(**header["generator_spec"])))
    disc = None
    if header["discriminator_spec"] is not None:
        disc = restore("discriminator",
                       Discriminator(DiscriminatorSpec(**header["discriminator_spec"])))
    return gen, disc, header["extra"]
