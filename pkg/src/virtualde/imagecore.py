"""Image container, per-image normalization, filters, patches and augmentation.

Every stage of the pipeline exchanges :class:`Image` objects: a read-only
2D float64 grid plus the raw intensity bounds it came from.  Normalized
images keep the bounds of the raw image they were derived from so that the
mapping can be inverted later.

Normalization maps the raw range ``[min, max]`` linearly onto ``[-1, 1]``
using ``2 * (I - min) / (max - min) - 1``.  The commonly printed form of this
formula divides by ``max`` alone, which only reaches +1 when ``min == 0``;
the ``max - min`` denominator is what makes every image span exactly
``[-1, 1]``.

All convolutions use edge replication at the borders.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy import ndimage

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class ImageError(ValueError):
    """Raised for malformed images or invalid filter/patch requests."""


@dataclass(frozen=True)
class Image:
    """Single-channel image with recorded raw intensity bounds.

    ``pixels`` is indexed ``[y, x]`` (row-major).  When ``normalized`` is
    true the pixel values live in ``[-1, 1]`` and the bounds describe the raw
    image they were computed from.  ``meta`` carries per-operation flags such
    as ``constant`` (normalize) or ``clamped`` (denormalize).
    """

    pixels: np.ndarray
    intensity_min: float
    intensity_max: float
    normalized: bool = False
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        arr = np.array(self.pixels, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ImageError(f"expected a non-empty 2D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("image contains NaN or Inf")
        lo, hi = float(self.intensity_min), float(self.intensity_max)
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
            raise ImageError(f"invalid intensity bounds ({lo}, {hi})")
        if not self.normalized and (arr.min() < lo or arr.max() > hi):
            raise ImageError("raw pixels fall outside the recorded intensity bounds")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "intensity_min", lo)
        object.__setattr__(self, "intensity_max", hi)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    @classmethod
    def from_array(cls, pixels, intensity_min=None, intensity_max=None, **meta) -> "Image":
        """Wrap a raw-space array; bounds default to the stored min/max."""
        arr = np.asarray(pixels, dtype=np.float64)
        lo = float(arr.min()) if intensity_min is None else intensity_min
        hi = float(arr.max()) if intensity_max is None else intensity_max
        return cls(arr, lo, hi, meta=meta)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels, **meta) -> "Image":
        return replace(self, pixels=pixels, meta=meta)


@dataclass(frozen=True)
class GradientField:
    """Pair of derivative planes ``gx`` (along x / columns) and ``gy``."""

    gx: np.ndarray
    gy: np.ndarray

    def __post_init__(self):
        gx = np.asarray(self.gx, dtype=np.float64)
        gy = np.asarray(self.gy, dtype=np.float64)
        if gx.shape != gy.shape or gx.ndim != 2:
            raise ImageError(f"gradient planes differ in shape: {gx.shape} vs {gy.shape}")
        object.__setattr__(self, "gx", gx)
        object.__setattr__(self, "gy", gy)

    @property
    def shape(self) -> tuple[int, int]:
        return self.gx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.gx, self.gy)

    def patch(self, x0: int, y0: int, size: int) -> "GradientField":
        sl = (slice(y0, y0 + size), slice(x0, x0 + size))
        return GradientField(self.gx[sl], self.gy[sl])


@dataclass(frozen=True)
class DESample:
    """One dual-energy case: standard (high kVp), bone and optional soft image."""

    id: str
    standard: Image
    bone: Image
    soft: Image | None = None

    def __post_init__(self):
        shapes = {img.shape for img in self.images()}
        if len(shapes) != 1:
            raise ImageError(f"sample {self.id!r} mixes image sizes {sorted(shapes)}")

    def images(self) -> list[Image]:
        return [img for img in (self.standard, self.bone, self.soft) if img is not None]


def _require_filterable(image: Image):
    if image.height < 3 or image.width < 3:
        raise ImageError(f"filters need at least a 3x3 image, got {image.shape}")


# -- normalization ---------------------------------------------------------


def normalize(image: Image) -> Image:
    """Map an image linearly onto ``[-1, 1]`` using its own min and max.

    A constant image has no range to stretch; it maps to all zeros and the
    output carries ``meta["constant"] = True``.
    """
    px = image.pixels
    lo, hi = float(px.min()), float(px.max())
    if hi == lo:
        out = np.zeros_like(px)
        constant = True
    else:
        out = 2.0 * (px - lo) / (hi - lo) - 1.0
        # pin the endpoints; rounding can land a hair off +1
        out[px == lo] = -1.0
        out[px == hi] = 1.0
        constant = False
    return Image(out, lo, hi, normalized=True, meta={"constant": constant})


def denormalize(image: Image, target_min: float | None = None,
                target_max: float | None = None) -> Image:
    """Map a normalized image back onto ``[target_min, target_max]``.

    Bounds default to the raw bounds recorded on ``image``.  Values outside
    ``[-1, 1]`` are clamped; the number of clamped pixels is stored in
    ``meta["clamped"]``.
    """
    lo = image.intensity_min if target_min is None else float(target_min)
    hi = image.intensity_max if target_max is None else float(target_max)
    if hi < lo:
        raise ImageError(f"target_max {hi} < target_min {lo}")
    px = image.pixels
    n_clamped = int(np.count_nonzero((px < -1.0) | (px > 1.0)))
    clipped = np.clip(px, -1.0, 1.0)
    out = lo + (clipped + 1.0) * 0.5 * (hi - lo)
    out[clipped == -1.0] = lo
    out[clipped == 1.0] = hi
    out = np.clip(out, lo, hi)
    return Image(out, lo, hi, normalized=False, meta={"clamped": n_clamped})


# -- filters ---------------------------------------------------------------


def sobel_arrays(pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    px = np.asarray(pixels, dtype=np.float64)
    gx = ndimage.correlate(px, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(px, SOBEL_Y, mode="nearest")
    return gx, gy


def sobel(image: Image) -> GradientField:
    """Sobel derivatives in x and y (cross-correlation, edge replication).

    A ramp ``I(x, y) = x`` yields ``gx == 8`` in the interior.
    """
    _require_filterable(image)
    return GradientField(*sobel_arrays(image.pixels))


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """1D Gaussian taps normalized to unit sum."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ImageError(f"kernel_size must be a positive odd integer, got {kernel_size}")
    if not sigma > 0:
        raise ImageError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def blur_array(pixels: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    k = gaussian_kernel(kernel_size, sigma)
    out = ndimage.correlate1d(np.asarray(pixels, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def gaussian_blur(image: Image, kernel_size: int, sigma: float) -> Image:
    """Separable Gaussian blur with edge replication.

    Raises :class:`ImageError` when the kernel is more than four times the
    larger image dimension, where the blur degenerates to the border value.
    """
    _require_filterable(image)
    if kernel_size > 4 * max(image.shape):
        raise ImageError(f"kernel_size {kernel_size} is degenerate for image {image.shape}")
    out = blur_array(image.pixels, kernel_size, sigma)
    if image.normalized:
        return replace(image, pixels=out, meta={})
    # blurring cannot leave the input range; absorb rounding
    out = np.clip(out, image.intensity_min, image.intensity_max)
    return replace(image, pixels=out, meta={})


def scaled_blur_params(size: int, reference_size: int = 2022,
                       kernel_size: int = 201, sigma: float = 50.0) -> tuple[int, float]:
    """Scale a blur defined at ``reference_size`` pixels to a ``size``-pixel image."""
    ratio = size / reference_size
    k = max(3, int(round(kernel_size * ratio)))
    if k % 2 == 0:
        k += 1
    return k, sigma * ratio


# -- patches ---------------------------------------------------------------


def patch_origin(cx: int, cy: int, size: int) -> tuple[int, int]:
    return cx - size // 2, cy - size // 2


def extract_patch(image: Image, cx: int, cy: int, size: int) -> Image:
    """Return the ``size x size`` block centred at column ``cx``, row ``cy``.

    For even sizes the centre is the pixel just right/below the middle, so a
    full-size patch of an ``n x n`` image is centred at ``(n // 2, n // 2)``.
    """
    if size < 1:
        raise ImageError(f"patch size must be positive, got {size}")
    x0, y0 = patch_origin(cx, cy, size)
    if x0 < 0 or y0 < 0 or x0 + size > image.width or y0 + size > image.height:
        raise ImageError(
            f"patch of size {size} at ({cx}, {cy}) leaves image of shape {image.shape}")
    return replace(image, pixels=image.pixels[y0:y0 + size, x0:x0 + size], meta={})


# -- augmentation ----------------------------------------------------------


def warp(image: Image, tx: float, ty: float, angle_deg: float) -> Image:
    """Rotate about the image centre, then translate by ``(tx, ty)`` pixels.

    Output pixel ``(x, y)`` samples the input at the inverse-mapped location
    with bilinear interpolation; samples outside the field take the raw
    minimum ``intensity_min``.
    """
    h, w = image.shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    a = math.radians(angle_deg)
    cos, sin = math.cos(a), math.sin(a)
    # forward rotation in (row, col) = (y, x) coordinates, positive angle
    # turns +x towards +y
    rot = np.array([[cos, sin], [-sin, cos]])
    inv = rot.T
    shift = np.array([ty, tx])
    offset = c - inv @ (c + shift)
    fill = image.intensity_min
    out = ndimage.affine_transform(image.pixels, inv, offset=offset, order=1,
                                   mode="constant", cval=fill)
    if not image.normalized:
        out = np.clip(out, image.intensity_min, image.intensity_max)
    return replace(image, pixels=out, meta={})


def augment(sample: DESample, rng_seed: int, tx_range: float = 80.0,
            rot_range: float = 15.0) -> DESample:
    """Apply one random translation + rotation to every image of ``sample``.

    ``tx`` and ``ty`` are drawn uniformly from ``[-tx_range, tx_range]``
    and the angle from ``[-rot_range, rot_range]`` degrees.
    """
    if tx_range < 0 or rot_range < 0:
        raise ImageError("augmentation ranges must be non-negative")
    if tx_range == 0 and rot_range == 0:
        return replace(sample)
    rng = np.random.default_rng(rng_seed)
    tx, ty = rng.uniform(-tx_range, tx_range, size=2)
    angle = rng.uniform(-rot_range, rot_range)

    def f(img):
        return None if img is None else warp(img, tx, ty, angle)

    return DESample(sample.id, f(sample.standard), f(sample.bone), f(sample.soft))


# -- I/O -------------------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_pfm(path, pixels: np.ndarray):
    """Write a little-endian greyscale PFM (scale -1.0, bottom row first)."""
    arr = np.asarray(pixels, dtype="<f4")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


_PFM_HEADER = re.compile(rb"\A(\S+)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    m = _PFM_HEADER.match(data[:256])
    if m is None:
        raise ImageError(f"{path}: malformed PFM header")
    kind = m.group(1).decode("ascii", "replace")
    if kind != "Pf":
        raise ImageError(f"{path}: only greyscale PFM ('Pf') is supported, got {kind!r}")
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise ImageError(f"{path}: bad PFM scale {m.group(4)!r}") from None
    pos = m.end()
    if len(data) - pos < 4 * w * h:
        raise ImageError(f"{path}: truncated PFM data ({len(data) - pos} bytes for {w}x{h})")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr[::-1].astype(np.float64)


def write_png16(path, image: Image) -> None:
    """Quantize to 16 bits over the image's recorded bounds."""
    from PIL import Image as PILImage

    lo, hi = image.intensity_min, image.intensity_max
    px = image.pixels
    if image.normalized:
        lo, hi, px = -1.0, 1.0, np.clip(px, -1.0, 1.0)
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    q = np.round((px - lo) * scale).astype(np.uint16)
    PILImage.fromarray(q).save(path)


def read_png16(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.float64)


def write_image(path, image: Image, image_id: str | None = None) -> Path:
    """Write ``image`` as PFM or 16-bit PNG plus a JSON sidecar of its bounds."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        write_pfm(path, image.pixels)
    elif suffix == ".png":
        write_png16(path, image)
    else:
        raise ImageError(f"unsupported image format: {path}")
    record = {"id": image_id or path.stem, "intensity_min": image.intensity_min,
              "intensity_max": image.intensity_max}
    if image.normalized:
        record["normalized"] = True
    sidecar_path(path).write_text(json.dumps(record, indent=1) + "\n")
    return path


def read_image(path) -> Image:
    """Read a PFM or 16-bit PNG, applying sidecar bounds when present."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        px = read_pfm(path)
    elif suffix == ".png":
        px = read_png16(path)
    else:
        raise ImageError(f"unsupported image format: {path}")
    side = sidecar_path(path)
    if not side.exists():
        return Image.from_array(px, source=str(path))
    record = json.loads(side.read_text())
    lo, hi = float(record["intensity_min"]), float(record["intensity_max"])
    normalized = bool(record.get("normalized", False))
    if suffix == ".png":
        if normalized:
            lo_q, hi_q = -1.0, 1.0
        else:
            lo_q, hi_q = lo, hi
        px = lo_q + px * ((hi_q - lo_q) / 65535.0)
    if not normalized:
        # float32 storage may round a hair past the float64 bounds
        lo = min(lo, float(px.min()))
        hi = max(hi, float(px.max()))
    return Image(px, lo, hi, normalized=normalized,
                 meta={"source": str(path), "id": record.get("id", path.stem)})
