"""Bone suppression with cross projection tensors.

The standard image is split into a blurred low-frequency profile and a
high-frequency residual.  At every pixel where the bone image has an edge,
the residual's gradient is projected onto the direction orthogonal to the
bone gradient, which removes the bone edge while keeping tissue structure
that crosses it.  The edited gradient field is reintegrated by a
least-squares Poisson solve and added back onto the low-frequency profile.

Gradients in this module are forward differences with edge replication.
Their least-squares inverse is the Neumann Poisson problem, which is well
posed; the least-squares inverse of the Sobel stencil is not, because the
stencil nearly annihilates alternating patterns and a non-integrable field
excites those patterns without bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .imagecore import GradientField, Image, ImageError, blur_array, scaled_blur_params


class ReintegrationError(RuntimeError):
    """The Poisson solve did not reach the requested residual."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class TensorField:
    """Per-pixel symmetric 2x2 tensors stored as planes ``d11, d12, d22``."""

    d11: np.ndarray
    d12: np.ndarray
    d22: np.ndarray

    @property
    def shape(self):
        return self.d11.shape

    def apply(self, gx, gy):
        return self.d11 * gx + self.d12 * gy, self.d12 * gx + self.d22 * gy


def decompose(standard: Image, kernel_size: int | None = 201, sigma: float | None = 50.0,
              reference_size: int | None = 2022):
    """Split ``standard`` into ``(low, delta)``; ``low + delta`` equals ``standard`` to rounding.

    The kernel is specified at ``reference_size`` pixels (clinical
    radiographs) and scaled to the image; pass ``reference_size=None`` to use
    ``kernel_size`` and ``sigma`` literally.
    """
    if reference_size is not None:
        kernel_size, sigma = scaled_blur_params(max(standard.shape), reference_size,
                                                kernel_size, sigma)
    low_px = blur_array(standard.pixels, kernel_size, sigma)
    # keep delta exactly complementary so low + delta reproduces the input
    delta_px = standard.pixels - low_px
    low = Image(low_px, standard.intensity_min, standard.intensity_max, normalized=True,
                meta={"kernel_size": kernel_size, "sigma": sigma})
    delta = Image(delta_px, standard.intensity_min, standard.intensity_max, normalized=True)
    return low, delta


def default_threshold(bone_grad: GradientField, factor: float = 1e-3,
                      percentile: float = 99.0) -> float:
    """``factor`` times the given percentile of the bone gradient magnitude."""
    t = factor * float(np.percentile(bone_grad.magnitude(), percentile))
    return t if t > 0 else np.finfo(np.float64).tiny


def cross_projection_tensor(bone_grad: GradientField, threshold: float) -> TensorField:
    """Projectors ``I - g g^T / |g|^2`` where ``|g| > threshold``, identity elsewhere."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    gx, gy = bone_grad.gx, bone_grad.gy
    n2 = gx * gx + gy * gy
    edge = np.sqrt(n2) > threshold
    safe = np.where(edge, n2, 1.0)
    d11 = np.where(edge, 1.0 - gx * gx / safe, 1.0)
    d12 = np.where(edge, -gx * gy / safe, 0.0)
    d22 = np.where(edge, 1.0 - gy * gy / safe, 1.0)
    return TensorField(d11, d12, d22)


def transform_gradients(delta_grad: GradientField, tensors: TensorField) -> GradientField:
    if delta_grad.shape != tensors.shape:
        raise ImageError(f"gradient field {delta_grad.shape} vs tensors {tensors.shape}")
    return GradientField(*tensors.apply(delta_grad.gx, delta_grad.gy))


def forward_gradient(pixels) -> GradientField:
    """Forward differences with edge replication (zero past the last row/column)."""
    px = np.asarray(pixels, dtype=np.float64)
    gx = np.zeros_like(px)
    gy = np.zeros_like(px)
    gx[:, :-1] = px[:, 1:] - px[:, :-1]
    gy[:-1, :] = px[1:, :] - px[:-1, :]
    return GradientField(gx, gy)


def divergence(field: GradientField) -> np.ndarray:
    """Discrete divergence, the negative adjoint of :func:`forward_gradient`."""
    gx, gy = field.gx, field.gy
    div = np.zeros_like(gx)
    div[:, :-1] += gx[:, :-1]
    div[:, 1:] -= gx[:, :-1]
    div[:-1, :] += gy[:-1, :]
    div[1:, :] -= gy[:-1, :]
    return div


def _neumann_eigenvalues(h, w):
    ky = 2.0 - 2.0 * np.cos(np.pi * np.arange(h) / h)
    kx = 2.0 - 2.0 * np.cos(np.pi * np.arange(w) / w)
    return ky[:, None] + kx[None, :]


def poisson_reintegrate(field: GradientField, reference_mean: float = 0.0,
                        tol: float = 1e-6) -> Image:
    """Least-squares image whose forward-difference gradient best matches ``field``.

    The normal equations ``G^T G u = G^T f`` are the 5-point Poisson
    equation with Neumann boundaries; they are diagonal in the DCT-II basis
    and solved directly there.  The constant mode is then set so that
    ``mean(u) == reference_mean``.  A :class:`ReintegrationError` is raised
    if the normal-equation residual is not below ``tol``.

    The returned image's ``meta`` holds ``residual`` (``|G u - f| / |f|``,
    the least-squares misfit, positive for non-integrable fields) and
    ``normal_residual`` (relative residual of the normal equations).
    """
    gx, gy = field.gx, field.gy
    if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
        raise ImageError("gradient field contains NaN or Inf")
    h, w = field.shape
    # components that no forward difference can produce are ignored
    f = GradientField(np.where(np.arange(w) < w - 1, gx, 0.0),
                      np.where(np.arange(h)[:, None] < h - 1, gy, 0.0))
    rhs = -divergence(f)  # G^T f
    rhs_norm = float(np.linalg.norm(rhs))
    lam = _neumann_eigenvalues(h, w)
    lam[0, 0] = 1.0
    coeff = dctn(rhs, type=2, norm="ortho") / lam
    coeff[0, 0] = 0.0
    u = idctn(coeff, type=2, norm="ortho")
    Gu = forward_gradient(u)
    normal = -divergence(Gu) - rhs
    normal_res = float(np.linalg.norm(normal)) / rhs_norm if rhs_norm > 0 else 0.0
    if not normal_res < tol:
        raise ReintegrationError(
            f"Poisson solve did not reach relative residual {tol:g} "
            f"(got {normal_res:.3e})", normal_res)
    u = u - u.mean() + reference_mean
    f_norm = float(np.hypot(np.linalg.norm(gx), np.linalg.norm(gy)))
    misfit = float(np.hypot(np.linalg.norm(Gu.gx - gx), np.linalg.norm(Gu.gy - gy)))
    misfit = misfit / f_norm if f_norm > 0 else 0.0
    return Image(u, float(u.min()), float(u.max()), normalized=True,
                 meta={"residual": misfit, "normal_residual": normal_res})


def suppress_bone(standard: Image, bone: Image, threshold: float | None = None,
                  kernel_size: int = 201, sigma: float = 50.0,
                  reference_size: int | None = 2022, debug: dict | None = None) -> Image:
    """Produce a soft-tissue image by removing ``bone`` edges from ``standard``.

    ``threshold`` defaults to :func:`default_threshold` of the bone
    gradient.  When ``debug`` is a dict it receives the intermediate
    ``low``, ``delta``, tensor planes and reintegrated residual band.
    """
    if standard.shape != bone.shape:
        raise ImageError(f"standard {standard.shape} and bone {bone.shape} differ in size")
    low, delta = decompose(standard, kernel_size, sigma, reference_size)
    bone_grad = forward_gradient(bone.pixels)
    if threshold is None:
        threshold = default_threshold(bone_grad)
    tensors = cross_projection_tensor(bone_grad, threshold)
    edited = transform_gradients(forward_gradient(delta.pixels), tensors)
    high = poisson_reintegrate(edited, reference_mean=float(delta.pixels.mean()))
    soft = low.pixels + high.pixels
    if debug is not None:
        debug.update(low=low.pixels, delta=delta.pixels, d11=tensors.d11, d12=tensors.d12,
                     d22=tensors.d22, high=high.pixels, threshold=threshold,
                     residual=high.meta["residual"])
    lo = min(standard.intensity_min, float(soft.min()))
    hi = max(standard.intensity_max, float(soft.max()))
    return Image(soft, lo, hi, meta={"threshold": threshold,
                                    "residual": high.meta["residual"]})
