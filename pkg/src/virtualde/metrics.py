"""PSNR, SSIM and RMAE between a virtual image and its ground truth.

SSIM uses an 11-tap Gaussian window (sigma 1.5), ``k1 = 0.01`` and
``k2 = 0.03``, with local statistics taken over the positions where the
window fits entirely inside the image.  Tables report SSIM x 100.

PSNR's data range defaults to the reference's ``max - min``.  A zero MSE
returns the sentinel :data:`PSNR_CAP` so CSV columns stay numeric.

RMAE is ``100 * sum|test - ref| / sum|ref|`` and is not symmetric.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imagecore import Image, ImageError, gaussian_kernel

PSNR_CAP = 99.0
METRIC_FIELDS = ["case_id", "kind", "psnr_db", "ssim_x100", "rmae_percent", "exact_flag"]


def _px(image):
    return image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def _pair(test, reference):
    a, b = _px(test), _px(reference)
    if a.shape != b.shape:
        raise ImageError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _range(reference, data_range):
    if data_range is None:
        data_range = float(reference.max() - reference.min())
    if not data_range > 0:
        raise ImageError("data_range is zero; PSNR/SSIM undefined for a constant reference")
    return float(data_range)


def psnr(test, reference, data_range: float | None = None) -> float:
    a, b = _pair(test, reference)
    rng = _range(b, data_range)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(rng * rng / mse))


def ssim(test, reference, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03, data_range: float | None = None) -> float:
    a, b = _pair(test, reference)
    if min(a.shape) < window:
        raise ImageError(f"image {a.shape} smaller than the {window}-pixel SSIM window")
    rng = _range(b, data_range)
    c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
    g = gaussian_kernel(window, sigma)
    pad = window // 2

    def local_mean(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[pad:-pad or None, pad:-pad or None]

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a ** 2
    var_b = local_mean(b * b) - mu_b ** 2
    cov = local_mean(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def rmae(test, reference) -> float:
    a, b = _pair(test, reference)
    denom = float(np.sum(np.abs(b)))
    if denom == 0.0:
        raise ImageError("RMAE undefined for an all-zero reference")
    return 100.0 * float(np.sum(np.abs(a - b))) / denom


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    rmae_percent: float
    data_range: float
    exact: bool = False

    @property
    def ssim_x100(self) -> float:
        return 100.0 * self.ssim


def compare(test, reference, data_range: float | None = None) -> MetricReport:
    a, b = _pair(test, reference)
    rng = _range(b, data_range)
    return MetricReport(psnr(a, b, rng), ssim(a, b, data_range=rng), rmae(a, b), rng,
                        exact=bool(np.array_equal(a, b)))


# -- batch evaluation ------------------------------------------------------


@dataclass
class Evaluation:
    rows: list          # (case_id, kind, MetricReport)
    missing: list
    summary: dict       # kind -> {"mean": {...}, "std": {...}}


def _summarise(rows):
    summary = {}
    for kind in ("bone", "soft"):
        reps = [r for _, k, r in rows if k == kind]
        if not reps:
            continue
        cols = {"psnr_db": [r.psnr_db for r in reps], "ssim_x100": [r.ssim_x100 for r in reps],
                "rmae_percent": [r.rmae_percent for r in reps]}
        summary[kind] = {
            "mean": {k: float(np.mean(v)) for k, v in cols.items()},
            "std": {k: float(np.std(v)) for k, v in cols.items()},
            "exact": all(r.exact for r in reps),
        }
    return summary


def write_metrics_csv(path, evaluation: Evaluation):
    """Per-case rows then ``mean`` and ``std`` footer rows per image kind.

    ``std`` is the population standard deviation over cases.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for case_id, kind, r in evaluation.rows:
            w.writerow([case_id, kind, repr(r.psnr_db), repr(r.ssim_x100),
                        repr(r.rmae_percent), int(r.exact)])
        for kind, s in evaluation.summary.items():
            for stat in ("mean", "std"):
                v = s[stat]
                w.writerow([stat, kind, repr(v["psnr_db"]), repr(v["ssim_x100"]),
                            repr(v["rmae_percent"]), int(s["exact"])])


def evaluate_cases(cases, out_csv=None) -> Evaluation:
    """Score ``(case_id, kind, test_image, reference_image)`` tuples."""
    rows = [(cid, kind, compare(test, ref)) for cid, kind, test, ref in cases]
    ev = Evaluation(rows, [], _summarise(rows))
    if out_csv is not None:
        write_metrics_csv(out_csv, ev)
    return ev


def predict_bone(generator, standard: Image, bone_bounds) -> Image:
    """Virtual bone in raw units: normalize, run the generator, denormalize."""
    from .imagecore import denormalize, normalize
    from .model import generator_forward

    out, _ = generator_forward(generator, normalize(standard))
    return denormalize(out, *bone_bounds)


def load_split(manifest, split: str = "test"):
    """Load one manifest split; returns ``(samples, missing_paths)``.

    Cases with any missing image file are skipped and their absent paths
    listed.
    """
    from .phantom import load_manifest, load_sample

    entries, base = load_manifest(manifest)
    samples, missing = [], []
    for e in entries:
        if e.get("split", split) != split:
            continue
        paths = [Path(base) / e[k] for k in ("standard_path", "bone_path", "soft_path")
                 if e.get(k)]
        absent = [str(p) for p in paths if not p.exists()]
        if absent:
            missing += absent
            continue
        samples.append(load_sample(e, base))
    return samples, missing


def evaluate_pairs(manifest, checkpoint, out_csv, threshold: float | None = None,
                   split: str = "test") -> Evaluation:
    """Evaluate a checkpoint on a manifest split.

    For every case the virtual bone image is denormalized with the
    ground-truth bone min/max and compared with the true bone; the virtual
    soft-tissue image is produced by bone suppression with the virtual bone
    and compared with the true soft tissue.  Cases with missing files are
    listed in ``Evaluation.missing`` and skipped.
    """
    from .model import load_checkpoint
    from .suppress import suppress_bone

    gen, _, _ = load_checkpoint(checkpoint)
    gen.eval()
    samples, missing = load_split(manifest, split)
    cases = []
    for sample in samples:
        gt = sample.bone.pixels
        bone = predict_bone(gen, sample.standard, (float(gt.min()), float(gt.max())))
        cases.append((sample.id, "bone", bone, sample.bone))
        if sample.soft is not None:
            soft = suppress_bone(sample.standard, bone, threshold)
            cases.append((sample.id, "soft", soft, sample.soft))
    ev = evaluate_cases(cases)
    ev.missing = missing
    write_metrics_csv(out_csv, ev)
    return ev
