"""Procedural dual-energy chest phantoms.

Images live in a log-attenuation-like space where tissues add.  A sample is
built as::

    soft     = base level + smooth Gaussian blobs + disk nodules
    bone     = max(rib bands, spine band, calcification disks)
    standard = soft + bone + N(0, noise_sigma)

Bone structures have compact, linearly anti-aliased edges, so the bone
gradient is exactly zero away from edges.  Layers inside the bone image are
combined with ``max`` rather than summed, which keeps the bone maximum
stable from case to case.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .imagecore import DESample, Image, write_image

LESION_FIELDS = ["image_id", "x", "y", "radius"]


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 128
    n_ribs: int = 4               # rib bands per side
    rib_thickness: float = 4.0
    calcification_count: int = 3
    calcification_radius: float = 2.0
    soft_blob_count: int = 6
    noise_sigma: float = 0.005
    seed: int = 0
    nodule_count: int = 1
    nodule_radius: float = 4.0
    rib_amplitude: float = 0.5
    spine_amplitude: float = 0.6
    calcification_amplitude: float = 1.0
    nodule_amplitude: float = 0.25
    soft_base: float = 0.2

    def __post_init__(self):
        if self.size < 64:
            raise ValueError(f"phantom size must be >= 64, got {self.size}")
        counts = (self.n_ribs, self.calcification_count, self.soft_blob_count,
                  self.nodule_count)
        if min(counts) < 0:
            raise ValueError("phantom counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


@dataclass(frozen=True)
class LesionRecord:
    image_id: str
    x: float
    y: float
    radius: float


def _ramp(dist, half_width):
    """1 inside ``half_width``, linear fall to 0 over one pixel."""
    return np.clip(half_width + 0.5 - dist, 0.0, 1.0)


def _bezier_distance(xx, yy, p0, p1, p2, n=48, reach=np.inf):
    """Distance to a quadratic Bezier curve (as an ``n``-point polyline).

    Only pixels within ``reach`` of the curve's bounding box are measured;
    the rest are reported as ``inf``.
    """
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    lo, hi = pts.min(axis=0) - reach, pts.max(axis=0) + reach
    d = np.full(xx.shape, np.inf)
    box = (xx >= lo[0]) & (xx <= hi[0]) & (yy >= lo[1]) & (yy <= hi[1])
    if not box.any():
        return d
    px, py = xx[box][None, :], yy[box][None, :]
    sx, sy = pts[:-1, 0:1], pts[:-1, 1:2]
    ex, ey = pts[1:, 0:1] - sx, pts[1:, 1:2] - sy
    u = np.clip(((px - sx) * ex + (py - sy) * ey) / (ex * ex + ey * ey), 0.0, 1.0)
    d[box] = np.hypot(px - sx - u * ex, py - sy - u * ey).min(axis=0)
    return d


def _soft_image(spec, rng, xx, yy):
    s = spec.size
    soft = np.full((s, s), spec.soft_base)
    for _ in range(spec.soft_blob_count):
        cx, cy = rng.uniform(0.1 * s, 0.9 * s, size=2)
        sig = rng.uniform(s / 8, s / 4)
        amp = rng.uniform(0.05, 0.2)
        soft += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sig ** 2))
    return soft


def _bone_image(spec, rng, xx, yy):
    s = spec.size
    bone = np.zeros((s, s))
    if spec.n_ribs > 0:
        half = spec.rib_thickness / 2
        spine_half = s * 0.03
        spine = spec.spine_amplitude * _ramp(np.abs(xx - (s - 1) / 2), spine_half)
        bone = np.maximum(bone, spine)
        top, bottom = 0.12 * s, 0.85 * s
        rows = np.linspace(top, bottom - 0.1 * s, spec.n_ribs)
        for side in (-1.0, 1.0):
            for y0 in rows:
                jitter = rng.uniform(-0.02, 0.02, size=3) * s
                p0 = np.array([(s - 1) / 2 + side * spine_half, y0 + jitter[0]])
                p1 = np.array([(s - 1) / 2 + side * 0.42 * s, y0 - 0.04 * s + jitter[1]])
                p2 = np.array([(s - 1) / 2 + side * 0.36 * s, y0 + 0.14 * s + jitter[2]])
                d = _bezier_distance(xx, yy, p0, p1, p2, reach=half + 1.0)
                bone = np.maximum(bone, spec.rib_amplitude * _ramp(d, half))
    for _ in range(spec.calcification_count):
        cx, cy = rng.uniform(0.3 * s, 0.7 * s), rng.uniform(0.4 * s, 0.8 * s)
        d = np.hypot(xx - cx, yy - cy)
        bone = np.maximum(bone, spec.calcification_amplitude
                          * _ramp(d, spec.calcification_radius))
    return bone


def generate_sample(spec: PhantomSpec, image_id: str | None = None):
    """Generate one ``(DESample, lesions)`` pair, deterministic in ``spec``."""
    image_id = image_id or f"phantom-{spec.seed:06d}"
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)

    soft = _soft_image(spec, rng, xx, yy)
    lesions = []
    r = spec.nodule_radius
    margin = 2 * r + 2
    for _ in range(spec.nodule_count):
        cx, cy = rng.uniform(margin, s - 1 - margin, size=2)
        soft = soft + spec.nodule_amplitude * _ramp(np.hypot(xx - cx, yy - cy), r)
        lesions.append(LesionRecord(image_id, float(cx), float(cy), float(r)))

    bone = _bone_image(spec, rng, xx, yy)
    standard = soft + bone
    if spec.noise_sigma > 0:
        standard = standard + rng.normal(0.0, spec.noise_sigma, size=standard.shape)

    lo = float(min(soft.min(), bone.min(), standard.min()))
    hi = float(max(soft.max(), bone.max(), standard.max()))
    sample = DESample(image_id, Image(standard, lo, hi), Image(bone, lo, hi),
                      Image(soft, lo, hi))
    return sample, lesions


def split_assignment(ids, test_fraction=0.2):
    """Assign ``train``/``test`` by ranking ids on a SHA-256 digest.

    The ``round(n * test_fraction)`` ids with the smallest digests form the
    test split, so counts are exact and assignments do not depend on order.
    """
    ids = list(ids)
    n_test = int(round(len(ids) * test_fraction))
    ranked = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    test = set(ranked[:n_test])
    return {i: ("test" if i in test else "train") for i in ids}


def write_lesions(path, lesions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LESION_FIELDS)
        for les in lesions:
            w.writerow([les.image_id, repr(les.x), repr(les.y), repr(les.radius)])


def read_lesions(path) -> list[LesionRecord]:
    with open(path, newline="") as fh:
        return [LesionRecord(row["image_id"], float(row["x"]), float(row["y"]),
                             float(row["radius"]))
                for row in csv.DictReader(fh)]


def _worker_count():
    try:
        return max(1, int(os.environ.get("VDE_NUM_THREADS", "1")))
    except ValueError:
        return 1


def generate_dataset(n: int, base_seed: int, spec_template: PhantomSpec | None = None,
                     out_dir=".", test_fraction: float = 0.2, fmt: str = "pfm"):
    """Write ``n`` phantom samples, their lesions and ``manifest.json``.

    Sample ``k`` uses seed ``base_seed + k`` and id ``case-<k>``.  Paths in
    the manifest are relative to ``out_dir``.  Returns the manifest entries.
    """
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    spec_template = spec_template or PhantomSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory is not writable: {out_dir}")
    ids = [f"case-{k:04d}" for k in range(n)]
    splits = split_assignment(ids, test_fraction)

    def work(k):
        image_id = ids[k]
        spec = replace(spec_template, seed=base_seed + k)
        sample, lesions = generate_sample(spec, image_id)
        entry = {"id": image_id}
        for kind, img in (("standard", sample.standard), ("bone", sample.bone),
                          ("soft", sample.soft)):
            name = f"{image_id}_{kind}.{fmt}"
            write_image(out_dir / name, img, image_id=image_id)
            entry[f"{kind}_path"] = name
        name = f"{image_id}_lesions.csv"
        write_lesions(out_dir / name, lesions)
        entry["lesions_path"] = name
        entry["split"] = splits[image_id]
        return entry

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        manifest = list(pool.map(work, range(n)))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    (out_dir / "phantom_spec.json").write_text(
        json.dumps({"base_seed": base_seed, **asdict(spec_template)}, indent=1) + "\n")
    return manifest


def load_manifest(path):
    """Return ``(entries, base_dir)`` for a manifest file."""
    path = Path(path)
    return json.loads(path.read_text()), path.parent


def load_sample(entry, base_dir) -> DESample:
    from .imagecore import read_image

    base_dir = Path(base_dir)
    soft = entry.get("soft_path")
    return DESample(entry["id"], read_image(base_dir / entry["standard_path"]),
                    read_image(base_dir / entry["bone_path"]),
                    read_image(base_dir / soft) if soft else None)
