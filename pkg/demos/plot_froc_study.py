"""
FROC curves for two simulated readers
=====================================

Score lesion marks from a careful and a hasty reader against phantom
nodules, draw both curves and bootstrap the sensitivity at 1 and 2 false
positives per image.
"""

import numpy as np
from virtualde.phantom import PhantomSpec, generate_sample
from virtualde.froc import (Mark, bootstrap_ci, build_cases, froc_curve, plot_curves,
                            sensitivity_at_fp)

rng = np.random.default_rng(0)
lesions = []
for k in range(40):
    lesions += generate_sample(PhantomSpec(seed=k, nodule_count=int(rng.integers(0, 3))),
                               f"img{k:02d}")[1]
ids = [f"img{k:02d}" for k in range(40)]


def reader(hit_rate, fp_rate, spread):
    # hits land near the nodule; false positives anywhere in the field
    marks = []
    for les in lesions:
        if rng.random() < hit_rate:
            dx, dy = rng.normal(0, spread, size=2)
            marks.append(Mark(les.image_id, les.x + dx, les.y + dy, rng.uniform(0.4, 1.0)))
    for i in ids:
        for _ in range(rng.poisson(fp_rate)):
            x, y = rng.uniform(0, 128, size=2)
            marks.append(Mark(i, x, y, rng.uniform(0.0, 0.8)))
    return marks


# a 10-pixel acceptance radius suits 128-pixel phantoms
radius = 10.0
curves = {}
for name, marks in [("careful", reader(0.9, 0.8, 2.0)), ("hasty", reader(0.7, 2.0, 5.0))]:
    cases = build_cases(lesions, marks, ids)
    curves[name] = froc_curve(cases, radius)
    ci = bootstrap_ci(cases, radius, (1, 2), n_boot=1000, seed=1)
    for f, lo, hi in zip(ci.fp_levels, ci.lo95, ci.hi95):
        s = sensitivity_at_fp(curves[name], f)
        print(f"{name}: sensitivity at {f:g} FP/image = {s:.2f} (95% CI {lo:.2f}-{hi:.2f})")

plot_curves("froc_readers.svg", curves)
