"""Slow, direct reference implementations used to check the library.

Everything here is written from the definitions with explicit loops and
shares no code with the package.
"""

import math

import numpy as np

SOBEL_X = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
SOBEL_Y = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]]


def clamp_index(i, n):
    return min(max(i, 0), n - 1)


def correlate_replicate(img, kernel):
    h, w = img.shape
    kh, kw = len(kernel), len(kernel[0])
    ry, rx = kh // 2, kw // 2
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for j in range(kh):
                for i in range(kw):
                    acc += kernel[j][i] * img[clamp_index(y + j - ry, h), clamp_index(x + i - rx, w)]
            out[y, x] = acc
    return out


def sobel(img):
    return correlate_replicate(img, SOBEL_X), correlate_replicate(img, SOBEL_Y)


def gaussian_taps(k, sigma):
    r = k // 2
    taps = [math.exp(-((t - r) ** 2) / (2 * sigma * sigma)) for t in range(k)]
    s = sum(taps)
    return [t / s for t in taps]


def blur(img, k, sigma):
    g = gaussian_taps(k, sigma)
    kernel = [[a * b for b in g] for a in g]
    return correlate_replicate(img, kernel)


def psnr(test, ref):
    h, w = ref.shape
    lo, hi = ref[0, 0], ref[0, 0]
    se = 0.0
    for y in range(h):
        for x in range(w):
            lo, hi = min(lo, ref[y, x]), max(hi, ref[y, x])
            se += (test[y, x] - ref[y, x]) ** 2
    mse = se / (h * w)
    return 10 * math.log10((hi - lo) ** 2 / mse)


def ssim(test, ref, win=11, sigma=1.5, k1=0.01, k2=0.03):
    h, w = ref.shape
    rng = float(ref.max() - ref.min())
    c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
    g = gaussian_taps(win, sigma)
    vals = []
    for y0 in range(h - win + 1):
        for x0 in range(w - win + 1):
            ma = mb = saa = sbb = sab = 0.0
            for j in range(win):
                for i in range(win):
                    wt = g[j] * g[i]
                    a, b = test[y0 + j, x0 + i], ref[y0 + j, x0 + i]
                    ma += wt * a
                    mb += wt * b
                    saa += wt * a * a
                    sbb += wt * b * b
                    sab += wt * a * b
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def rmae(test, ref):
    num = den = 0.0
    for a, b in zip(test.ravel(), ref.ravel()):
        num += abs(a - b)
        den += abs(b)
    return 100 * num / den


def froc_counts_at(cases, radius, t):
    """(LL count, NL count, lesion count) using only marks scoring >= t.

    Marks are re-classified from scratch at the threshold: each surviving
    mark goes to its nearest lesion in range, and each lesion is credited to
    its best surviving mark.
    """
    ll = nl = n_les = 0
    for lesions, marks in cases:
        n_les += len(lesions)
        alive = [m for m in marks if m[2] >= t]
        owner = []
        for (mx, my, _) in alive:
            dists = [math.dist((mx, my), (lx, ly)) for lx, ly in lesions]
            ok = [(d, k) for k, d in enumerate(dists) if d <= radius]
            owner.append(min(ok)[1] if ok else None)
        credited = set()
        for k in range(len(lesions)):
            mine = [(i, alive[i][2]) for i in range(len(alive)) if owner[i] == k]
            if mine:
                best = max(mine, key=lambda p: (p[1], -p[0]))[0]
                credited.add(best)
        ll += len(credited)
        nl += len(alive) - len(credited)
    return ll, nl, n_les
