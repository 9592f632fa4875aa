"""Independent reference implementations used as test oracles.

Nothing here imports the package's rasterizer, clipping or calibration code.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage


def clip_oracle(width_frac, angle, colors):
    lo_w, hi_w = 1.0 / 16.0, 0.5
    w = lo_w if width_frac < lo_w else hi_w if width_frac > hi_w else width_frac
    a = 0.0 if angle < 0 else math.pi if angle > math.pi else angle
    cs = [tuple(0.0 if c < 0 else 255.0 if c > 255 else float(c) for c in col) for col in colors]
    return w, a, cs


def palette_oracle(color, refs, tol):
    best, best_d = None, None
    for k, ref in enumerate(refs):
        d = sum((a - b) ** 2 for a, b in zip(color, ref))
        if best_d is None or d < best_d:  # strict: first index wins ties
            best, best_d = k, d
    ref = refs[best]
    return tuple(min(max(c, r - tol), r + tol) for c, r in zip(color, ref))


def brute_threshold(sims, mated):
    """Exhaustive search over midpoints; ties go to the larger threshold."""
    sims = np.asarray(sims, float)
    mated = np.asarray(mated, bool)
    u = np.unique(sims)
    cands = [(u[i] + u[i + 1]) / 2 for i in range(len(u) - 1)] or [u[0]]
    best_t, best_acc = None, -1.0
    for t in cands:
        acc = np.mean((sims >= t) == mated)
        if acc > best_acc or (acc == best_acc and t > best_t):
            best_t, best_acc = t, acc
    return best_t, best_acc


def hard_stripes(width_frac, angle, phase, colors, h, w):
    """Hard-edged stripes plus each pixel's distance to the nearest band edge."""
    colors = np.asarray(colors, float)
    k = len(colors)
    y, x = np.mgrid[0:h, 0:w].astype(float)
    x = x + 0.5 - w / 2
    y = y + 0.5 - h / 2
    s = x * math.cos(angle) + y * math.sin(angle)
    period = width_frac * w
    band = period / k
    pos = np.mod(s + phase * period, period)
    idx = np.floor(pos / band).astype(int) % k
    edge = np.minimum(np.mod(pos, band), band - np.mod(pos, band))
    return colors[idx], edge


def band_period(image, angle, max_shift=None, step=0.02):
    """Repeat period along the stripe normal, from the first autocorrelation peak.

    The linear autocorrelation of the mean-free image (summed over channels,
    divided by the overlap count) comes from a zero-padded FFT.  It is
    sampled bilinearly at shifts ``d`` along (cos a, sin a), and the first
    peak after the first negative lobe is refined parabolically.
    """
    img = np.asarray(image, float)
    if img.ndim == 2:
        img = img[..., None]
    img = img - img.mean(axis=(0, 1))
    h, w = img.shape[:2]
    max_shift = max_shift or 0.8 * min(h, w)
    shape = (2 * h, 2 * w)
    spec = np.fft.rfft2(img, s=shape, axes=(0, 1))
    corr = np.fft.irfft2((spec * spec.conj()).sum(axis=2), s=shape)
    ones = np.fft.rfft2(np.ones((h, w)), s=shape)
    count = np.fft.irfft2(ones * ones.conj(), s=shape)
    # lag (dy, dx) sits at index (dy mod 2h, dx mod 2w); recentre it
    acf = np.fft.fftshift(corr / np.maximum(np.rint(count), 1.0))
    ds = np.arange(step, max_shift, step)
    rr = h + ds * math.sin(angle)
    cc = w + ds * math.cos(angle)
    r = ndimage.map_coordinates(acf, [rr, cc], order=1)
    neg = int(np.argmax(r < 0))
    if r[neg] >= 0:
        raise ValueError("autocorrelation never goes negative; no period visible")
    pos = neg + int(np.argmax(r[neg:] > 0))
    nxt = pos + int(np.argmax(r[pos:] < 0)) if (r[pos:] < 0).any() else len(r)
    i = pos + int(np.argmax(r[pos:nxt]))  # peak of the first positive lobe after the dip
    off = 0.0
    if 0 < i < len(r) - 1:
        den = r[i - 1] - 2 * r[i] + r[i + 1]
        if den < 0:
            off = float(np.clip(0.5 * (r[i - 1] - r[i + 1]) / den, -0.5, 0.5))
    return float(ds[i] + off * step)


def rotate_canvas(image, delta):
    """Resamples ``image`` so content at canvas-centred (x, y) moves by rotation delta.

    Output(x, y) = input(x cos d + y sin d, -x sin d + y cos d), which maps a
    stripe pattern at angle a onto one at angle a + d.
    """
    img = np.asarray(image, float)
    h, w = img.shape[:2]
    y, x = np.mgrid[0:h, 0:w].astype(float)
    x = x + 0.5 - w / 2
    y = y + 0.5 - h / 2
    xs = x * math.cos(delta) + y * math.sin(delta)
    ys = -x * math.sin(delta) + y * math.cos(delta)
    cc = xs + w / 2 - 0.5
    rr = ys + h / 2 - 0.5
    return np.stack(
        [ndimage.map_coordinates(img[..., c], [rr, cc], order=3, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def eye_line_slope(image, threshold=60):
    """Slope of the line through the two dark blobs (eyes) of an aligned image."""
    gray = np.asarray(image, float)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    if gray.max() <= 1.0:
        gray = gray * 255
    labels, n = ndimage.label(gray < threshold)
    if n < 2:
        raise ValueError(f"expected two eye blobs, found {n}")
    sizes = ndimage.sum(np.ones_like(gray), labels, range(1, n + 1))
    biggest = np.argsort(sizes)[-2:] + 1
    (y1, x1), (y2, x2) = ndimage.center_of_mass(np.ones_like(gray), labels, biggest)
    return (y2 - y1) / (x2 - x1)
