"""Independent scalar-loop transcriptions used as test oracles.

Everything here is written pixel by pixel and patch by patch, without the
library's vectorized helpers, so agreement is meaningful.
"""

import math

import numpy as np

LUMA = (0.299, 0.587, 0.114)


def clamp(i, n):
    return min(max(i, 0), n - 1)


def luminance(img):
    h, w, _ = img.shape
    return [[sum(LUMA[c] * img[r, q, c] for c in range(3)) for q in range(w)] for r in range(h)]


def raw_weights(img):
    h, w, _ = img.shape
    y = luminance(img)
    out = np.zeros((h, w))
    for r in range(h):
        for q in range(w):
            lap = (y[clamp(r - 1, h)][q] + y[clamp(r + 1, h)][q] + y[r][clamp(q - 1, w)]
                   + y[r][clamp(q + 1, w)] - 4 * y[r][q])
            v = [img[r, q, c] for c in range(3)]
            m = sum(v) / 3
            sat = math.sqrt(sum((x - m) ** 2 for x in v) / 3)
            expo = 1.0
            for x in v:
                expo *= math.exp(-((x - 0.5) ** 2) / (2 * 0.2 ** 2))
            out[r, q] = abs(lap) * sat * expo + 1e-12
    return out


def normalize(planes):
    total = sum(planes)
    return [p / total for p in planes]


def box_mean_integral(p, r):
    """Replicate-padded box mean through a summed-area table."""
    h, w = p.shape
    rows = [clamp(i, h) for i in range(-r, h + r)]
    cols = [clamp(j, w) for j in range(-r, w + r)]
    padded = p[np.ix_(rows, cols)]
    sat = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    sat[1:, 1:] = padded.cumsum(0).cumsum(1)
    n = 2 * r + 1
    total = sat[n:, n:] - sat[:-n, n:] - sat[n:, :-n] + sat[:-n, :-n]
    return total / (n * n)


def guided(guide, src, r, eps):
    mg, ms = box_mean_integral(guide, r), box_mean_integral(src, r)
    a = (box_mean_integral(guide * src, r) - mg * ms) / (box_mean_integral(guide * guide, r) - mg * mg + eps)
    b = ms - a * mg
    return box_mean_integral(a, r) * guide + box_mean_integral(b, r)


def smoothed_weights(images, eps=1e-2):
    h, w, _ = images[0].shape
    r = max(2, min(h, w) // 16)
    norm = normalize([raw_weights(im) for im in images])
    smooth = [np.maximum(guided(np.array(luminance(im)), wn, r, eps), 0.0) + 1e-12 for im, wn in zip(images, norm)]
    return normalize(smooth)


def patches(y, size, stride):
    h, w = len(y), len(y[0])
    out = []
    for top in range(0, h - size + 1, stride):
        for left in range(0, w - size + 1, stride):
            out.append([y[top + a][left + b] for a in range(size) for b in range(size)])
    return out


def desired(patch_list, mus, sigma_g=0.2, sigma_l=0.5, tau=0.5):
    n = len(patch_list[0])
    ls, cs, ss, infs = [], [], [], []
    for p in patch_list:
        l = sum(p) / n
        d = [x - l for x in p]
        c = math.sqrt(sum(x * x for x in d))
        ls.append(l)
        cs.append(c)
        ss.append([x / c for x in d] if c >= 1e-12 else [0.0] * n)
        infs.append(max(abs(x) for x in d))
    c_hat = max(cs)
    tot = sum(infs)
    s_bar = [sum(infs[k] * ss[k][i] for k in range(len(ss))) / tot if tot > 0 else 0.0 for i in range(n)]
    norm = math.sqrt(sum(x * x for x in s_bar))
    if norm >= 1e-12:
        s_hat = [x / norm for x in s_bar]
    else:
        s_hat, c_hat = [0.0] * n, 0.0
    wl = [math.exp(-((mu - tau) ** 2) / (2 * sigma_g ** 2) - ((l - tau) ** 2) / (2 * sigma_l ** 2))
          for mu, l in zip(mus, ls)]
    l_hat = sum(a * b for a, b in zip(wl, ls)) / sum(wl)
    return [c_hat * s + l_hat for s in s_hat]


def ssim(x, y, c1=1e-4, c2=9e-4):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    vx = sum((a - mx) ** 2 for a in x) / n
    vy = sum((b - my) ** 2 for b in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    return (2 * mx * my + c1) / (mx * mx + my * my + c1) * (2 * cov + c2) / (vx + vy + c2)


def mef_ssim(images, fused, size=8, stride=4):
    size = min(size, *images[0].shape[:2])
    stride = min(stride, size)
    lums = [luminance(im) for im in images]
    mus = [sum(map(sum, y)) / (len(y) * len(y[0])) for y in lums]
    per_image = [patches(y, size, stride) for y in lums]
    fused_patches = patches(luminance(fused), size, stride)
    scores = []
    for i, fp in enumerate(fused_patches):
        d = desired([pp[i] for pp in per_image], mus)
        scores.append(ssim(d, fp))
    return sum(scores) / len(scores)


def loss_w(images, fused, weights=None):
    if weights is None:
        weights = smoothed_weights(images)
    h, w, _ = fused.shape
    total = 0.0
    for img, wk in zip(images, weights):
        for r in range(h):
            for q in range(w):
                total += wk[r, q] * sum(abs(fused[r, q, c] - img[r, q, c]) for c in range(3))
    return total / (h * w)
