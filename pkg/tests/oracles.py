"""Slow, obviously-correct reference implementations used only by the tests."""
import math

import numpy as np


def reflect(i, n):
    if n == 1:
        return 0
    while i < 0 or i >= n:
        i = -i if i < 0 else 2 * (n - 1) - i
    return i


def conv2d(x, w, b, groups=1, padding="zero"):
    h, wd, cin = x.shape
    kh, kw, cin_g, cout = w.shape
    cout_g = cout // groups
    out = np.zeros((h, wd, cout))
    for r in range(h):
        for c in range(wd):
            for o in range(cout):
                g = o // cout_g
                acc = float(b[o])
                for i in range(kh):
                    for j in range(kw):
                        rr, cc = r + i - kh // 2, c + j - kw // 2
                        if padding == "zero":
                            if not (0 <= rr < h and 0 <= cc < wd):
                                continue
                        else:
                            rr, cc = reflect(rr, h), reflect(cc, wd)
                        for k in range(cin_g):
                            acc += float(x[rr, cc, g * cin_g + k]) * float(w[i, j, k, o])
                out[r, c, o] = acc
    return out


def depth_to_space(x, b):
    h, w, c = x.shape
    co = c // (b * b)
    out = np.zeros((h * b, w * b, co), dtype=x.dtype)
    for r in range(h):
        for s in range(w):
            for i in range(b):
                for j in range(b):
                    for k in range(co):
                        out[r * b + i, s * b + j, k] = x[r, s, (i * b + j) * co + k]
    return out


def box_blur3(x):
    h, w, ch = x.shape
    out = np.zeros((h, w, ch))
    for r in range(h):
        for c in range(w):
            for k in range(ch):
                s = 0.0
                for i in (-1, 0, 1):
                    for j in (-1, 0, 1):
                        s += float(x[reflect(r + i, h), reflect(c + j, w), k])
                out[r, c, k] = s / 9.0
    return out


def keys(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def resize_1d(v, factor):
    """Antialiased Keys resampling of a 1-D signal, one output sample at a time."""
    n = len(v)
    n_out = int(math.floor(n * factor + 1e-9))
    shrink = min(factor, 1.0)
    out = []
    for u in range(n_out):
        x = (u + 0.5) / factor - 0.5
        num = den = 0.0
        for j in range(int(math.floor(x - 2 / shrink)) - 1, int(math.ceil(x + 2 / shrink)) + 2):
            wgt = shrink * keys(shrink * (x - j))
            num += wgt * v[reflect(j, n)]
            den += wgt
        out.append(num / den)
    return np.array(out)


def luma(x):
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def psnr_y(a, b, shave):
    ya, yb = luma(a.astype(np.float64)), luma(b.astype(np.float64))
    h, w = ya.shape
    total, n = 0.0, 0
    for r in range(shave, h - shave):
        for c in range(shave, w - shave):
            total += (ya[r, c] - yb[r, c]) ** 2
            n += 1
    mse = total / n
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(255.0 ** 2 / mse))


def ssim(a, b):
    """Mean SSIM over every 8x8 window of the luma planes (population statistics)."""
    ya, yb = luma(a.astype(np.float64)), luma(b.astype(np.float64))
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for r in range(ya.shape[0] - 7):
        for c in range(ya.shape[1] - 7):
            p, q = ya[r:r + 8, c:c + 8].ravel(), yb[r:r + 8, c:c + 8].ravel()
            mp, mq = p.mean(), q.mean()
            vp, vq = ((p - mp) ** 2).mean(), ((q - mq) ** 2).mean()
            cov = ((p - mp) * (q - mq)).mean()
            vals.append((2 * mp * mq + c1) * (2 * cov + c2) / ((mp ** 2 + mq ** 2 + c1) * (vp + vq + c2)))
    return float(np.mean(vals))


def fake_quant(v, scale, zp, qmin, qmax):
    q = round(v / scale + zp)  # python round: half to even, like np.round
    return scale * (min(max(q, qmin), qmax) - zp)


def fd_gradient_gap(net, x, target, loss_fn, n_probe=12, h=1e-6, seed=0):
    """Worst relative gap between ``net.backward`` and central differences.

    Probes ``n_probe`` random entries of every weight and bias array.
    """
    def loss():
        return loss_fn(net.forward(x), target)[0]

    _, dy = loss_fn(net.forward(x), target)
    grads = net.backward(dy)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for ci, (w, b) in enumerate(net.params):
        for arr, g in ((w, grads[ci][0]), (b, grads[ci][1])):
            for _ in range(n_probe):
                idx = tuple(int(rng.integers(s)) for s in arr.shape)
                keep = arr[idx]
                arr[idx] = keep + h
                up = loss()
                arr[idx] = keep - h
                down = loss()
                arr[idx] = keep
                fd = (up - down) / (2 * h)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
    return worst
