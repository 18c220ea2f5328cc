"""Slow, loop-based reference implementations used only as test oracles."""

import math

import numpy as np


def pointwise_loop(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            for y in range(h):
                for z in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        acc += w[o, c] * x[i, c, y, z]
                    out[i, o, y, z] = acc
    return out


def depthwise_loop(x, w, b, r):
    n, c, h, wd = x.shape
    k = w.shape[1]
    pad = r * (k - 1) // 2
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros_like(x)
    for i in range(n):
        for ch in range(c):
            for y in range(h):
                for z in range(wd):
                    acc = b[ch]
                    for u in range(k):
                        for v in range(k):
                            acc += w[ch, u, v] * xp[i, ch, y + u * r, z + v * r]
                    out[i, ch, y, z] = acc
    return out


def linear_loop(x, w, b):
    t, din = x.shape
    dout = w.shape[0]
    out = np.zeros((t, dout))
    for i in range(t):
        for o in range(dout):
            out[i, o] = b[o] + sum(w[o, c] * x[i, c] for c in range(din))
    return out


def attention_loop(q, k, v):
    tq, d = q.shape
    out = np.zeros((tq, v.shape[1]))
    for i in range(tq):
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in range(len(k))]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        for j in range(len(k)):
            out[i] += (e[j] / z) * v[j]
    return out


def gelu_scalar(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def surface_points(mask):
    h, w = mask.shape
    pts = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            if y in (0, h - 1) or x in (0, w - 1):
                pts.append((y, x))
                continue
            if not (mask[y - 1, x] and mask[y + 1, x] and mask[y, x - 1] and mask[y, x + 1]):
                pts.append((y, x))
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def directed_brute(src, dst):
    """All-pairs nearest distances from src points to dst points."""
    diff = src[:, None, :] - dst[None, :, :]
    d2 = (diff * diff).sum(-1).astype(np.float64)
    return np.sqrt(d2).min(axis=1)


def metrics_brute(a, b, tau):
    """(dice, nsd, hd95, asd) by exhaustive pairwise distances."""
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    sa, sb = surface_points(a), surface_points(b)
    na, nb = a.sum(), b.sum()
    dice = 1.0 if na + nb == 0 else 2.0 * (a & b).sum() / (na + nb)
    diag = math.hypot(*a.shape)
    if len(sa) == 0 and len(sb) == 0:
        return dice, 1.0, 0.0, 0.0
    if len(sa) == 0 or len(sb) == 0:
        return dice, 0.0, diag, diag
    dab, dba = directed_brute(sa, sb), directed_brute(sb, sa)

    def rank95(v):
        v = sorted(v)
        return v[math.ceil(0.95 * len(v) - 1e-9) - 1]

    hd = max(rank95(dab), rank95(dba))
    both = np.concatenate([dab, dba])
    nsd = ((dab <= tau).sum() + (dba <= tau).sum()) / (len(sa) + len(sb))
    return dice, nsd, hd, both.sum() / both.size
