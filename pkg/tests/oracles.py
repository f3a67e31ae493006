"""Slow, independent reference implementations used as test oracles."""

import math
from fractions import Fraction

import numpy as np


def ref_resize(patch, H, W):
    """Corner-aligned bilinear resampling, one output pixel at a time."""
    C, h, w = patch.shape
    out = np.zeros((C, H, W))
    for c in range(C):
        for i in range(H):
            sy = 0.0 if H == 1 else i * (h - 1) / (H - 1)
            y0 = min(int(math.floor(sy)), h - 1)
            y1 = min(y0 + 1, h - 1)
            ty = sy - y0
            for j in range(W):
                sx = 0.0 if W == 1 else j * (w - 1) / (W - 1)
                x0 = min(int(math.floor(sx)), w - 1)
                x1 = min(x0 + 1, w - 1)
                tx = sx - x0
                out[c, i, j] = (
                    patch[c, y0, x0] * (1 - ty) * (1 - tx)
                    + patch[c, y0, x1] * (1 - ty) * tx
                    + patch[c, y1, x0] * ty * (1 - tx)
                    + patch[c, y1, x1] * ty * tx
                )
    return out


def ref_fold_face(img, cut_v, flips):
    C, H, W = img.shape
    c = int(math.floor(cut_v * W + 0.5))
    parts = [img[:, :, :c], img[:, :, c:]]
    acc = np.zeros((C, H, W))
    for p, f in zip(parts, flips):
        if f:
            p = p[:, :, ::-1]
        acc += ref_resize(p, H, W)
    return acc / 2


def ref_fold_fingerprint(img, cut_v, cut_h, flips):
    C, H, W = img.shape
    cv = int(math.floor(cut_v * W + 0.5))
    ch = int(math.floor(cut_h * H + 0.5))
    quads = [img[:, :ch, :cv], img[:, :ch, cv:], img[:, ch:, :cv], img[:, ch:, cv:]]
    # top-left already canonical; others mirrored back toward it
    how = [(False, False), (False, True), (True, False), (True, True)]
    acc = np.zeros((C, H, W))
    for q, f, (fr, fc) in zip(quads, flips, how):
        if f and fr:
            q = q[:, ::-1, :]
        if f and fc:
            q = q[:, :, ::-1]
        acc += ref_resize(q, H, W)
    return acc / 4


def sweep_points(attack, bonafide):
    """(threshold, fpr, tpr) at +inf and at every observed score, by direct counting; rates are exact Fractions."""
    attack = np.asarray(attack, dtype=float)
    bonafide = np.asarray(bonafide, dtype=float)
    thresholds = np.array([math.inf] + sorted(set(attack.tolist() + bonafide.tolist()), reverse=True))
    # full |thresholds| x |scores| comparison table
    tp = (attack[None, :] >= thresholds[:, None]).sum(axis=1)
    fp = (bonafide[None, :] >= thresholds[:, None]).sum(axis=1)
    return [(t, Fraction(int(f), len(bonafide)), Fraction(int(p), len(attack)))
            for t, f, p in zip(thresholds, fp, tp)]


def sweep_eer(attack, bonafide):
    pts = sweep_points(attack, bonafide)
    best_gap = min(abs(f - (1 - t)) for _, f, t in pts)
    return float(min((f + (1 - t)) / 2 for _, f, t in pts if abs(f - (1 - t)) == best_gap))


def sweep_tdr(attack, bonafide, cap):
    return float(max(t for _, f, t in sweep_points(attack, bonafide) if f <= Fraction(cap)))


def count_ace(attack, bonafide, thr):
    fnr = Fraction(sum(1 for a in attack if a < thr), len(attack))
    fpr = Fraction(sum(1 for b in bonafide if b >= thr), len(bonafide))
    return float((fnr + fpr) / 2)


def pair_auc(attack, bonafide):
    a = np.asarray(attack, dtype=float)[:, None]
    b = np.asarray(bonafide, dtype=float)[None, :]
    twice_wins = 2 * int((a > b).sum()) + int((a == b).sum())
    return float(Fraction(twice_wins, 2 * a.size * b.size))


def chi_mean(d, sigma=0.1):
    """E||delta|| for delta ~ N(0, sigma^2 I_d)."""
    return sigma * math.sqrt(2) * math.exp(math.lgamma((d + 1) / 2) - math.lgamma(d / 2))
