"""Shared test utilities: finite-difference gradient checks and brute-force oracles.

Everything here is deliberately slow and literal: oracles must stay independent
of the implementations they check.
"""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5
FD_TOL = 1e-4


def finite_diff_grad(loss_fn, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss w.r.t. every element of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + h
        hi = loss_fn(x)
        xf[i] = orig - h
        lo = loss_fn(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Elementwise symmetric relative error with a small absolute floor."""
    num = np.abs(a - b)
    den = np.abs(a) + np.abs(b) + 1e-6
    return float(np.max(num / den))


def check_grad(loss_fn, grad_fn, x: np.ndarray, tol: float = FD_TOL) -> float:
    """Assert the analytic gradient of loss_fn matches central differences."""
    analytic = grad_fn(x)
    numeric = finite_diff_grad(loss_fn, x.copy())
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient check failed: rel error {err:.3e} >= {tol}"
    return err


def conv2d_oracle(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Direct quadruple-loop zero-padded stride-1 correlation."""
    h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout))
    for y in range(h):
        for xx in range(w):
            for co in range(cout):
                acc = bias[co]
                for ty in range(kh):
                    for tx in range(kw):
                        sy, sx = y + ty - ph, xx + tx - pw
                        if 0 <= sy < h and 0 <= sx < w:
                            for ci in range(cin):
                                acc += x[sy, sx, ci] * kernel[ty, tx, ci, co]
                out[y, xx, co] = acc
    return out


def ncc_oracle(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Per-pixel NCC by the textbook formula; 0 where the window leaves the image."""
    h, w, c = image.shape
    th, tw, _ = template.shape
    ry, rx = th // 2, tw // 2
    tz = template - template.mean()
    tnorm = np.sqrt((tz * tz).sum())
    out = np.zeros((h, w))
    for y in range(ry, h - ry):
        for x in range(rx, w - rx):
            patch = image[y - ry : y + ry + 1, x - rx : x + rx + 1, :]
            pz = patch - patch.mean()
            pnorm = np.sqrt((pz * pz).sum())
            if tnorm <= 0 or pnorm <= 1e-12:
                out[y, x] = 0.0
            else:
                out[y, x] = float((pz * tz).sum() / (pnorm * tnorm))
    return out


def nms_oracle(score: np.ndarray, window: int) -> list[tuple[int, int]]:
    """O(H*W*window^2) suppression: a pixel survives iff it is >= everything in
    its window and strictly greater than any already-accepted neighbor."""
    h, w = score.shape
    r = window // 2
    accepted: list[tuple[int, int]] = []
    for y in range(h):
        for x in range(w):
            v = score[y, x]
            ok = True
            for ny in range(max(0, y - r), min(h, y + r + 1)):
                for nx in range(max(0, x - r), min(w, x + r + 1)):
                    if score[ny, nx] > v:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                continue
            for ay, ax in accepted:
                if abs(ay - y) <= r and abs(ax - x) <= r and not v > score[ay, ax]:
                    ok = False
                    break
            if ok:
                accepted.append((y, x))
    return [(x, y) for (y, x) in accepted]


def nearest_label_split_oracle(
    cand_latents: np.ndarray, pos_latents: np.ndarray, neg_latents: np.ndarray
) -> np.ndarray:
    """True where the candidate's nearest labeled latent is positive (ties -> positive)."""
    out = np.zeros(len(cand_latents), dtype=bool)
    for i, v in enumerate(cand_latents):
        dp = min(float(np.sum((v - p) ** 2)) for p in pos_latents) if len(pos_latents) else np.inf
        dn = min(float(np.sum((v - n) ** 2)) for n in neg_latents) if len(neg_latents) else np.inf
        out[i] = dp <= dn
    return out


def matching_oracle(
    pred: np.ndarray, gt: np.ndarray, radius: int = 10
) -> tuple[int, int, int]:
    """One-to-one greedy matching on ascending Chebyshev distance, ties broken
    by (pred coordinate, gt coordinate). Repeated argmin scan, no sorting."""
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            d = max(abs(float(p[0] - g[0])), abs(float(p[1] - g[1])))
            if d <= radius:
                key = (d, float(p[0]), float(p[1]), float(g[0]), float(g[1]))
                candidates.append((key, i, j))
    used_p: set[int] = set()
    used_g: set[int] = set()
    tp = 0
    while candidates:
        best = min(candidates, key=lambda t: t[0])
        _, i, j = best
        used_p.add(i)
        used_g.add(j)
        tp += 1
        candidates = [c for c in candidates if c[1] not in used_p and c[2] not in used_g]
    return tp, len(pred) - tp, len(gt) - tp
