"""Independent scalar reference implementations and frozen values used by the tests.

Everything here is plain Python floats and loops so it shares no code path
with the vectorized package implementations it checks.
"""

import math

# alpha compositing of sigma=[1, 1], delta=[0.5, 0.5]
WORKED_SIGMA = [1.0, 1.0]
WORKED_DELTA = [0.5, 0.5]
WORKED_WEIGHTS = [0.39347, 0.23865]


def composite_scalar(sigmas, deltas):
    """Per-sample weights and the leftover transmittance of one ray."""
    T, ws = 1.0, []
    for s, d in zip(sigmas, deltas):
        a = 1.0 - math.exp(-s * d)
        ws.append(T * a)
        T *= 1.0 - a
    return ws, T


def render_ray_scalar(sigmas, deltas, feats, colors):
    ws, _ = composite_scalar(sigmas, deltas)
    C = len(feats[0])
    feat = [sum(w * f[c] for w, f in zip(ws, feats)) for c in range(C)]
    rgb = [sum(w * col[c] for w, col in zip(ws, colors)) for c in range(3)]
    return feat, rgb, sum(ws), ws


def project_scalar(R, t, fx, fy, cx, cy, p):
    X = [sum(R[i][j] * p[j] for j in range(3)) + t[i] for i in range(3)]
    return fx * X[0] / X[2] + cx, fy * X[1] / X[2] + cy, X[2]


def bilinear_scalar(fmap, x, y):
    """fmap[c][row][col]; border-clamped bilinear lookup at lattice coords (x along cols)."""
    H, W = len(fmap[0]), len(fmap[0][0])
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0, y0 = min(int(math.floor(x)), max(W - 2, 0)), min(int(math.floor(y)), max(H - 2, 0))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = x - x0, y - y0
    out = []
    for ch in fmap:
        top = ch[y0][x0] * (1 - ax) + ch[y0][x1] * ax
        bot = ch[y1][x0] * (1 - ax) + ch[y1][x1] * ax
        out.append(top * (1 - ay) + bot * ay)
    return out


def masked_mse_scalar(a, b, mask):
    """a, b: nested [c][h][w]; mask [h][w]; mean over masked elements."""
    num = den = 0.0
    for ca, cb in zip(a, b):
        for ra, rb, rm in zip(ca, cb, mask):
            for va, vb, m in zip(ra, rb, rm):
                if m:
                    num += (va - vb) ** 2
                    den += 1
    return 0.0 if den == 0 else num / den


def background_scalar(sigmas, deltas):
    return sum(abs(1 - math.exp(-s * d)) for s, d in zip(sigmas, deltas))
