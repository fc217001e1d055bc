"""Slow, obviously-correct reference implementations used by the tests."""
import math
from fractions import Fraction

import numpy as np


def window_mean_resize(a, final_h, final_w):
    """Brute-force window means: output (i, j) averages source rows
    floor(dy*i) .. ceil(dy*(i+1))-1 and the matching columns, with exact
    rational window bounds."""
    h, w = a.shape
    dy, dx = Fraction(h, final_h), Fraction(w, final_w)
    out = np.empty((final_h, final_w))
    for i in range(final_h):
        r0, r1 = math.floor(dy * i), math.ceil(dy * (i + 1))
        for j in range(final_w):
            c0, c1 = math.floor(dx * j), math.ceil(dx * (j + 1))
            total, count = 0.0, 0
            for r in range(r0, r1):
                for c in range(c0, c1):
                    total += a[r, c]
                    count += 1
            out[i, j] = total / count
    return out


def pairs_bruteforce(n, strategy):
    """Set builders written straight from the strategy definitions."""
    out = set()
    for prvs in range(1, n + 1):
        for nxt in range(1, n + 1):
            if nxt <= prvs:
                continue
            if strategy == "apex":
                keep = prvs == 1 and nxt == n
            elif strategy == "three_frames":
                keep = prvs == 1 and nxt in (n - 2, n - 1, n)
            elif strategy == "all_flows":
                keep = nxt == prvs + 1
            elif strategy == "flows_and_apex":
                keep = nxt == prvs + 1 or (prvs == 1 and nxt == n)
            elif strategy == "mid_flows":
                keep = max(prvs + 1, -(-n // 2)) <= nxt <= n
            else:
                raise ValueError(strategy)
            if keep:
                out.add((prvs, nxt))
    return out


def mse_loop(p, t):
    total, count = 0.0, 0
    for a, b in zip(np.ravel(p), np.ravel(t)):
        total += (a - b) ** 2
        count += 1
    return total / count


def wing_loop(p, t, w, eps):
    c = w - w * math.log(1 + w / eps)
    vals = []
    for a, b in zip(np.ravel(p), np.ravel(t)):
        x = abs(a - b)
        vals.append(w * math.log(1 + x / eps) if x < w else x - c)
    return sum(vals) / len(vals)


def epe_loop(p, t):
    """p, t: (N, 2, H, W)."""
    n, _, h, w = p.shape
    vals = []
    for k in range(n):
        for i in range(h):
            for j in range(w):
                vals.append(math.hypot(p[k, 0, i, j] - t[k, 0, i, j], p[k, 1, i, j] - t[k, 1, i, j]))
    return sum(vals) / len(vals)


def conv3x3_loop(x, wt, b):
    """Zero-padded stride-1 cross-correlation by explicit loops."""
    n, c, h, w = x.shape
    o = wt.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, o, h, w))
    for k in range(n):
        for q in range(o):
            for i in range(h):
                for j in range(w):
                    out[k, q, i, j] = np.sum(xp[k, :, i:i + 3, j:j + 3] * wt[q]) + b[q]
    return out


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar f() w.r.t. every entry of arr (in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def smooth_texture(n=64, sigma=2.0, seed=0):
    from scipy import ndimage
    r = np.random.default_rng(seed).random((n, n))
    t = ndimage.gaussian_filter(r, sigma, mode="wrap")
    return (t - t.min()) / (t.max() - t.min())


def grad_rel_error(a, b):
    """Norm-relative gap between analytic and numeric gradients."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(1e-12, np.linalg.norm(a) + np.linalg.norm(b)))


def project(t, r):
    """Scalar <t, r> as a graph node, so any op output can be checked against FD."""
    from flowmend import nn
    return nn._make(np.sum(t.data * r), (t,), lambda g: t._accumulate(g * r))


def check_grads(fn, arrays, seed=0):
    """Max rel error over ``arrays`` between backprop and central FD of
    <fn(*tensors), r> for a fixed random r."""
    from flowmend import nn
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    r = np.random.default_rng(seed).normal(size=np.shape(fn(*[nn.Tensor(a) for a in arrays]).data))

    def scalar():
        return float(np.sum(fn(*[nn.Tensor(a) for a in arrays]).data * r))

    leaves = [nn.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    project(out, r).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = numeric_grad(scalar, arr)
        worst = max(worst, grad_rel_error(leaf.grad, num))
    return worst


def distinct_values(rng, shape, spacing=0.01):
    """Random array whose entries differ pairwise by at least ``spacing``
    (keeps max-pooling argmax stable under FD perturbation)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)
