"""Independent reference computations used by the unit and acceptance tests."""
import numpy as np

from ppgrhythm.backprop import StochasticDraws, loss_and_grads, train_loss
from ppgrhythm.model import random_weights


def gradient_check(spec, seed, batch=3, length=64, dropout=0.2, class_weights=(0.7, 1.6), h="1e-5"):
    """Worst relative error between analytic gradients and central differences.

    The finite differences are taken in extended precision (``np.longdouble``)
    so cancellation in the difference quotient stays far below the tolerance.
    Returns ``(worst_error, where)``.
    """
    rng = np.random.default_rng(seed)
    w = random_weights(spec, seed)
    x = rng.standard_normal((batch, length))
    y = (rng.random((batch, length // spec.total_pool)) < 0.5).astype(float)
    draws = StochasticDraws.draw(rng, batch, spec, dropout)
    _, grads, _ = loss_and_grads(w, x, y, class_weights, draws)

    wl = w.astype(np.longdouble)
    dl = StochasticDraws(*(a.astype(np.longdouble) for a in (draws.c0, draws.h0, draws.mask_x, draws.mask_h)))
    xl, yl = x.astype(np.longdouble), y.astype(np.longdouble)
    step = np.longdouble(h)
    worst, where = 0.0, None
    for name in w.names(trainable_only=True):
        arr = wl.tensors[name]
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            lp = train_loss(wl, xl, yl, class_weights, dl)
            arr[idx] = old - step
            lm = train_loss(wl, xl, yl, class_weights, dl)
            arr[idx] = old
            fd = float((lp - lm) / (2 * step))
            a = float(grads[name][idx])
            rel = abs(a - fd) / (abs(a) + 1e-8)
            if rel > worst:
                worst, where = rel, (name, idx, a, fd)
    return worst, where


def pairwise_auc(p, y):
    """Fraction of (positive, negative) pairs ranked correctly; ties count one half."""
    pos = [a for a, b in zip(p, y) if b == 1]
    neg = [a for a, b in zip(p, y) if b == 0]
    s = 0.0
    for a in pos:
        for b in neg:
            s += 1.0 if a > b else (0.5 if a == b else 0.0)
    return s / (len(pos) * len(neg))


def tree_orders(Z):
    """Every leaf order consistent with linkage ``Z`` (each internal node may be flipped)."""
    n = len(Z) + 1

    def orders(c):
        if c < n:
            return [[c]]
        a, b = int(Z[c - n][0]), int(Z[c - n][1])
        out = []
        for la in orders(a):
            for lb in orders(b):
                out.append(la + lb)
                out.append(lb + la)
        return out

    return orders(2 * n - 2)


def brute_force_olo(Z, D):
    best = min(tree_orders(Z), key=lambda o: sum(D[o[i], o[i + 1]] for i in range(len(o) - 1)))
    return sum(D[best[i], best[i + 1]] for i in range(len(best) - 1))


def residual_top_eigenvalue(X, w, b):
    """Largest eigenvalue of the sample covariance of ``x - w_hat * y0``."""
    w = np.asarray(w, float)
    wh = w / np.linalg.norm(w)
    y0 = X @ wh + b / np.linalg.norm(w)
    R = X - np.outer(y0, wh)
    return np.linalg.eigvalsh(np.cov(R, rowvar=False))[-1]


def two_pass_corr(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    sab = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    saa = sum((x - ma) ** 2 for x in a)
    sbb = sum((y - mb) ** 2 for y in b)
    return sab / (saa * sbb) ** 0.5

