import numpy as np


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def naive_conv(x, w, b):
    """Nested-loop zero-padded stride-1 cross-correlation, (C,H,W) input."""
    c_out, c_in, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    y = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for r in range(h):
            for c in range(wd):
                acc = b[o]
                for ci in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            rr, cc = r + i - p, c + j - p
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += w[o, ci, i, j] * x[ci, rr, cc]
                y[o, r, c] = acc
    return y
