"""Synthetic inputs and brute-force references shared by the test modules."""
import numpy as np


def envelope_frame(rng, shape, center, widths, amplitude=0.4, baseline=0.05, kind="gaussian"):
    """Bernoulli frame drawn from a known separable envelope."""
    rows, cols = shape
    x = (np.arange(cols) - center[0]) / widths[0]
    y = (np.arange(rows) - center[1]) / widths[1]
    if kind == "gaussian":
        gx, gy = np.exp(-0.5 * x ** 2), np.exp(-0.5 * y ** 2)
    else:
        gx = np.where(np.abs(x) <= 2, np.sinc(x) ** 2, 0.0)
        gy = np.where(np.abs(y) <= 2, np.sinc(y) ** 2, 0.0)
    probability = np.clip(baseline + amplitude * np.outer(gy, gx), 0.0, 1.0)
    return (rng.random(shape) < probability).astype(np.uint8), probability


def _pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    return 0.0 if denom == 0 else float((dx * dy).sum() / denom)


def brute_force_map(a, b, flip_idler=False, wrap=True):
    """Direct per-shift Pearson coefficient; values[dy + S, dx + S] pairs a(x + dx, y + dy) with b(x, y)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if flip_idler:
        b = b[::-1, ::-1]
    rows, cols = a.shape
    sy, sx = max(rows // 2 - 1, 0), max(cols // 2 - 1, 0)
    out = np.zeros((2 * sy + 1, 2 * sx + 1))
    for dy in range(-sy, sy + 1):
        for dx in range(-sx, sx + 1):
            xs, ys = [], []
            for y in range(rows):
                for x in range(cols):
                    ty, tx = y + dy, x + dx
                    if wrap:
                        ty, tx = ty % rows, tx % cols
                    elif not (0 <= ty < rows and 0 <= tx < cols):
                        continue
                    xs.append(a[ty, tx])
                    ys.append(b[y, x])
            out[dy + sy, dx + sx] = _pearson(xs, ys)
    return out
