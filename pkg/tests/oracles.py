"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately written as plain loops over Python floats so
it shares no code (and no vectorization strategy) with the library.  Where a
test demands bit-exact agreement the inputs are drawn from a dyadic grid (see
``dyadic``) so every product and partial sum is exactly representable and the
result is independent of accumulation order.
"""

from __future__ import annotations

import numpy as np


def dyadic(rng: np.random.Generator, shape, step: float = 0.25, span: int = 8) -> np.ndarray:
    """Random float32 values k*step with k in [-span, span]: exact under fp arithmetic."""
    return (rng.integers(-span, span + 1, size=shape) * step).astype(np.float32)


def conv1d_loops(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Triple-loop valid sliding dot product (cross-correlation), matching dtype of x."""
    channels, frames = x.shape
    out_channels, in_channels, kernel_width = weights.shape
    assert channels == in_channels
    out_frames = frames - kernel_width + 1
    out = np.empty((out_channels, out_frames), dtype=x.dtype)
    for o in range(out_channels):
        for t in range(out_frames):
            acc = float(bias[o])
            for c in range(channels):
                for k in range(kernel_width):
                    acc += float(x[c, t + k]) * float(weights[o, c, k])
            out[o, t] = acc
    return out


def flipped_conv1d_loops(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Textbook single-channel discrete convolution C(i) = sum_d x(i-d) * w(d), valid part."""
    n, m = len(x), len(kernel)
    out = []
    for i in range(m - 1, n):
        acc = 0.0
        for d in range(m):
            acc += float(x[i - d]) * float(kernel[d])
        out.append(acc)
    return np.asarray(out, dtype=np.asarray(x).dtype)


def maxpool1d_loops(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    channels, frames = x.shape
    out_frames = (frames - pool) // stride + 1
    out = np.empty((channels, out_frames), dtype=x.dtype)
    for c in range(channels):
        for t in range(out_frames):
            out[c, t] = max(x[c, t * stride: t * stride + pool])
    return out


def dense_loops(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out_features, in_features = weights.shape
    out = np.empty(out_features, dtype=x.dtype)
    for o in range(out_features):
        acc = float(bias[o])
        for i in range(in_features):
            acc += float(weights[o, i]) * float(x[i])
        out[o] = acc
    return out


def pairwise_metrics(truths, preds, num_classes):
    """Per-class precision/recall/F1 and macro F1 computed directly from label pairs."""
    per_class = []
    f1_sum = 0.0
    for k in range(num_classes):
        tp = sum(1 for t, p in zip(truths, preds) if t == k and p == k)
        fp = sum(1 for t, p in zip(truths, preds) if t != k and p == k)
        fn = sum(1 for t, p in zip(truths, preds) if t == k and p != k)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1, tp + fn))
        f1_sum += f1
    return per_class, f1_sum / num_classes


def simulate_shapes(channels, frames, conv_filters, kernel_width, pool, pool_stride,
                    fc_sizes, num_classes):
    """Step-by-step shape walk of the standard conv/pool/fc stack."""
    shapes = []
    c, f = channels, frames
    for n, filters in enumerate(conv_filters, start=1):
        f = f - kernel_width + 1
        c = filters
        shapes.append((f"conv{n}", (c, f)))
        if f < 1:
            return shapes
        f = (f - pool) // pool_stride + 1
        shapes.append((f"pool{n}", (c, f)))
        if f < 1:
            return shapes
    d = c * f
    shapes.append(("flatten", (d,)))
    for n, width in enumerate(fc_sizes, start=1):
        d = width
        shapes.append((f"fc{n}", (d,)))
    shapes.append(("output", (num_classes,)))
    return shapes
