"""From-scratch neural-network primitives for multichannel time series.

Every layer here is written against plain numpy with explicit forward and
backward passes -- no autodiff framework.  Conventions:

* A feature map is ``(channels, frames)``; a leading batch axis is optional,
  so ``(batch, channels, frames)`` is accepted everywhere a map is.
* Dense layers operate on vectors ``(features,)`` or batches ``(batch, features)``.
* Convolution is the *valid* sliding dot product (cross-correlation): the
  kernel is applied un-flipped.  Callers that hold textbook flipped-convolution
  kernels reverse them along the tap axis first.
* Arrays keep their dtype (the training pipeline uses float32); reductions
  that feed statistics or losses accumulate in float64.
* All functions are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    NumericError,
)

PROB_FLOOR = 1e-12  # probabilities are clamped to [PROB_FLOOR, 1] inside losses
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9


# ---------------------------------------------------------------------------
# small shared helpers
# ---------------------------------------------------------------------------

def _as_batched_map(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    """Promote a (C, F) map to (1, C, F); return (array, had_batch_axis)."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], False
    if x.ndim == 3:
        return x, True
    raise DimensionError(f"{name} must be (channels, frames) or (batch, channels, frames), got shape {x.shape}")


def _as_batched_vec(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None], False
    if x.ndim == 2:
        return x, True
    raise DimensionError(f"{name} must be (features,) or (batch, features), got shape {x.shape}")


def _require_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains NaN or Inf")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kernel_width: int) -> np.ndarray:
    """(B, C, F) -> (B * out_frames, C * kernel_width) patch matrix."""
    batch, channels, frames = x.shape
    out_frames = frames - kernel_width + 1
    windows = sliding_window_view(x, kernel_width, axis=2)          # (B, C, T, K) view
    return np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(
        batch * out_frames, channels * kernel_width)


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid sliding dot product over the frame axis.

    x: (C, F) or (B, C, F); weights: (out_channels, C, kernel_width); bias: (out_channels,).
    Returns (out_channels, F-K+1) or (B, out_channels, F-K+1).

    out[o, t] = sum_c sum_k x[c, t + k] * weights[o, c, k] + bias[o]
    """
    xb, batched = _as_batched_map(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 3:
        raise DimensionError(f"weights must be (out_channels, in_channels, kernel_width), got shape {weights.shape}")
    out_channels, in_channels, kernel_width = weights.shape
    if bias.shape != (out_channels,):
        raise DimensionError(f"bias shape {bias.shape} does not match {out_channels} output channels")
    batch, channels, frames = xb.shape
    if channels != in_channels:
        raise DimensionError(f"input has {channels} channels but kernels expect {in_channels}")
    if frames < kernel_width:
        raise DegenerateInputError(f"{frames} frames is shorter than kernel width {kernel_width}")
    out_frames = frames - kernel_width + 1
    cols = _im2col(xb, kernel_width)                                  # (B*T, C*K)
    flat = cols @ weights.reshape(out_channels, in_channels * kernel_width).T
    flat += bias
    out = flat.reshape(batch, out_frames, out_channels).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)
    return out if batched else out[0]


def conv1d_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through conv1d_forward.

    upstream has the forward output's shape.  Returns (dx, dweights, dbias)
    with the shapes of x, weights and bias respectively.
    """
    xb, batched = _as_batched_map(x)
    weights = np.asarray(weights)
    out_channels, in_channels, kernel_width = weights.shape
    upb, up_batched = _as_batched_map(upstream, "upstream")
    if up_batched != batched:
        raise DimensionError("upstream batchedness does not match input")
    batch, channels, frames = xb.shape
    out_frames = frames - kernel_width + 1
    if upb.shape != (batch, out_channels, out_frames):
        raise DimensionError(f"upstream shape {upb.shape} does not match forward output "
                             f"{(batch, out_channels, out_frames)}")

    dbias = upb.sum(axis=(0, 2))

    cols = _im2col(xb, kernel_width)                                  # (B*T, C*K)
    up_flat = np.ascontiguousarray(upb.transpose(1, 0, 2)).reshape(out_channels, batch * out_frames)
    dweights = (up_flat @ cols).reshape(out_channels, in_channels, kernel_width)

    # dx is the full correlation of the upstream gradient with tap-reversed kernels.
    pad = kernel_width - 1
    up_pad = np.zeros((batch, out_channels, out_frames + 2 * pad), dtype=upb.dtype)
    up_pad[:, :, pad:pad + out_frames] = upb
    up_windows = sliding_window_view(up_pad, kernel_width, axis=2)    # (B, O, F, K)
    up_cols = np.ascontiguousarray(up_windows.transpose(0, 2, 1, 3)).reshape(
        batch * frames, out_channels * kernel_width)
    w_rev = np.ascontiguousarray(weights[:, :, ::-1].transpose(0, 2, 1)).reshape(
        out_channels * kernel_width, in_channels)
    dx = (up_cols @ w_rev).reshape(batch, frames, in_channels).transpose(0, 2, 1)
    dx = np.ascontiguousarray(dx)
    if not batched:
        dx = dx[0]
    return dx, dweights, dbias


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def _pool_windows(xb: np.ndarray, pool: int, stride: int) -> np.ndarray:
    return sliding_window_view(xb, pool, axis=2)[:, :, ::stride, :]   # (B, C, T, P)


def _check_pool_args(frames: int, pool: int, stride: int) -> None:
    if pool < 1 or stride < 1:
        raise InputError(f"pool and stride must be >= 1, got pool={pool} stride={stride}")
    if frames < pool:
        raise DegenerateInputError(f"{frames} frames is shorter than pool size {pool}")


def maxpool1d_forward(x: np.ndarray, pool: int, stride: int) -> np.ndarray:
    """Window-wise maximum along frames; out_frames = (frames - pool)//stride + 1.

    Trailing frames that do not fill a window are dropped.  Ties take the
    earliest frame (relevant only to the backward pass).
    """
    xb, batched = _as_batched_map(x)
    _check_pool_args(xb.shape[2], pool, stride)
    out = _pool_windows(xb, pool, stride).max(axis=3)
    return out if batched else out[0]


def maxpool1d_backward(x: np.ndarray, pool: int, stride: int, upstream: np.ndarray) -> np.ndarray:
    """Route upstream gradient to each window's (first) argmax frame."""
    xb, batched = _as_batched_map(x)
    _check_pool_args(xb.shape[2], pool, stride)
    upb, up_batched = _as_batched_map(upstream, "upstream")
    if up_batched != batched:
        raise DimensionError("upstream batchedness does not match input")
    windows = _pool_windows(xb, pool, stride)
    batch, channels, out_frames, _ = windows.shape
    if upb.shape != (batch, channels, out_frames):
        raise DimensionError(f"upstream shape {upb.shape} does not match pooled output "
                             f"{(batch, channels, out_frames)}")
    winners = windows.argmax(axis=3)                                  # first max wins
    dx = np.zeros_like(xb)
    if stride >= pool:
        # windows never overlap: a plain scatter is enough
        covered = dx[:, :, :(out_frames - 1) * stride + pool]
        dx_windows = sliding_window_view(covered, pool, axis=2, writeable=True)[:, :, ::stride, :]
        np.put_along_axis(dx_windows, winners[..., None], upb[..., None], axis=3)
    else:
        frame_index = winners + stride * np.arange(out_frames)[None, None, :]
        b_index, c_index, _ = np.indices(winners.shape, sparse=True)
        np.add.at(dx, (b_index, c_index, frame_index), upb)
    return dx if batched else dx[0]


# ---------------------------------------------------------------------------
# dense / relu
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map y = W x + b.  weights: (out, in); bias: (out,)."""
    xb, batched = _as_batched_vec(x)
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    if weights.ndim != 2:
        raise DimensionError(f"weights must be (out, in), got shape {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    if xb.shape[1] != weights.shape[1]:
        raise DimensionError(f"input has {xb.shape[1]} features but weights expect {weights.shape[1]}")
    out = xb @ weights.T + bias
    return out if batched else out[0]


def dense_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xb, batched = _as_batched_vec(x)
    upb, up_batched = _as_batched_vec(upstream, "upstream")
    if up_batched != batched:
        raise DimensionError("upstream batchedness does not match input")
    weights = np.asarray(weights)
    if upb.shape != (xb.shape[0], weights.shape[0]):
        raise DimensionError(f"upstream shape {upb.shape} does not match output "
                             f"{(xb.shape[0], weights.shape[0])}")
    dx = upb @ weights
    dweights = upb.T @ xb
    dbias = upb.sum(axis=0)
    return (dx if batched else dx[0]), dweights, dbias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pass upstream where x > 0, zero where x <= 0."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise DimensionError(f"upstream shape {upstream.shape} does not match input {x.shape}")
    return np.where(x > 0, upstream, np.zeros((), dtype=upstream.dtype))


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    """Intermediate values needed by batchnorm_backward."""
    x_hat: np.ndarray          # normalized input, same shape/dtype as forward input
    inv_std: np.ndarray        # float64 (features,)
    gamma: np.ndarray
    batch_mean: np.ndarray     # float64 (features,)
    batch_var: np.ndarray      # float64 (features,) population variance


def batchnorm_forward_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                            eps: float = BN_EPSILON) -> tuple[np.ndarray, BatchNormCache]:
    """Normalize each feature by the batch mean and population variance.

    x: (batch, features), batch >= 2.  Returns (gamma * x_hat + beta, cache).
    Statistics are accumulated in float64; the output keeps x's dtype.
    """
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm expects (batch, features), got shape {x.shape}")
    if x.shape[0] < 2:
        raise DegenerateInputError(f"batchnorm train mode needs a batch of >= 2 rows, got {x.shape[0]}")
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"gamma/beta must be ({x.shape[1]},), got {gamma.shape} and {beta.shape}")
    mean = x.mean(axis=0, dtype=np.float64)
    var = x.var(axis=0, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = ((x - mean) * inv_std).astype(x.dtype, copy=False)
    out = (gamma * x_hat + beta).astype(x.dtype, copy=False)
    return out, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=gamma,
                               batch_mean=mean, batch_var=var)


def batchnorm_forward_infer(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                            running_mean: np.ndarray, running_var: np.ndarray,
                            eps: float = BN_EPSILON) -> np.ndarray:
    """Normalize with stored running statistics; rows are independent."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"batchnorm expects (batch, features), got shape {x.shape}")
    inv_std = 1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
    out = np.asarray(gamma) * ((x - np.asarray(running_mean)) * inv_std) + np.asarray(beta)
    return out.astype(x.dtype, copy=False)


def batchnorm_update_running(cache: BatchNormCache, running_mean: np.ndarray,
                             running_var: np.ndarray, momentum: float = BN_MOMENTUM
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Exponential moving average update; returns new (running_mean, running_var)."""
    running_mean = np.asarray(running_mean)
    running_var = np.asarray(running_var)
    new_mean = momentum * running_mean + (1.0 - momentum) * cache.batch_mean
    new_var = momentum * running_var + (1.0 - momentum) * cache.batch_var
    return (new_mean.astype(running_mean.dtype, copy=False),
            new_var.astype(running_var.dtype, copy=False))


def batchnorm_backward(cache: BatchNormCache, upstream: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through train-mode batchnorm: (dx, dgamma, dbeta)."""
    upstream = np.asarray(upstream)
    x_hat = cache.x_hat
    if upstream.shape != x_hat.shape:
        raise DimensionError(f"upstream shape {upstream.shape} does not match input {x_hat.shape}")
    rows = x_hat.shape[0]
    dbeta = upstream.sum(axis=0, dtype=np.float64)
    dgamma = (upstream * x_hat).sum(axis=0, dtype=np.float64)
    dxhat = upstream * cache.gamma
    # classic population-variance batchnorm input gradient
    dx = (cache.inv_std / rows) * (
        rows * dxhat
        - dxhat.sum(axis=0, dtype=np.float64)
        - x_hat * (dxhat * x_hat).sum(axis=0, dtype=np.float64)
    )
    dtype = x_hat.dtype
    return dx.astype(dtype, copy=False), dgamma.astype(dtype, copy=False), dbeta.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# softmax and losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise shift-invariant softmax over the last axis."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got {logits.shape[-1]}")
    _require_finite(logits, "logits")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=-1, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


@dataclass(frozen=True)
class LossValue:
    """Scalar loss averaged over a batch."""
    value: float
    batch_size: int


def _check_prob_matrix(probs: np.ndarray, targets: np.ndarray) -> None:
    if probs.ndim != 2 or targets.ndim != 2:
        raise DimensionError(f"probs and targets must be 2-D, got {probs.shape} and {targets.shape}")
    if probs.shape != targets.shape:
        raise DimensionError(f"probs shape {probs.shape} does not match targets {targets.shape}")
    if probs.shape[1] < 2:
        raise DimensionError(f"need at least 2 classes, got {probs.shape[1]}")
    _require_finite(probs, "probs")
    row_sums = probs.sum(axis=1, dtype=np.float64)
    if np.any(np.abs(row_sums - 1.0) > 1e-4):
        raise InputError("each probability row must sum to 1")


def categorical_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> LossValue:
    """Mean negative log-likelihood of one-hot targets under predicted probs.

    J = -(1/M) * sum_m sum_k targets[m, k] * log(clamp(probs[m, k]))
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    _check_prob_matrix(probs, targets)
    if np.any((targets != 0) & (targets != 1)) or np.any(targets.sum(axis=1) != 1):
        raise InputError("targets must be one-hot rows")
    batch = probs.shape[0]
    clamped = np.clip(probs, PROB_FLOOR, 1.0)
    total = -np.sum(targets * np.log(clamped.astype(np.float64)), dtype=np.float64)
    return LossValue(value=float(total / batch), batch_size=batch)


def softmax_cce_logit_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Gradient of categorical_cross_entropy(softmax(z)) w.r.t. logits z: (probs - targets) / M."""
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.shape != targets.shape:
        raise DimensionError(f"probs shape {probs.shape} does not match targets {targets.shape}")
    return ((probs - targets) / probs.shape[0]).astype(probs.dtype, copy=False)


def binary_cross_entropy(probs: np.ndarray, targets: np.ndarray) -> LossValue:
    """J = -(1/M) * sum_m [y log h + (1 - y) log(1 - h)] over a vector batch."""
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.ndim != 1 or targets.ndim != 1:
        raise DimensionError(f"probs and targets must be vectors, got {probs.shape} and {targets.shape}")
    if probs.shape != targets.shape:
        raise DimensionError(f"probs shape {probs.shape} does not match targets {targets.shape}")
    if probs.size == 0:
        raise DegenerateInputError("empty batch")
    _require_finite(probs, "probs")
    if np.any((targets != 0) & (targets != 1)):
        raise InputError("targets must be 0/1")
    h = np.clip(probs.astype(np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = targets.astype(np.float64)
    total = -np.sum(y * np.log(h) + (1.0 - y) * np.log(1.0 - h), dtype=np.float64)
    return LossValue(value=float(total / probs.size), batch_size=int(probs.size))


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_relative_error: float
    checked: int
    skipped_kink: int      # one-sided slopes disagree: non-smooth within epsilon
    skipped_noise: int     # |gradient| below what finite differences can resolve

    @property
    def skipped(self) -> int:
        return self.skipped_kink + self.skipped_noise


def gradient_check(loss_fn, arrays, analytic_grads, epsilon: float = 1e-5,
                   kink_tol: float = 0.2, noise_coeff: float = 8.0,
                   target_rel_tol: float | None = None,
                   loss_eps: float | None = None) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` recomputes the scalar loss from the current contents of
    ``arrays`` (perturbed in place and restored).  ``analytic_grads`` aligns
    with ``arrays``.  Relative error per coordinate uses the denominator
    max(|analytic|, |numeric|, 1e-8).

    Two kinds of coordinate are excluded and counted instead of checked:

    * kinks -- where forward and backward one-sided slopes disagree, i.e. the
      loss is non-smooth (relu/pool tie) within ``epsilon`` of the point;
    * noise -- where the finite-difference resolution (``loss_eps`` scaled by
      loss magnitude / epsilon) cannot certify the requested tolerance.

    ``loss_eps`` is the machine epsilon of the arithmetic ``loss_fn`` runs in;
    it defaults to the epsilon of each checked array's dtype, which is right
    when the loss is evaluated at the same precision as the parameters.  A
    caller that evaluates the loss in double precision while checking float32
    parameters should pass ``loss_eps = np.finfo(np.float64).eps``.
    ``target_rel_tol`` defaults to 1e-3 for float32 arrays and 1e-6 otherwise.
    """
    if not (1e-6 <= epsilon <= 1e-2):
        raise InputError(f"epsilon must lie in [1e-6, 1e-2], got {epsilon}")
    arrays = list(arrays)
    analytic_grads = list(analytic_grads)
    if len(arrays) != len(analytic_grads):
        raise DimensionError("arrays and analytic_grads must align")
    for arr, grad in zip(arrays, analytic_grads):
        if np.asarray(arr).shape != np.asarray(grad).shape:
            raise DimensionError(f"gradient shape {np.asarray(grad).shape} does not match "
                                 f"array shape {np.asarray(arr).shape}")
        _require_finite(arr, "checked array")

    if target_rel_tol is None:
        is_f32 = any(np.asarray(a).dtype == np.float32 for a in arrays)
        target_rel_tol = 1e-3 if is_f32 else 1e-6

    f0 = float(loss_fn())
    worst = 0.0
    checked = 0
    skipped_kink = 0
    skipped_noise = 0
    for arr, grad in zip(arrays, analytic_grads):
        if not arr.flags.writeable:
            raise InputError("gradient_check needs writeable arrays")
        grad = np.asarray(grad)
        if loss_eps is not None:
            eps_mach = float(loss_eps)
        elif np.issubdtype(arr.dtype, np.floating):
            eps_mach = float(np.finfo(arr.dtype).eps)
        else:
            eps_mach = float(np.finfo(np.float64).eps)
        sigma = noise_coeff * eps_mach * max(abs(f0), 1.0) / epsilon
        # a derivative this small is indistinguishable from zero: below both the
        # finite-difference resolution and what the analytic pass's own dtype
        # can accumulate without the result being pure rounding residue
        grad_eps = (float(np.finfo(grad.dtype).eps)
                    if np.issubdtype(grad.dtype, np.floating)
                    else float(np.finfo(np.float64).eps))
        zero_atol = 4.0 * sigma + noise_coeff * grad_eps * max(abs(f0), 1.0)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            h_plus = float(arr[idx]) - float(orig)    # actual representable step
            f_plus = float(loss_fn())
            arr[idx] = orig - epsilon
            h_minus = float(orig) - float(arr[idx])
            f_minus = float(loss_fn())
            arr[idx] = orig
            central = (f_plus - f_minus) / (h_plus + h_minus)
            fwd = (f_plus - f0) / h_plus
            bwd = (f0 - f_minus) / h_minus
            if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd)) + 4.0 * sigma:
                skipped_kink += 1
                continue
            a = float(grad[idx])
            if max(abs(a), abs(central)) <= zero_atol:
                # both the claim and the measurement are zero at this resolution
                checked += 1
                continue
            scale = max(abs(a), abs(central), 1e-8)
            if sigma > 0.25 * target_rel_tol * scale:
                skipped_noise += 1
                continue
            rel = abs(central - a) / scale
            worst = max(worst, rel)
            checked += 1
    return GradCheckResult(max_relative_error=worst, checked=checked,
                           skipped_kink=skipped_kink, skipped_noise=skipped_noise)
