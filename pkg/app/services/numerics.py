"""
Dense tensor primitives with hand-written backward passes, the Adam optimizer
and the warm-up/linear-decay learning-rate schedule.

Tensors are plain numpy arrays. Weight matrices follow the (out, in) layout, so a
linear layer computes `x @ W.T`.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

from app.core.exceptions import NumericError, ShapeError
from app.schemas.training import LrSchedule

logger = logging.getLogger(__name__)

# Masked attention scores are replaced by this value; exp() of it underflows to exactly 0
MASK_VALUE = -1e30
GELU_C = math.sqrt(2.0 / math.pi)


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Softmax and loss
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Max-subtracted softmax along `axis`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not -logits.ndim <= axis < logits.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {logits.shape}")
    check_finite(logits, "softmax input")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    check_finite(logits, "log_softmax input")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _validate_targets(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> None:
    if logits.ndim != 3:
        raise ShapeError(f"logits must be batch x time x vocab, got shape {logits.shape}")
    if targets.shape != logits.shape[:2] or mask.shape != logits.shape[:2]:
        raise ShapeError(
            f"targets {targets.shape} and mask {mask.shape} must match logits {logits.shape[:2]}"
        )
    if not mask.any():
        raise NumericError("cross entropy over an all-masked batch")
    used = targets[mask]
    if used.min() < 0 or used.max() >= logits.shape[-1]:
        raise ShapeError("target id outside the vocabulary")


def cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """
    Mean negative log-likelihood over unmasked positions.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    _validate_targets(logits, targets, mask)
    logp = log_softmax(logits, axis=-1)
    picked = np.take_along_axis(logp, np.where(mask, targets, 0)[..., None], axis=-1)[..., 0]
    return float(-(picked * mask).sum() / mask.sum())


def cross_entropy_backward(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """
    Gradient of `cross_entropy` with respect to the logits.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    _validate_targets(logits, targets, mask)
    grad = softmax(logits, axis=-1)
    b_idx, t_idx = np.nonzero(mask)
    grad[b_idx, t_idx, targets[b_idx, t_idx]] -= 1.0
    grad *= mask[..., None] / mask.sum()
    return grad


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

def linear(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {weight.shape}")
    return x @ weight.T


def linear_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_weight)."""
    grad_w = grad_out.reshape(-1, grad_out.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    grad_x = grad_out @ weight
    return grad_x, grad_w


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6):
    """Returns (output, cache)."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std, gain)


def layer_norm_backward(grad_out: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_x, grad_gain, grad_bias)."""
    x_hat, inv_std, gain = cache
    flat_axes = tuple(range(grad_out.ndim - 1))
    grad_gain = (grad_out * x_hat).sum(axis=flat_axes)
    grad_bias = grad_out.sum(axis=flat_axes)
    g = grad_out * gain
    grad_x = inv_std * (
        g - g.mean(axis=-1, keepdims=True) - x_hat * (g * x_hat).mean(axis=-1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return grad_out * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


@dataclass
class AttentionWeights:
    """Projection weights (out, in) of one attention layer, plus optional key/value prefixes."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    prefix_k: Optional[np.ndarray] = None
    prefix_v: Optional[np.ndarray] = None


def attention(
    x_q: np.ndarray,
    x_kv: np.ndarray,
    weights: AttentionWeights,
    n_heads: int,
    mask: np.ndarray,
):
    """
    Multi-head scaled dot-product attention.

    `mask` is boolean, broadcastable to (batch, q_len, kv_len); True means the
    query may attend to the key. Prefix positions, when present, are visible to
    every query. Returns (output, cache).
    """
    batch = x_q.shape[0]
    q = linear(x_q, weights.q)
    k = linear(x_kv, weights.k)
    v = linear(x_kv, weights.v)
    mask = np.broadcast_to(mask, (batch, x_q.shape[1], x_kv.shape[1]))
    n_prefix = 0
    if weights.prefix_k is not None:
        n_prefix = weights.prefix_k.shape[0]
        k = np.concatenate([np.broadcast_to(weights.prefix_k, (batch,) + weights.prefix_k.shape), k], axis=1)
        v = np.concatenate([np.broadcast_to(weights.prefix_v, (batch,) + weights.prefix_v.shape), v], axis=1)
        mask = np.concatenate([np.ones((batch, x_q.shape[1], n_prefix), dtype=bool), mask], axis=2)

    q_h, k_h, v_h = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    scale = 1.0 / math.sqrt(q_h.shape[-1])
    scores = np.where(mask[:, None, :, :], (q_h @ k_h.transpose(0, 1, 3, 2)) * scale, MASK_VALUE)
    probs = softmax(scores, axis=-1)
    context = merge_heads(probs @ v_h)
    out = linear(context, weights.o)
    cache = (x_q, x_kv, q_h, k_h, v_h, probs, context, scale, n_prefix, weights)
    return out, cache


def attention_backward(grad_out: np.ndarray, cache) -> Dict[str, np.ndarray]:
    """
    Backward of `attention`.

    Returns a dict with `x_q`, `x_kv` (input gradients), `q`, `k`, `v`, `o`
    (weight gradients) and, for prefixed layers, `prefix_k`, `prefix_v`.
    """
    x_q, x_kv, q_h, k_h, v_h, probs, context, scale, n_prefix, weights = cache
    n_heads = q_h.shape[1]
    grads: Dict[str, np.ndarray] = {}

    grad_context, grads["o"] = linear_backward(grad_out, context, weights.o)
    grad_ctx_h = split_heads(grad_context, n_heads)
    grad_probs = grad_ctx_h @ v_h.transpose(0, 1, 3, 2)
    grad_v_h = probs.transpose(0, 1, 3, 2) @ grad_ctx_h
    grad_scores = probs * (grad_probs - (probs * grad_probs).sum(axis=-1, keepdims=True)) * scale
    grad_q_h = grad_scores @ k_h
    grad_k_h = grad_scores.transpose(0, 1, 3, 2) @ q_h

    grad_q = merge_heads(grad_q_h)
    grad_k = merge_heads(grad_k_h)
    grad_v = merge_heads(grad_v_h)
    if n_prefix:
        grads["prefix_k"] = grad_k[:, :n_prefix].sum(axis=0)
        grads["prefix_v"] = grad_v[:, :n_prefix].sum(axis=0)
        grad_k = grad_k[:, n_prefix:]
        grad_v = grad_v[:, n_prefix:]

    grads["x_q"], grads["q"] = linear_backward(grad_q, x_q, weights.q)
    grad_xk, grads["k"] = linear_backward(grad_k, x_kv, weights.k)
    grad_xv, grads["v"] = linear_backward(grad_v, x_kv, weights.v)
    grads["x_kv"] = grad_xk + grad_xv
    return grads


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """
    First/second moments per trainable tensor and the shared step counter.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    trainable: Optional[Mapping[str, bool]] = None,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam update, in place, on tensors marked trainable.

    Tensors without a trainable flag (or flagged False) are never written.
    """
    for name, grad in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown tensor '{name}'")
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match '{name}' {params[name].shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        if trainable is not None and not trainable.get(name, False):
            continue
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(params[name])
            state.second_moment[name] = np.zeros_like(params[name])
        s = state.second_moment[name]
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        s = state.beta2 * s + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = s
        m_hat = m / correction1
        s_hat = s / correction2
        params[name] -= lr * m_hat / (np.sqrt(s_hat) + state.epsilon)
    return params, state


def lr_at(step: int, schedule: LrSchedule) -> float:
    """
    Learning rate at optimizer step `step` (0-based count of completed steps).
    """
    if step < 0 or step > schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.warmup_steps and step <= schedule.warmup_steps:
        return schedule.peak_rate * step / schedule.warmup_steps
    decay_steps = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / decay_steps
    return schedule.peak_rate + (schedule.final_rate - schedule.peak_rate) * progress


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def finite_difference_gradient(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    eps: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    `point` is perturbed in place and restored. When `indices` is given only those
    coordinates are estimated; the rest of the result stays zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(point, dtype=np.float64)
    coords = indices if indices is not None else np.ndindex(point.shape)
    for idx in coords:
        original = point[idx]
        point[idx] = original + eps
        plus = fn(point)
        point[idx] = original - eps
        minus = fn(point)
        point[idx] = original
        grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise |a - b| / max(|a| + |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))
