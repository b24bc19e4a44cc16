"""Minimal differentiable-computation kernel.

Exactly the layers the waveform model needs, written against numpy with
hand-derived backward passes: affine, 1-D strided convolution, per-channel
instance normalization, a residual gated recurrent cell, softmax
cross-entropy over mu-law sample classes, and Adam. Arrays are the tensor
type (row-major, shape-checked at the call sites); `Parameter` bundles a
value with its gradient and optimizer state.

No general autograd graph: each forward returns a cache that its paired
backward consumes. `grad_check` compares any (loss, grads) operation
against central finite differences; run it in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Set True to assert finiteness after every forward/backward (slow).
DEBUG_CHECKS = False

MU_LAW_CLASSES = 256


def _check(name: str, *arrays: np.ndarray) -> None:
    if DEBUG_CHECKS:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite values in {name}")


@dataclass
class Parameter:
    """Trainable array with gradient and Adam moment accumulators."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = field(init=False, default=0)

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float32) -> np.ndarray:
    """Uniform init scaled by fan-in: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """y = x @ w + b for x of shape [..., in_dim]."""
    y = x @ w + b
    _check("affine_forward", y)
    return y, (x, w)


def affine_backward(dy: np.ndarray, cache):
    x, w = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dx = (dy2 @ w.T).reshape(x.shape)
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    _check("affine_backward", dx, dw, db)
    return dx, dw, db


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0.0), x


def relu_backward(dy: np.ndarray, cache):
    return dy * (cache > 0.0)


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------

def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Valid 1-D convolution.

    x: [batch, in_ch, time], w: [out_ch, in_ch, width], b: [out_ch].
    Output time = floor((time - width) / stride) + 1.
    """
    batch, in_ch, time = x.shape
    out_ch, in_ch_w, width = w.shape
    if in_ch != in_ch_w:
        raise ValueError(f"channel mismatch: input {in_ch} vs kernel {in_ch_w}")
    if time < width:
        raise ValueError(f"input time {time} shorter than kernel width {width}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_out = (time - width) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, width, axis=2)[:, :, ::stride, :]
    # [batch, t_out, in_ch * width] @ [in_ch * width, out_ch]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(batch, t_out, in_ch * width)
    y = cols @ w.reshape(out_ch, in_ch * width).T + b
    y = np.ascontiguousarray(y.transpose(0, 2, 1))
    _check("conv1d_forward", y)
    return y, (cols, x.shape, w, stride)


def conv1d_backward(dy: np.ndarray, cache):
    cols, x_shape, w, stride = cache
    batch, in_ch, time = x_shape
    out_ch, _, width = w.shape
    t_out = dy.shape[2]
    dy2 = dy.transpose(0, 2, 1).reshape(batch * t_out, out_ch)
    dw = (dy2.T @ cols.reshape(batch * t_out, in_ch * width)).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(out_ch, in_ch * width)).reshape(batch, t_out, in_ch, width)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for t in range(t_out):
        dx[:, :, t * stride:t * stride + width] += dcols[:, t]
    _check("conv1d_backward", dx, dw, db)
    return dx, dw, db


# ---------------------------------------------------------------------------
# instance norm (per channel, over time)
# ---------------------------------------------------------------------------

IN_EPS = 1e-5


def instance_norm_forward(x: np.ndarray):
    """Normalize each [batch, channel] row to zero mean / unit variance over time."""
    mu = x.mean(axis=2, keepdims=True)
    var = x.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + IN_EPS)
    xhat = (x - mu) * inv_std
    _check("instance_norm_forward", xhat)
    return xhat, (xhat, inv_std)


def instance_norm_backward(dy: np.ndarray, cache):
    xhat, inv_std = cache
    mean_dy = dy.mean(axis=2, keepdims=True)
    mean_dy_xhat = (dy * xhat).mean(axis=2, keepdims=True)
    dx = inv_std * (dy - mean_dy - xhat * mean_dy_xhat)
    _check("instance_norm_backward", dx)
    return dx


# ---------------------------------------------------------------------------
# residual gated recurrent cell
# ---------------------------------------------------------------------------
#
#   gate_t      = sigmoid(x_t @ Wg + h_{t-1} @ Ug + bg)
#   candidate_t = tanh   (x_t @ Wc + h_{t-1} @ Uc + bc)
#   h_t         = h_{t-1} + gate_t * candidate_t
#
# The additive form gives an identity gradient path through time (stable
# finite-difference checks over long unrolls) and leaves the state exactly
# unchanged when all weights are zero, since tanh(0) kills the increment.

def _sigmoid(x):
    # tanh form: overflow-free and faster than exp with masking
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class RecurrentParams:
    """Weights of the gated cell; input dim I, hidden dim H."""

    wg: Parameter  # [I, H]
    ug: Parameter  # [H, H]
    bg: Parameter  # [H]
    wc: Parameter  # [I, H]
    uc: Parameter  # [H, H]
    bc: Parameter  # [H]

    @staticmethod
    def create(rng: np.random.Generator, input_dim: int, hidden_dim: int,
               dtype=np.float32) -> "RecurrentParams":
        def mk(shape, fan_in):
            return Parameter(uniform_init(rng, shape, fan_in, dtype))
        # gates start mostly closed and recurrent weights small so the
        # additive state stays bounded on long unrolls before training
        return RecurrentParams(
            wg=mk((input_dim, hidden_dim), input_dim),
            ug=Parameter(0.4 * uniform_init(rng, (hidden_dim, hidden_dim),
                                            hidden_dim, dtype)),
            bg=Parameter(np.full(hidden_dim, -2.0, dtype=dtype)),
            wc=mk((input_dim, hidden_dim), input_dim),
            uc=Parameter(0.4 * uniform_init(rng, (hidden_dim, hidden_dim),
                                            hidden_dim, dtype)),
            bc=Parameter(np.zeros(hidden_dim, dtype=dtype)),
        )

    def named(self, prefix: str) -> dict[str, Parameter]:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("wg", "ug", "bg", "wc", "uc", "bc")}


def recurrent_step(state: np.ndarray, x: np.ndarray, p: RecurrentParams):
    """One cell update. state: [batch, H], x: [batch, I]. Returns (new_state, output)."""
    if state.shape[-1] != p.ug.value.shape[0]:
        raise ValueError(f"state dim {state.shape[-1]} != hidden dim {p.ug.value.shape[0]}")
    if x.shape[-1] != p.wg.value.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} != cell input dim {p.wg.value.shape[0]}")
    gate = _sigmoid(x @ p.wg.value + state @ p.ug.value + p.bg.value)
    cand = np.tanh(x @ p.wc.value + state @ p.uc.value + p.bc.value)
    new_state = state + gate * cand
    return new_state, new_state


def recurrent_forward(xs: np.ndarray, h0: np.ndarray, p: RecurrentParams):
    """Unrolled forward. xs: [batch, T, I], h0: [batch, H] -> hs: [batch, T, H].

    Input projections for all steps are batched into two matmuls; the python
    loop carries only the state recurrence (one fused matmul per step).
    """
    batch, steps, _ = xs.shape
    hidden = h0.shape[-1]
    if xs.shape[-1] != p.wg.value.shape[0]:
        raise ValueError(f"input dim {xs.shape[-1]} != cell input dim {p.wg.value.shape[0]}")
    # time-major internally: contiguous [batch, H] slices per step
    pre_g = np.ascontiguousarray((xs @ p.wg.value + p.bg.value).transpose(1, 0, 2))
    pre_c = np.ascontiguousarray((xs @ p.wc.value + p.bc.value).transpose(1, 0, 2))
    hs_t = np.empty((steps, batch, hidden), dtype=h0.dtype)
    gates_t = np.empty_like(hs_t)
    cands_t = np.empty_like(hs_t)
    u_both = np.concatenate([p.ug.value, p.uc.value], axis=1)  # [H, 2H]
    h = h0
    for t in range(steps):
        rec = h @ u_both
        g = _sigmoid(pre_g[t] + rec[:, :hidden])
        c = np.tanh(pre_c[t] + rec[:, hidden:])
        h = h + g * c
        gates_t[t] = g
        cands_t[t] = c
        hs_t[t] = h
    hs = np.ascontiguousarray(hs_t.transpose(1, 0, 2))
    _check("recurrent_forward", hs)
    return hs, (xs, h0, hs_t, gates_t, cands_t)


def recurrent_backward(dhs: np.ndarray, cache, p: RecurrentParams):
    """Backward through time. dhs: upstream gradient at every h_t.

    Returns (dxs, dh0) and accumulates parameter gradients in place. The
    per-step work is one fused matmul; recurrent-weight gradients batch into
    two matmuls after the loop.
    """
    xs, h0, hs_t, gates_t, cands_t = cache
    steps, batch, hidden = hs_t.shape
    # [ug; uc] transposed once so the delta update is a single matmul
    ut_both = np.concatenate([p.ug.value.T, p.uc.value.T], axis=0)  # [2H, H]
    dhs_t = np.ascontiguousarray(dhs.transpose(1, 0, 2))
    d_pre = np.empty((steps, batch, 2 * hidden), dtype=hs_t.dtype)
    delta = np.zeros((batch, hidden), dtype=hs_t.dtype)
    for t in range(steps - 1, -1, -1):
        delta = delta + dhs_t[t]
        g = gates_t[t]
        c = cands_t[t]
        gc = delta * g
        da = gc * c * (1.0 - g)
        db = gc * (1.0 - c * c)
        dp = d_pre[t]
        dp[:, :hidden] = da
        dp[:, hidden:] = db
        delta = delta + dp @ ut_both
    dh0 = delta
    h_prev = np.concatenate([h0[None, :, :], hs_t[:-1]], axis=0)
    hp2 = h_prev.reshape(steps * batch, hidden)
    dp2 = d_pre.reshape(steps * batch, 2 * hidden)
    du_both = hp2.T @ dp2  # [H, 2H]
    p.ug.grad += du_both[:, :hidden]
    p.uc.grad += du_both[:, hidden:]
    # back to batch-major for the input-side gradients
    dp_bm = np.ascontiguousarray(d_pre.transpose(1, 0, 2)).reshape(
        batch * steps, 2 * hidden)
    xs2 = xs.reshape(batch * steps, -1)
    dw_both = xs2.T @ dp_bm
    p.wg.grad += dw_both[:, :hidden]
    p.wc.grad += dw_both[:, hidden:]
    p.bg.grad += dp_bm[:, :hidden].sum(axis=0)
    p.bc.grad += dp_bm[:, hidden:].sum(axis=0)
    dxs = (dp_bm[:, :hidden] @ p.wg.value.T
           + dp_bm[:, hidden:] @ p.wc.value.T).reshape(xs.shape)
    _check("recurrent_backward", dxs, dh0)
    return dxs, dh0


# ---------------------------------------------------------------------------
# mu-law companding and categorical output loss
# ---------------------------------------------------------------------------

def mu_law_encode(x: np.ndarray, n_classes: int = MU_LAW_CLASSES) -> np.ndarray:
    """Compand samples in [-1, 1] to integer classes 0..n_classes-1."""
    mu = n_classes - 1
    x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    return np.minimum((np.floor((y + 1.0) * 0.5 * n_classes)).astype(np.int64),
                      n_classes - 1)


def mu_law_decode(classes: np.ndarray, n_classes: int = MU_LAW_CLASSES) -> np.ndarray:
    """Map classes back to bin-center sample values in (-1, 1)."""
    mu = n_classes - 1
    y = (np.asarray(classes, dtype=np.float64) + 0.5) * 2.0 / n_classes - 1.0
    return (np.sign(y) * (np.expm1(np.abs(y) * np.log1p(mu))) / mu)


def softmax_xent_forward(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy of [N, K] logits against integer targets [N]."""
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise ValueError(f"target class out of range for {k} classes")
    # clamp the shifted range: exp of anything below -80 is numerically zero
    # for the loss, and clamping keeps the values off the denormal range,
    # which x86 handles orders of magnitude slower
    shifted = np.maximum(logits - logits.max(axis=1, keepdims=True), -80.0)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), targets].mean()
    _check("softmax_xent_forward", np.asarray(loss))
    return float(loss), (log_probs, targets)


def softmax_xent_backward(cache):
    log_probs, targets = cache
    n = log_probs.shape[0]
    dlogits = np.exp(np.maximum(log_probs, -80.0))
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    _check("softmax_xent_backward", dlogits)
    return dlogits


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: Sequence[Parameter] | dict[str, Parameter],
              learning_rate: float,
              betas: tuple[float, float] = (0.9, 0.999),
              epsilon: float = 1e-8) -> None:
    """Standard Adam update with bias correction, in place, deterministic."""
    if isinstance(params, dict):
        params = list(params.values())
    b1, b2 = betas
    for p in params:
        p.step += 1
        g = p.grad
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        m_hat = p.m / (1.0 - b1 ** p.step)
        v_hat = p.v / (1.0 - b2 ** p.step)
        p.value -= (learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)).astype(p.value.dtype)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(operation: Callable[..., tuple[float, Sequence[np.ndarray]]],
               inputs: Sequence[np.ndarray],
               epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    `operation(*inputs)` must return (scalar loss, gradients w.r.t. each
    input, same shapes). Returns the max relative error over all
    coordinates of all inputs. Use float64 inputs.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    _, analytic = operation(*inputs)
    worst = 0.0
    for idx, arr in enumerate(inputs):
        an = np.asarray(analytic[idx], dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + epsilon
            lp, _ = operation(*inputs)
            arr[ix] = orig - epsilon
            lm, _ = operation(*inputs)
            arr[ix] = orig
            num = (lp - lm) / (2.0 * epsilon)
            err = abs(an[ix] - num) / max(abs(an[ix]) + abs(num), 1e-6)
            worst = max(worst, err)
            it.iternext()
    return worst
