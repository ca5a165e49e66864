"""Dense-tensor layer ops with explicit forward and gradient paths.

Everything is float64. There is no autodiff graph: each op either runs
forward (``upstream=None``) or returns a LayerGrad holding the gradient of
the cost w.r.t. its input and parameters, given the upstream gradient
w.r.t. its output. Ops are pure functions; batched variants (leading N
axis) back the single-sample spec surface and are what the training loop
and attacks actually call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Tensor = np.ndarray


@dataclass
class LayerGrad:
    """Gradients produced by one layer: d cost/d input plus per-parameter grads."""

    d_input: Tensor
    d_params: dict[str, Tensor] = field(default_factory=dict)


def _as_f64(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# Convolution (valid padding, stride 1)
# ---------------------------------------------------------------------------

class BufferPool:
    """Reusable scratch arrays keyed by name; avoids re-faulting big buffers.

    The im2col and col2im workspaces run to hundreds of MB per conv layer;
    allocating them fresh every batch costs more than the matmuls. Buffers
    are replaced when the requested shape changes, and hold garbage between
    uses, so callers must fully overwrite (or fill) what they take.
    """

    def __init__(self):
        self._bufs: dict[str, Tensor] = {}

    def get(self, key: str, shape: tuple) -> Tensor:
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape:
            buf = np.empty(shape)
            self._bufs[key] = buf
        return buf

    def clear(self):
        self._bufs.clear()


def _take(pool: BufferPool | None, key: str, shape: tuple) -> Tensor:
    return np.empty(shape) if pool is None else pool.get(key, shape)


def conv_forward_batch(x: Tensor, kernels: Tensor, bias: Tensor,
                       pool: BufferPool | None = None, key: str = "conv"):
    """Valid convolution of a (N,H,W,Cin) batch with (k,k,Cin,Cout) kernels.

    Returns (output, cols) where cols is the (N*H'*W', k*k*Cin) im2col
    matrix, reusable by conv_backward_batch. cols may live in the pool.
    """
    n, h, w, cin = x.shape
    k = kernels.shape[0]
    cout = kernels.shape[3]
    oh, ow = h - k + 1, w - k + 1
    cols6 = _take(pool, key + ".cols", (n, oh, ow, k, k, cin))
    for ki in range(k):
        for kj in range(k):
            cols6[:, :, :, ki, kj, :] = x[:, ki:ki + oh, kj:kj + ow, :]
    cols = cols6.reshape(n * oh * ow, k * k * cin)
    out = cols @ kernels.reshape(k * k * cin, cout)
    out += bias
    return out.reshape(n, oh, ow, cout), cols


def conv_backward_batch(cols: Tensor, kernels: Tensor, upstream: Tensor,
                        input_shape: tuple, need_input: bool = True,
                        pool: BufferPool | None = None, key: str = "conv"):
    """Gradients of a valid conv. upstream is (N,H',W',Cout).

    Returns (d_kernels, d_bias, d_input); d_input is None when not requested
    (saves the col2im pass on the first layer of an undefended net). The
    d_input array may live in the pool: consume it before the next call
    that reuses the same key.
    """
    n, h, w, cin = input_shape
    k = kernels.shape[0]
    cout = kernels.shape[3]
    oh, ow = h - k + 1, w - k + 1
    up_flat = np.ascontiguousarray(upstream).reshape(n * oh * ow, cout)
    d_kernels = (cols.T @ up_flat).reshape(kernels.shape)
    d_bias = up_flat.sum(axis=0)
    d_input = None
    if need_input:
        # scatter patch gradients back; stride 1 makes this a shifted sum
        d_cols6 = _take(pool, key + ".dcols", (n, oh, ow, k, k, cin))
        np.matmul(up_flat, kernels.reshape(k * k * cin, cout).T,
                  out=d_cols6.reshape(n * oh * ow, k * k * cin))
        d_input = _take(pool, key + ".dinput", tuple(input_shape))
        d_input.fill(0.0)
        for ki in range(k):
            for kj in range(k):
                d_input[:, ki:ki + oh, kj:kj + ow, :] += d_cols6[:, :, :, ki, kj, :]
    return d_kernels, d_bias, d_input


def conv2d(input: Tensor, kernels: Tensor, bias: Tensor,
           upstream: Tensor | None = None):
    """Single-image valid convolution, stride 1.

    input (H,W,Cin), kernels (K,K,Cin,Cout), bias (Cout). Forward returns the
    (H-K+1, W-K+1, Cout) output; with upstream of that shape, returns a
    LayerGrad with d_input and d_params {"kernels", "bias"}.
    """
    input = _as_f64(input)
    kernels = _as_f64(kernels)
    bias = _as_f64(bias)
    if input.ndim != 3:
        raise ValueError(f"conv2d input must be rank 3 (H,W,Cin), got rank {input.ndim}")
    if kernels.ndim != 4:
        raise ValueError(f"conv2d kernels must be rank 4 (K,K,Cin,Cout), got rank {kernels.ndim}")
    h, w, cin = input.shape
    k, k2, kcin, cout = kernels.shape
    if k != k2:
        raise ValueError(f"conv2d kernels must be square, got {k}x{k2}")
    if kcin != cin:
        raise ValueError(f"conv2d channel mismatch: input Cin={cin}, kernels Cin={kcin}")
    if k > h or k > w:
        raise ValueError(f"conv2d kernel size {k} exceeds input extent {min(h, w)}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    batch = input[None]
    if upstream is None:
        out, _ = conv_forward_batch(batch, kernels, bias)
        return out[0]
    upstream = _as_f64(upstream)
    oh, ow = h - k + 1, w - k + 1
    if upstream.shape != (oh, ow, cout):
        raise ValueError(
            f"conv2d upstream must have shape {(oh, ow, cout)}, got {upstream.shape}")
    _, cols = conv_forward_batch(batch, kernels, bias)
    d_k, d_b, d_in = conv_backward_batch(cols, kernels, upstream[None], batch.shape)
    return LayerGrad(d_input=d_in[0], d_params={"kernels": d_k, "bias": d_b})


def conv2d_naive(input: Tensor, kernels: Tensor, bias: Tensor,
                 upstream: Tensor | None = None):
    """Loop-nest reference convolution (test oracle for conv2d).

    Deliberately written as explicit quadruple-nested loops; slow, but its
    summation order and code path share nothing with the im2col route.
    """
    input = _as_f64(input)
    kernels = _as_f64(kernels)
    bias = _as_f64(bias)
    h, w, cin = input.shape
    k, _, _, cout = kernels.shape
    oh, ow = h - k + 1, w - k + 1
    if upstream is None:
        out = np.zeros((oh, ow, cout))
        for i in range(oh):
            for j in range(ow):
                for f in range(cout):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            for c in range(cin):
                                acc += input[i + ki, j + kj, c] * kernels[ki, kj, c, f]
                    out[i, j, f] = acc + bias[f]
        return out
    d_in = np.zeros_like(input)
    d_k = np.zeros_like(kernels)
    d_b = np.zeros_like(bias)
    for i in range(oh):
        for j in range(ow):
            for f in range(cout):
                u = upstream[i, j, f]
                d_b[f] += u
                for ki in range(k):
                    for kj in range(k):
                        for c in range(cin):
                            d_k[ki, kj, c, f] += input[i + ki, j + kj, c] * u
                            d_in[i + ki, j + kj, c] += kernels[ki, kj, c, f] * u
    return LayerGrad(d_input=d_in, d_params={"kernels": d_k, "bias": d_b})


# ---------------------------------------------------------------------------
# Dense / activations / losses
# ---------------------------------------------------------------------------

def dense(input: Tensor, W: Tensor, b: Tensor, upstream: Tensor | None = None):
    """Affine layer: forward W @ input + b for input (N,), W (M,N), b (M,)."""
    input = _as_f64(input)
    W = _as_f64(W)
    b = _as_f64(b)
    if W.ndim != 2:
        raise ValueError(f"dense W must be rank 2, got rank {W.ndim}")
    m, n = W.shape
    if input.shape != (n,):
        raise ValueError(f"dense input must have shape ({n},), got {input.shape}")
    if b.shape != (m,):
        raise ValueError(f"dense bias must have shape ({m},), got {b.shape}")
    if upstream is None:
        return W @ input + b
    upstream = _as_f64(upstream)
    if upstream.shape != (m,):
        raise ValueError(f"dense upstream must have shape ({m},), got {upstream.shape}")
    return LayerGrad(
        d_input=W.T @ upstream,
        d_params={"W": np.outer(upstream, input), "b": upstream.copy()},
    )


def relu(x: Tensor, upstream: Tensor | None = None):
    """Elementwise max(0, x); subgradient at exactly 0 is taken as 0."""
    x = _as_f64(x)
    if upstream is None:
        return np.maximum(x, 0.0)
    upstream = _as_f64(upstream)
    return LayerGrad(d_input=np.where(x > 0.0, upstream, 0.0))


def softmax(logits: Tensor, upstream: Tensor | None = None):
    """Max-stabilized softmax over a (C,) vector; backward uses the full Jacobian."""
    logits = _as_f64(logits)
    if logits.shape[-1] < 2:
        raise ValueError("softmax needs at least 2 classes")
    p = softmax_batch(logits[None] if logits.ndim == 1 else logits)
    if logits.ndim == 1:
        p = p[0]
    if upstream is None:
        return p
    upstream = _as_f64(upstream)
    # J^T u with J_ij = p_i (delta_ij - p_j)
    return LayerGrad(d_input=p * (upstream - np.dot(upstream, p)))


def softmax_batch(logits: Tensor) -> Tensor:
    """Row-wise stabilized softmax of a (N,C) batch."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward_batch(probs: Tensor, upstream: Tensor) -> Tensor:
    """d cost/d logits for a (N,C) batch given d cost/d probs."""
    return probs * (upstream - np.sum(upstream * probs, axis=-1, keepdims=True))


def mse_cost(P: Tensor, P_truth: Tensor):
    """Mean squared error between prediction and truth vectors.

    Returns (cost, d cost/d P) with cost = (1/C) sum_c (P_c - P'_c)^2.
    """
    P = _as_f64(P)
    P_truth = _as_f64(P_truth)
    if P.shape != P_truth.shape:
        raise ValueError(f"mse_cost length mismatch: {P.shape} vs {P_truth.shape}")
    c = P.shape[-1]
    diff = P - P_truth
    return float(np.sum(diff * diff) / c), (2.0 / c) * diff


def cross_entropy(P: Tensor, label: int):
    """Negative log-likelihood of the true class, with a 1e-12 floor on P.

    Returns (cost, d cost/d P).
    """
    P = _as_f64(P)
    if not 0 <= label < P.shape[-1]:
        raise ValueError(f"label {label} out of range for {P.shape[-1]} classes")
    p = max(float(P[label]), 1e-12)
    grad = np.zeros_like(P)
    grad[label] = -1.0 / p
    return -np.log(p), grad


def backprop_delta(upstream_deltas: Tensor, W: Tensor) -> Tensor:
    """Layer-l sensitivities from layer-(l+1) ones: delta_k = sum_j W_jk delta_j."""
    upstream_deltas = _as_f64(upstream_deltas)
    W = _as_f64(W)
    if W.shape[0] != upstream_deltas.shape[0]:
        raise ValueError(
            f"backprop_delta: W has {W.shape[0]} rows but deltas length {upstream_deltas.shape[0]}")
    return W.T @ upstream_deltas


def sgd_update(param: Tensor, grad: Tensor, lr: float) -> Tensor:
    """One plain gradient-descent step: param - lr * grad (pure)."""
    param = _as_f64(param)
    grad = _as_f64(grad)
    if param.shape != grad.shape:
        raise ValueError(f"sgd_update shape mismatch: {param.shape} vs {grad.shape}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    return param - lr * grad


def finite_difference_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar f at x, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = _as_f64(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
