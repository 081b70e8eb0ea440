"""Dense-tensor layer primitives with exact analytic gradients.

All functions are pure: arrays in, arrays out, and the input dtype is
preserved, so the same code runs in float32 for training and in float64
for finite-difference gradient checks. Layout is (batch, channel, height,
width), row-major.

Each primitive comes in three flavors where gradients are needed:
``op(...)`` (forward only), ``op_forward(...)`` returning ``(out, cache)``,
and ``op_backward(grad_out, cache)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# conv2d

def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    _check(oh >= 1 and ow >= 1,
           f"conv2d: kernel ({kh},{kw}) larger than padded input ({h + 2 * pad},{w + 2 * pad})")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, oh, ow, kh, kw) -> (n, oh*ow, c*kh*kw), contiguous for BLAS
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    return cols, oh, ow


def conv2d_forward(x, w, b, stride=1, pad=0):
    _check(x.ndim == 4, f"conv2d: input must be rank 4, got shape {x.shape}")
    _check(w.ndim == 4, f"conv2d: weights must be rank 4, got shape {w.shape}")
    oc, ic, kh, kw = w.shape
    _check(x.shape[1] == ic,
           f"conv2d: input shape {x.shape} incompatible with weight shape {w.shape}")
    _check(b.shape == (oc,),
           f"conv2d: bias shape {b.shape} incompatible with weight shape {w.shape}")
    n = x.shape[0]
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = cols @ w.reshape(oc, -1).T
    out += b
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, oc, oh, ow)
    cache = (x.shape, cols, w, stride, pad, oh, ow)
    return out, cache


def conv2d(x, w, b, stride=1, pad=0):
    return conv2d_forward(x, w, b, stride, pad)[0]


def conv2d_backward(grad_out, cache):
    """Returns (grad_input, grad_weights, grad_bias)."""
    xshape, cols, w, stride, pad, oh, ow = cache
    n, c, h, _ = xshape
    oc, ic, kh, kw = w.shape
    g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
    grad_w = (g.T @ cols.reshape(n * oh * ow, -1)).reshape(w.shape)
    grad_b = g.sum(axis=0)
    gcols = (g @ w.reshape(oc, -1)).reshape(n, oh, ow, ic, kh, kw)
    # col2im scatter-add, one vectorized pass per kernel offset
    hp, wp = h + 2 * pad, xshape[3] + 2 * pad
    gx = np.zeros((n, c, hp, wp), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx), grad_w, grad_b


# ---------------------------------------------------------------------------
# relu

def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0)


# ---------------------------------------------------------------------------
# global average pooling

def global_average_pool(x):
    _check(x.ndim == 4, f"global_average_pool: input must be rank 4, got shape {x.shape}")
    return x.mean(axis=(2, 3))


def global_average_pool_backward(grad_out, spatial_shape):
    h, w = spatial_shape
    n, c = grad_out.shape
    g = grad_out / (h * w)
    return np.broadcast_to(g[:, :, None, None], (n, c, h, w)).copy()


# ---------------------------------------------------------------------------
# linear

def linear(x, w, b):
    _check(x.ndim == 2, f"linear: input must be rank 2, got shape {x.shape}")
    _check(w.ndim == 2 and x.shape[1] == w.shape[1],
           f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    _check(b.shape == (w.shape[0],),
           f"linear: bias shape {b.shape} incompatible with weight shape {w.shape}")
    return x @ w.T + b


def linear_backward(grad_out, x, w):
    """Returns (grad_input, grad_weights, grad_bias)."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# multi-label logistic loss

def sigmoid(x):
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def multilabel_logistic_loss(scores, labels):
    """Per-class sigmoid cross-entropy, summed over classes, averaged over batch.

    Numerically stable form: l(s, y) = max(s, 0) - s*y + log(1 + exp(-|s|)).
    """
    _check(scores.shape == labels.shape,
           f"loss: scores shape {scores.shape} != labels shape {labels.shape}")
    if not np.isin(np.asarray(labels), (0, 1)).all():
        raise ValueError("loss: labels must be binary (0 or 1)")
    s = np.asarray(scores)
    y = np.asarray(labels, dtype=s.dtype)
    per_elem = np.maximum(s, 0) - s * y + np.log1p(np.exp(-np.abs(s)))
    return float(per_elem.sum() / s.shape[0])


def multilabel_logistic_loss_grad(scores, labels):
    """Gradient wrt scores: (sigmoid(s) - y) / batch."""
    s = np.asarray(scores)
    y = np.asarray(labels, dtype=s.dtype)
    return (sigmoid(s).astype(s.dtype) - y) / s.shape[0]


# ---------------------------------------------------------------------------
# masked multiply (suppression feedback)

def _mask_view(mask, x):
    m = np.asarray(mask)
    if m.ndim == 2:
        _check(m.shape == x.shape[2:],
               f"masked_multiply: mask shape {m.shape} != feature spatial shape {x.shape[2:]}")
        return m[None, None, :, :]
    if m.ndim == 3:
        _check(m.shape[0] == x.shape[0] and m.shape[1:] == x.shape[2:],
               f"masked_multiply: mask shape {m.shape} incompatible with features {x.shape}")
        return m[:, None, :, :]
    raise ShapeError(f"masked_multiply: mask must be rank 2 or 3, got shape {m.shape}")


def masked_multiply(features, mask):
    """Multiply every channel elementwise by a binary spatial mask.

    ``mask`` is (h, w) shared across the batch or (n, h, w) per sample.
    """
    return features * _mask_view(mask, features).astype(features.dtype)


def masked_multiply_backward(grad_out, mask):
    # suppressed pixels contribute exactly zero gradient
    return grad_out * _mask_view(mask, grad_out).astype(grad_out.dtype)


# ---------------------------------------------------------------------------
# bilinear resize (corner-aligned)

def bilinear_resize(spatial_map, out_h, out_w):
    """Corner-aligned bilinear interpolation of a single-channel map.

    Output corners sample input corners exactly; a size-1 output axis
    samples the first input row/column.
    """
    m = np.asarray(spatial_map)
    _check(m.ndim == 2, f"bilinear_resize: map must be rank 2, got shape {m.shape}")
    _check(out_h >= 1 and out_w >= 1, "bilinear_resize: output extents must be >= 1")
    h, w = m.shape
    if (out_h, out_w) == (h, w):
        return m.copy()
    rr = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    cc = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    r0 = np.minimum(rr.astype(np.intp), h - 1)
    c0 = np.minimum(cc.astype(np.intp), w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rr - r0)[:, None]
    fc = (cc - c0)[None, :]
    # a + t*(b - a) form keeps constant maps exactly constant
    m00, m01 = m[np.ix_(r0, c0)], m[np.ix_(r0, c1)]
    m10, m11 = m[np.ix_(r1, c0)], m[np.ix_(r1, c1)]
    top = m00 + fc * (m01 - m00)
    bot = m10 + fc * (m11 - m10)
    out = top + fr * (bot - top)
    return out.astype(m.dtype)
