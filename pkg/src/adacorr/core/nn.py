"""Differentiable layers: pointwise dense, circular 3x3 conv, spectral conv, softmax.

Layout convention: arrays are (batch, channels, *spatial).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .fft import fft, ifft, is_power_of_two
from .tape import Node, ShapeError, _accum


def dense(x: Node, W: Node, b: Node) -> Node:
    """Per-grid-point affine map over the channel axis: out = W @ x + b."""
    xv, Wv, bv = x.value, W.value, b.value
    if Wv.ndim != 2 or Wv.shape[1] != xv.shape[1]:
        raise ShapeError(f"weight {Wv.shape} does not match {xv.shape[1]} input channels")
    if bv.shape != (Wv.shape[0],):
        raise ShapeError(f"bias {bv.shape} does not match {Wv.shape[0]} output channels")
    B, spatial = xv.shape[0], xv.shape[2:]
    x2 = xv.reshape(B, xv.shape[1], -1)
    out = np.matmul(Wv, x2) + bv[:, None]

    def backward(g):
        g2 = g.reshape(B, Wv.shape[0], -1)
        _accum(x, np.matmul(Wv.T, g2).reshape(xv.shape))
        _accum(W, np.einsum("bos,bcs->oc", g2, x2))
        _accum(b, g2.sum(axis=(0, 2)))

    return Node(x.tape, out.reshape(B, Wv.shape[0], *spatial), "dense", (x, W, b), backward)


_OFFSETS = [(p, q) for p in range(3) for q in range(3)]


def _im2col(xv: np.ndarray) -> np.ndarray:
    # cols[b, c, p*3+q, i, j] = x[b, c, i+p-1, j+q-1] (periodic)
    return np.stack([np.roll(xv, (1 - p, 1 - q), axis=(2, 3)) for p, q in _OFFSETS], axis=2)


def circular_conv2d(x: Node, K: Node, b: Node) -> Node:
    """Periodic 3x3 cross-correlation, out[o] = sum_c K[o,c] * x[c] + b[o]."""
    xv, Kv, bv = x.value, K.value, b.value
    if xv.ndim != 4:
        raise ShapeError(f"circular_conv2d expects (batch, channels, H, W), got {xv.shape}")
    if Kv.shape[2:] != (3, 3) or Kv.shape[1] != xv.shape[1]:
        raise ShapeError(f"kernel {Kv.shape} incompatible with input {xv.shape}")
    B, C, H, W = xv.shape
    cout = Kv.shape[0]
    cols = _im2col(xv).reshape(B, C * 9, H * W)
    Kmat = Kv.reshape(cout, C * 9)
    out = np.matmul(Kmat, cols) + bv[:, None]

    def backward(g):
        g2 = g.reshape(B, cout, H * W)
        _accum(K, np.einsum("bos,bks->ok", g2, cols).reshape(Kv.shape))
        _accum(b, g2.sum(axis=(0, 2)))
        gcols = np.matmul(Kmat.T, g2).reshape(B, C, 9, H, W)
        gx = np.zeros_like(xv)
        for t, (p, q) in enumerate(_OFFSETS):
            gx += np.roll(gcols[:, :, t], (p - 1, q - 1), axis=(2, 3))
        _accum(x, gx)

    return Node(x.tape, out.reshape(B, cout, H, W), "conv2d", (x, K, b), backward)


def _mm(a, b):
    # batched BLAS only kicks in for contiguous operands
    return np.matmul(np.ascontiguousarray(a), np.ascontiguousarray(b))


@lru_cache(maxsize=32)
def _truncated_dft(n: int, modes: int):
    """Forward matrix (N, modes) and real synthesis matrices (modes, N).

    Forward: X = x @ F gives the first ``modes`` DFT coefficients. Synthesis:
    y = Re(Y) @ Sr - Im(Y) @ Si is the real inverse of the Hermitian spectrum
    holding Y at k and conj(Y) at N - k (the k = 0 imaginary part drops out).
    """
    k = np.arange(modes)
    t = np.arange(n)
    ang = 2 * np.pi * np.outer(t, k) / n
    weight = np.full(modes, 2.0)
    weight[0] = 1.0
    Fr, Fi = np.cos(ang), -np.sin(ang)
    Sr = (weight[:, None] * np.cos(ang.T)) / n
    Si = (weight[:, None] * np.sin(ang.T)) / n
    return Fr, Fi, Sr, Si


def spectral_conv1d(x: Node, W: Node) -> Node:
    """Fourier-space channel mixing on the lowest ``modes`` frequencies.

    ``W`` has shape (modes, out_c, in_c, 2) holding real and imaginary parts.
    Frequencies k = 1..modes-1 are mirrored onto N-k as conjugates so the
    output is real; the imaginary part of the k = 0 coefficient is dropped.
    Only ``modes`` coefficients survive the cutoff, so the forward and inverse
    transforms are applied as truncated DFT matrices rather than full FFTs.
    """
    xv, Wv = x.value, W.value
    if xv.ndim != 3:
        raise ShapeError(f"spectral_conv1d expects (batch, channels, N), got {xv.shape}")
    modes, cout, cin, two = Wv.shape
    B, n = xv.shape[0], xv.shape[-1]
    if two != 2 or cin != xv.shape[1]:
        raise ShapeError(f"spectral weight {Wv.shape} incompatible with input {xv.shape}")
    if not is_power_of_two(n) or n < 2 * modes:
        raise ShapeError(f"grid length {n} must be a power of two >= 2*modes ({2 * modes})")
    Fr, Fi, Sr, Si = _truncated_dft(n, modes)
    Wr, Wi = Wv[..., 0], Wv[..., 1]
    # spectra laid out (modes, batch, channels) so mixing is one batched matmul per part
    Xr = _mm(xv, Fr).transpose(2, 0, 1)
    Xi = _mm(xv, Fi).transpose(2, 0, 1)
    WrT, WiT = Wr.transpose(0, 2, 1), Wi.transpose(0, 2, 1)
    Yr = _mm(Xr, WrT) - _mm(Xi, WiT)
    Yi = _mm(Xr, WiT) + _mm(Xi, WrT)
    out = _mm(Yr.transpose(1, 2, 0), Sr) - _mm(Yi.transpose(1, 2, 0), Si)

    def backward(g):
        # H = dL/dY as a complex gradient (d/dRe + i d/dIm)
        Hr = _mm(g, Sr.T).transpose(2, 0, 1)
        Hi = -_mm(g, Si.T).transpose(2, 0, 1)
        # dL/dW = H * conj(X), summed over the batch
        XrT, XiT = Xr.transpose(0, 2, 1), Xi.transpose(0, 2, 1)
        gWr = _mm(XrT, Hr) + _mm(XiT, Hi)
        gWi = _mm(XrT, Hi) - _mm(XiT, Hr)
        _accum(W, np.stack((gWr.transpose(0, 2, 1), gWi.transpose(0, 2, 1)), axis=-1))
        # dL/dX = conj(W) H, then back through X = x @ F
        gXr = _mm(Hr, Wr) + _mm(Hi, Wi)
        gXi = _mm(Hi, Wr) - _mm(Hr, Wi)
        gx = _mm(gXr.transpose(1, 2, 0), Fr.T) + _mm(gXi.transpose(1, 2, 0), Fi.T)
        _accum(x, gx)

    return Node(x.tape, out, "spectral1d", (x, W), backward)


def spectral_conv1d_reference(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Forward pass through the radix-2 FFT: transform, truncate, mix, mirror, invert."""
    modes = W.shape[0]
    n = x.shape[-1]
    Wc = W[..., 0] + 1j * W[..., 1]
    Y = np.einsum("koc,bck->bok", Wc, fft(x)[..., :modes])
    full = np.zeros(Y.shape[:-1] + (n,), dtype=np.complex128)
    full[..., :modes] = Y
    full[..., n - modes + 1:] = np.conj(Y[..., 1:][..., ::-1])
    return ifft(full).real


def softmax_flat(logits: Node, start_axis: int = 1) -> Node:
    """Softmax over all axes from ``start_axis`` on (flattened per sample)."""
    z = logits.value
    axes = tuple(range(start_axis, z.ndim))
    shifted = z - z.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    lead = z.shape[:start_axis]
    total = np.ascontiguousarray(e).reshape(*lead, -1).sum(axis=-1)
    s = e / total.reshape(lead + (1,) * (z.ndim - start_axis))

    def backward(g):
        inner = np.ascontiguousarray(g * s).reshape(*lead, -1).sum(axis=-1)
        _accum(logits, s * (g - inner.reshape(lead + (1,) * (z.ndim - start_axis))))

    return Node(logits.tape, s, "softmax", (logits,), backward)
