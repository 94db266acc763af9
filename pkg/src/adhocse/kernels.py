"""Hot numeric kernels, each with a jitted and a pure-numpy implementation.

The public functions dispatch on :func:`adhocse._accel.numba_enabled`. Both
paths produce the same values up to floating point summation order; the
tests check them against each other.
"""
import numpy as np

from ._accel import njit, numba_enabled

# ---------------------------------------------------------------------------
# image-source impulse response accumulation
# ---------------------------------------------------------------------------


@njit
def _rir_accumulate_nb(delays, amps, length, half_width):
    h = np.zeros(length)
    width = 2 * half_width + 1
    for i in range(delays.shape[0]):
        d = delays[i]
        a = amps[i]
        if half_width == 0:
            n = int(np.floor(d + 0.5))
            if 0 <= n < length:
                h[n] += a
            continue
        n0 = int(np.floor(d)) - half_width
        for k in range(width + 1):
            n = n0 + k
            if n < 0 or n >= length:
                continue
            x = n - d
            if abs(x) > half_width:
                continue
            if x == 0.0:
                s = 1.0
            else:
                s = np.sin(np.pi * x) / (np.pi * x)
            win = 0.5 * (1.0 + np.cos(np.pi * x / half_width))
            h[n] += a * s * win
    return h


def _rir_accumulate_np(delays, amps, length, half_width):
    h = np.zeros(length)
    if half_width == 0:
        n = np.floor(delays + 0.5).astype(np.int64)
        keep = (n >= 0) & (n < length)
        np.add.at(h, n[keep], amps[keep])
        return h
    offsets = np.arange(2 * half_width + 2)
    n = np.floor(delays).astype(np.int64)[:, None] - half_width + offsets[None, :]
    x = n - delays[:, None]
    keep = (n >= 0) & (n < length) & (np.abs(x) <= half_width)
    win = 0.5 * (1.0 + np.cos(np.pi * x / half_width))
    taps = amps[:, None] * np.sinc(x) * win
    np.add.at(h, n[keep], taps[keep])
    return h


def rir_accumulate(delays, amps, length, half_width=16):
    """Sum delayed, scaled impulses into a buffer of ``length`` samples.

    ``delays`` are in (fractional) samples. ``half_width`` > 0 uses a
    Hann-windowed sinc interpolator of that half width; 0 rounds every delay
    to the nearest sample.
    """
    delays = np.ascontiguousarray(delays, dtype=np.float64)
    amps = np.ascontiguousarray(amps, dtype=np.float64)
    if numba_enabled():
        return _rir_accumulate_nb(delays, amps, int(length), int(half_width))
    return _rir_accumulate_np(delays, amps, int(length), int(half_width))


# ---------------------------------------------------------------------------
# weighted spatial covariance
# ---------------------------------------------------------------------------


@njit
def _weighted_outer_sum_nb(Y, w):
    D, T, F = Y.shape
    R = np.zeros((F, D, D), dtype=np.complex128)
    for f in range(F):
        for t in range(T):
            wt = w[t, f]
            if wt == 0.0:
                continue
            for i in range(D):
                yi = Y[i, t, f] * wt
                for j in range(i, D):
                    R[f, i, j] += yi * np.conj(Y[j, t, f])
        for i in range(D):
            for j in range(i + 1, D):
                R[f, j, i] = np.conj(R[f, i, j])
    return R


def _weighted_outer_sum_np(Y, w):
    Yw = Y * w[None]
    return np.einsum("itf,jtf->fij", Yw, Y.conj())


def weighted_outer_sum(Y, w):
    """``R[f] = sum_t w[t, f] y(t, f) y(t, f)^H`` for ``Y`` shaped [D, T, F]."""
    Y = np.ascontiguousarray(Y, dtype=np.complex128)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if numba_enabled():
        return _weighted_outer_sum_nb(Y, w)
    return _weighted_outer_sum_np(Y, w)


# ---------------------------------------------------------------------------
# frequency max-pooling (kernel p x 1 over the last axis)
# ---------------------------------------------------------------------------


@njit
def _maxpool_nb(x, p):
    B, C, T, F = x.shape
    Fo = F // p
    out = np.empty((B, C, T, Fo), dtype=x.dtype)
    arg = np.empty((B, C, T, Fo), dtype=np.int64)
    for b in range(B):
        for c in range(C):
            for t in range(T):
                for g in range(Fo):
                    best = x[b, c, t, g * p]
                    k = 0
                    for q in range(1, p):
                        v = x[b, c, t, g * p + q]
                        if v > best:
                            best = v
                            k = q
                    out[b, c, t, g] = best
                    arg[b, c, t, g] = k
    return out, arg


@njit
def _maxpool_backward_nb(dout, arg, p, F):
    B, C, T, Fo = dout.shape
    dx = np.zeros((B, C, T, F), dtype=dout.dtype)
    for b in range(B):
        for c in range(C):
            for t in range(T):
                for g in range(Fo):
                    dx[b, c, t, g * p + arg[b, c, t, g]] = dout[b, c, t, g]
    return dx


def _maxpool_np(x, p):
    B, C, T, F = x.shape
    Fo = F // p
    xr = x[..., : Fo * p].reshape(B, C, T, Fo, p)
    arg = np.argmax(xr, axis=-1)
    out = np.take_along_axis(xr, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _maxpool_backward_np(dout, arg, p, F):
    B, C, T, Fo = dout.shape
    dxr = np.zeros((B, C, T, Fo, p), dtype=dout.dtype)
    np.put_along_axis(dxr, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros((B, C, T, F), dtype=dout.dtype)
    dx[..., : Fo * p] = dxr.reshape(B, C, T, Fo * p)
    return dx


def maxpool_freq(x, p):
    """Max-pool [B, C, T, F] over non-overlapping groups of ``p`` bins.

    Trailing bins that do not fill a group are dropped. Returns the pooled
    tensor and the within-group argmax used by :func:`maxpool_freq_backward`.
    """
    x = np.ascontiguousarray(x)
    if numba_enabled():
        return _maxpool_nb(x, p)
    return _maxpool_np(x, p)


def maxpool_freq_backward(dout, arg, p, F):
    dout = np.ascontiguousarray(dout)
    if numba_enabled():
        return _maxpool_backward_nb(dout, arg, p, F)
    return _maxpool_backward_np(dout, arg, p, F)


# ---------------------------------------------------------------------------
# 3x3 "same" convolution helpers (im2col / col2im)
# ---------------------------------------------------------------------------


@njit
def _col2im_nb(dcols, B, C, T, F, kt, kf):
    pt = kt // 2
    pf = kf // 2
    dx = np.zeros((B, C, T, F), dtype=dcols.dtype)
    for b in range(B):
        for t in range(T):
            for f in range(F):
                row = (b * T + t) * F + f
                for c in range(C):
                    for i in range(kt):
                        tt = t + i - pt
                        if tt < 0 or tt >= T:
                            continue
                        base = (c * kt + i) * kf
                        for j in range(kf):
                            ff = f + j - pf
                            if 0 <= ff < F:
                                dx[b, c, tt, ff] += dcols[row, base + j]
    return dx


def _im2col_np(x, kt, kf):
    B, C, T, F = x.shape
    pt, pf = kt // 2, kf // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kt, kf), axis=(2, 3))
    # win: [B, C, T, F, kt, kf] -> [B, T, F, C, kt, kf]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * T * F, C * kt * kf)


def _col2im_np(dcols, B, C, T, F, kt, kf):
    pt, pf = kt // 2, kf // 2
    d = dcols.reshape(B, T, F, C, kt, kf)
    dxp = np.zeros((B, C, T + 2 * pt, F + 2 * pf), dtype=dcols.dtype)
    for i in range(kt):
        for j in range(kf):
            dxp[:, :, i:i + T, j:j + F] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pt:pt + T, pf:pf + F]


def im2col(x, kt=3, kf=3):
    """Patch matrix [B*T*F, C*kt*kf] of a zero-padded [B, C, T, F] tensor."""
    # a strided numpy copy is memory-bound and as fast as a jitted loop
    return _im2col_np(np.ascontiguousarray(x), kt, kf)


def col2im(dcols, shape, kt=3, kf=3):
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to [B, C, T, F]."""
    B, C, T, F = shape
    dcols = np.ascontiguousarray(dcols)
    if numba_enabled():
        return _col2im_nb(dcols, B, C, T, F, kt, kf)
    return np.ascontiguousarray(_col2im_np(dcols, B, C, T, F, kt, kf))
