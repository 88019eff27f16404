"""Wrap-around Hankel lifting and the convolutional-framelet encoder/decoder.

For a signal ``f`` of length ``N`` and window ``d`` the lifted matrix has
entries ``H[n, j] = f[(n + j) mod N]``.  Multiplying it by a filter ``psi`` is
a circular convolution with the flipped filter, and a pair of frames
``(Phi, Phi~)``, ``(Psi, Psi~)`` with ``Phi~ Phi^T = I`` and
``Psi Psi~^T`` acting as the identity on the row space of ``H`` reproduces
``H`` exactly.  Unlifting averages the ``d`` copies of every sample, which is
where the ``1/d`` decoder weight comes from.
"""

import numpy as np

from .errors import InvalidArgument


def hankel_lift(f, d):
    """``(N, d)`` wrap-around Hankel matrix of ``f``."""
    f = np.asarray(f)
    if f.ndim != 1:
        raise InvalidArgument("signal must be one-dimensional")
    N = f.size
    if not 1 <= d <= N:
        raise InvalidArgument(f"window {d} outside [1, {N}]")
    idx = (np.arange(N)[:, None] + np.arange(d)[None, :]) % N
    return f[idx]


def hankel_unlift(H):
    """Inverse of :func:`hankel_lift`: average the ``d`` copies of each sample."""
    H = np.asarray(H)
    N, d = H.shape
    out = np.zeros(N, dtype=H.dtype)
    for j in range(d):
        out += np.roll(H[:, j], j)
    return out / d


def flip_filter(psi, N):
    """Length-``N`` wrap-around flip: ``out[(-j) mod N] = psi[j]``."""
    psi = np.asarray(psi)
    if psi.size > N:
        raise InvalidArgument("filter longer than the signal")
    out = np.zeros(N, dtype=psi.dtype)
    out[(-np.arange(psi.size)) % N] = psi
    return out


def circular_convolve(f, v):
    """``(f * v)[n] = sum_k f[(n - k) mod N] v[k]``, with ``v`` zero-padded to ``N``."""
    f = np.asarray(f)
    v = np.asarray(v)
    N = f.size
    if v.size > N:
        raise InvalidArgument("filter longer than the signal")
    vp = np.zeros(N, dtype=np.result_type(v, float))
    vp[: v.size] = v
    idx = (np.arange(N)[:, None] - np.arange(N)[None, :]) % N
    return f[idx] @ vp


def _check_frames(N, d, Phi, PhiT, Psi, PsiT):
    Phi, PhiT, Psi, PsiT = (np.asarray(a) for a in (Phi, PhiT, Psi, PsiT))
    if Phi.shape[0] != N or PhiT.shape != Phi.shape:
        raise InvalidArgument("Phi and Phi~ must both be N x m")
    if Psi.shape[0] != d or PsiT.shape != Psi.shape:
        raise InvalidArgument("Psi and Psi~ must both be d x q")
    return Phi, PhiT, Psi, PsiT


def encode(f, d, Phi, Psi):
    """Framelet coefficients ``C = Phi^T (f * flip(psi_i))``, one column per filter."""
    f = np.asarray(f)
    N = f.size
    Phi, _, Psi, _ = _check_frames(N, d, Phi, Phi, Psi, Psi)
    conv = np.stack([circular_convolve(f, flip_filter(Psi[:, i], N)) for i in range(Psi.shape[1])],
                    axis=1)
    return Phi.T @ conv


def decode(C, d, PhiT, PsiT):
    """``f' = (1/d) sum_i (Phi~ c_i) * psi~_i``."""
    C = np.asarray(C)
    B = np.asarray(PhiT) @ C
    N = B.shape[0]
    out = np.zeros(N, dtype=np.result_type(B, PsiT))
    for i in range(B.shape[1]):
        out += circular_convolve(B[:, i], np.asarray(PsiT)[:, i])
    return out / d


def framelet_roundtrip(f, d, Phi, PhiT, Psi, PsiT):
    """Encode then decode ``f``; exact when the frame conditions hold."""
    f = np.asarray(f)
    _check_frames(f.size, d, Phi, PhiT, Psi, PsiT)
    return decode(encode(f, d, Phi, Psi), d, PhiT, PsiT)


def lifted_reconstruction(f, d, Phi, PhiT, Psi, PsiT):
    """``Phi~ (Phi^T H_d(f) Psi) Psi~^T`` at the lifted (matrix) level."""
    f = np.asarray(f)
    Phi, PhiT, Psi, PsiT = _check_frames(f.size, d, Phi, PhiT, Psi, PsiT)
    H = hankel_lift(f, d)
    return PhiT @ (Phi.T @ H @ Psi) @ PsiT.T
