"""FFT machinery, causal convolutions, and the state-space duality.

The long-convolution op is spectral: zero-pad to the next power of two at or
above twice the sequence length (so circular wrap never reaches live samples),
multiply spectra, inverse-transform, truncate. Its gradient is two causal
correlations, also spectral. The bundled radix-2 FFT is the reference
transform; the hot path delegates the identical math to pocketfft, and the
two are cross-checked in the test suite.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as _pocketfft

from .tensor import NumericError, ShapeError, Tensor, _node

_BITREV: dict[int, np.ndarray] = {}
_TWIDDLE: dict[tuple, np.ndarray] = {}
# single-threaded transforms by default: on small shared hosts the worker
# pool buys timing variance, not speed; the env var opts back in
_WORKERS = max(1, int(os.environ.get("HYENADISTILL_THREADS", "1")))


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p <<= 1
    return p


def _bitrev(n: int) -> np.ndarray:
    tbl = _BITREV.get(n)
    if tbl is None:
        bits = n.bit_length() - 1
        idx = np.arange(n)
        tbl = np.zeros(n, dtype=np.int64)
        for b in range(bits):
            tbl |= ((idx >> b) & 1) << (bits - 1 - b)
        _BITREV[n] = tbl
    return tbl


def _twiddle(m: int, inverse: bool, cdtype) -> np.ndarray:
    key = (m, inverse, np.dtype(cdtype).name)
    tw = _TWIDDLE.get(key)
    if tw is None:
        sign = 2j if inverse else -2j
        tw = np.exp(sign * np.pi * np.arange(m // 2) / m).astype(cdtype)
        _TWIDDLE[key] = tw
    return tw


def fft(x, inverse: bool = False) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis with cached twiddle factors.

    Forward convention exp(-2*pi*i*k*n/N); the inverse divides by N, so
    fft(fft(x), inverse=True) == x up to roundoff. Length must be a power
    of two (callers pad).
    """
    x = np.asarray(x)
    n = x.shape[-1]
    if n == 0 or n & (n - 1):
        raise ShapeError(f"fft length must be a power of two, got {n}")
    cdtype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    out = np.ascontiguousarray(x[..., _bitrev(n)]).astype(cdtype)
    m = 2
    while m <= n:
        tw = _twiddle(m, inverse, cdtype)
        v = out.reshape(*out.shape[:-1], n // m, m)
        even = v[..., : m // 2].copy()
        odd = v[..., m // 2:] * tw
        v[..., : m // 2] = even + odd
        v[..., m // 2:] = even - odd
        m *= 2
    if inverse:
        out /= n
    return out


@dataclass
class StateSpaceSystem:
    """Discrete linear system x[n+1] = A x[n] + B u[n], y[n] = C x[n] + D u[n]."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64).reshape(-1, 1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, -1)
        self.D = float(self.D)
        s = self.A.shape[0]
        if self.A.shape != (s, s):
            raise ShapeError(f"A must be square, got {self.A.shape}")
        if self.B.shape != (s, 1) or self.C.shape != (1, s):
            raise ShapeError(f"B {self.B.shape} / C {self.C.shape} inconsistent with state dim {s}")

    @property
    def s(self) -> int:
        return self.A.shape[0]

    def spectral_radius(self, iters: int = 200, seed: int = 0) -> float:
        """Largest |eigenvalue| of A, estimated by power iteration on A^T A
        pairs; used by callers that require stability before long rollouts."""
        rng = np.random.default_rng(seed)
        v = rng.normal(size=self.s)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = self.A @ v
            norm = np.linalg.norm(w)
            if norm == 0.0:
                return 0.0
            lam, v = norm, w / norm
        return float(lam)


@dataclass
class FilterResponse:
    """Per-channel impulse response over the steps it will convolve."""

    h: Tensor = field()

    def __post_init__(self):
        if self.h.ndim == 1:
            self.h = Tensor(self.h.data[:, None], requires_grad=self.h.requires_grad)
        if self.h.ndim != 2:
            raise ShapeError(f"filter must be [L, channels], got {self.h.shape}")
        if not np.isfinite(self.h.data).all():
            raise NumericError("filter response has non-finite entries")

    @property
    def length(self) -> int:
        return self.h.shape[0]

    @property
    def channels(self) -> int:
        return self.h.shape[1]


def _as_filter_tensor(h) -> Tensor:
    return h.h if isinstance(h, FilterResponse) else h


def fft_causal_conv(u: Tensor, h, backend: str = "pocketfft") -> Tensor:
    """Causal convolution y[n] = sum_{m<=n} h[m] u[n-m], per channel.

    ``u`` is [L, ch] or [batch, L, ch]; ``h`` is [L, ch] shared across the
    batch. Differentiable in both; gradients are causal correlations done
    with the same spectral machinery. ``backend`` picks pocketfft (default)
    or the bundled radix-2 transform for cross-checking.
    """
    ht = _as_filter_tensor(h)
    if u.ndim not in (2, 3) or ht.ndim != 2:
        raise ShapeError(f"conv operands must be [L,ch]/[B,L,ch] and [L,ch], got {u.shape}, {ht.shape}")
    L, ch = u.shape[-2], u.shape[-1]
    if ht.shape != (L, ch):
        raise ShapeError(f"filter shape {ht.shape} does not match input [{L}, {ch}]")
    if u.dtype != ht.dtype:
        raise ShapeError(f"conv: dtypes {u.dtype} and {ht.dtype} differ")
    N = next_pow2(2 * L)
    ud, hd = u.data, ht.data
    batched = ud.ndim == 3

    if backend == "pocketfft":
        def rfft(a, axis):
            return _pocketfft.rfft(a, n=N, axis=axis, workers=_WORKERS)

        def irfft(A, axis):
            return _pocketfft.irfft(A, n=N, axis=axis, workers=_WORKERS)
    elif backend == "radix2":
        def rfft(a, axis):
            pad = [(0, 0)] * a.ndim
            pad[axis] = (0, N - a.shape[axis])
            return np.moveaxis(fft(np.moveaxis(np.pad(a, pad), axis, -1)), -1, axis)

        def irfft(A, axis):
            return np.moveaxis(fft(np.moveaxis(A, axis, -1), inverse=True), -1, axis).real
    else:
        raise ValueError(f"unknown fft backend {backend!r}")

    U = rfft(ud, axis=-2)
    H = rfft(hd, axis=0)
    Hb = H[None] if batched else H
    y = irfft(U * Hb, axis=-2)[..., :L, :].astype(ud.dtype, copy=False)

    def du(g):
        G = rfft(g, axis=-2)
        r = irfft(G * np.conj(Hb), axis=-2)[..., :L, :]
        return r.astype(ud.dtype, copy=False)

    def dh(g):
        G = rfft(g, axis=-2)
        S = G * np.conj(U)
        if batched:
            S = S.sum(axis=0)
        r = irfft(S, axis=0)[:L, :]
        return r.astype(hd.dtype, copy=False)

    return _node(y, (u, ht), (du, dh))


def ssm_impulse_response(sys: StateSpaceSystem, L: int) -> FilterResponse:
    """h[0] = C B + D, h[n] = C A^n B for n >= 1, by iterated state
    propagation (no explicit matrix powers, no eigendecomposition)."""
    if L < 1:
        raise ShapeError(f"impulse response length must be >= 1, got {L}")
    h = np.zeros(L, dtype=np.float64)
    x = sys.B.copy()
    h[0] = (sys.C @ x).item() + sys.D
    for n in range(1, L):
        x = sys.A @ x
        h[n] = (sys.C @ x).item()
    return FilterResponse(Tensor(h[:, None]))


def ssm_recurrence(sys: StateSpaceSystem, u: Tensor) -> Tensor:
    """Stepwise evaluation of the difference equations from zero state.

    The state absorbs u[n] before the output reads it, so the impulse
    response is exactly C A^n B + D delta[n] and the recurrence/convolution
    duality holds sample-for-sample.
    """
    ud = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    if ud.ndim != 1:
        raise ShapeError(f"recurrence input must be 1-D, got shape {ud.shape}")
    L = ud.shape[0]
    y = np.zeros(L, dtype=np.float64)
    x = np.zeros((sys.s, 1), dtype=np.float64)
    for n in range(L):
        x = sys.A @ x + sys.B * ud[n]
        y[n] = (sys.C @ x).item() + sys.D * ud[n]
    return Tensor(y)


def depthwise_causal_conv(x: Tensor, k: Tensor) -> Tensor:
    """Short per-channel causal convolution with left zero padding:
    y[n, c] = sum_{j<w} k[j, c] x[n-j, c]. Differentiable in both."""
    if x.ndim not in (2, 3) or k.ndim != 2:
        raise ShapeError(f"depthwise conv operands must be [L,ch]/[B,L,ch] and [w,ch], "
                         f"got {x.shape}, {k.shape}")
    L, ch = x.shape[-2], x.shape[-1]
    w = k.shape[0]
    if k.shape[1] != ch:
        raise ShapeError(f"kernel channels {k.shape[1]} vs input channels {ch}")
    if w > L:
        raise ShapeError(f"kernel length {w} exceeds sequence length {L}")
    if x.dtype != k.dtype:
        raise ShapeError(f"depthwise conv: dtypes {x.dtype} and {k.dtype} differ")
    xd, kd = x.data, k.data

    y = xd * kd[0]
    for j in range(1, w):
        y[..., j:, :] += kd[j] * xd[..., : L - j, :]

    def dx(g):
        out = g * kd[0]
        for j in range(1, w):
            out[..., : L - j, :] += kd[j] * g[..., j:, :]
        return out

    def dk(g):
        out = np.empty_like(kd)
        gf = g.reshape(-1, L, ch)
        xf = xd.reshape(-1, L, ch)
        for j in range(w):
            out[j] = (gf[:, j:, :] * xf[:, : L - j, :]).sum(axis=(0, 1))
        return out

    return _node(y, (x, k), (dx, dk))
