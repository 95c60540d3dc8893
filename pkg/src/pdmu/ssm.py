"""Linear time-invariant state-space systems.

Builds the Legendre (Pade) delay system, discretizes it with a zero-order
hold and evaluates the resulting recurrence either step by step or as a
causal convolution with the impulse response (direct or FFT).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import InvalidArgumentError, NumericOverflowError

LONG_SEQUENCE = 64
CHUNK = 64

# Pade(13) coefficients for scaling-and-squaring (Higham 2005).
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
_THETA13 = 5.371920351148152


@dataclass(frozen=True)
class ContinuousSystem:
    """m'(t) = A m(t) + B u(t) with a scalar input."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float).reshape(-1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != B.shape[0]:
            raise InvalidArgumentError(
                f"incompatible shapes A{A.shape} B{B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def order(self) -> int:
        return self.A.shape[0]

    def scaled(self, theta: float) -> ContinuousSystem:
        """Same dynamics stretched over a window of ``theta`` time units."""
        return ContinuousSystem(self.A / theta, self.B / theta)


@dataclass(frozen=True, eq=False)
class DiscreteSystem:
    """m[k] = A_bar m[k-1] + B_bar u[k]."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    dt: float = 1.0
    _taps: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.A_bar)
        B = np.asarray(self.B_bar).reshape(-1, 1)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] != B.shape[0]:
            raise InvalidArgumentError(
                f"incompatible shapes A_bar{A.shape} B_bar{B.shape}")
        if not self.dt > 0:
            raise InvalidArgumentError(f"dt must be positive, got {self.dt}")
        A = A.copy()
        B = B.copy()
        A.flags.writeable = False
        B.flags.writeable = False
        object.__setattr__(self, "A_bar", A)
        object.__setattr__(self, "B_bar", B)

    @property
    def order(self) -> int:
        return self.A_bar.shape[0]

    @property
    def dtype(self):
        return self.A_bar.dtype

    def astype(self, dtype) -> DiscreteSystem:
        return DiscreteSystem(self.A_bar.astype(dtype), self.B_bar.astype(dtype), self.dt)

    def kernel(self, length: int) -> ImpulseKernel:
        """Impulse response taps A_bar^j B_bar, cached per system."""
        cached = self._taps.get("taps")
        if cached is None or cached.shape[0] < length:
            taps = _power_taps(self.A_bar, self.B_bar[:, 0], length)
            taps.flags.writeable = False
            self._taps["taps"] = taps
            cached = taps
        return ImpulseKernel(cached[:length])

    def chunk_operators(self, chunk: int):
        """(K, P) for chunked evaluation over blocks of ``chunk`` steps.

        ``K[i, t*q + r] = taps[t - i, r]`` for t >= i maps a block of inputs to
        its zero-state outputs; ``P[c, t*q + r] = (A_bar^(t+1))[r, c]`` carries
        the state entering the block to every step inside it.
        """
        key = ("chunk", chunk)
        ops = self._taps.get(key)
        if ops is None:
            q = self.order
            taps = self.kernel(chunk).taps
            K = np.zeros((chunk, chunk, q), dtype=self.dtype)
            for i in range(chunk):
                K[i, i:] = taps[:chunk - i]
            powers = np.empty((chunk, q, q), dtype=self.dtype)
            M = np.asarray(self.A_bar)
            for t in range(chunk):
                powers[t] = M
                M = self.A_bar @ M
            P = np.ascontiguousarray(powers.transpose(2, 0, 1)).reshape(q, chunk * q)
            ops = (K.reshape(chunk, chunk * q), P)
            for a in ops:
                a.flags.writeable = False
            self._taps[key] = ops
        return ops


@dataclass(frozen=True)
class ImpulseKernel:
    """taps[j] = A_bar^j B_bar, shape (length, order)."""

    taps: np.ndarray

    @property
    def length(self) -> int:
        return self.taps.shape[0]

    @property
    def order(self) -> int:
        return self.taps.shape[1]


def _power_taps(A_bar, b, length):
    taps = np.empty((length, b.shape[0]), dtype=A_bar.dtype)
    x = b.astype(A_bar.dtype)
    for j in range(length):
        taps[j] = x
        x = A_bar @ x
    return taps


def pade_matrices(order: int) -> ContinuousSystem:
    """Legendre delay system of the given order (integer-valued A, B)."""
    if int(order) != order or order < 1:
        raise InvalidArgumentError(f"order must be a positive integer, got {order}")
    i = np.arange(order)[:, None]
    j = np.arange(order)[None, :]
    sign = np.where(i < j, -1.0, (-1.0) ** (i - j + 1))
    A = (2 * i + 1) * sign
    idx = np.arange(order)
    B = ((2 * idx + 1) * (-1.0) ** idx)[:, None]
    return ContinuousSystem(A, B)


def expm(M: np.ndarray) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    if not np.isfinite(norm):
        raise NumericOverflowError("matrix exponential of a non-finite matrix")
    s = max(0, int(np.ceil(np.log2(norm / _THETA13)))) if norm > _THETA13 else 0
    X = M / 2.0 ** s
    b = _PADE13
    I = np.eye(n)
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (X6 @ (b[13] * X6 + b[11] * X4 + b[9] * X2)
             + b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * I)
    V = X6 @ (b[12] * X6 + b[10] * X4 + b[8] * X2) + b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * I
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def zoh_discretize(sys: ContinuousSystem, dt: float = 1.0) -> DiscreteSystem:
    """Exact zero-order-hold discretization.

    Uses exp([[A, B], [0, 0]] dt), whose top blocks are exp(A dt) and
    A^-1 (exp(A dt) - I) B, so A never has to be inverted.
    """
    if not (np.isfinite(dt) and dt > 0):
        raise InvalidArgumentError(f"dt must be positive and finite, got {dt}")
    n = sys.order
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = sys.A
    aug[:n, n:] = sys.B
    with np.errstate(over="ignore", invalid="ignore"):
        E = expm(aug * dt)
    if not np.all(np.isfinite(E)):
        radius = float(np.max(np.abs(np.linalg.eigvals(sys.A * dt))))
        raise NumericOverflowError(
            f"non-finite discretization at dt={dt} (spectral radius of A*dt = {radius:.3g})")
    return DiscreteSystem(E[:n, :n], E[:n, n:], dt)


def legendre_system(order: int, theta: float, dt: float = 1.0) -> DiscreteSystem:
    """Pade delay system with a window of ``theta`` steps, discretized at ``dt``."""
    if not theta > 0:
        raise InvalidArgumentError(f"theta must be positive, got {theta}")
    return zoh_discretize(pade_matrices(order).scaled(theta), dt)


def _check_u(u):
    u = np.asarray(u)
    if u.ndim < 1 or u.shape[-1] < 1:
        raise InvalidArgumentError("input sequence must have at least one step")
    if not np.issubdtype(u.dtype, np.floating):
        u = u.astype(float)
    return u


def sequential_scan(sys: DiscreteSystem, u, m0=None) -> np.ndarray:
    """Step-by-step recurrence; ``u`` has shape (..., T), result (..., T, order).

    Only one state vector per sequence is live at any step.
    """
    u = _check_u(u)
    lead, T = u.shape[:-1], u.shape[-1]
    dtype = np.result_type(u.dtype, sys.dtype)
    m = np.zeros(lead + (sys.order,), dtype=dtype)
    if m0 is not None:
        m0 = np.asarray(m0, dtype=dtype)
        if m0.shape[-1] != sys.order:
            raise InvalidArgumentError(
                f"initial state has length {m0.shape[-1]}, system order is {sys.order}")
        m = m + m0
    out = np.empty(lead + (T, sys.order), dtype=dtype)
    At = sys.A_bar.T
    b = sys.B_bar[:, 0]
    for k in range(T):
        m = m @ At + u[..., k, None] * b
        out[..., k, :] = m
    return out


def parallel_scan(sys: DiscreteSystem, u) -> np.ndarray:
    """All outputs at once as a causal convolution with the impulse response.

    Zero initial state; see ``with_initial_state`` for a nonzero one.
    """
    u = _check_u(u)
    return direct_convolve(sys.kernel(u.shape[-1]), u)


def direct_convolve(kernel: ImpulseKernel, u) -> np.ndarray:
    """Causal convolution by a lower-triangular Toeplitz product."""
    u = _check_u(u)
    T = u.shape[-1]
    taps = _fit_taps(kernel, T)
    padded = np.concatenate([np.zeros(u.shape[:-1] + (T - 1,), dtype=u.dtype), u], axis=-1)
    # windows[..., k, j] = u[k - j]
    windows = np.lib.stride_tricks.sliding_window_view(padded, T, axis=-1)[..., ::-1]
    return windows @ taps


def fft_convolve(kernel: ImpulseKernel, u) -> np.ndarray:
    """Causal convolution through zero-padded real FFTs (length >= 2T-1)."""
    u = _check_u(u)
    T = u.shape[-1]
    taps = _fit_taps(kernel, T)
    nfft = fft_length(T)
    U = scipy.fft.rfft(u, n=nfft, axis=-1)
    K = scipy.fft.rfft(taps.T, n=nfft, axis=-1)
    # one transform per (sequence, memory dimension), time on the last axis
    out = scipy.fft.irfft(U[..., None, :] * K, n=nfft, axis=-1)[..., :T]
    out = np.ascontiguousarray(np.swapaxes(out, -1, -2))
    return out.astype(np.result_type(u.dtype, taps.dtype), copy=False)


def chunked_convolve(sys: DiscreteSystem, u, chunk: int = CHUNK) -> np.ndarray:
    """Causal convolution in blocks: one matrix product for all within-block
    responses, then a short pass carrying each block's final state forward."""
    u = _check_u(u)
    lead, T = u.shape[:-1], u.shape[-1]
    L = min(chunk, T)
    nc = -(-T // L)
    q = sys.order
    K, P = sys.chunk_operators(L)
    dtype = np.result_type(u.dtype, sys.dtype)
    U = np.zeros((int(np.prod(lead, dtype=int)), nc * L), dtype=dtype)
    U[:, :T] = u.reshape(-1, T)
    R = U.shape[0]
    out = (U.reshape(R * nc, L) @ K).reshape(R, nc, L, q)
    for c in range(1, nc):
        out[:, c] += (out[:, c - 1, L - 1] @ P).reshape(R, L, q)
    return out.reshape(lead + (nc * L, q))[..., :T, :]


def chunked_adjoint(sys: DiscreteSystem, g, chunk: int = CHUNK) -> np.ndarray:
    """Transpose of ``chunked_convolve``: (..., T, q) -> (..., T)."""
    g = np.asarray(g)
    lead, (T, q) = g.shape[:-2], g.shape[-2:]
    L = min(chunk, T)
    nc = -(-T // L)
    K, P = sys.chunk_operators(L)
    G = np.zeros((int(np.prod(lead, dtype=int)), nc, L, q), dtype=np.result_type(g.dtype, sys.dtype))
    G.reshape(G.shape[0], nc * L, q)[:, :T] = g.reshape(-1, T, q)
    R = G.shape[0]
    for c in range(nc - 1, 0, -1):
        G[:, c - 1, L - 1] += G[:, c].reshape(R, L * q) @ P.T
    gu = G.reshape(R * nc, L * q) @ K.T
    return gu.reshape(lead + (nc * L,))[..., :T]


def fft_length(T: int) -> int:
    return 1 << max(0, (2 * T - 2).bit_length())


def _fit_taps(kernel, T):
    taps = kernel.taps
    if taps.shape[0] < T:
        raise InvalidArgumentError(
            f"kernel has {taps.shape[0]} taps, sequence needs {T}")
    return taps[:T]


def convolve(sys: DiscreteSystem, u, method: str = "auto", long_threshold: int = LONG_SEQUENCE):
    """Zero-state response of ``sys`` to ``u`` via the chosen evaluation path."""
    u = _check_u(u)
    T = u.shape[-1]
    if method == "auto":
        method = "chunked" if T >= long_threshold else "direct"
    if method == "sequential":
        return sequential_scan(sys, u)
    if method == "chunked":
        return chunked_convolve(sys, u)
    if method == "direct":
        return direct_convolve(sys.kernel(T), u)
    if method == "fft":
        return fft_convolve(sys.kernel(T), u)
    raise InvalidArgumentError(f"unknown scan method {method!r}")


def with_initial_state(sys: DiscreteSystem, m_zero_state, m0) -> np.ndarray:
    """Add the free response A_bar^k m0 to a zero-state output of shape (..., T, order)."""
    m_zero_state = np.asarray(m_zero_state)
    T = m_zero_state.shape[-2]
    m0 = np.asarray(m0, dtype=m_zero_state.dtype)
    free = np.empty(m0.shape[:-1] + (T, sys.order), dtype=m_zero_state.dtype)
    x = m0
    At = sys.A_bar.T
    for k in range(T):
        x = x @ At
        free[..., k, :] = x
    return m_zero_state + free
