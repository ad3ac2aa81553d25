"""Dense linear algebra helpers and the package-wide deterministic RNG.

Storage is float32 everywhere; every reduction accumulates in float64.

Rng
---
``Rng`` is xoshiro256** (Blackman & Vigna) seeded through splitmix64:

* ``splitmix64``: ``state += 0x9E3779B97F4A7C15``; ``z = state``;
  ``z = (z ^ z >> 30) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ z >> 27) * 0x94D049BB133111EB``; output ``z ^ z >> 31``
  (all arithmetic mod 2**64).
* The four xoshiro state words are the first four splitmix64 outputs
  starting from ``state = seed``.
* ``next_u64``: ``result = rotl(s1 * 5, 7) * 9``, then the reference
  state transition with ``t = s1 << 17`` and ``rotl(s3, 45)``.
* ``random``: ``(next_u64() >> 11) * 2**-53`` in [0, 1).
* ``integers(n)``: rejection sampling, draws ``x`` until
  ``x < 2**64 - (2**64 % n)`` and returns ``x % n``.
* ``normal``: Box-Muller over consecutive pairs ``(a, b)`` with
  ``u1 = ((a >> 11) + 1) * 2**-53`` and ``u2 = (b >> 11) * 2**-53``,
  emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
* ``permutation(n)``: Fisher-Yates from the last index down,
  ``j = integers(i + 1)``.
* ``derive_seed(seed, *keys)`` folds each key in with
  ``seed = mix(seed ^ mix(key + 0x9E3779B97F4A7C15))`` where ``mix`` is
  the splitmix64 output function; child streams never share state.

Integer draws are bit-identical on every platform. Normal draws go through
libm ``log``/``cos``/``sin`` and are identical wherever those are correctly
rounded, which covers every platform we test on.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFinite, ShapeMismatch

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
NORM_EPS = 1e-12


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    return state, _mix64(state)


def derive_seed(seed: int, *keys: int) -> int:
    s = seed & MASK64
    for key in keys:
        s = _mix64(s ^ _mix64((int(key) + GOLDEN) & MASK64))
    return s


class Rng:
    """xoshiro256** generator; single owner, never share across threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        state = self.seed
        words = []
        for _ in range(4):
            state, out = splitmix64(state)
            words.append(out)
        self._s = words

    def spawn(self, *keys: int) -> "Rng":
        """Independent child stream keyed by ``keys``; does not advance self."""
        return Rng(derive_seed(self.seed, *keys))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def raw(self, n: int) -> list[int]:
        s0, s1, s2, s3 = self._s
        out = [0] * n
        for i in range(n):
            x = (s1 * 5) & MASK64
            out[i] = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
            t = (s1 << 17) & MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return out

    def random(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        raw = np.array(self.raw(n), dtype=np.uint64)
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, n: int) -> int:
        if n <= 0:
            raise ValueError("integers() needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def normals(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        raw = np.array(self.raw(2 * pairs), dtype=np.uint64).reshape(pairs, 2)
        u1 = ((raw[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty((pairs, 2), dtype=np.float64)
        out[:, 0] = r * np.cos(theta)
        out[:, 1] = r * np.sin(theta)
        return out.reshape(-1)[:n]

    def permutation(self, n: int) -> np.ndarray:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx, dtype=np.int64)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        """``k`` indices from ``range(n)``; without replacement uses a partial Fisher-Yates."""
        if replace:
            return np.array([self.integers(n) for _ in range(k)], dtype=np.int64)
        if k > n:
            raise ValueError(f"cannot draw {k} of {n} without replacement")
        idx = list(range(n))
        for i in range(k):
            j = i + self.integers(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        return np.array(idx[:k], dtype=np.int64)


def check_finite(x, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"{what} contains NaN or Inf")


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """``v / max(||v||, eps)``; zero vectors stay zero."""
    v = np.asarray(v)
    check_finite(v)
    if eps <= 0:
        raise ValueError("eps must be positive")
    v64 = v.astype(np.float64)
    norm = math.sqrt(float(np.dot(v64, v64)))
    out = v64 / max(norm, eps)
    return out.astype(v.dtype) if np.issubdtype(v.dtype, np.floating) else out


def normalize_rows(m, eps: float = NORM_EPS) -> np.ndarray:
    """Row-wise ``l2_normalize`` returning float64."""
    m64 = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m64, m64))
    return m64 / np.maximum(norms, eps)[:, None]


def cosine_sim(a, b, eps: float = NORM_EPS) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeMismatch(f"cosine_sim needs equal non-empty vectors, got {a.shape} and {b.shape}")
    check_finite(a)
    check_finite(b)
    na = max(math.sqrt(float(a @ a)), eps)
    nb = max(math.sqrt(float(b @ b)), eps)
    return float(a @ b) / (na * nb)


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ShapeMismatch("softmax of an empty vector")
    check_finite(x, "logits")
    with np.errstate(over="ignore"):
        # a shift that overflows to -inf just means exp() underflows to 0
        z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def _as_matrix(m, name):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64)
    check_finite(out, "matmul result")
    return out.astype(np.float32)


def matvec(a, v) -> np.ndarray:
    a = _as_matrix(a, "a")
    v = np.asarray(v)
    if v.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeMismatch(f"matvec {a.shape} x {v.shape}")
    out = a.astype(np.float64) @ v.astype(np.float64)
    check_finite(out, "matvec result")
    return out.astype(np.float32)


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(_as_matrix(a, "a").T)


def spectral_norm(m, iters: int = 100, rng: Rng | None = None) -> float:
    """Largest singular value by power iteration on ``m.T @ m``.

    The estimate ``||m v_k||`` is nondecreasing in ``iters`` and approaches
    the true value from below.
    """
    m = _as_matrix(m, "m").astype(np.float64)
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeMismatch("spectral_norm of an empty matrix")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    check_finite(m)
    rng = rng if rng is not None else Rng(0)
    v = rng.normals(m.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        est = float(np.linalg.norm(m @ v))
    return est
