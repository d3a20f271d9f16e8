"""Seeded random streams with exact replay, and a symmetric Jacobi eigensolver.

Streams are counter based: draw ``k`` of a stream is word ``k`` of the Philox4x64
sequence keyed by the stream seed, so any position can be re-entered from a
``(seed, counter)`` pair without replaying what came before.

Normal draws use Box-Muller on consecutive word pairs ``(w[2j], w[2j+1])``,
producing ``cos`` then ``sin`` outputs.  A request for ``dim`` normals always
consumes ``2 * ceil(dim / 2)`` words; the spare output of an odd request is
discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

_U53 = 2.0 ** -53
_MASK64 = (1 << 64) - 1


def derive_seed(base: int, *labels: int) -> int:
    """Mix ``base`` with integer labels into an independent 64-bit seed."""
    ss = np.random.SeedSequence(int(base) & _MASK64, spawn_key=tuple(int(x) for x in labels))
    return int(ss.generate_state(1, np.uint64)[0])


def normal_words(dim: int) -> int:
    """Number of stream words consumed by ``gaussian_vector(stream, dim)``."""
    return 2 * ((dim + 1) // 2)


class SeededStream:
    """A replayable position in a counter-based random sequence.

    ``counter`` counts 64-bit words already consumed.  Copying a stream (or
    rebuilding it from ``(seed, counter)``) gives bit-identical future draws.
    Not thread safe: advancing is a plain attribute update.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= seed <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        if counter < 0:
            raise ValueError("counter must be non-negative")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self) -> str:
        return f"SeededStream(seed={self.seed}, counter={self.counter})"

    @property
    def handle(self) -> tuple[int, int]:
        return (self.seed, self.counter)

    def copy(self) -> "SeededStream":
        return SeededStream(self.seed, self.counter)

    def advance(self, words: int) -> None:
        self.counter += int(words)

    def raw(self, count: int) -> np.ndarray:
        """Consume ``count`` uint64 words."""
        words = _words_at(self.seed, self.counter, count)
        self.counter += count
        return words


def _words_at(seed: int, counter: int, count: int) -> np.ndarray:
    block, offset = divmod(counter, 4)
    nblocks = (offset + count + 3) // 4
    bitgen = np.random.Philox(key=seed, counter=block)
    return bitgen.random_raw(4 * nblocks)[offset:offset + count]


def _uniform_open(words: np.ndarray) -> np.ndarray:
    # 53 high bits, shifted by half an ulp: values in (0, 1), never exactly 0
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _U53


def gaussian_at(seed: int, counter: int, dim: int) -> np.ndarray:
    """Standard normals starting at an absolute stream position (no state change)."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    nwords = normal_words(dim)
    u = _uniform_open(_words_at(seed, counter, nwords))
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    phase = 2.0 * np.pi * u2
    out = np.empty(nwords)
    out[0::2] = r * np.cos(phase)
    out[1::2] = r * np.sin(phase)
    return out[:dim]


def gaussian_vector(stream: SeededStream, dim: int) -> np.ndarray:
    """Draw ``dim`` i.i.d. N(0, 1) values; advances the stream by ``normal_words(dim)``."""
    out = gaussian_at(stream.seed, stream.counter, dim)
    stream.counter += normal_words(dim)
    return out


def uniform_int(stream: SeededStream, n: int) -> int:
    """Uniform integer in ``[0, n)`` from exactly one word (multiply-shift)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    (word,) = stream.raw(1)
    return (int(word) * n) >> 64


# ---------------------------------------------------------------------------
# eigensolver


class NotSymmetricError(ValueError):
    pass


@dataclass(frozen=True)
class EigenDecomposition:
    eigenvalues: np.ndarray   # descending
    eigenvectors: np.ndarray  # column i pairs with eigenvalues[i]
    sweeps: int = 0


@njit(cache=True)
def _jacobi_sweeps(a, vt, target, max_sweeps):
    n = a.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= target:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    npk = c * apk - s * aqk
                    nqk = s * apk + c * aqk
                    a[p, k] = npk
                    a[q, k] = nqk
                    a[k, p] = npk
                    a[k, q] = nqk
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                # vt holds eigenvectors as rows
                for k in range(n):
                    vpk = vt[p, k]
                    vqk = vt[q, k]
                    vt[p, k] = c * vpk - s * vqk
                    vt[q, k] = s * vpk + c * vqk
    return -1


def symmetric_eigen(a, tol: float = 1e-12, max_sweeps: int = 60) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Pairs are visited row by row, ``(0,1), (0,2), ..., (n-2,n-1)``, once per
    sweep.  Sweeps stop when the off-diagonal Frobenius norm falls below
    ``tol`` times the Frobenius norm of the input.

    Eigenvalues are returned in descending order.  Negative eigenvalues within
    ``1e-9 * lambda_1`` of zero are clamped to 0.  Each eigenvector is signed so
    that its largest-magnitude entry is positive.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > 1e-9 * scale:
        raise NotSymmetricError(f"matrix is not symmetric: max |A - A^T| = {asym:.3g}")
    a = np.ascontiguousarray(0.5 * (a + a.T))
    vt = np.eye(n)
    fro = float(np.linalg.norm(a))
    sweeps = 0
    if n > 1 and fro > 0.0:
        sweeps = _jacobi_sweeps(a, vt, tol * fro, max_sweeps)
        if sweeps < 0:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
    v = vt.T
    lam = np.diag(a).copy()
    order = np.argsort(-lam, kind="stable")
    lam, v = lam[order], v[:, order]
    if n:
        top = max(lam[0], 0.0)
        lam[(lam < 0.0) & (lam > -1e-9 * top)] = 0.0
        lead = np.argmax(np.abs(v), axis=0)
        signs = np.sign(v[lead, np.arange(n)])
        signs[signs == 0] = 1.0
        v = v * signs
    return EigenDecomposition(eigenvalues=lam, eigenvectors=v, sweeps=int(sweeps))
