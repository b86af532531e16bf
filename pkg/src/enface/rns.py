"""RNS ring arithmetic over Z_q[X]/(X^N+1) for NTT-friendly prime sets.

A ring element at a given set of moduli is a uint64 array of shape
(num_limbs, N), each row the evaluation-domain ("NTT") representation of the
element modulo one prime.  The evaluation ordering is natural: row i of the
transform holds m(psi^(2i+1)).  Under that ordering the Galois automorphism
X -> X^g is the slot permutation new[i] = old[((2i+1)*g - 1)/2 mod N].
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import sympy

from . import backend
from .errors import ParameterError


def is_ntt_friendly(q: int, n: int) -> bool:
    return q % (2 * n) == 1 and sympy.isprime(q)


def find_ntt_primes(bits: int, count: int, n: int, exclude: set[int] = frozenset()) -> list[int]:
    """Primes of roughly `bits` bits, = 1 mod 2N, nearest below 2^bits."""
    step = 2 * n
    primes: list[int] = []
    q = (1 << bits) + 1
    while len(primes) < count:
        q -= step
        if q.bit_length() < bits - 1:
            raise ParameterError(f"ran out of {bits}-bit NTT primes for N={n}")
        if q not in exclude and sympy.isprime(q):
            primes.append(q)
    return primes


class Modulus:
    """Precomputed NTT tables for one prime."""

    __slots__ = ("q", "psi", "psi_pows", "ipsi_pows", "w_pows", "iw_pows", "bitrev")

    def __init__(self, q: int, n: int, bitrev: np.ndarray):
        if not is_ntt_friendly(q, n):
            raise ParameterError(f"prime {q} is not NTT-friendly for N={n}")
        self.q = q
        g = sympy.primitive_root(q)
        psi = pow(g, (q - 1) // (2 * n), q)
        assert pow(psi, n, q) == q - 1
        self.psi = psi
        omega = pow(psi, 2, q)
        self.psi_pows = _pow_table(psi, n, q)
        self.w_pows = _pow_table(omega, n, q)
        inv_n = pow(n, q - 2, q)
        ipsi = pow(psi, q - 2, q)
        self.ipsi_pows = (_pow_table(ipsi, n, q).astype(object) * inv_n % q).astype(np.uint64)
        self.iw_pows = _pow_table(pow(omega, q - 2, q), n, q)
        self.bitrev = bitrev


def _pow_table(base: int, n: int, q: int) -> np.ndarray:
    out = np.empty(n, dtype=np.uint64)
    x = 1
    for i in range(n):
        out[i] = x
        x = (x * base) % q
    return out


def _bitrev_table(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    t = np.arange(n, dtype=np.uint32)
    out = np.zeros(n, dtype=np.uint32)
    for _ in range(bits):
        out = (out << 1) | (t & 1)
        t >>= 1
    return out


class RingContext:
    """Tables and primitive operations for a fixed N and prime list.

    `moduli` covers the full scaling chain followed by the special
    (key-switching) primes; operations take explicit modulus index lists so
    the same context serves every level.
    """

    def __init__(self, n: int, primes: list[int]):
        if n < 8 or n & (n - 1):
            raise ParameterError(f"ring degree {n} is not a power of two >= 8")
        if len(set(primes)) != len(primes):
            raise ParameterError("modulus chain primes must be distinct")
        self.n = n
        self.bitrev = _bitrev_table(n)
        self.moduli = [Modulus(q, n, self.bitrev) for q in primes]
        self.primes = list(primes)

    # -- transforms ------------------------------------------------------

    def ntt(self, limbs: np.ndarray, mod_idx: list[int]) -> None:
        """In-place coefficient -> evaluation, one row per modulus index."""
        for row, mi in enumerate(mod_idx):
            m = self.moduli[mi]
            backend.ntt_forward(limbs[row], m.psi_pows, m.w_pows, m.bitrev, m.q)

    def intt(self, limbs: np.ndarray, mod_idx: list[int]) -> None:
        for row, mi in enumerate(mod_idx):
            m = self.moduli[mi]
            backend.ntt_inverse(limbs[row], m.ipsi_pows, m.iw_pows, m.bitrev, m.q)

    # -- elementwise limb ops -------------------------------------------

    def add(self, a: np.ndarray, b: np.ndarray, mod_idx: list[int]) -> np.ndarray:
        out = np.empty_like(a)
        for row, mi in enumerate(mod_idx):
            backend.arr_addmod(out[row], a[row], b[row], self.primes[mi])
        return out

    def sub(self, a: np.ndarray, b: np.ndarray, mod_idx: list[int]) -> np.ndarray:
        out = np.empty_like(a)
        for row, mi in enumerate(mod_idx):
            backend.arr_submod(out[row], a[row], b[row], self.primes[mi])
        return out

    def neg(self, a: np.ndarray, mod_idx: list[int]) -> np.ndarray:
        out = np.empty_like(a)
        for row, mi in enumerate(mod_idx):
            backend.arr_negmod(out[row], a[row], self.primes[mi])
        return out

    def mul(self, a: np.ndarray, b: np.ndarray, mod_idx: list[int]) -> np.ndarray:
        out = np.empty_like(a)
        for row, mi in enumerate(mod_idx):
            backend.arr_mulmod(out[row], a[row], b[row], self.primes[mi])
        return out

    def mul_scalars(self, a: np.ndarray, scalars: list[int], mod_idx: list[int]) -> np.ndarray:
        out = np.empty_like(a)
        for row, mi in enumerate(mod_idx):
            backend.arr_mulmod_scalar(out[row], a[row], scalars[row] % self.primes[mi], self.primes[mi])
        return out

    def mac(self, acc: np.ndarray, a: np.ndarray, b: np.ndarray, mod_idx: list[int]) -> None:
        for row, mi in enumerate(mod_idx):
            backend.arr_mac(acc[row], a[row], b[row], self.primes[mi])

    def mac_perm(self, acc: np.ndarray, a: np.ndarray, perm: np.ndarray,
                 b: np.ndarray, mod_idx: list[int]) -> None:
        for row, mi in enumerate(mod_idx):
            backend.arr_mac_perm(acc[row], a[row], perm, b[row], self.primes[mi])

    # -- sampling (all randomness flows through the caller's Generator) --

    def sample_uniform(self, rng: np.random.Generator, mod_idx: list[int]) -> np.ndarray:
        out = np.empty((len(mod_idx), self.n), dtype=np.uint64)
        for row, mi in enumerate(mod_idx):
            out[row] = rng.integers(0, self.primes[mi], self.n, dtype=np.uint64)
        return out

    def sample_gaussian_eval(self, rng: np.random.Generator, sigma: float,
                             mod_idx: list[int]) -> np.ndarray:
        e = np.rint(rng.normal(0.0, sigma, self.n)).astype(np.int64)
        return self.from_signed_coeffs(e, mod_idx)

    def sample_ternary_coeffs(self, rng: np.random.Generator, h: int) -> np.ndarray:
        s = np.zeros(self.n, dtype=np.int64)
        pos = rng.choice(self.n, size=h, replace=False)
        signs = rng.integers(0, 2, h, dtype=np.int64) * 2 - 1
        s[pos] = signs
        return s

    def sample_dense_ternary_coeffs(self, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(-1, 2, self.n, dtype=np.int64)

    def from_signed_coeffs(self, coeffs: np.ndarray, mod_idx: list[int]) -> np.ndarray:
        """Signed int64 coefficients -> evaluation-domain limbs."""
        out = np.empty((len(mod_idx), self.n), dtype=np.uint64)
        for row, mi in enumerate(mod_idx):
            q = self.primes[mi]
            out[row] = np.mod(coeffs, q).astype(np.uint64)
        self.ntt(out, mod_idx)
        return out

    # -- automorphisms ---------------------------------------------------

    @lru_cache(maxsize=256)
    def _perm_for_galois(self, g: int) -> np.ndarray:
        n = self.n
        idx = np.arange(n, dtype=np.uint64)
        e = (2 * idx + 1) * g % (2 * n)
        return ((e - 1) // 2).astype(np.uint32)

    def galois_element(self, step: int) -> int:
        """Galois element realizing a left slot rotation by `step`."""
        return pow(5, step % (self.n // 2), 2 * self.n)

    def automorph(self, limbs: np.ndarray, g: int) -> np.ndarray:
        perm = self._perm_for_galois(g)
        return np.take(limbs, perm, axis=1)
