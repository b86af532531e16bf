"""CKKS parameter sets and the derived precomputation context."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ParameterError
from .rns import RingContext, find_ntt_primes, is_ntt_friendly

# Hybrid key-switching: the special modulus product must exceed the largest
# decomposition digit by this many bits to keep the switching noise small.
_KS_MARGIN_BITS = 30
_SPECIAL_BITS = 59


@dataclass(frozen=True)
class CkksParams:
    """Leveled CKKS parameters over a power-of-two cyclotomic ring.

    ``modulus_chain`` is ordered from the base prime (never dropped) to the
    top-of-chain prime (dropped first); its length is max_level + 1.
    ``special_moduli`` are the key-switching primes; their product must be
    large enough for the hybrid decomposition with ``dnum`` digits.

    The defaults here are desk-scale and NOT 128-bit secure; production-size
    rings (N = 2^16, h = 192) are expressible but not defaulted.
    """

    ring_degree: int
    modulus_chain: tuple[int, ...]
    special_moduli: tuple[int, ...]
    scale: float
    secret_hamming_weight: int = 64
    noise_stddev: float = 3.2
    dnum: int = 3

    def __post_init__(self):
        n = self.ring_degree
        if n < 8 or n & (n - 1):
            raise ParameterError(f"ring degree {n} must be a power of two >= 8")
        all_primes = tuple(self.modulus_chain) + tuple(self.special_moduli)
        if len(set(all_primes)) != len(all_primes):
            raise ParameterError("modulus chain primes must be distinct")
        for q in all_primes:
            if not is_ntt_friendly(q, n):
                raise ParameterError(f"prime {q} is not 1 mod 2N or not prime")
        if not self.modulus_chain:
            raise ParameterError("modulus chain is empty")
        if not self.special_moduli:
            raise ParameterError("at least one special modulus is required")
        if self.scale <= 0:
            raise ParameterError("scale must be positive")
        if self.noise_stddev <= 0:
            raise ParameterError("noise stddev must be positive")
        if not (0 < self.secret_hamming_weight <= n):
            raise ParameterError("secret hamming weight out of range")
        if not (1 <= self.dnum <= len(self.modulus_chain)):
            raise ParameterError("dnum out of range")
        # special modulus product must dominate every decomposition digit
        alpha = math.ceil(len(self.modulus_chain) / self.dnum)
        max_digit_bits = max(
            sum(q.bit_length() for q in self.modulus_chain[j * alpha:(j + 1) * alpha])
            for j in range(self.dnum)
        )
        p_bits = sum(p.bit_length() for p in self.special_moduli)
        if p_bits < max_digit_bits + _KS_MARGIN_BITS // 2:
            raise ParameterError(
                f"special modulus too small for dnum={self.dnum}: "
                f"{p_bits} bits vs digit {max_digit_bits} bits"
            )

    @property
    def slot_count(self) -> int:
        return self.ring_degree // 2

    @property
    def max_level(self) -> int:
        return len(self.modulus_chain) - 1

    @classmethod
    def build(
        cls,
        ring_degree: int = 2**13,
        max_level: int = 14,
        scale_bits: int = 40,
        base_prime_bits: int = 60,
        dnum: int = 3,
        secret_hamming_weight: int = 64,
        noise_stddev: float = 3.2,
    ) -> "CkksParams":
        """Generate an NTT-friendly chain: one base prime + max_level scaling
        primes near 2^scale_bits, plus enough special primes for `dnum`."""
        n = ring_degree
        base = find_ntt_primes(base_prime_bits, 1, n)
        scaling = find_ntt_primes(scale_bits, max_level, n, exclude=set(base))
        chain = tuple(base + scaling)
        alpha = math.ceil(len(chain) / dnum)
        max_digit_bits = max(
            sum(q.bit_length() for q in chain[j * alpha:(j + 1) * alpha])
            for j in range(dnum)
        )
        n_special = math.ceil((max_digit_bits + _KS_MARGIN_BITS) / _SPECIAL_BITS)
        specials = find_ntt_primes(_SPECIAL_BITS, n_special, n, exclude=set(chain))
        return cls(
            ring_degree=n,
            modulus_chain=chain,
            special_moduli=tuple(specials),
            scale=float(2**scale_bits),
            secret_hamming_weight=secret_hamming_weight,
            noise_stddev=noise_stddev,
            dnum=dnum,
        )


def desk_params(**overrides) -> CkksParams:
    """The default desk-scale parameter set: N=2^13, L=14, scale 2^40."""
    kw = dict(ring_degree=2**13, max_level=14, scale_bits=40)
    kw.update(overrides)
    return CkksParams.build(**kw)


class CkksContext:
    """Derived tables for a parameter set: ring context, digit grouping for
    hybrid key switching, and per-level CRT constants."""

    def __init__(self, params: CkksParams):
        self.params = params
        chain = list(params.modulus_chain)
        specials = list(params.special_moduli)
        self.num_chain = len(chain)
        self.num_special = len(specials)
        self.ring = RingContext(params.ring_degree, chain + specials)
        self.chain_idx = list(range(self.num_chain))
        self.special_idx = list(range(self.num_chain, self.num_chain + self.num_special))
        self.P = math.prod(specials)
        alpha = math.ceil(self.num_chain / params.dnum)
        self.alpha = alpha
        self.digit_groups: list[list[int]] = [
            list(range(j * alpha, min((j + 1) * alpha, self.num_chain)))
            for j in range(params.dnum)
            if j * alpha < self.num_chain
        ]
        self._level_cache: dict[int, dict] = {}
        # P^{-1} mod q_i for the mod-down step
        self.P_inv_mod_q = [pow(self.P % q, q - 2, q) for q in chain]
        # (P / p_j) and its inverse mod p_j, for base conversion from specials
        self.P_over_p = [self.P // p for p in specials]
        self.P_over_p_inv = [pow((self.P // p) % p, p - 2, p) for p in specials]
        # key factor P * Q_hat_j mod q_i (zero off-digit, zero at specials)
        QL = math.prod(chain)
        self.key_factor: list[list[int]] = []
        for grp in self.digit_groups:
            Qj = math.prod(chain[i] for i in grp)
            Qhat = (QL // Qj) * pow((QL // Qj) % Qj, -1, Qj) % QL
            factors = [(self.P * Qhat) % q for q in chain] + [0] * self.num_special
            self.key_factor.append(factors)

    def active_idx(self, level: int) -> list[int]:
        return self.chain_idx[: level + 1]

    def level_tables(self, level: int) -> dict:
        """CRT constants for decomposition/extension at one level."""
        if level in self._level_cache:
            return self._level_cache[level]
        chain = self.params.modulus_chain
        specials = self.params.special_moduli
        groups = []
        for digit, grp in enumerate(self.digit_groups):
            act = [i for i in grp if i <= level]
            if not act:
                continue
            Qa = math.prod(chain[i] for i in act)
            inv = [pow((Qa // chain[i]) % chain[i], -1, chain[i]) for i in act]
            # extension scalars (Qa/q_i) mod m for every target modulus
            targets = list(chain[: level + 1]) + list(specials)
            scal = [[(Qa // chain[i]) % m for i in act] for m in targets]
            groups.append({
                "digit": digit,
                "idx": act,
                "inv": inv,
                "ext_scalars": scal,
            })
        # rescale constants: dropping prime q_level
        q_top = chain[level]
        resc_inv = [pow(q_top % chain[i], -1, chain[i]) for i in range(level)]
        tables = {"groups": groups, "rescale_inv": resc_inv}
        self._level_cache[level] = tables
        return tables
