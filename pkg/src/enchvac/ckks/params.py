from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .ring import RnsBasis, find_ntt_primes


class HeConfigError(ValueError):
    pass


class LevelExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class HeParams:
    """CKKS parameters.

    The last entry of ``coeff_modulus_bits`` is the special prime used only for
    key switching (SEAL convention), so fresh ciphertexts live at level
    ``len(coeff_modulus_bits) - 2`` and each rescale drops one data prime.
    ``hamming_weight`` fixes the number of nonzero coefficients of the secret
    and of the encryption randomness; ``None`` means dense uniform ternary.
    """

    ring_degree: int = 8192
    coeff_modulus_bits: tuple = (40, 26, 26, 26, 40)
    scale: float = 2.0 ** 26
    error_stddev: float = 3.2
    hamming_weight: int | None = 64

    def __post_init__(self):
        object.__setattr__(self, "coeff_modulus_bits", tuple(int(b) for b in self.coeff_modulus_bits))
        n = self.ring_degree
        if n < 8 or n & (n - 1):
            raise HeConfigError(f"ring degree {n} is not a power of two >= 8")
        if len(self.coeff_modulus_bits) < 2:
            raise HeConfigError("modulus chain needs at least one data prime and one special prime")
        data_bits = self.coeff_modulus_bits[:-1]
        if not self.scale > 1:
            raise HeConfigError("scale must exceed 1")
        if math.log2(self.scale) > min(data_bits) or self.scale >= 2.0 ** (data_bits[0] - 1):
            raise HeConfigError("scale does not fit the data primes")
        if self.coeff_modulus_bits[-1] < max(data_bits):
            raise HeConfigError("special prime must be at least as large as every data prime")
        if self.error_stddev <= 0:
            raise HeConfigError("error_stddev must be positive")
        if self.hamming_weight is not None and not 0 < self.hamming_weight <= n:
            raise HeConfigError("hamming_weight out of range")

    @property
    def max_level(self):
        return len(self.coeff_modulus_bits) - 2

    @property
    def slots(self):
        return self.ring_degree // 2

    def digest(self):
        """16-byte fingerprint written into every serialized object."""
        text = f"{self.ring_degree}|{self.coeff_modulus_bits}|{self.scale!r}|{self.error_stddev!r}|{self.hamming_weight}"
        return hashlib.sha256(text.encode()).digest()[:16]


class HeContext:
    """Primes, NTT tables and encoder constants shared by every object of a parameter set."""

    def __init__(self, params: HeParams):
        self.params = params
        n = params.ring_degree
        primes = find_ntt_primes(params.coeff_modulus_bits, n)
        self.basis = RnsBasis(primes, n)
        self.primes = primes
        self.special_index = len(primes) - 1
        self.special_prime = primes[-1]
        # canonical embedding: slot j sits at the root zeta^(5^j mod 2N)
        two_n = 2 * n
        exps = np.empty(n // 2, dtype=np.int64)
        e = 1
        for j in range(n // 2):
            exps[j] = e
            e = e * 5 % two_n
        self.slot_index = (exps - 1) // 2
        self.conj_index = n - 1 - self.slot_index
        self.twist = np.exp(1j * np.pi * np.arange(n) / n)

    def level_idx(self, level):
        return tuple(range(level + 1))

    def ext_idx(self, level):
        return tuple(range(level + 1)) + (self.special_index,)

    def modulus_bits(self, level):
        return sum(math.log2(p) for p in self.primes[: level + 1])


@lru_cache(maxsize=8)
def get_context(params: HeParams) -> HeContext:
    return HeContext(params)
