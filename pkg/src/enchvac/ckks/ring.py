"""RNS polynomial arithmetic in Z_q[X]/(X^N + 1).

Polynomials are stored as int64 arrays of shape ``(n_limbs, N)``, one row per
RNS prime. Every prime is below 2**41 so residues are non-negative int64 and
products are reduced with a float-estimated quotient (exact, see ``mulmod``).
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from sympy import isprime

MAX_PRIME_BITS = 41


def find_ntt_primes(bit_sizes, ring_degree):
    """Return distinct primes ``p = 1 (mod 2N)`` with the requested bit sizes.

    Primes are searched downward from ``2**bits``; repeated bit sizes get the
    next prime below the previous one, as SEAL's ``CoeffModulus.Create`` does.
    """
    step = 2 * ring_degree
    used = set()
    primes = []
    for bits in bit_sizes:
        if bits > MAX_PRIME_BITS:
            raise ValueError(f"prime size {bits} exceeds {MAX_PRIME_BITS} bits")
        candidate = ((1 << bits) - 1) // step * step + 1
        while True:
            if candidate < (1 << (bits - 1)):
                raise ValueError(f"no {bits}-bit NTT prime for N={ring_degree}")
            if candidate not in used and isprime(candidate):
                break
            candidate -= step
        used.add(candidate)
        primes.append(candidate)
    return primes


def _primitive_2n_root(q, n):
    for g in range(2, q):
        psi = pow(g, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise ValueError(f"no primitive {2 * n}-th root modulo {q}")


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def mulmod(a, b, q, qinv):
    """Exact ``a*b mod q`` for residues below 2**41.

    The quotient is estimated in float64 (error at most one) and the remainder
    is recovered with wrapping int64 arithmetic, which is exact modulo 2**64.
    """
    quot = np.floor(a.astype(np.float64) * b.astype(np.float64) * qinv).astype(np.int64)
    r = a * b - quot * q
    r = np.where(r < 0, r + q, r)
    return np.where(r >= q, r - q, r)


class RnsBasis:
    """Primes plus precomputed negacyclic NTT tables for each of them."""

    def __init__(self, primes, ring_degree):
        n = ring_degree
        if n < 2 or n & (n - 1):
            raise ValueError("ring degree must be a power of two")
        self.n = n
        self.primes = [int(p) for p in primes]
        rev = _bit_reverse(n)
        fwd, inv, ninv = [], [], []
        for q in self.primes:
            psi = _primitive_2n_root(q, n)
            psi_inv = pow(psi, -1, q)
            pw = np.array([pow(psi, int(e), q) for e in range(n)], dtype=np.int64)
            pw_inv = np.array([pow(psi_inv, int(e), q) for e in range(n)], dtype=np.int64)
            fwd.append(pw[rev])
            inv.append(pw_inv[rev])
            ninv.append(pow(n, -1, q))
        self._fwd = np.stack(fwd)
        self._inv = np.stack(inv)
        self._ninv = np.array(ninv, dtype=np.int64)
        self._q = np.array(self.primes, dtype=np.int64)

    def __len__(self):
        return len(self.primes)

    @lru_cache(maxsize=64)
    def tables(self, idx):
        idx = list(idx)
        q = self._q[idx]
        return {
            "q": q[:, None],
            "qinv": (1.0 / q.astype(np.float64))[:, None],
            "fwd": self._fwd[idx],
            "inv": self._inv[idx],
            "ninv": self._ninv[idx][:, None],
        }

    def ntt(self, a, idx):
        """Forward negacyclic NTT of each row of ``a`` under primes ``idx``.

        Output is in bit-reversed order, which pointwise products and
        ``intt`` both accept.
        """
        tb = self.tables(tuple(idx))
        q3, qi3 = tb["q"][:, :, None], tb["qinv"][:, :, None]
        a = np.array(a, dtype=np.int64, copy=True)
        rows, n = a.shape
        m, t = 1, n
        while m < n:
            t //= 2
            blk = a.reshape(rows, m, 2, t)
            s = tb["fwd"][:, m:2 * m, None]
            u = blk[:, :, 0, :]
            v = mulmod(blk[:, :, 1, :], s, q3, qi3)
            hi = u - v
            lo = u + v
            blk[:, :, 0, :] = np.where(lo >= q3, lo - q3, lo)
            blk[:, :, 1, :] = np.where(hi < 0, hi + q3, hi)
            m *= 2
        return a

    def intt(self, a, idx):
        tb = self.tables(tuple(idx))
        q3, qi3 = tb["q"][:, :, None], tb["qinv"][:, :, None]
        a = np.array(a, dtype=np.int64, copy=True)
        rows, n = a.shape
        t, m = 1, n
        while m > 1:
            h = m // 2
            blk = a.reshape(rows, h, 2, t)
            s = tb["inv"][:, h:m, None]
            u = blk[:, :, 0, :].copy()
            v = blk[:, :, 1, :]
            lo = u + v
            blk[:, :, 0, :] = np.where(lo >= q3, lo - q3, lo)
            diff = u - v
            diff = np.where(diff < 0, diff + q3, diff)
            blk[:, :, 1, :] = mulmod(diff, s, q3, qi3)
            t *= 2
            m = h
        return mulmod(a, np.broadcast_to(tb["ninv"], a.shape), tb["q"], tb["qinv"])

    # pointwise helpers on (rows, N) arrays under primes idx

    def add(self, a, b, idx):
        q = self.tables(tuple(idx))["q"]
        s = a + b
        return np.where(s >= q, s - q, s)

    def sub(self, a, b, idx):
        q = self.tables(tuple(idx))["q"]
        d = a - b
        return np.where(d < 0, d + q, d)

    def neg(self, a, idx):
        q = self.tables(tuple(idx))["q"]
        return np.where(a == 0, 0, q - a)

    def mul(self, a, b, idx):
        tb = self.tables(tuple(idx))
        return mulmod(a, b, tb["q"], tb["qinv"])

    def mul_scalar(self, a, scalars, idx):
        """Multiply row i by ``scalars[i]`` (already reduced mod prime i)."""
        tb = self.tables(tuple(idx))
        s = np.asarray(scalars, dtype=np.int64)[:, None]
        return mulmod(a, np.broadcast_to(s, a.shape), tb["q"], tb["qinv"])

    def reduce_signed(self, coeffs, idx):
        """Reduce signed integer coefficients (int64 or float64) into each limb."""
        q = self.tables(tuple(idx))["q"]
        c = np.asarray(coeffs)
        if c.dtype.kind == "f":
            r = np.fmod(c[None, :], q.astype(np.float64)).astype(np.int64)
        else:
            r = c.astype(np.int64)[None, :] % q
        return np.where(r < 0, r + q, r)


def crt_center(residues, primes):
    """Centered CRT lift of ``(k, N)`` residues to Python integers (object array)."""
    primes = [int(p) for p in primes]
    if len(primes) == 1:
        q = primes[0]
        r = residues[0].astype(np.int64)
        return np.where(r > q // 2, r - q, r).astype(object)
    big_q = 1
    for p in primes:
        big_q *= p
    acc = np.zeros(residues.shape[1], dtype=object)
    for row, p in zip(residues, primes):
        qhat = big_q // p
        y = (row.astype(object) * pow(qhat % p, -1, p)) % p
        acc = acc + y * qhat
    acc = acc % big_q
    half = big_q // 2
    return np.where(acc > half, acc - big_q, acc)


def negacyclic_schoolbook(f, g, q):
    """Reference product ``f*g mod (X^N + 1, q)`` with Python integers."""
    n = len(f)
    out = [0] * n
    for i, fi in enumerate(f):
        if fi == 0:
            continue
        for j, gj in enumerate(g):
            k = i + j
            if k < n:
                out[k] += fi * gj
            else:
                out[k - n] -= fi * gj
    return [c % q for c in out]
