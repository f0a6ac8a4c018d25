"""Leveled CKKS: encoding, keys, encryption and homomorphic evaluation.

All ring elements are held in NTT form, so additions and products are
pointwise per RNS limb. Key switching (relinearization) uses the RNS limbs as
the decomposition base together with the special prime: each limb of the
quadratic part is lifted to the extended basis, multiplied by its key pair and
the sum is divided by the special prime.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import HeConfigError, HeContext, HeParams, LevelExhaustedError, get_context
from .ring import crt_center

_SCALE_RTOL = 1e-9


@dataclass(frozen=True)
class Plaintext:
    poly: np.ndarray  # (level+1, N) NTT form
    level: int
    scale: float
    params: HeParams


@dataclass(frozen=True)
class Ciphertext:
    parts: tuple  # 2 or 3 arrays of shape (level+1, N), NTT form
    level: int
    scale: float
    params: HeParams

    def __post_init__(self):
        if len(self.parts) not in (2, 3):
            raise ValueError("a ciphertext has 2 or 3 parts")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        for p in self.parts:
            if p.shape != (self.level + 1, self.params.ring_degree):
                raise ValueError("ciphertext part shape does not match its level")


@dataclass(frozen=True, repr=False)
class SecretKey:
    coeffs: np.ndarray  # small signed coefficients of s
    ntt: np.ndarray  # s over every prime including the special one
    params: HeParams


@dataclass(frozen=True, repr=False)
class PublicKey:
    b: np.ndarray  # -a*s + e over the data primes
    a: np.ndarray
    params: HeParams


@dataclass(frozen=True, repr=False)
class EvalKey:
    """Relinearization key: one pair per data prime, over data + special primes."""

    b: np.ndarray  # (L+1, L+2, N)
    a: np.ndarray
    params: HeParams


# ---------------------------------------------------------------- sampling

def _sample_ternary(rng, n, hamming_weight):
    out = np.zeros(n, dtype=np.int64)
    if hamming_weight is None:
        return rng.integers(-1, 2, size=n).astype(np.int64)
    pos = rng.choice(n, size=hamming_weight, replace=False)
    out[pos] = rng.choice(np.array([-1, 1]), size=hamming_weight)
    return out


def _sample_error(rng, n, sigma):
    e = np.rint(rng.normal(0.0, sigma, size=n))
    bound = math.ceil(6 * sigma)
    return np.clip(e, -bound, bound).astype(np.int64)


def _sample_uniform(rng, ctx, idx):
    return np.stack([rng.integers(0, ctx.primes[i], size=ctx.params.ring_degree, dtype=np.int64) for i in idx])


def _to_ntt(ctx, coeffs, idx):
    return ctx.basis.ntt(ctx.basis.reduce_signed(coeffs, idx), idx)


def _as_rng(rng):
    if rng is None or isinstance(rng, (int, np.integer)):
        return np.random.default_rng(rng)
    return rng


# ---------------------------------------------------------------- keys

def keygen(params: HeParams, seed=None):
    """Generate ``(SecretKey, PublicKey, EvalKey)``; deterministic given ``seed``."""
    if not isinstance(params, HeParams):
        raise HeConfigError("keygen expects HeParams")
    ctx = get_context(params)
    rng = np.random.default_rng(seed)
    n = params.ring_degree
    top = params.max_level
    all_idx = tuple(range(len(ctx.primes)))
    data_idx = ctx.level_idx(top)

    s = _sample_ternary(rng, n, params.hamming_weight)
    s_ntt = _to_ntt(ctx, s, all_idx)
    sk = SecretKey(s, s_ntt, params)

    basis = ctx.basis
    a = _sample_uniform(rng, ctx, data_idx)
    e = _to_ntt(ctx, _sample_error(rng, n, params.error_stddev), data_idx)
    b = basis.add(basis.neg(basis.mul(a, s_ntt[: top + 1], data_idx), data_idx), e, data_idx)
    pk = PublicKey(b, a, params)

    s2 = basis.mul(s_ntt, s_ntt, all_idx)
    p_special = ctx.special_prime
    eb, ea = [], []
    for j in range(top + 1):
        aj = _sample_uniform(rng, ctx, all_idx)
        ej = _to_ntt(ctx, _sample_error(rng, n, params.error_stddev), all_idx)
        bj = basis.add(basis.neg(basis.mul(aj, s_ntt, all_idx), all_idx), ej, all_idx)
        # + P * g_j * s^2, where g_j = 1 mod q_j, 0 mod q_i (i != j); vanishes mod P
        qj = ctx.primes[j]
        row = basis.mul(s2[j:j + 1], np.full((1, n), p_special % qj, dtype=np.int64), (j,))
        bj[j] = basis.add(bj[j:j + 1], row, (j,))[0]
        eb.append(bj)
        ea.append(aj)
    ek = EvalKey(np.stack(eb), np.stack(ea), params)
    return sk, pk, ek


# ---------------------------------------------------------------- encoding

def encode(values, params: HeParams, scale=None, level=None) -> Plaintext:
    """Encode up to N/2 real values with the canonical embedding."""
    ctx = get_context(params)
    n = params.ring_degree
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size > n // 2:
        raise ValueError(f"cannot encode {v.size} values into {n // 2} slots")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    scale = params.scale if scale is None else float(scale)
    level = params.max_level if level is None else int(level)
    if not 0 <= level <= params.max_level:
        raise ValueError(f"level {level} outside [0, {params.max_level}]")
    z = np.zeros(n // 2, dtype=np.complex128)
    z[: v.size] = v
    ev = np.zeros(n, dtype=np.complex128)
    ev[ctx.slot_index] = z
    ev[ctx.conj_index] = np.conj(z)
    coeffs = (np.fft.fft(ev) / n / ctx.twist).real
    scaled = np.rint(coeffs * scale)
    bound = 2.0 ** (ctx.modulus_bits(level) - 1)
    if np.max(np.abs(scaled), initial=0.0) >= bound:
        raise ValueError("encoded magnitude exceeds the modulus at this level")
    idx = ctx.level_idx(level)
    return Plaintext(_to_ntt(ctx, scaled, idx), level, scale, params)


def decode(pt: Plaintext, length=None):
    """Decode a plaintext back to real slot values."""
    ctx = get_context(pt.params)
    n = pt.params.ring_degree
    idx = ctx.level_idx(pt.level)
    coeffs = ctx.basis.intt(pt.poly, idx)
    lifted = crt_center(coeffs, [ctx.primes[i] for i in idx])
    m = np.array([float(c) for c in lifted]) / pt.scale
    ev = n * np.fft.ifft(m * ctx.twist)
    out = ev[ctx.slot_index].real
    return out if length is None else out[:length]


# ---------------------------------------------------------------- encryption

def encrypt(pk: PublicKey, pt: Plaintext, rng=None) -> Ciphertext:
    """Public-key encryption ``(v*b + e0 + m, v*a + e1)``."""
    if pk.params != pt.params:
        raise HeConfigError("plaintext and key use different parameters")
    params = pt.params
    ctx = get_context(params)
    rng = _as_rng(rng)
    n = params.ring_degree
    idx = ctx.level_idx(pt.level)
    rows = pt.level + 1
    basis = ctx.basis
    v = _to_ntt(ctx, _sample_ternary(rng, n, params.hamming_weight), idx)
    e0 = _to_ntt(ctx, _sample_error(rng, n, params.error_stddev), idx)
    e1 = _to_ntt(ctx, _sample_error(rng, n, params.error_stddev), idx)
    c0 = basis.add(basis.add(basis.mul(v, pk.b[:rows], idx), e0, idx), pt.poly, idx)
    c1 = basis.add(basis.mul(v, pk.a[:rows], idx), e1, idx)
    return Ciphertext((c0, c1), pt.level, pt.scale, params)


def encrypt_values(pk: PublicKey, values, scale=None, level=None, rng=None) -> Ciphertext:
    return encrypt(pk, encode(values, pk.params, scale=scale, level=level), rng=rng)


def decrypt(sk: SecretKey, ct: Ciphertext) -> Plaintext:
    """``c0 + c1*s (+ c2*s^2)`` at the ciphertext's level."""
    if sk.params != ct.params:
        raise HeConfigError("ciphertext and key use different parameters")
    ctx = get_context(ct.params)
    idx = ctx.level_idx(ct.level)
    basis = ctx.basis
    s = sk.ntt[: ct.level + 1]
    acc = ct.parts[0]
    power = s
    for part in ct.parts[1:]:
        acc = basis.add(acc, basis.mul(part, power, idx), idx)
        power = basis.mul(power, s, idx)
    return Plaintext(acc, ct.level, ct.scale, ct.params)


def decrypt_values(sk: SecretKey, ct: Ciphertext, length=None):
    return decode(decrypt(sk, ct), length)


# ---------------------------------------------------------------- evaluation

def _check_pair(ct, other):
    if ct.params != other.params:
        raise ValueError("operands use different parameters")
    if ct.level != other.level:
        raise ValueError(f"level mismatch: {ct.level} vs {other.level}")
    if not math.isclose(ct.scale, other.scale, rel_tol=_SCALE_RTOL):
        raise ValueError(f"scale mismatch: {ct.scale!r} vs {other.scale!r}")


def he_add(ct: Ciphertext, other: Ciphertext) -> Ciphertext:
    _check_pair(ct, other)
    ctx = get_context(ct.params)
    idx = ctx.level_idx(ct.level)
    a, b = list(ct.parts), list(other.parts)
    while len(a) < len(b):
        a.append(np.zeros_like(b[len(a)]))
    while len(b) < len(a):
        b.append(np.zeros_like(a[len(b)]))
    parts = tuple(ctx.basis.add(x, y, idx) for x, y in zip(a, b))
    return Ciphertext(parts, ct.level, ct.scale, ct.params)


def add_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_pair(ct, pt)
    ctx = get_context(ct.params)
    idx = ctx.level_idx(ct.level)
    parts = (ctx.basis.add(ct.parts[0], pt.poly, idx),) + tuple(ct.parts[1:])
    return Ciphertext(parts, ct.level, ct.scale, ct.params)


def _check_mult(ct, other):
    if ct.params != other.params:
        raise ValueError("operands use different parameters")
    if ct.level != other.level:
        raise ValueError(f"level mismatch: {ct.level} vs {other.level}")
    if ct.level == 0:
        raise LevelExhaustedError("no level left to rescale a product")
    ctx = get_context(ct.params)
    if math.log2(ct.scale) + math.log2(other.scale) + 1 >= ctx.modulus_bits(ct.level):
        raise LevelExhaustedError("product scale exceeds the remaining modulus")


def multiply_plain(ct: Ciphertext, pt: Plaintext) -> Ciphertext:
    _check_mult(ct, pt)
    ctx = get_context(ct.params)
    idx = ctx.level_idx(ct.level)
    parts = tuple(ctx.basis.mul(p, pt.poly, idx) for p in ct.parts)
    return Ciphertext(parts, ct.level, ct.scale * pt.scale, ct.params)


def relinearize(ct: Ciphertext, ek: EvalKey) -> Ciphertext:
    if len(ct.parts) == 2:
        return ct
    ctx = get_context(ct.params)
    basis = ctx.basis
    lvl = ct.level
    idx = ctx.level_idx(lvl)
    ext = ctx.ext_idx(lvl)
    rows = list(idx) + [ctx.special_index]
    d2 = basis.intt(ct.parts[2], idx)
    acc0 = np.zeros((lvl + 2, ct.params.ring_degree), dtype=np.int64)
    acc1 = np.zeros_like(acc0)
    for j in range(lvl + 1):
        qj = ctx.primes[j]
        digit = np.where(d2[j] > qj // 2, d2[j] - qj, d2[j])
        dj = basis.ntt(basis.reduce_signed(digit, ext), ext)
        acc0 = basis.add(acc0, basis.mul(dj, ek.b[j][rows], ext), ext)
        acc1 = basis.add(acc1, basis.mul(dj, ek.a[j][rows], ext), ext)
    k0 = _mod_down(ctx, acc0, lvl)
    k1 = _mod_down(ctx, acc1, lvl)
    parts = (basis.add(ct.parts[0], k0, idx), basis.add(ct.parts[1], k1, idx))
    return Ciphertext(parts, lvl, ct.scale, ct.params)


def _mod_down(ctx: HeContext, poly, level):
    """Divide an extended-basis polynomial by the special prime, rounding."""
    basis = ctx.basis
    idx = ctx.level_idx(level)
    p = ctx.special_prime
    last = basis.intt(poly[-1:], (ctx.special_index,))[0]
    last = np.where(last > p // 2, last - p, last)
    corr = basis.ntt(basis.reduce_signed(last, idx), idx)
    diff = basis.sub(poly[:-1], corr, idx)
    pinv = [pow(p % ctx.primes[i], -1, ctx.primes[i]) for i in idx]
    return basis.mul_scalar(diff, pinv, idx)


def he_mult(ct: Ciphertext, other: Ciphertext, ek: EvalKey) -> Ciphertext:
    """Tensor product followed by relinearization; the caller rescales."""
    if len(ct.parts) != 2 or len(other.parts) != 2:
        raise ValueError("he_mult expects relinearized (2-part) operands")
    _check_mult(ct, other)
    ctx = get_context(ct.params)
    idx = ctx.level_idx(ct.level)
    basis = ctx.basis
    c0, c1 = ct.parts
    d0, d1 = other.parts
    e0 = basis.mul(c0, d0, idx)
    e1 = basis.add(basis.mul(c0, d1, idx), basis.mul(d0, c1, idx), idx)
    e2 = basis.mul(c1, d1, idx)
    tensor = Ciphertext((e0, e1, e2), ct.level, ct.scale * other.scale, ct.params)
    return relinearize(tensor, ek)


def rescale(ct: Ciphertext) -> Ciphertext:
    """Drop the top data prime and divide the scale by it."""
    if ct.level == 0:
        raise LevelExhaustedError("cannot rescale at level 0")
    ctx = get_context(ct.params)
    basis = ctx.basis
    lvl = ct.level
    q_top = ctx.primes[lvl]
    low = ctx.level_idx(lvl - 1)
    qinv = [pow(q_top % ctx.primes[i], -1, ctx.primes[i]) for i in low]
    parts = []
    for part in ct.parts:
        top = basis.intt(part[lvl:lvl + 1], (lvl,))[0]
        top = np.where(top > q_top // 2, top - q_top, top)
        corr = basis.ntt(basis.reduce_signed(top, low), low)
        parts.append(basis.mul_scalar(basis.sub(part[:lvl], corr, low), qinv, low))
    return Ciphertext(tuple(parts), lvl - 1, ct.scale / q_top, ct.params)


def mod_switch(ct: Ciphertext, level: int) -> Ciphertext:
    """Move to a lower level by dropping primes; value and scale unchanged."""
    if level > ct.level or level < 0:
        raise ValueError(f"cannot switch from level {ct.level} to {level}")
    parts = tuple(np.ascontiguousarray(p[: level + 1]) for p in ct.parts)
    return Ciphertext(parts, level, ct.scale, ct.params)


def ciphertext_size_bytes(ct: Ciphertext) -> int:
    from .serialize import HEADER_SIZE

    return HEADER_SIZE + len(ct.parts) * (ct.level + 1) * ct.params.ring_degree * 8
