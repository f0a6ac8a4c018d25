"""Bit-exact binary layout for ciphertexts and keys.

Every object starts with a 44-byte little-endian header::

    magic      4s   b"ECKS"
    version    u16
    kind       u8   1 ciphertext, 2 secret key, 3 public key, 4 eval key
    reserved   u8
    params     16s  HeParams.digest()
    level      u16
    n_parts    u16
    n_limbs    u16
    reserved   u16
    ring_deg   u32
    scale      f64

followed by ``n_parts * n_limbs * ring_deg`` residues as u64 little-endian,
part-major then limb-major. Residues are stored in the NTT (evaluation)
representation used in memory.
"""
from __future__ import annotations

import struct

import numpy as np

from .params import HeParams, get_context
from .scheme import Ciphertext, EvalKey, PublicKey, SecretKey

MAGIC = b"ECKS"
VERSION = 1
HEADER = struct.Struct("<4sHBB16sHHHHId")
HEADER_SIZE = HEADER.size

KIND_CIPHERTEXT = 1
KIND_SECRET = 2
KIND_PUBLIC = 3
KIND_EVAL = 4


class FormatError(ValueError):
    pass


def _pack(kind, params, level, arrays, scale=0.0):
    arrays = np.ascontiguousarray(np.stack(arrays), dtype="<u8")
    n_parts, n_limbs, n = arrays.shape
    head = HEADER.pack(MAGIC, VERSION, kind, 0, params.digest(), level, n_parts, n_limbs, 0, n, float(scale))
    return head + arrays.tobytes()


def _unpack(data, params, kind):
    if len(data) < HEADER_SIZE:
        raise FormatError("truncated header")
    magic, version, k, _, digest, level, n_parts, n_limbs, _, n, scale = HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise FormatError("bad magic or version")
    if k != kind:
        raise FormatError(f"expected object kind {kind}, found {k}")
    if digest != params.digest() or n != params.ring_degree:
        raise FormatError("object was produced under different parameters")
    count = n_parts * n_limbs * n
    if len(data) != HEADER_SIZE + 8 * count:
        raise FormatError("payload length does not match header")
    body = np.frombuffer(data, dtype="<u8", count=count, offset=HEADER_SIZE)
    return level, scale, body.astype(np.int64).reshape(n_parts, n_limbs, n)


def dump_ciphertext(ct: Ciphertext) -> bytes:
    return _pack(KIND_CIPHERTEXT, ct.params, ct.level, ct.parts, ct.scale)


def load_ciphertext(data: bytes, params: HeParams) -> Ciphertext:
    level, scale, arr = _unpack(data, params, KIND_CIPHERTEXT)
    if arr.shape[1] != level + 1:
        raise FormatError("limb count does not match level")
    return Ciphertext(tuple(arr), level, scale, params)


def dump_secret_key(sk: SecretKey) -> bytes:
    return _pack(KIND_SECRET, sk.params, sk.params.max_level, [sk.ntt])


def load_secret_key(data: bytes, params: HeParams) -> SecretKey:
    _, _, arr = _unpack(data, params, KIND_SECRET)
    ctx = get_context(params)
    idx = tuple(range(len(ctx.primes)))
    coeffs = ctx.basis.intt(arr[0], idx)[0]
    q0 = ctx.primes[0]
    coeffs = np.where(coeffs > q0 // 2, coeffs - q0, coeffs)
    return SecretKey(coeffs, arr[0], params)


def dump_public_key(pk: PublicKey) -> bytes:
    return _pack(KIND_PUBLIC, pk.params, pk.params.max_level, [pk.b, pk.a])


def load_public_key(data: bytes, params: HeParams) -> PublicKey:
    _, _, arr = _unpack(data, params, KIND_PUBLIC)
    return PublicKey(arr[0], arr[1], params)


def dump_eval_key(ek: EvalKey) -> bytes:
    return _pack(KIND_EVAL, ek.params, ek.params.max_level, list(ek.b) + list(ek.a))


def load_eval_key(data: bytes, params: HeParams) -> EvalKey:
    _, _, arr = _unpack(data, params, KIND_EVAL)
    half = arr.shape[0] // 2
    return EvalKey(arr[:half], arr[half:], params)
