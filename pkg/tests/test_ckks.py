import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from enchvac import ckks
from enchvac.ckks import serialize
from enchvac.ckks.ring import RnsBasis, crt_center, find_ntt_primes, negacyclic_schoolbook

SMALL = ckks.HeParams(ring_degree=1024)
SHORT_CHAIN = ckks.HeParams(ring_degree=1024, coeff_modulus_bits=(40, 26, 26, 40))


@pytest.fixture(scope="module")
def keys():
    return ckks.keygen(SMALL, seed=11)


def _vec(rng, n, bound=1.0):
    return rng.uniform(-bound, bound, n)


# ---------------------------------------------------------------- ring


def test_primes_are_ntt_friendly_and_distinct():
    primes = find_ntt_primes((40, 26, 26, 26, 40), 8192)
    assert len(set(primes)) == 5
    for p, bits in zip(primes, (40, 26, 26, 26, 40)):
        assert p % (2 * 8192) == 1
        assert p.bit_length() == bits


def test_ntt_product_matches_schoolbook():
    n = 64
    primes = find_ntt_primes((26, 30), n)
    basis = RnsBasis(primes, n)
    rng = np.random.default_rng(3)
    idx = (0, 1)
    f = np.stack([rng.integers(0, q, n) for q in primes])
    g = np.stack([rng.integers(0, q, n) for q in primes])
    prod = basis.intt(basis.mul(basis.ntt(f, idx), basis.ntt(g, idx), idx), idx)
    for row, q in enumerate(primes):
        ref = negacyclic_schoolbook([int(v) for v in f[row]], [int(v) for v in g[row]], q)
        assert prod[row].tolist() == ref


def test_ntt_round_trip():
    n = 128
    primes = find_ntt_primes((30,), n)
    basis = RnsBasis(primes, n)
    a = np.random.default_rng(0).integers(0, primes[0], (1, n))
    assert np.array_equal(basis.intt(basis.ntt(a, (0,)), (0,)), a)


def test_crt_center_recovers_signed_integers():
    primes = find_ntt_primes((26, 26), 16)
    values = np.array([-5, 0, 7, -(primes[0] * primes[1] // 2) + 1], dtype=object)
    residues = np.stack([np.array([int(v) % p for v in values]) for p in primes])
    assert crt_center(residues, primes).tolist() == values.tolist()


# ---------------------------------------------------------------- parameters


@pytest.mark.parametrize("kw", [
    dict(ring_degree=1000),
    dict(scale=2.0 ** 30),
    dict(error_stddev=0.0),
    dict(hamming_weight=0),
    dict(coeff_modulus_bits=(40,)),
])
def test_invalid_parameters_rejected(kw):
    with pytest.raises(ckks.HeConfigError):
        ckks.HeParams(**kw)


def test_default_parameters():
    p = ckks.HeParams()
    assert p.ring_degree == 8192
    assert p.coeff_modulus_bits == (40, 26, 26, 26, 40)
    assert p.scale == 2.0 ** 26
    assert p.max_level == 3
    assert p.slots == 4096


# ---------------------------------------------------------------- encoding and encryption


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.integers(1, 512), elements=st.floats(-100, 100)))
def test_encode_decode_round_trip(values):
    out = ckks.decode(ckks.encode(values, SMALL), len(values))
    assert np.max(np.abs(out - values)) < 1e-5


def test_encode_rejects_too_many_values():
    with pytest.raises(ValueError):
        ckks.encode(np.zeros(SMALL.slots + 1), SMALL)


def test_encrypt_decrypt_round_trip(keys):
    sk, pk, _ = keys
    rng = np.random.default_rng(1)
    v = _vec(rng, SMALL.slots, 10.0)
    ct = ckks.encrypt_values(pk, v, rng=rng)
    assert ct.level == SMALL.max_level
    assert np.max(np.abs(ckks.decrypt_values(sk, ct, v.size) - v)) < 1e-3


def test_encryption_is_randomized_but_seed_deterministic(keys):
    _, pk, _ = keys
    v = np.ones(4)
    a = ckks.encrypt_values(pk, v, rng=np.random.default_rng(5))
    b = ckks.encrypt_values(pk, v, rng=np.random.default_rng(5))
    c = ckks.encrypt_values(pk, v, rng=np.random.default_rng(6))
    assert all(np.array_equal(x, y) for x, y in zip(a.parts, b.parts))
    assert not np.array_equal(a.parts[0], c.parts[0])


def test_keygen_deterministic():
    a = ckks.keygen(SMALL, seed=3)
    b = ckks.keygen(SMALL, seed=3)
    assert serialize.dump_secret_key(a[0]) == serialize.dump_secret_key(b[0])
    assert serialize.dump_eval_key(a[2]) == serialize.dump_eval_key(b[2])


def test_secret_is_sparse_ternary(keys):
    s = keys[0].coeffs
    assert set(np.unique(s)) <= {-1, 0, 1}
    assert np.count_nonzero(s) == SMALL.hamming_weight


# ---------------------------------------------------------------- homomorphisms


def test_addition(keys):
    sk, pk, _ = keys
    rng = np.random.default_rng(2)
    a, b = _vec(rng, 300), _vec(rng, 300)
    ct = ckks.he_add(ckks.encrypt_values(pk, a, rng=rng), ckks.encrypt_values(pk, b, rng=rng))
    assert np.max(np.abs(ckks.decrypt_values(sk, ct, 300) - (a + b))) < 1e-3


def test_add_plain(keys):
    sk, pk, _ = keys
    rng = np.random.default_rng(4)
    a, b = _vec(rng, 50), _vec(rng, 50)
    ct = ckks.add_plain(ckks.encrypt_values(pk, a, rng=rng), ckks.encode(b, SMALL))
    assert np.max(np.abs(ckks.decrypt_values(sk, ct, 50) - (a + b))) < 1e-3


def test_multiply_relinearize_rescale(keys):
    sk, pk, ek = keys
    rng = np.random.default_rng(7)
    a, b = _vec(rng, 512), _vec(rng, 512)
    prod = ckks.he_mult(ckks.encrypt_values(pk, a, rng=rng), ckks.encrypt_values(pk, b, rng=rng), ek)
    assert len(prod.parts) == 2
    out = ckks.rescale(prod)
    assert out.level == SMALL.max_level - 1
    assert np.max(np.abs(ckks.decrypt_values(sk, out, 512) - a * b)) < 1e-2


def test_plain_and_cipher_multiplication_agree(keys):
    sk, pk, ek = keys
    rng = np.random.default_rng(8)
    a, b = _vec(rng, 64), _vec(rng, 64)
    ct_a = ckks.encrypt_values(pk, a, rng=rng)
    by_plain = ckks.rescale(ckks.multiply_plain(ct_a, ckks.encode(b, SMALL)))
    by_cipher = ckks.rescale(ckks.he_mult(ct_a, ckks.encrypt_values(pk, b, rng=rng), ek))
    da = ckks.decrypt_values(sk, by_plain, 64)
    db = ckks.decrypt_values(sk, by_cipher, 64)
    assert np.max(np.abs(da - db)) < 1e-2
    assert np.max(np.abs(da - a * b)) < 1e-2


def test_depth_three_chain(keys):
    sk, pk, ek = keys
    rng = np.random.default_rng(9)
    v = rng.uniform(0.5, 1.0, 32)
    ct = ckks.encrypt_values(pk, v, rng=rng)
    acc = ct
    for _ in range(SMALL.max_level):
        acc = ckks.rescale(ckks.he_mult(acc, ckks.mod_switch(ct, acc.level), ek))
    assert acc.level == 0
    assert np.max(np.abs(ckks.decrypt_values(sk, acc, 32) - v ** 4)) < 5e-2


def test_level_exhaustion_raises():
    sk, pk, ek = ckks.keygen(SHORT_CHAIN, seed=1)
    ct = ckks.encrypt_values(pk, [0.5], rng=np.random.default_rng(0))
    x = ct
    for _ in range(SHORT_CHAIN.max_level):
        x = ckks.rescale(ckks.he_mult(x, ckks.mod_switch(ct, x.level), ek))
    assert x.level == 0
    with pytest.raises(ckks.LevelExhaustedError):
        ckks.rescale(ckks.he_mult(x, ckks.mod_switch(ct, 0), ek))


def test_mismatched_operands_rejected(keys):
    _, pk, ek = keys
    a = ckks.encrypt_values(pk, [1.0])
    b = ckks.mod_switch(ckks.encrypt_values(pk, [1.0]), 1)
    with pytest.raises(ValueError):
        ckks.he_add(a, b)
    with pytest.raises(ValueError):
        ckks.he_mult(a, b, ek)


def test_mod_switch_preserves_value(keys):
    sk, pk, _ = keys
    v = np.array([0.25, -0.75])
    ct = ckks.mod_switch(ckks.encrypt_values(pk, v), 1)
    assert ct.level == 1
    assert np.max(np.abs(ckks.decrypt_values(sk, ct, 2) - v)) < 1e-3


# ---------------------------------------------------------------- serialization


def test_ciphertext_serialization_round_trip(keys):
    sk, pk, _ = keys
    v = np.linspace(-1, 1, 20)
    ct = ckks.encrypt_values(pk, v, rng=np.random.default_rng(0))
    blob = serialize.dump_ciphertext(ct)
    assert len(blob) == ckks.ciphertext_size_bytes(ct)
    assert len(blob) == serialize.HEADER_SIZE + 2 * (ct.level + 1) * SMALL.ring_degree * 8
    back = serialize.load_ciphertext(blob, SMALL)
    assert back.level == ct.level and back.scale == ct.scale
    assert np.array_equal(ckks.decrypt_values(sk, back, 20), ckks.decrypt_values(sk, ct, 20))


def test_key_serialization_round_trip(keys):
    sk, pk, ek = keys
    sk2 = serialize.load_secret_key(serialize.dump_secret_key(sk), SMALL)
    assert np.array_equal(sk2.coeffs, sk.coeffs)
    pk2 = serialize.load_public_key(serialize.dump_public_key(pk), SMALL)
    assert np.array_equal(pk2.b, pk.b) and np.array_equal(pk2.a, pk.a)
    ek2 = serialize.load_eval_key(serialize.dump_eval_key(ek), SMALL)
    assert np.array_equal(ek2.b, ek.b) and np.array_equal(ek2.a, ek.a)


def test_serialization_rejects_corruption(keys):
    _, pk, _ = keys
    blob = serialize.dump_ciphertext(ckks.encrypt_values(pk, [1.0]))
    with pytest.raises(serialize.FormatError):
        serialize.load_ciphertext(b"XXXX" + blob[4:], SMALL)
    with pytest.raises(serialize.FormatError):
        serialize.load_ciphertext(blob[:-8], SMALL)
    with pytest.raises(serialize.FormatError):
        serialize.load_ciphertext(blob, SHORT_CHAIN)
    with pytest.raises(serialize.FormatError):
        serialize.load_public_key(blob, SMALL)


def test_default_ciphertext_size():
    params = ckks.HeParams()
    assert serialize.HEADER_SIZE == 44
    _, pk, _ = ckks.keygen(params, seed=0)
    ct = ckks.encrypt_values(pk, [1.0])
    assert ckks.ciphertext_size_bytes(ct) == 44 + 2 * 4 * 8192 * 8
