"""Leveled approximate homomorphic encryption (CKKS) over RNS polynomial rings."""
from .params import HeConfigError, HeContext, HeParams, LevelExhaustedError, get_context
from .scheme import (
    Ciphertext,
    EvalKey,
    Plaintext,
    PublicKey,
    SecretKey,
    add_plain,
    ciphertext_size_bytes,
    decode,
    decrypt,
    decrypt_values,
    encode,
    encrypt,
    encrypt_values,
    he_add,
    he_mult,
    keygen,
    mod_switch,
    multiply_plain,
    relinearize,
    rescale,
)

__all__ = [
    "Ciphertext", "EvalKey", "HeConfigError", "HeContext", "HeParams", "LevelExhaustedError",
    "Plaintext", "PublicKey", "SecretKey", "add_plain", "ciphertext_size_bytes", "decode",
    "decrypt", "decrypt_values", "encode", "encrypt", "encrypt_values", "get_context",
    "he_add", "he_mult", "keygen", "mod_switch", "multiply_plain", "relinearize", "rescale",
]
