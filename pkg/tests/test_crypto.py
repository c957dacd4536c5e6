import random

import pytest
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)

from airchain import crypto

# standard SHA-512 of empty input
EMPTY_SHA512_PREFIX = "cf83e1357eefb8bd"


def test_sha512_empty_input_matches_standard():
    digest = crypto.sha512_digest(b"")
    assert digest.startswith(EMPTY_SHA512_PREFIX)
    assert len(digest) == 128


def test_sha512_deterministic():
    assert crypto.sha512_digest(b"abc") == crypto.sha512_digest(b"abc")


def test_sha512_bit_flip_changes_digest():
    rng = random.Random(5)
    for _ in range(200):
        data = bytearray(rng.randbytes(rng.randint(1, 64)))
        original = crypto.sha512_digest(bytes(data))
        index = rng.randrange(len(data))
        data[index] ^= 1 << rng.randrange(8)
        assert crypto.sha512_digest(bytes(data)) != original


def test_keypair_seeded_determinism():
    seed = bytes.fromhex("33" * 32)
    a = crypto.keypair_generate(seed=seed)
    b = crypto.keypair_generate(seed=seed)
    assert a == b
    assert len(a.public_key) == 66
    assert a.public_key[:2] in ("02", "03")


def test_keypair_zero_seed_rejected():
    with pytest.raises(crypto.CryptoError):
        crypto.keypair_generate(seed=b"\x00" * 32)


def test_keypair_seed_at_curve_order_rejected():
    with pytest.raises(crypto.CryptoError):
        crypto.keypair_generate(seed=crypto.N.to_bytes(32, "big"))


def test_keypair_bad_seed_length_rejected():
    with pytest.raises(crypto.CryptoError):
        crypto.keypair_generate(seed=b"\x01" * 31)


def test_unseeded_keys_distinct():
    assert crypto.keypair_generate() != crypto.keypair_generate()


def test_public_key_matches_independent_implementation(signer):
    # derive the same private scalar in OpenSSL and compare public points
    priv = ec.derive_private_key(signer.scalar, ec.SECP256K1())
    point = priv.public_key().public_numbers()
    x, y = crypto.decompress_public_key(signer.public_key)
    assert (x, y) == (point.x, point.y)


def test_sign_verify_roundtrip(signer):
    sig = crypto.sign(b"message", signer)
    assert len(sig) == 128
    assert crypto.verify(b"message", sig, signer.public_key)


def test_sign_is_deterministic(signer):
    assert crypto.sign(b"m1", signer) == crypto.sign(b"m1", signer)
    assert crypto.sign(b"m1", signer) != crypto.sign(b"m2", signer)


def test_verify_rejects_tampered_message(signer):
    sig = crypto.sign(b"payload-bytes", signer)
    tampered = b"payload-byteT"
    assert not crypto.verify(tampered, sig, signer.public_key)


def test_verify_rejects_malformed_inputs(signer):
    sig = crypto.sign(b"m", signer)
    assert not crypto.verify(b"m", "zz" * 64, signer.public_key)
    assert not crypto.verify(b"m", sig[:-2], signer.public_key)
    assert not crypto.verify(b"m", sig, "02" + "00" * 32)


def test_sign_empty_message_rejected(signer):
    with pytest.raises(crypto.CryptoError):
        crypto.sign(b"", signer)


def test_signatures_verify_under_independent_implementation(signer):
    pub = ec.EllipticCurvePublicKey.from_encoded_point(
        ec.SECP256K1(), bytes.fromhex(signer.public_key)
    )
    rng = random.Random(9)
    for _ in range(20):
        message = rng.randbytes(rng.randint(1, 100))
        sig = crypto.sign(message, signer)
        der = encode_dss_signature(int(sig[:64], 16), int(sig[64:], 16))
        pub.verify(der, message, ec.ECDSA(hashes.SHA256()))  # raises on failure


def test_independent_signatures_verify_here(signer):
    priv = ec.derive_private_key(signer.scalar, ec.SECP256K1())
    rng = random.Random(10)
    for _ in range(20):
        message = rng.randbytes(rng.randint(1, 100))
        der = priv.sign(message, ec.ECDSA(hashes.SHA256()))
        r, s = decode_dss_signature(der)
        sig = format(r, "064x") + format(s, "064x")
        assert crypto.verify(message, sig, signer.public_key)


def test_key_file_roundtrip(tmp_path, signer):
    path = tmp_path / "key"
    crypto.write_key_file(path, signer)
    loaded = crypto.read_key_file(path)
    assert loaded == signer


def test_key_file_mismatch_detected(tmp_path, signer, other_signer):
    path = tmp_path / "key"
    path.write_text(signer.private_key + "\n" + other_signer.public_key + "\n")
    with pytest.raises(crypto.CryptoError):
        crypto.read_key_file(path)
