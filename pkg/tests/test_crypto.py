import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objledger.crypto import derive_key_address, from_hex, keygen, sha3_256, sign, to_hex, verify

import oracles


def test_fips_vectors():
    assert sha3_256(b"").hex() == oracles.FIPS_EMPTY
    assert sha3_256(b"abc").hex() == oracles.FIPS_ABC
    assert sha3_256(b"a" * 1_000_000).hex() == oracles.FIPS_MILLION_A


def test_reference_keccak_agrees_on_padding_boundaries():
    # 135/136/137 straddle the SHA3-256 rate; the oracle must agree on all of them.
    for n in (0, 1, 55, 134, 135, 136, 137, 271, 272, 273):
        data = bytes(range(256))[: n % 256] * (n // 256 + 1)
        data = data[:n]
        assert sha3_256(data) == oracles.ref_sha3_256(data), n


@settings(max_examples=50)
@given(st.binary(max_size=2048))
def test_hash_deterministic_and_32_bytes(data):
    d = sha3_256(data)
    assert len(d) == 32
    assert d == sha3_256(data)


def test_hex_rendering():
    d = sha3_256(b"x")
    text = to_hex(d)
    assert text.startswith("0x") and len(text) == 66 and text == text.lower()
    assert from_hex(text) == d
    assert from_hex(text[2:]) == d


def test_keygen_deterministic_and_injective():
    s1, s2 = b"\x01" * 32, b"\x02" * 32
    assert keygen(s1) == keygen(s1)
    assert keygen(s1).public_key != keygen(s2).public_key
    with pytest.raises(ValueError):
        keygen(b"\x00" * 31)


def test_sign_deterministic_and_verifies():
    kp = keygen(b"\x07" * 32)
    sig = sign(kp.secret_key, b"hello")
    assert len(sig) == 64
    assert sig == sign(kp.secret_key, b"hello")
    assert verify(kp.public_key, b"hello", sig)
    assert not verify(keygen(b"\x08" * 32).public_key, b"hello", sig)


def test_bit_flips_rejected():
    rng = random.Random(3)
    kp = keygen(rng.randbytes(32))
    msg = rng.randbytes(64)
    sig = kp.sign(msg)
    for _ in range(1000):
        bit = rng.randrange(len(msg) * 8)
        flipped = bytearray(msg)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert not verify(kp.public_key, bytes(flipped), sig)


def test_round_trip_and_mutations():
    rng = random.Random(11)
    for _ in range(1000):
        kp = keygen(rng.randbytes(32))
        msg = rng.randbytes(rng.randint(0, 80))
        sig = kp.sign(msg)
        assert verify(kp.public_key, msg, sig)
        bad_sig = bytearray(sig)
        bad_sig[rng.randrange(64)] ^= 1 << rng.randrange(8)
        assert not verify(kp.public_key, msg, bytes(bad_sig))
        bad_pk = bytearray(kp.public_key)
        bad_pk[rng.randrange(32)] ^= 1 << rng.randrange(8)
        assert not verify(bytes(bad_pk), msg, sig)
        assert not verify(kp.public_key, msg + b"\x00", sig)


def test_verify_never_raises_on_garbage():
    assert not verify(b"short", b"m", b"\x00" * 64)
    assert not verify(b"\x00" * 32, b"m", b"sig")
    assert not verify(b"\xff" * 32, b"m", b"\xff" * 64)


def test_key_address_matches_independent_hash():
    kp = keygen(b"\x09" * 32)
    assert derive_key_address(kp.public_key) == oracles.ref_sha3_256(b"\x00" + kp.public_key)
    assert kp.address == derive_key_address(kp.public_key)


def test_address_injective_over_many_keys():
    rng = random.Random(5)
    addresses = {keygen(rng.randbytes(32)).address for _ in range(10_000)}
    assert len(addresses) == 10_000
