import random
import threading
from dataclasses import replace
from pathlib import Path

import pytest

from objledger.crypto import keygen, sha3_256
from objledger.zklogin import (
    DEFAULT_ISS,
    AttestedProof,
    BadSignature,
    EmptyField,
    Expired,
    InvalidJwt,
    Malformed,
    MockProvider,
    NonceMismatch,
    ProofMode,
    SaltStore,
    TransparentProof,
    UnknownKid,
    decode_proof,
    derive_zk_address,
    encode_proof,
    get_or_create_salt,
    issue_jwt,
    make_nonce,
    new_ephemeral_bundle,
    prove,
    sign_with_zklogin,
    verify_jwt,
    verify_zklogin_sig,
)

import oracles
from helpers import ZK_MUTATIONS, _tamper_payload, zk_verdicts

GOLDEN = Path(__file__).parent / "golden"
PROVER = keygen(b"\x33" * 32)


@pytest.fixture
def provider():
    return MockProvider(DEFAULT_ISS, seed=1)


def honest(provider, rng=None, epoch=0, validity=2, sub="alice", aud="app1"):
    rng = rng or random.Random(0)
    bundle = new_ephemeral_bundle(rng, epoch, validity)
    jwt = provider.login(sub, bundle.nonce, exp_epoch=bundle.max_epoch, aud=aud)
    salt = rng.randbytes(16)
    address = derive_zk_address(provider.iss, aud, sub, salt)
    return bundle, jwt, salt, address


def attest(provider, bundle, jwt, salt, epoch=0):
    return prove(
        jwt, salt, bundle.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness,
        ProofMode.ATTESTED, PROVER, provider_registry=provider.registry, current_epoch=epoch,
    )


# --- nonce and address ---------------------------------------------------------------


def test_nonce_golden_and_sensitivity():
    pk, rnd = bytes(range(32)), b"\x22" * 16
    expected = (GOLDEN / "nonce_vector.hex").read_text().strip()
    assert make_nonce(pk, 3, rnd) == expected == oracles.ref_nonce(pk, 3, rnd)
    assert make_nonce(pk, 4, rnd) != expected


def test_zk_address_golden_vector():
    expected = (GOLDEN / "zk_address_user42.hex").read_text().strip()
    addr = derive_zk_address("https://mock.example", "app1", "user-42", b"\x11" * 16)
    assert addr.hex() == expected


def test_zk_address_salt_sensitivity_and_empty_fields():
    salt = b"\x11" * 16
    base = derive_zk_address(DEFAULT_ISS, "app1", "user-42", salt)
    assert base == derive_zk_address(DEFAULT_ISS, "app1", "user-42", salt)
    for bit in range(128):
        flipped = bytearray(salt)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert derive_zk_address(DEFAULT_ISS, "app1", "user-42", bytes(flipped)) != base
    for args in (("", "a", "s"), (DEFAULT_ISS, "", "s"), (DEFAULT_ISS, "a", "")):
        with pytest.raises(EmptyField):
            derive_zk_address(*args, salt)


def test_length_prefix_prevents_field_shuffling():
    salt = b"\x00" * 16
    assert derive_zk_address(DEFAULT_ISS, "ab", "c", salt) != derive_zk_address(DEFAULT_ISS, "a", "bc", salt)


# --- JWTs ---------------------------------------------------------------------------


def test_issue_and_verify(provider):
    jwt = provider.login("bob", "n" * 64, exp_epoch=5)
    token = verify_jwt(jwt, provider.registry, current_epoch=5)
    assert (token.iss, token.aud, token.sub, token.nonce, token.exp_epoch) == (DEFAULT_ISS, "app1", "bob", "n" * 64, 5)
    assert token.compact == jwt
    with pytest.raises(Expired):
        verify_jwt(jwt, provider.registry, current_epoch=6)


def test_wrong_provider_key_and_unknown_kid(provider):
    jwt = provider.login("bob", "n", exp_epoch=5)
    other = MockProvider(DEFAULT_ISS, seed=2)
    with pytest.raises(BadSignature):
        verify_jwt(jwt, other.registry)
    with pytest.raises(UnknownKid):
        verify_jwt(jwt, {})


def test_key_rotation(provider):
    old = provider.login("bob", "n", exp_epoch=5)
    provider.add_key("mock-2")
    new = provider.login("bob", "n", exp_epoch=5)
    assert verify_jwt(old, provider.registry).header["kid"] == "mock-1"
    assert verify_jwt(new, provider.registry).header["kid"] == "mock-2"


def test_payload_tamper_fuzz(provider):
    rng = random.Random(17)
    jwt = provider.login("carol", "f" * 64, exp_epoch=9)
    for _ in range(500):
        with pytest.raises((BadSignature, Malformed)):
            verify_jwt(_tamper_payload(jwt, rng), provider.registry)


def test_malformed_tokens(provider):
    for bad in ("", "a.b", "a.b.c.d", "!!.??.**"):
        with pytest.raises(Malformed):
            verify_jwt(bad, provider.registry)
    kp = keygen(b"\x01" * 32)
    empty_sub = issue_jwt(kp, "mock-1", DEFAULT_ISS, "app1", "", "n", 1)
    assert verify_jwt(empty_sub, {"mock-1": kp.public_key}).sub == ""


# --- prover -------------------------------------------------------------------------


def test_honest_proofs_verify_in_both_modes(provider):
    bundle, jwt, salt, address = honest(provider)
    digest = sha3_256(b"txn")
    for proof in (
        attest(provider, bundle, jwt, salt),
        prove(jwt, salt, bundle.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness, "transparent",
              provider_registry=provider.registry),
    ):
        auth = sign_with_zklogin(digest, bundle, proof, address, provider.iss)
        assert verify_zklogin_sig(auth, digest, 0, provider.registry, PROVER.public_key)
        assert not verify_zklogin_sig(auth, sha3_256(b"other"), 0, provider.registry, PROVER.public_key)


def test_prover_refuses_bad_inputs(provider):
    bundle, jwt, salt, _ = honest(provider)
    other = new_ephemeral_bundle(random.Random(5), 0)
    with pytest.raises(NonceMismatch):
        prove(jwt, salt, other.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness, "attested", PROVER,
              provider_registry=provider.registry)
    with pytest.raises(InvalidJwt):
        prove(jwt, salt, bundle.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness, "attested", PROVER,
              provider_registry={})
    with pytest.raises(ValueError):
        prove(jwt, salt, bundle.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness, "attested", None,
              provider_registry=provider.registry)


def test_attested_proof_hides_sub_and_salt(provider):
    bundle, jwt, salt, address = honest(provider, sub="very-identifiable-subject")
    proof = attest(provider, bundle, jwt, salt)
    blob = encode_proof(proof)
    assert blob[0] == 0x01
    assert b"very-identifiable-subject" not in blob and salt not in blob
    auth = sign_with_zklogin(b"\x00" * 32, bundle, proof, address, provider.iss)
    assert b"very-identifiable-subject" not in auth.encode() and salt not in auth.encode()
    assert decode_proof(blob) == proof
    witness = TransparentProof(jwt, salt, bundle.jwt_randomness)
    assert encode_proof(witness)[0] == 0x02 and decode_proof(encode_proof(witness)) == witness


def test_attested_single_field_mutations_rejected(provider):
    bundle, jwt, salt, address = honest(provider)
    proof = attest(provider, bundle, jwt, salt)
    digest = sha3_256(b"txn")
    auth = sign_with_zklogin(digest, bundle, proof, address, provider.iss)
    assert verify_zklogin_sig(auth, digest, 0, provider.registry, PROVER.public_key)
    mutants = [
        replace(auth, claimed_address=sha3_256(address)),
        replace(auth, ephemeral_public_key=keygen(b"\x44" * 32).public_key),
        replace(auth, max_epoch=auth.max_epoch + 1),
        replace(auth, iss="https://evil.example"),
    ]
    # A re-signed ephemeral key still fails: the prover bound the original key.
    rogue = keygen(b"\x44" * 32)
    mutants.append(replace(auth, ephemeral_public_key=rogue.public_key, ephemeral_signature=rogue.sign(digest)))
    for m in mutants:
        assert not verify_zklogin_sig(m, digest, 0, provider.registry, PROVER.public_key)
    assert not verify_zklogin_sig(auth, digest, 0, provider.registry, keygen(b"\x55" * 32).public_key)
    assert not verify_zklogin_sig(replace(auth, proof=AttestedProof(b"\x00" * 64)), digest, 0, provider.registry, PROVER.public_key)


def test_expiry_flips_exactly_after_max_epoch(provider):
    bundle, jwt, salt, address = honest(provider, epoch=2, validity=3)
    proof = attest(provider, bundle, jwt, salt, epoch=2)
    auth = sign_with_zklogin(b"d" * 32, bundle, proof, address, provider.iss)
    verdicts = [verify_zklogin_sig(auth, b"d" * 32, e, provider.registry, PROVER.public_key) for e in range(2, 9)]
    assert verdicts == [True, True, True, True, False, False, False]


@pytest.mark.parametrize("mutation", ZK_MUTATIONS)
def test_differential_by_mutation(provider, mutation):
    rng = random.Random(ZK_MUTATIONS.index(mutation))
    for _ in range(40):
        attested, transparent = zk_verdicts(rng, mutation, provider, PROVER)
        assert attested == transparent == (mutation == "honest")


# --- salts --------------------------------------------------------------------------


def test_salt_idempotent_and_per_identity(provider):
    store = SaltStore(seed=3)
    a1 = get_or_create_salt(store, provider.login("a", "n", 1), provider.registry)
    a2 = get_or_create_salt(store, provider.login("a", "other", 2), provider.registry)
    b = get_or_create_salt(store, provider.login("b", "n", 1), provider.registry)
    assert a1 == a2 and a1 != b and len(a1) == 16


def test_forged_jwt_gets_no_salt(provider):
    store = SaltStore(seed=3)
    forged = MockProvider(DEFAULT_ISS, seed=99).login("victim", "n", 1)
    with pytest.raises(InvalidJwt):
        store.get_or_create(forged, provider.registry)
    assert len(store) == 0


def test_salt_survives_restart(provider, tmp_path):
    path = tmp_path / "salts.json"
    jwt = provider.login("persist", "n", 1)
    first = SaltStore(path, seed=3).get_or_create(jwt, provider.registry)
    # A different seed would mint a different salt, so equality proves the file was read.
    second = SaltStore(path, seed=4).get_or_create(jwt, provider.registry)
    assert first == second


def test_concurrent_get_or_create_is_atomic(provider, tmp_path):
    store = SaltStore(tmp_path / "salts.json", seed=8)
    jwts = [provider.login(f"u{i % 5}", f"n{i}", 1) for i in range(40)]
    results: dict[int, bytes] = {}

    def worker(i):
        results[i] = store.get_or_create(jwts[i], provider.registry)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(40)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(40):
        assert results[i] == results[i % 5]
    assert len(store) == 5
