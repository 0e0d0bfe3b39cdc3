"""OAuth-backed login: ephemeral keys, nonce-bound JWTs, salts, addresses and proofs.

The SNARK of the production system is replaced by two proof modes:

``AttestedProof``
    A trusted prover checks the witness (JWT, salt, randomness) and signs a
    digest binding the derived address, ephemeral key, expiry and issuer.
    The verifier never sees the JWT or the salt.

``TransparentProof``
    The witness itself. Verification re-runs every check, so this mode is
    the reference oracle for the attested one. It reveals the identity.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import random
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Union

from .codec import DecodeError, Reader, Writer, be64, lp
from .crypto import ZKLOGIN_ADDRESS_TAG, Keypair, keygen, sha3_256, verify

NONCE_TAG = b"\x4e"
RANDOMNESS_LEN = 16
SALT_LEN = 16
JWT_ALG = "EdDSA"
DEFAULT_ISS = "https://mock.example"

ProviderRegistry = Mapping[str, bytes]


class ZkLoginError(Exception):
    code = "ZkLoginError"


class JwtError(ZkLoginError):
    code = "InvalidJwt"


class UnknownKid(JwtError):
    code = "UnknownKid"


class BadSignature(JwtError):
    code = "BadSignature"


class Expired(JwtError):
    code = "Expired"


class Malformed(JwtError):
    code = "Malformed"


class NonceMismatch(ZkLoginError):
    code = "NonceMismatch"


class InvalidJwt(ZkLoginError):
    code = "InvalidJwt"


class EmptyField(ZkLoginError, ValueError):
    code = "EmptyField"


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    if "=" in text:
        raise ValueError("padding not allowed")
    return base64.urlsafe_b64decode((text + "=" * (-len(text) % 4)).encode("ascii"))


def _doc(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True).encode("utf-8")


# --- ephemeral keys and nonce ---------------------------------------------------


def make_nonce(ephemeral_public_key: bytes, max_epoch: int, jwt_randomness: bytes) -> str:
    if len(jwt_randomness) != RANDOMNESS_LEN:
        raise ValueError(f"jwt randomness must be {RANDOMNESS_LEN} bytes")
    return sha3_256(NONCE_TAG + ephemeral_public_key + be64(max_epoch) + jwt_randomness).hex()


@dataclass(frozen=True)
class EphemeralKeyBundle:
    keypair: Keypair
    max_epoch: int
    jwt_randomness: bytes

    @property
    def nonce(self) -> str:
        return make_nonce(self.keypair.public_key, self.max_epoch, self.jwt_randomness)


def new_ephemeral_bundle(rng: random.Random, current_epoch: int, validity_epochs: int = 2) -> EphemeralKeyBundle:
    return EphemeralKeyBundle(
        keypair=keygen(rng.randbytes(32)),
        max_epoch=current_epoch + validity_epochs,
        jwt_randomness=rng.randbytes(RANDOMNESS_LEN),
    )


# --- JWT ------------------------------------------------------------------------


@dataclass(frozen=True)
class Jwt:
    header: dict
    payload: dict
    signature: bytes
    signing_input: bytes

    @property
    def compact(self) -> str:
        return self.signing_input.decode("ascii") + "." + b64url(self.signature)

    @property
    def iss(self) -> str:
        return self.payload["iss"]

    @property
    def aud(self) -> str:
        return self.payload["aud"]

    @property
    def sub(self) -> str:
        return self.payload["sub"]

    @property
    def nonce(self) -> str:
        return self.payload["nonce"]

    @property
    def exp_epoch(self) -> int:
        return self.payload["exp_epoch"]


def issue_jwt(
    provider_keypair: Keypair, kid: str, iss: str, aud: str, sub: str, nonce: str, exp_epoch: int
) -> str:
    header = {"alg": JWT_ALG, "kid": kid}
    payload = {"aud": aud, "exp_epoch": exp_epoch, "iss": iss, "nonce": nonce, "sub": sub}
    signing_input = f"{b64url(_doc(header))}.{b64url(_doc(payload))}".encode("ascii")
    return signing_input.decode("ascii") + "." + b64url(provider_keypair.sign(signing_input))


_PAYLOAD_FIELDS = {"iss": str, "aud": str, "sub": str, "nonce": str, "exp_epoch": int}


def decode_jwt(compact: str) -> Jwt:
    """Parse without verifying. Raises ``Malformed``."""
    if not isinstance(compact, str):
        raise Malformed("jwt must be text")
    parts = compact.split(".")
    if len(parts) != 3:
        raise Malformed("expected three segments")
    try:
        header = json.loads(b64url_decode(parts[0]))
        payload = json.loads(b64url_decode(parts[1]))
        signature = b64url_decode(parts[2])
        signing_input = f"{parts[0]}.{parts[1]}".encode("ascii")
    except (binascii.Error, ValueError, UnicodeError) as exc:
        raise Malformed(str(exc)) from exc
    if not isinstance(header, dict) or not isinstance(payload, dict):
        raise Malformed("segments must be objects")
    if not isinstance(header.get("kid"), str) or header.get("alg") != JWT_ALG:
        raise Malformed("bad header")
    for name, kind in _PAYLOAD_FIELDS.items():
        value = payload.get(name)
        if not isinstance(value, kind) or isinstance(value, bool):
            raise Malformed(f"claim {name!r} missing or mistyped")
    return Jwt(header=header, payload=payload, signature=signature, signing_input=signing_input)


def verify_jwt(compact: str, provider_registry: ProviderRegistry, current_epoch: int = 0) -> Jwt:
    jwt = decode_jwt(compact)
    public_key = provider_registry.get(jwt.header["kid"])
    if public_key is None:
        raise UnknownKid(jwt.header["kid"])
    if not verify(public_key, jwt.signing_input, jwt.signature):
        raise BadSignature()
    if jwt.exp_epoch < current_epoch:
        raise Expired(f"exp_epoch {jwt.exp_epoch} < epoch {current_epoch}")
    return jwt


class MockProvider:
    """Stand-in OpenID provider with deterministic signing keys per ``kid``."""

    def __init__(self, iss: str = DEFAULT_ISS, seed: int = 0) -> None:
        self.iss = iss
        self._seed = seed
        self._keys: dict[str, Keypair] = {}
        self.active_kid = self.add_key("mock-1")

    def add_key(self, kid: str) -> str:
        self._keys[kid] = keygen(sha3_256(f"provider:{self.iss}:{kid}:{self._seed}".encode()))
        self.active_kid = kid
        return kid

    @property
    def registry(self) -> dict[str, bytes]:
        return {kid: kp.public_key for kid, kp in self._keys.items()}

    def login(self, sub: str, nonce: str, exp_epoch: int, aud: str = "app1") -> str:
        kid = self.active_kid
        return issue_jwt(self._keys[kid], kid, self.iss, aud, sub, nonce, exp_epoch)


# --- addresses ------------------------------------------------------------------


def derive_address_seed(aud: str, sub: str, salt: bytes) -> bytes:
    return sha3_256(lp(aud.encode()) + lp(sub.encode()) + salt)


def derive_zk_address(iss: str, aud: str, sub: str, salt: bytes) -> bytes:
    if not iss or not aud or not sub:
        raise EmptyField("iss, aud and sub must be non-empty")
    return sha3_256(ZKLOGIN_ADDRESS_TAG + lp(iss.encode()) + derive_address_seed(aud, sub, salt))


# --- proofs ---------------------------------------------------------------------


class ProofMode(str, Enum):
    ATTESTED = "attested"
    TRANSPARENT = "transparent"


@dataclass(frozen=True)
class AttestedProof:
    prover_signature: bytes


@dataclass(frozen=True)
class TransparentProof:
    jwt: str
    salt: bytes
    jwt_randomness: bytes


ZkLoginProof = Union[AttestedProof, TransparentProof]


def binding_digest(address: bytes, ephemeral_public_key: bytes, max_epoch: int, iss: str) -> bytes:
    return sha3_256(address + ephemeral_public_key + be64(max_epoch) + iss.encode("utf-8"))


def encode_proof(proof: ZkLoginProof) -> bytes:
    if isinstance(proof, AttestedProof):
        return Writer().u8(0x01).blob(proof.prover_signature).getvalue()
    return Writer().u8(0x02).text(proof.jwt).blob(proof.salt).blob(proof.jwt_randomness).getvalue()


def decode_proof(data: bytes) -> ZkLoginProof:
    r = Reader(data)
    tag = r.u8()
    if tag == 0x01:
        proof: ZkLoginProof = AttestedProof(r.blob())
    elif tag == 0x02:
        proof = TransparentProof(jwt=r.text(), salt=r.blob(), jwt_randomness=r.blob())
    else:
        raise DecodeError(f"unknown proof tag {tag}")
    r.finish()
    return proof


def prove(
    jwt: str,
    salt: bytes,
    ephemeral_public_key: bytes,
    max_epoch: int,
    jwt_randomness: bytes,
    mode: ProofMode | str,
    prover_keypair: Keypair | None = None,
    *,
    provider_registry: ProviderRegistry,
    current_epoch: int = 0,
) -> ZkLoginProof:
    mode = ProofMode(mode)
    try:
        token = verify_jwt(jwt, provider_registry, current_epoch)
    except JwtError as exc:
        raise InvalidJwt(str(exc) or exc.code) from exc
    if len(jwt_randomness) != RANDOMNESS_LEN or token.nonce != make_nonce(
        ephemeral_public_key, max_epoch, jwt_randomness
    ):
        raise NonceMismatch()
    # The ephemeral key must not outlive the token that authorized it.
    if max_epoch > token.exp_epoch:
        raise InvalidJwt(f"max_epoch {max_epoch} beyond token expiry {token.exp_epoch}")
    if mode is ProofMode.TRANSPARENT:
        return TransparentProof(jwt=jwt, salt=bytes(salt), jwt_randomness=bytes(jwt_randomness))
    if prover_keypair is None:
        raise ValueError("attested mode needs a prover keypair")
    address = derive_zk_address(token.iss, token.aud, token.sub, salt)
    digest = binding_digest(address, ephemeral_public_key, max_epoch, token.iss)
    return AttestedProof(prover_keypair.sign(digest))


# --- authenticator --------------------------------------------------------------


@dataclass(frozen=True)
class ZkLoginAuthenticator:
    ephemeral_signature: bytes
    ephemeral_public_key: bytes
    max_epoch: int
    proof: ZkLoginProof
    claimed_address: bytes
    iss: str

    def encode(self) -> bytes:
        return (
            Writer()
            .blob(self.ephemeral_signature)
            .blob(self.ephemeral_public_key)
            .u64(self.max_epoch)
            .blob(encode_proof(self.proof))
            .blob(self.claimed_address)
            .text(self.iss)
            .getvalue()
        )

    @classmethod
    def decode(cls, data: bytes) -> "ZkLoginAuthenticator":
        r = Reader(data)
        auth = cls(
            ephemeral_signature=r.blob(),
            ephemeral_public_key=r.blob(),
            max_epoch=r.u64(),
            proof=decode_proof(r.blob()),
            claimed_address=r.blob(),
            iss=r.text(),
        )
        r.finish()
        return auth


def sign_with_zklogin(
    txn_digest: bytes, bundle: EphemeralKeyBundle, proof: ZkLoginProof, address: bytes, iss: str
) -> ZkLoginAuthenticator:
    return ZkLoginAuthenticator(
        ephemeral_signature=bundle.keypair.sign(txn_digest),
        ephemeral_public_key=bundle.keypair.public_key,
        max_epoch=bundle.max_epoch,
        proof=proof,
        claimed_address=address,
        iss=iss,
    )


def _transparent_ok(
    auth: ZkLoginAuthenticator, proof: TransparentProof, current_epoch: int, registry: ProviderRegistry
) -> bool:
    try:
        token = verify_jwt(proof.jwt, registry, current_epoch)
        if token.iss != auth.iss or auth.max_epoch > token.exp_epoch:
            return False
        if len(proof.jwt_randomness) != RANDOMNESS_LEN:
            return False
        if token.nonce != make_nonce(auth.ephemeral_public_key, auth.max_epoch, proof.jwt_randomness):
            return False
        return derive_zk_address(token.iss, token.aud, token.sub, proof.salt) == auth.claimed_address
    except (JwtError, EmptyField, ValueError):
        return False


def verify_zklogin_sig(
    authenticator: ZkLoginAuthenticator,
    txn_digest: bytes,
    current_epoch: int,
    provider_registry: ProviderRegistry,
    prover_public_key: bytes | None,
) -> bool:
    auth = authenticator
    if not verify(auth.ephemeral_public_key, txn_digest, auth.ephemeral_signature):
        return False
    if current_epoch > auth.max_epoch:
        return False
    if isinstance(auth.proof, AttestedProof):
        if prover_public_key is None:
            return False
        digest = binding_digest(auth.claimed_address, auth.ephemeral_public_key, auth.max_epoch, auth.iss)
        return verify(prover_public_key, digest, auth.proof.prover_signature)
    if isinstance(auth.proof, TransparentProof):
        return _transparent_ok(auth, auth.proof, current_epoch, provider_registry)
    return False


# --- salt store -----------------------------------------------------------------


class SaltStore:
    """Per-identity salts, minted once and persisted as JSON when ``path`` is set."""

    def __init__(self, path: str | os.PathLike | None = None, seed: int = 0) -> None:
        self.path = os.fspath(path) if path is not None else None
        self._seed = seed
        self._lock = threading.Lock()
        self._salts: dict[str, bytes] = {}
        if self.path and os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                self._salts = {k: bytes.fromhex(v) for k, v in json.load(fh).items()}

    @staticmethod
    def _identity(iss: str, aud: str, sub: str) -> str:
        return json.dumps([iss, aud, sub], separators=(",", ":"))

    def _mint(self, identity: str) -> bytes:
        rng = random.Random(sha3_256(f"salt:{self._seed}:{identity}".encode()))
        return rng.randbytes(SALT_LEN)

    def _persist(self) -> None:
        if not self.path:
            return
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({k: v.hex() for k, v in sorted(self._salts.items())}, fh, indent=1)
        os.replace(tmp, self.path)

    def get_or_create(self, jwt: str, provider_registry: ProviderRegistry, current_epoch: int = 0) -> bytes:
        try:
            token = verify_jwt(jwt, provider_registry, current_epoch)
        except JwtError as exc:
            raise InvalidJwt(str(exc) or exc.code) from exc
        identity = self._identity(token.iss, token.aud, token.sub)
        with self._lock:
            salt = self._salts.get(identity)
            if salt is None:
                salt = self._mint(identity)
                self._salts[identity] = salt
                self._persist()
            return salt

    def __len__(self) -> int:
        return len(self._salts)


def get_or_create_salt(
    store: SaltStore, jwt: str, provider_registry: ProviderRegistry, current_epoch: int = 0
) -> bytes:
    return store.get_or_create(jwt, provider_registry, current_epoch)
