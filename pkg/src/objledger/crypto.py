"""Hashing, Ed25519 signatures and address derivation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

KEY_ADDRESS_TAG = b"\x00"
ZKLOGIN_ADDRESS_TAG = b"\x05"

SEED_LEN = 32
PUBLIC_KEY_LEN = 32
SIGNATURE_LEN = 64
DIGEST_LEN = 32


def sha3_256(data: bytes) -> bytes:
    return hashlib.sha3_256(data).digest()


def to_hex(data: bytes) -> str:
    """Lowercase hex with a ``0x`` prefix, the user-facing rendering."""
    return "0x" + data.hex()


def from_hex(text: str) -> bytes:
    if text.startswith(("0x", "0X")):
        text = text[2:]
    return bytes.fromhex(text)


@lru_cache(maxsize=4096)
def _private_key(seed: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(seed)


@dataclass(frozen=True)
class Keypair:
    secret_key: bytes
    public_key: bytes

    def sign(self, message: bytes) -> bytes:
        return sign(self.secret_key, message)

    @property
    def address(self) -> bytes:
        return derive_key_address(self.public_key)

    def __repr__(self) -> str:
        return f"Keypair(public_key={self.public_key.hex()})"


def keygen(seed: bytes) -> Keypair:
    """Deterministic Ed25519 keypair from a 32-byte seed."""
    if len(seed) != SEED_LEN:
        raise ValueError(f"seed must be {SEED_LEN} bytes, got {len(seed)}")
    seed = bytes(seed)
    public = _private_key(seed).public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return Keypair(secret_key=seed, public_key=public)


def sign(secret_key: bytes, message: bytes) -> bytes:
    return _private_key(bytes(secret_key)).sign(bytes(message))


@lru_cache(maxsize=65536)
def _verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature. Never raises."""
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_LEN:
        return False
    if not isinstance(signature, (bytes, bytearray)) or len(signature) != SIGNATURE_LEN:
        return False
    if not isinstance(message, (bytes, bytearray)):
        return False
    return _verify(bytes(public_key), bytes(message), bytes(signature))


def derive_key_address(public_key: bytes) -> bytes:
    if len(public_key) != PUBLIC_KEY_LEN:
        raise ValueError("public key must be 32 bytes")
    return sha3_256(KEY_ADDRESS_TAG + public_key)
