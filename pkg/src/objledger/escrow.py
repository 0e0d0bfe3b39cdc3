"""Hash-locked lockers: deposit items under sha3(key), release them to whoever shows the key."""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass

from .codec import be32
from .crypto import sha3_256
from .errors import EmptyLocker, InvalidCommand, LockerNotFound, NotOwner, TooManyItems, WrongKey
from .ledger import SHARED, AddressOwner, Changeset, Locker, ObjectRef, attach_dynamic_field, detach_dynamic_field

MIN_KEY_LEN = 16
MAX_KEY_LEN = 64
MAX_ITEMS = 32
PAYLOAD_PREFIX = "buckyou:v1:"


@dataclass(frozen=True)
class LockerSpec:
    key: bytes
    items: tuple[ObjectRef, ...]

    def __post_init__(self) -> None:
        if not MIN_KEY_LEN <= len(self.key) <= MAX_KEY_LEN:
            raise ValueError(f"locker key must be {MIN_KEY_LEN}-{MAX_KEY_LEN} bytes, got {len(self.key)}")

    @property
    def key_hash(self) -> bytes:
        return sha3_256(self.key)


def item_field_name(index: int) -> bytes:
    return be32(index)


def exec_create_locker(changes: Changeset, sender: bytes, key_hash: bytes, items: list[bytes]) -> bytes:
    if not items:
        raise EmptyLocker()
    if len(items) > MAX_ITEMS:
        raise TooManyItems(f"{len(items)} > {MAX_ITEMS}")
    if len(key_hash) != 32:
        raise InvalidCommand("key hash must be 32 bytes")
    if len(set(items)) != len(items):
        raise InvalidCommand("duplicate item")
    owner = AddressOwner(sender)
    for item_id in items:
        if changes.require(item_id).owner != owner:
            raise NotOwner(f"0x{item_id.hex()}")
    locker = changes.create(SHARED, Locker(key_hash=key_hash, item_count=0))
    for index, item_id in enumerate(items):
        attach_dynamic_field(changes, locker.id, item_field_name(index), item_id)
    return locker.id


def exec_claim_locker(changes: Changeset, locker_id: bytes, key: bytes, recipient: bytes) -> list[bytes]:
    """Release every item to ``recipient`` and delete the locker with its fields."""
    locker = changes.get(locker_id)
    if locker is None:
        raise LockerNotFound(locker_id)
    if not isinstance(locker.contents, Locker):
        raise InvalidCommand(f"0x{locker_id.hex()} is not a locker")
    if sha3_256(key) != locker.contents.key_hash:
        raise WrongKey()
    released = [
        detach_dynamic_field(changes, locker_id, name, recipient)
        for name in sorted(changes.fields_of(locker_id))
    ]
    changes.delete(locker_id)
    return released


# --- claim payload (QR content) ----------------------------------------------


class PayloadError(ValueError):
    code = "PayloadError"


class BadPrefix(PayloadError):
    code = "BadPrefix"


class BadEncoding(PayloadError):
    code = "BadEncoding"


class MissingField(PayloadError):
    code = "MissingField"


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _b64url_decode(text: str) -> bytes:
    padded = text + "=" * (-len(text) % 4)
    return base64.urlsafe_b64decode(padded.encode("ascii"))


@dataclass(frozen=True)
class ClaimPayload:
    locker_id: bytes
    key: bytes


def encode_claim_payload(locker_id: bytes, key: bytes) -> str:
    if len(locker_id) != 32:
        raise ValueError("locker id must be 32 bytes")
    doc = {"key": _b64url(key), "locker_id": "0x" + locker_id.hex()}
    body = json.dumps(doc, separators=(",", ":"), sort_keys=True).encode("ascii")
    return PAYLOAD_PREFIX + _b64url(body)


def decode_claim_payload(text: str) -> ClaimPayload:
    if not text.startswith(PAYLOAD_PREFIX):
        raise BadPrefix(f"payload must start with {PAYLOAD_PREFIX!r}")
    body = text[len(PAYLOAD_PREFIX) :]
    try:
        doc = json.loads(_b64url_decode(body))
    except (binascii.Error, ValueError, UnicodeDecodeError) as exc:
        raise BadEncoding(str(exc)) from exc
    if not isinstance(doc, dict):
        raise BadEncoding("payload document must be an object")
    for name in ("locker_id", "key"):
        if name not in doc:
            raise MissingField(name)
    try:
        locker_hex = doc["locker_id"]
        locker_id = bytes.fromhex(locker_hex[2:] if locker_hex.startswith("0x") else locker_hex)
        key = _b64url_decode(doc["key"])
    except (binascii.Error, ValueError, TypeError, AttributeError) as exc:
        raise BadEncoding(str(exc)) from exc
    if len(locker_id) != 32:
        raise BadEncoding("locker id must be 32 bytes")
    return ClaimPayload(locker_id=locker_id, key=key)


def locked_item_ids(changes_or_state, locker_id: bytes) -> list[bytes]:
    """Ids of the objects currently parked in a locker, in field-name order."""
    fields = changes_or_state.fields_of(locker_id)
    getter = getattr(changes_or_state, "get_object", None) or changes_or_state.get
    return [getter(fields[name]).contents.value_object for name in sorted(fields)]

