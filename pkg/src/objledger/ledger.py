"""Versioned object store with dynamic fields and canonical snapshots."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Union

from .codec import Writer, be64
from .crypto import from_hex, sha3_256
from .errors import (
    DuplicateField,
    InvalidCommand,
    ObjectMissing,
    SnapshotError,
    UnknownField,
)

MIST_PER_SUI = 10**9
# id (32) + version (8) + owner overhead; charged on every object regardless of contents.
ENVELOPE_BYTES = 68


# --- ownership ----------------------------------------------------------------


@dataclass(frozen=True)
class AddressOwner:
    address: bytes


@dataclass(frozen=True)
class ObjectOwner:
    parent: bytes


@dataclass(frozen=True)
class Shared:
    pass


@dataclass(frozen=True)
class Immutable:
    pass


SHARED = Shared()
IMMUTABLE = Immutable()

Ownership = Union[AddressOwner, ObjectOwner, Shared, Immutable]


# --- contents -----------------------------------------------------------------


@dataclass(frozen=True)
class Coin:
    balance: int

    def __post_init__(self) -> None:
        if not 0 <= self.balance < 2**64:
            raise ValueError(f"coin balance out of range: {self.balance}")


@dataclass(frozen=True)
class Locker:
    key_hash: bytes
    item_count: int = 0


@dataclass(frozen=True)
class Nft:
    name: str
    payload: bytes = b""


@dataclass(frozen=True)
class DynamicField:
    parent: bytes
    name: bytes
    value_object: bytes


Contents = Union[Coin, Locker, Nft, DynamicField]


def encode_contents(contents: Contents) -> bytes:
    w = Writer()
    if isinstance(contents, Coin):
        w.u8(0).u64(contents.balance)
    elif isinstance(contents, Locker):
        w.u8(1).raw(contents.key_hash).u64(contents.item_count)
    elif isinstance(contents, Nft):
        w.u8(2).text(contents.name).blob(contents.payload)
    elif isinstance(contents, DynamicField):
        w.u8(3).raw(contents.parent).blob(contents.name).raw(contents.value_object)
    else:
        raise TypeError(f"unknown contents {contents!r}")
    return w.getvalue()


@dataclass(frozen=True)
class Object:
    id: bytes
    version: int
    owner: Ownership
    contents: Contents

    @cached_property
    def storage_size(self) -> int:
        return ENVELOPE_BYTES + len(encode_contents(self.contents))


@dataclass(frozen=True)
class ObjectRef:
    id: bytes
    version: int

    def __repr__(self) -> str:
        return f"ObjectRef(0x{self.id.hex()[:8]}.., v{self.version})"


def object_ref(obj: Object) -> ObjectRef:
    return ObjectRef(obj.id, obj.version)


def derive_object_id(txn_digest: bytes, counter: int) -> bytes:
    return sha3_256(txn_digest + be64(counter))


# --- state --------------------------------------------------------------------


@dataclass
class LedgerState:
    objects: dict[bytes, Object] = field(default_factory=dict)
    tombstones: dict[bytes, int] = field(default_factory=dict)
    epoch: int = 0
    storage_fund: int = 0
    fee_sink: int = 0
    # Every MIST ever minted, including storage deposits made on behalf of minted objects.
    total_supply: int = 0
    # parent id -> field name -> dynamic field object id; derived, rebuilt on load
    children: dict[bytes, dict[bytes, bytes]] = field(default_factory=dict, compare=False, repr=False)

    def get_object(self, object_id: bytes) -> Object | None:
        return self.objects.get(object_id)

    def fields_of(self, parent: bytes) -> dict[bytes, bytes]:
        return dict(self.children.get(parent, {}))

    def copy(self) -> "LedgerState":
        return LedgerState(
            objects=dict(self.objects),
            tombstones=dict(self.tombstones),
            epoch=self.epoch,
            storage_fund=self.storage_fund,
            fee_sink=self.fee_sink,
            total_supply=self.total_supply,
            children={p: dict(f) for p, f in self.children.items()},
        )

    def owned_by(self, address: bytes) -> Iterator[Object]:
        target = AddressOwner(address)
        for obj in self.objects.values():
            if obj.owner == target:
                yield obj

    def total_mist(self) -> int:
        """Coin balances plus both fee pools; equals ``total_supply`` at all times."""
        coins = sum(o.contents.balance for o in self.objects.values() if isinstance(o.contents, Coin))
        return coins + self.storage_fund + self.fee_sink

    def rebuild_index(self) -> None:
        self.children = {}
        for obj in self.objects.values():
            if isinstance(obj.contents, DynamicField):
                self.children.setdefault(obj.contents.parent, {})[obj.contents.name] = obj.id

    def apply(self, changes: "Changeset", version: int) -> None:
        for object_id, obj in changes.written.items():
            self.objects[object_id] = replace(obj, version=version)
            if object_id in changes.created and isinstance(obj.contents, DynamicField):
                self.children.setdefault(obj.contents.parent, {})[obj.contents.name] = object_id
        for object_id, obj in changes.deleted.items():
            del self.objects[object_id]
            self.tombstones[object_id] = version
            if isinstance(obj.contents, DynamicField):
                siblings = self.children.get(obj.contents.parent)
                if siblings is not None:
                    siblings.pop(obj.contents.name, None)
                    if not siblings:
                        del self.children[obj.contents.parent]


def get_object(state: LedgerState, object_id: bytes) -> Object | None:
    return state.get_object(object_id)


class Changeset:
    """Buffered writes of one transaction over a read-only ``LedgerState``.

    Objects keep their pre-transaction version until ``LedgerState.apply``
    stamps every written and deleted object with one common new version.
    """

    def __init__(self, state: LedgerState, txn_digest: bytes) -> None:
        self.state = state
        self.txn_digest = txn_digest
        self.reads: dict[bytes, Object] = {}
        self.written: dict[bytes, Object] = {}
        self.created: set[bytes] = set()
        self.deleted: dict[bytes, Object] = {}
        self._counter = 0
        self._field_adds: dict[bytes, dict[bytes, bytes]] = {}
        self._field_drops: set[bytes] = set()

    def get(self, object_id: bytes) -> Object | None:
        if object_id in self.deleted:
            return None
        obj = self.written.get(object_id)
        if obj is not None:
            return obj
        obj = self.state.objects.get(object_id)
        if obj is not None:
            self.reads[object_id] = obj
        return obj

    def require(self, object_id: bytes) -> Object:
        obj = self.get(object_id)
        if obj is None:
            raise ObjectMissing(f"0x{object_id.hex()}")
        return obj

    def create(self, owner: Ownership, contents: Contents) -> Object:
        object_id = derive_object_id(self.txn_digest, self._counter)
        self._counter += 1
        obj = Object(object_id, 0, owner, contents)
        self.written[object_id] = obj
        self.created.add(object_id)
        if isinstance(contents, DynamicField):
            self._field_adds.setdefault(contents.parent, {})[contents.name] = object_id
        return obj

    def write(self, obj: Object) -> None:
        if obj.id in self.deleted:
            raise InvalidCommand(f"write to deleted object 0x{obj.id.hex()}")
        self.get(obj.id)
        self.written[obj.id] = obj

    def delete(self, object_id: bytes) -> Object:
        obj = self.require(object_id)
        self.written.pop(object_id, None)
        if isinstance(obj.contents, DynamicField):
            self._field_drops.add(object_id)
            adds = self._field_adds.get(obj.contents.parent)
            if adds is not None:
                adds.pop(obj.contents.name, None)
        if object_id in self.created:
            self.created.discard(object_id)
        else:
            self.deleted[object_id] = self.reads.get(object_id, obj)
        return obj

    def fields_of(self, parent: bytes) -> dict[bytes, bytes]:
        names = {n: i for n, i in self.state.children.get(parent, {}).items() if i not in self._field_drops}
        names.update(self._field_adds.get(parent, {}))
        return names

    @property
    def mutated(self) -> list[bytes]:
        return [i for i in self.written if i not in self.created]

    def bytes_written(self) -> int:
        """Bytes newly occupied: created objects in full, mutated objects by growth only."""
        total = 0
        for object_id, obj in self.written.items():
            if object_id in self.created:
                total += obj.storage_size
            else:
                total += max(0, obj.storage_size - self.reads[object_id].storage_size)
        return total

    def bytes_freed(self) -> int:
        return sum(obj.storage_size for obj in self.deleted.values())

    def lamport_version(self) -> int:
        return max((o.version for o in self.reads.values()), default=0) + 1


# --- dynamic fields -----------------------------------------------------------


def attach_dynamic_field(changes: Changeset, parent: bytes, name: bytes, value_object: bytes) -> bytes:
    """Park ``value_object`` under ``parent`` as field ``name``.

    Returns the id of the new DynamicField object. The value becomes owned by
    the field object, the field by the parent.
    """
    parent_obj = changes.require(parent)
    value = changes.require(value_object)
    if not isinstance(value.owner, AddressOwner) and value_object not in changes.created:
        raise InvalidCommand(f"0x{value_object.hex()} is not address-owned")
    if name in changes.fields_of(parent):
        raise DuplicateField(f"field {name.hex()} already on 0x{parent.hex()}")
    field_obj = changes.create(ObjectOwner(parent), DynamicField(parent, bytes(name), value_object))
    changes.write(replace(value, owner=ObjectOwner(field_obj.id)))
    if isinstance(parent_obj.contents, Locker):
        parent_obj = replace(
            parent_obj, contents=replace(parent_obj.contents, item_count=parent_obj.contents.item_count + 1)
        )
    changes.write(parent_obj)
    return field_obj.id


def detach_dynamic_field(changes: Changeset, parent: bytes, name: bytes, recipient: bytes) -> bytes:
    """Delete field ``name`` of ``parent`` and hand its value to ``recipient``."""
    field_id = changes.fields_of(parent).get(name)
    if field_id is None:
        raise UnknownField(f"no field {name.hex()} on 0x{parent.hex()}")
    field_obj = changes.require(field_id)
    value_id = field_obj.contents.value_object
    value = changes.require(value_id)
    changes.write(replace(value, owner=AddressOwner(recipient)))
    changes.delete(field_id)
    parent_obj = changes.require(parent)
    if isinstance(parent_obj.contents, Locker):
        parent_obj = replace(
            parent_obj, contents=replace(parent_obj.contents, item_count=parent_obj.contents.item_count - 1)
        )
    changes.write(parent_obj)
    return value_id


# --- snapshots ----------------------------------------------------------------


def owner_to_doc(owner: Ownership) -> dict:
    if isinstance(owner, AddressOwner):
        return {"kind": "address", "address": "0x" + owner.address.hex()}
    if isinstance(owner, ObjectOwner):
        return {"kind": "object", "parent": "0x" + owner.parent.hex()}
    if isinstance(owner, Shared):
        return {"kind": "shared"}
    return {"kind": "immutable"}


def owner_from_doc(doc: dict) -> Ownership:
    kind = doc["kind"]
    if kind == "address":
        return AddressOwner(_hex32(doc["address"]))
    if kind == "object":
        return ObjectOwner(_hex32(doc["parent"]))
    if kind == "shared":
        return SHARED
    if kind == "immutable":
        return IMMUTABLE
    raise ValueError(f"unknown owner kind {kind!r}")


def contents_to_doc(contents: Contents) -> dict:
    if isinstance(contents, Coin):
        return {"type": "coin", "balance": str(contents.balance)}
    if isinstance(contents, Locker):
        return {"type": "locker", "key_hash": contents.key_hash.hex(), "item_count": str(contents.item_count)}
    if isinstance(contents, Nft):
        return {"type": "nft", "name": contents.name, "payload": contents.payload.hex()}
    return {
        "type": "dynamic_field",
        "parent": "0x" + contents.parent.hex(),
        "name": contents.name.hex(),
        "value_object": "0x" + contents.value_object.hex(),
    }


def contents_from_doc(doc: dict) -> Contents:
    kind = doc["type"]
    if kind == "coin":
        return Coin(_int(doc["balance"]))
    if kind == "locker":
        return Locker(_hex32(doc["key_hash"]), _int(doc["item_count"]))
    if kind == "nft":
        return Nft(doc["name"], bytes.fromhex(doc["payload"]))
    if kind == "dynamic_field":
        return DynamicField(_hex32(doc["parent"]), bytes.fromhex(doc["name"]), _hex32(doc["value_object"]))
    raise ValueError(f"unknown contents type {kind!r}")


def object_to_doc(obj: Object) -> dict:
    return {
        "id": "0x" + obj.id.hex(),
        "version": str(obj.version),
        "owner": owner_to_doc(obj.owner),
        "contents": contents_to_doc(obj.contents),
        "storage_size": str(obj.storage_size),
    }


def object_from_doc(doc: dict) -> Object:
    obj = Object(
        id=_hex32(doc["id"]),
        version=_int(doc["version"]),
        owner=owner_from_doc(doc["owner"]),
        contents=contents_from_doc(doc["contents"]),
    )
    if _int(doc["storage_size"]) != obj.storage_size:
        raise ValueError(f"storage_size {doc['storage_size']} does not match contents ({obj.storage_size})")
    return obj


def _int(text: str) -> int:
    if not isinstance(text, str) or not text.isdigit():
        raise ValueError(f"expected decimal string, got {text!r}")
    return int(text)


def _hex32(text: str) -> bytes:
    data = from_hex(text)
    if len(data) != 32:
        raise ValueError(f"expected 32 bytes of hex, got {len(data)}")
    return data


def _line(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=True)


def dumps_snapshot(state: LedgerState) -> str:
    """Canonical snapshot text: one object or tombstone per line, sorted by id."""
    header = (
        f'{{"epoch":"{state.epoch}","storage_fund":"{state.storage_fund}",'
        f'"fee_sink":"{state.fee_sink}","total_supply":"{state.total_supply}",'
    )
    objs = ",\n".join(_line(object_to_doc(state.objects[i])) for i in sorted(state.objects))
    # Tombstones are plain hex and digits, so they need no JSON escaping.
    tombs = ",\n".join(f'{{"id":"0x{i.hex()}","version":"{state.tombstones[i]}"}}' for i in sorted(state.tombstones))
    lines = [header, '"objects":[']
    if objs:
        lines.append(objs)
    lines += ["],", '"tombstones":[']
    if tombs:
        lines.append(tombs)
    lines.append("]}")
    return "\n".join(lines) + "\n"


def loads_snapshot(text: str) -> LedgerState:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"malformed document: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(doc, dict):
        raise SnapshotError("top level must be an object", line=1)
    for key in ("epoch", "storage_fund", "fee_sink", "total_supply", "objects", "tombstones"):
        if key not in doc:
            raise SnapshotError("missing key", line=1, field=key)
    state = LedgerState()
    for key in ("epoch", "storage_fund", "fee_sink", "total_supply"):
        try:
            setattr(state, key, _int(doc[key]))
        except ValueError as exc:
            raise SnapshotError(str(exc), line=1, field=key) from exc
    # Objects start on line 3; tombstones after the two separator lines.
    first_object_line = 3
    for n, entry in enumerate(doc["objects"]):
        try:
            obj = object_from_doc(entry)
        except (KeyError, ValueError, TypeError) as exc:
            raise SnapshotError(str(exc), line=first_object_line + n, field=f"objects[{n}]") from exc
        state.objects[obj.id] = obj
    first_tomb_line = first_object_line + len(doc["objects"]) + 2
    for n, entry in enumerate(doc["tombstones"]):
        try:
            tomb_id = _hex32(entry["id"])
            state.tombstones[tomb_id] = _int(entry["version"])
        except (KeyError, ValueError, TypeError) as exc:
            raise SnapshotError(str(exc), line=first_tomb_line + n, field=f"tombstones[{n}]") from exc
    overlap = state.objects.keys() & state.tombstones.keys()
    if overlap:
        raise SnapshotError(f"id both live and tombstoned: 0x{min(overlap).hex()}")
    state.rebuild_index()
    return state


def save_snapshot(state: LedgerState, destination: str | os.PathLike) -> None:
    text = dumps_snapshot(state)
    tmp = f"{os.fspath(destination)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, destination)


def load_snapshot(source: str | os.PathLike) -> LedgerState:
    with open(source, encoding="utf-8") as fh:
        return loads_snapshot(fh.read())
