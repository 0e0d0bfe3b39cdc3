"""Transaction blocks, authentication, gas accounting and (parallel) execution."""

from __future__ import annotations

import configparser
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import cached_property
from typing import IO, Iterable, Mapping, Sequence, Union

from . import escrow
from .codec import DecodeError, Reader, Writer
from .crypto import Keypair, derive_key_address, sha3_256, verify
from .errors import (
    CommandFailure,
    ExpiredAuthenticator,
    GasBudgetExceeded,
    InsufficientBalance,
    InsufficientGas,
    InvalidCommand,
    InvalidSignature,
    InvalidTransaction,
    LockerNotFound,
    MissingSignature,
    NotTransferable,
    ObjectNotFound,
    StaleObjectRef,
    TransactionExpired,
    TransactionRejected,
)
from .ledger import (
    AddressOwner,
    Changeset,
    Coin,
    LedgerState,
    Nft,
    ObjectOwner,
    ObjectRef,
    encode_contents,
)
from .zklogin import ZkLoginAuthenticator, verify_zklogin_sig

MAX_COMMANDS = 128


# --- commands -----------------------------------------------------------------


@dataclass(frozen=True)
class TransferObject:
    object: ObjectRef
    recipient: bytes


@dataclass(frozen=True)
class SplitCoin:
    coin: ObjectRef
    amount: int


@dataclass(frozen=True)
class MergeCoins:
    target: ObjectRef
    source: ObjectRef


@dataclass(frozen=True)
class CreateLocker:
    key_hash: bytes
    items: tuple[ObjectRef, ...]


@dataclass(frozen=True)
class ClaimLocker:
    locker: ObjectRef
    key: bytes
    recipient: bytes


Command = Union[TransferObject, SplitCoin, MergeCoins, CreateLocker, ClaimLocker]

COMMAND_KINDS = {
    TransferObject: "TransferObject",
    SplitCoin: "SplitCoin",
    MergeCoins: "MergeCoins",
    CreateLocker: "CreateLocker",
    ClaimLocker: "ClaimLocker",
}


def command_kind(cmd: Command) -> str:
    return COMMAND_KINDS[type(cmd)]


def command_inputs(cmd: Command) -> list[ObjectRef]:
    if isinstance(cmd, TransferObject):
        return [cmd.object]
    if isinstance(cmd, SplitCoin):
        return [cmd.coin]
    if isinstance(cmd, MergeCoins):
        return [cmd.target, cmd.source]
    if isinstance(cmd, CreateLocker):
        return list(cmd.items)
    return [cmd.locker]


def _write_ref(w: Writer, ref: ObjectRef) -> None:
    w.raw(ref.id).u64(ref.version)


def _read_ref(r: Reader) -> ObjectRef:
    return ObjectRef(r.raw(32), r.u64())


def _write_command(w: Writer, cmd: Command) -> None:
    if isinstance(cmd, TransferObject):
        w.u8(0)
        _write_ref(w, cmd.object)
        w.raw(cmd.recipient)
    elif isinstance(cmd, SplitCoin):
        w.u8(1)
        _write_ref(w, cmd.coin)
        w.u64(cmd.amount)
    elif isinstance(cmd, MergeCoins):
        w.u8(2)
        _write_ref(w, cmd.target)
        _write_ref(w, cmd.source)
    elif isinstance(cmd, CreateLocker):
        w.u8(3).raw(cmd.key_hash).u32(len(cmd.items))
        for ref in cmd.items:
            _write_ref(w, ref)
    elif isinstance(cmd, ClaimLocker):
        w.u8(4)
        _write_ref(w, cmd.locker)
        w.blob(cmd.key).raw(cmd.recipient)
    else:
        raise TypeError(f"unknown command {cmd!r}")


def _read_command(r: Reader) -> Command:
    tag = r.u8()
    if tag == 0:
        return TransferObject(_read_ref(r), r.raw(32))
    if tag == 1:
        return SplitCoin(_read_ref(r), r.u64())
    if tag == 2:
        return MergeCoins(_read_ref(r), _read_ref(r))
    if tag == 3:
        key_hash = r.raw(32)
        return CreateLocker(key_hash, tuple(_read_ref(r) for _ in range(r.u32())))
    if tag == 4:
        return ClaimLocker(_read_ref(r), r.blob(), r.raw(32))
    raise DecodeError(f"unknown command tag {tag}")


def _write_commands(w: Writer, commands: Sequence[Command]) -> None:
    w.u32(len(commands))
    for cmd in commands:
        _write_command(w, cmd)


def _read_commands(r: Reader) -> tuple[Command, ...]:
    count = r.u32()
    if count > MAX_COMMANDS:
        raise DecodeError(f"{count} commands exceeds limit")
    return tuple(_read_command(r) for _ in range(count))


def _write_opt_u64(w: Writer, value: int | None) -> None:
    if value is None:
        w.u8(0)
    else:
        w.u8(1).u64(value)


def _read_opt_u64(r: Reader) -> int | None:
    return r.u64() if r.u8() else None


# --- blocks -------------------------------------------------------------------


@dataclass(frozen=True)
class TransactionBlock:
    sender: bytes
    gas_payment: ObjectRef
    gas_budget: int
    commands: tuple[Command, ...]
    sponsor: bytes | None = None
    expiration_epoch: int | None = None

    @property
    def gas_owner(self) -> bytes:
        return self.sponsor if self.sponsor is not None else self.sender

    def encode(self) -> bytes:
        w = Writer().raw(self.sender)
        if self.sponsor is None:
            w.u8(0)
        else:
            w.u8(1).raw(self.sponsor)
        _write_ref(w, self.gas_payment)
        w.u64(self.gas_budget)
        _write_opt_u64(w, self.expiration_epoch)
        _write_commands(w, self.commands)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "TransactionBlock":
        r = Reader(data)
        block = cls._read(r)
        r.finish()
        return block

    @classmethod
    def _read(cls, r: Reader) -> "TransactionBlock":
        sender = r.raw(32)
        sponsor = r.raw(32) if r.u8() else None
        gas = _read_ref(r)
        budget = r.u64()
        expiration = _read_opt_u64(r)
        return cls(sender, gas, budget, _read_commands(r), sponsor, expiration)

    @cached_property
    def digest(self) -> bytes:
        return sha3_256(self.encode())

    def gasless(self) -> "GaslessBlock":
        return GaslessBlock(self.sender, self.gas_budget, self.commands, self.expiration_epoch)


@dataclass(frozen=True)
class GaslessBlock:
    """A block before a sponsor has chosen the gas coin; the sponsor wire format."""

    sender: bytes
    gas_budget: int
    commands: tuple[Command, ...]
    expiration_epoch: int | None = None

    def encode(self) -> bytes:
        w = Writer().raw(self.sender).u64(self.gas_budget)
        _write_opt_u64(w, self.expiration_epoch)
        _write_commands(w, self.commands)
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "GaslessBlock":
        r = Reader(data)
        sender = r.raw(32)
        budget = r.u64()
        expiration = _read_opt_u64(r)
        block = cls(sender, budget, _read_commands(r), expiration)
        r.finish()
        return block

    def with_gas(self, gas_payment: ObjectRef, sponsor: bytes) -> TransactionBlock:
        return build_transaction(
            self.sender, self.commands, gas_payment, self.gas_budget, sponsor, self.expiration_epoch
        )


def build_transaction(
    sender: bytes,
    commands: Iterable[Command],
    gas_payment: ObjectRef,
    gas_budget: int,
    sponsor: bytes | None = None,
    expiration_epoch: int | None = None,
) -> TransactionBlock:
    commands = tuple(commands)
    if not commands:
        raise InvalidTransaction("empty command list")
    if len(commands) > MAX_COMMANDS:
        raise InvalidTransaction(f"{len(commands)} commands exceeds limit of {MAX_COMMANDS}")
    if gas_budget <= 0:
        raise InvalidTransaction("gas budget must be positive")
    for cmd in commands:
        if type(cmd) not in COMMAND_KINDS:
            raise InvalidTransaction(f"unknown command {cmd!r}")
    return TransactionBlock(sender, gas_payment, gas_budget, commands, sponsor, expiration_epoch)


# --- signatures ---------------------------------------------------------------


@dataclass(frozen=True)
class KeySignature:
    public_key: bytes
    signature: bytes


Authenticator = Union[KeySignature, ZkLoginAuthenticator]


def sign_block(block: TransactionBlock, keypair: Keypair) -> KeySignature:
    return KeySignature(keypair.public_key, keypair.sign(block.digest))


@dataclass(frozen=True)
class SignedTransaction:
    block: TransactionBlock
    signatures: Mapping[bytes, Authenticator]

    @property
    def digest(self) -> bytes:
        return self.block.digest

    def encode(self) -> bytes:
        w = Writer().raw(self.block.encode()).u32(len(self.signatures))
        for address in sorted(self.signatures):
            auth = self.signatures[address]
            w.raw(address)
            if isinstance(auth, KeySignature):
                w.u8(0).raw(auth.public_key).raw(auth.signature)
            else:
                w.u8(1).blob(auth.encode())
        return w.getvalue()

    @classmethod
    def decode(cls, data: bytes) -> "SignedTransaction":
        r = Reader(data)
        block = TransactionBlock._read(r)
        signatures: dict[bytes, Authenticator] = {}
        for _ in range(r.u32()):
            address = r.raw(32)
            if r.u8() == 0:
                signatures[address] = KeySignature(r.raw(32), r.raw(64))
            else:
                signatures[address] = ZkLoginAuthenticator.decode(r.blob())
        r.finish()
        return cls(block, signatures)

    def without(self, address: bytes) -> "SignedTransaction":
        return SignedTransaction(self.block, {a: s for a, s in self.signatures.items() if a != address})


def sign_transaction(block: TransactionBlock, *keypairs: Keypair) -> SignedTransaction:
    return SignedTransaction(block, {kp.address: sign_block(block, kp) for kp in keypairs})


# --- gas ----------------------------------------------------------------------


@dataclass(frozen=True)
class GasSchedule:
    computation_price_per_command: int = 100_000
    storage_price_per_byte: int = 7_600
    rebate_fraction: Fraction = Fraction(99, 100)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rebate_fraction", Fraction(self.rebate_fraction))
        if self.computation_price_per_command < 0 or self.storage_price_per_byte < 0:
            raise ValueError("gas prices must be non-negative")
        if not 0 <= self.rebate_fraction <= 1:
            raise ValueError("rebate fraction must lie in [0, 1]")

    @classmethod
    def from_config(cls, source: str | os.PathLike | IO[str]) -> "GasSchedule":
        parser = configparser.ConfigParser()
        if hasattr(source, "read"):
            parser.read_file(source)
        else:
            with open(source, encoding="utf-8") as fh:
                parser.read_file(fh)
        section = parser["gas"]
        return cls(
            computation_price_per_command=section.getint("computation_price_per_command"),
            storage_price_per_byte=section.getint("storage_price_per_byte"),
            rebate_fraction=Fraction(section.get("rebate_fraction")),
        )

    def computation_fee(self, command_count: int) -> int:
        return command_count * self.computation_price_per_command


@dataclass(frozen=True)
class GasSummary:
    computation_fee: int
    storage_fee: int
    storage_rebate: int

    @property
    def net(self) -> int:
        return self.computation_fee + self.storage_fee - self.storage_rebate

    def to_doc(self) -> dict:
        return {
            "computation_fee": str(self.computation_fee),
            "storage_fee": str(self.storage_fee),
            "storage_rebate": str(self.storage_rebate),
            "net": str(self.net),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GasSummary":
        return cls(int(doc["computation_fee"]), int(doc["storage_fee"]), int(doc["storage_rebate"]))


def compute_gas(bytes_written: int, bytes_freed: int, command_count: int, schedule: GasSchedule) -> GasSummary:
    if min(bytes_written, bytes_freed, command_count) < 0:
        raise ValueError("gas inputs must be non-negative")
    rf = schedule.rebate_fraction
    return GasSummary(
        computation_fee=schedule.computation_fee(command_count),
        storage_fee=bytes_written * schedule.storage_price_per_byte,
        storage_rebate=(rf.numerator * bytes_freed * schedule.storage_price_per_byte) // rf.denominator,
    )


# --- effects ------------------------------------------------------------------


@dataclass(frozen=True)
class TransactionEffects:
    digest: bytes
    status: str
    error: str | None
    created: tuple[ObjectRef, ...]
    mutated: tuple[ObjectRef, ...]
    deleted: tuple[ObjectRef, ...]
    gas: GasSummary
    balance_changes: Mapping[bytes, int]
    bytes_written: int = 0
    bytes_freed: int = 0

    @property
    def succeeded(self) -> bool:
        return self.status == "success"

    def to_doc(self) -> dict:
        refs = lambda rs: [["0x" + r.id.hex(), str(r.version)] for r in rs]  # noqa: E731
        return {
            "digest": "0x" + self.digest.hex(),
            "status": self.status,
            "error": self.error,
            "created": refs(self.created),
            "mutated": refs(self.mutated),
            "deleted": refs(self.deleted),
            "gas": self.gas.to_doc(),
            "balance_changes": {"0x" + a.hex(): str(v) for a, v in sorted(self.balance_changes.items())},
            "bytes_written": str(self.bytes_written),
            "bytes_freed": str(self.bytes_freed),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "TransactionEffects":
        refs = lambda rs: tuple(ObjectRef(bytes.fromhex(i[2:]), int(v)) for i, v in rs)  # noqa: E731
        return cls(
            digest=bytes.fromhex(doc["digest"][2:]),
            status=doc["status"],
            error=doc["error"],
            created=refs(doc["created"]),
            mutated=refs(doc["mutated"]),
            deleted=refs(doc["deleted"]),
            gas=GasSummary.from_doc(doc["gas"]),
            balance_changes={bytes.fromhex(a[2:]): int(v) for a, v in doc["balance_changes"].items()},
            bytes_written=int(doc["bytes_written"]),
            bytes_freed=int(doc["bytes_freed"]),
        )


# --- authentication -----------------------------------------------------------


@dataclass
class ZkLoginContext:
    provider_registry: dict[str, bytes] = field(default_factory=dict)
    prover_public_key: bytes | None = None


def required_signers(state: LedgerState, block: TransactionBlock) -> set[bytes]:
    signers = {block.sender, block.gas_owner}
    for ref in [block.gas_payment, *(r for c in block.commands for r in command_inputs(c))]:
        obj = state.get_object(ref.id)
        if obj is None:
            raise ObjectNotFound(ref.id)
        if isinstance(obj.owner, AddressOwner):
            signers.add(obj.owner.address)
    return signers


def check_signature(
    address: bytes, auth: Authenticator, digest: bytes, epoch: int, zk: ZkLoginContext | None
) -> None:
    if isinstance(auth, KeySignature):
        if derive_key_address(auth.public_key) != address or not verify(auth.public_key, digest, auth.signature):
            raise InvalidSignature(address)
        return
    if isinstance(auth, ZkLoginAuthenticator):
        if auth.claimed_address != address:
            raise InvalidSignature(address)
        if epoch > auth.max_epoch:
            raise ExpiredAuthenticator(address)
        if zk is None or not verify_zklogin_sig(auth, digest, epoch, zk.provider_registry, zk.prover_public_key):
            raise InvalidSignature(address)
        return
    raise InvalidSignature(address)


# --- execution ----------------------------------------------------------------


@dataclass
class _Outcome:
    signed: SignedTransaction
    changes: Changeset
    effects: TransactionEffects
    version: int


def _apply_command(changes: Changeset, block: TransactionBlock, cmd: Command) -> None:
    if isinstance(cmd, TransferObject):
        obj = changes.require(cmd.object.id)
        if not isinstance(obj.owner, AddressOwner):
            raise NotTransferable(f"0x{obj.id.hex()} is not address-owned")
        changes.write(replace(obj, owner=AddressOwner(cmd.recipient)))
    elif isinstance(cmd, SplitCoin):
        coin = changes.require(cmd.coin.id)
        if not isinstance(coin.contents, Coin):
            raise InvalidCommand("split of a non-coin")
        if cmd.amount <= 0 or cmd.amount > coin.contents.balance:
            raise InsufficientBalance(f"cannot split {cmd.amount} from {coin.contents.balance}")
        changes.write(replace(coin, contents=Coin(coin.contents.balance - cmd.amount)))
        changes.create(AddressOwner(block.sender), Coin(cmd.amount))
    elif isinstance(cmd, MergeCoins):
        if cmd.target.id == cmd.source.id:
            raise InvalidCommand("cannot merge a coin into itself")
        target = changes.require(cmd.target.id)
        source = changes.require(cmd.source.id)
        if not isinstance(target.contents, Coin) or not isinstance(source.contents, Coin):
            raise InvalidCommand("merge of a non-coin")
        if not isinstance(source.owner, AddressOwner):
            raise NotTransferable("merge source must be address-owned")
        changes.write(replace(target, contents=Coin(target.contents.balance + source.contents.balance)))
        changes.delete(source.id)
    elif isinstance(cmd, CreateLocker):
        escrow.exec_create_locker(changes, block.sender, cmd.key_hash, [r.id for r in cmd.items])
    elif isinstance(cmd, ClaimLocker):
        escrow.exec_claim_locker(changes, cmd.locker.id, cmd.key, cmd.recipient)
    else:
        raise InvalidCommand(f"unknown command {cmd!r}")


def _balance_changes(changes: Changeset) -> dict[bytes, int]:
    deltas: dict[bytes, int] = {}

    def add(obj, sign: int) -> None:
        if isinstance(obj.contents, Coin) and isinstance(obj.owner, AddressOwner):
            addr = obj.owner.address
            deltas[addr] = deltas.get(addr, 0) + sign * obj.contents.balance

    for object_id, before in changes.reads.items():
        add(before, -1)
    for object_id, after in changes.written.items():
        add(after, +1)
    for object_id in changes.reads.keys() - changes.written.keys() - changes.deleted.keys():
        add(changes.reads[object_id], +1)
    return {a: d for a, d in deltas.items() if d}


class Engine:
    """Single-node executor over one ``LedgerState``.

    All state mutations go through ``_commit`` under ``_lock``. ``execute_batch``
    runs mutually disjoint transactions concurrently; its observable result is
    always that of serial execution in submission order.
    """

    def __init__(
        self,
        state: LedgerState | None = None,
        schedule: GasSchedule | None = None,
        *,
        zklogin: ZkLoginContext | None = None,
        log: "TransactionLog | None" = None,
        max_workers: int = 8,
    ) -> None:
        self.state = state if state is not None else LedgerState()
        self.schedule = schedule or GasSchedule()
        self.zklogin = zklogin
        self.log = log
        self.max_workers = max_workers
        self._lock = threading.RLock()
        self._pool: ThreadPoolExecutor | None = None

    # -- system operations --

    def mint_coin(self, recipient: bytes, amount: int) -> bytes:
        return self._mint(recipient, Coin(amount))

    def mint_nft(self, recipient: bytes, name: str, payload: bytes = b"") -> bytes:
        return self._mint(recipient, Nft(name, payload))

    def _mint(self, recipient: bytes, contents) -> bytes:
        with self._lock:
            state = self.state
            seed = b"mint" + recipient + encode_contents(contents) + str(
                (state.total_supply, len(state.objects), len(state.tombstones))
            ).encode()
            changes = Changeset(state, sha3_256(seed))
            obj = changes.create(AddressOwner(recipient), contents)
            # Minted objects prepay their storage so later rebates stay funded.
            deposit = obj.storage_size * self.schedule.storage_price_per_byte
            amount = contents.balance if isinstance(contents, Coin) else 0
            state.apply(changes, 1)
            state.storage_fund += deposit
            state.total_supply += amount + deposit
            if self.log is not None:
                self.log.append_mint(recipient, contents)
            return obj.id

    def advance_epoch(self) -> int:
        with self._lock:
            self.state.epoch += 1
            if self.log is not None:
                self.log.append_epoch()
            return self.state.epoch

    # -- transactions --

    def execute(self, signed: SignedTransaction) -> TransactionEffects:
        """Run one transaction. Raises ``TransactionRejected`` when nothing was applied."""
        with self._lock:
            outcome = self._prepare(self.state, signed)
            self._commit(outcome)
            return outcome.effects

    def execute_batch(
        self, txns: Sequence[SignedTransaction], parallel: bool = True
    ) -> list[TransactionEffects | TransactionRejected]:
        if not parallel:
            return self.execute_serial(txns)
        with self._lock:
            results: list[TransactionEffects | TransactionRejected | None] = [None] * len(txns)
            for wave in self.schedule_waves(txns):
                if len(wave) == 1:
                    prepared = [self._try_prepare(txns[wave[0]])]
                else:
                    pool = self._executor()
                    prepared = list(pool.map(lambda i: self._try_prepare(txns[i]), wave))
                for index, outcome in zip(wave, prepared):
                    if isinstance(outcome, TransactionRejected):
                        results[index] = outcome
                    else:
                        self._commit(outcome)
                        results[index] = outcome.effects
            return results  # type: ignore[return-value]

    def execute_serial(self, txns: Sequence[SignedTransaction]) -> list[TransactionEffects | TransactionRejected]:
        results: list[TransactionEffects | TransactionRejected] = []
        with self._lock:
            for signed in txns:
                try:
                    results.append(self.execute(signed))
                except TransactionRejected as exc:
                    results.append(exc)
        return results

    def schedule_waves(self, txns: Sequence[SignedTransaction]) -> list[list[int]]:
        """Group transaction indices into waves of pairwise-disjoint transactions.

        A transaction lands one wave after the last earlier transaction it
        conflicts with. Inputs that are absent right now (created inside the
        batch, or bogus) make the transaction a fence ordered after everything
        before it and before everything after it.
        """
        levels: list[int] = []
        key_owner: dict[bytes, int] = {}
        fence_level = -1
        top = -1
        for index, signed in enumerate(txns):
            keys = self._conflict_keys(signed)
            if keys is None:
                level = top + 1
                fence_level = level
            else:
                level = max([fence_level + 1] + [key_owner[k] + 1 for k in keys if k in key_owner])
                for k in keys:
                    key_owner[k] = level
            levels.append(level)
            top = max(top, level)
        waves: list[list[int]] = [[] for _ in range(top + 1)]
        for index, level in enumerate(levels):
            waves[level].append(index)
        return [w for w in waves if w]

    def _conflict_keys(self, signed: SignedTransaction) -> set[bytes] | None:
        block = signed.block
        keys: set[bytes] = set()
        for ref in [block.gas_payment, *(r for c in block.commands for r in command_inputs(c))]:
            obj = self.state.objects.get(ref.id)
            if obj is None:
                return None
            keys.add(ref.id)
            hops = 0
            while isinstance(obj.owner, ObjectOwner):
                keys.add(obj.owner.parent)
                obj = self.state.objects.get(obj.owner.parent)
                hops += 1
                if obj is None or hops > 64:
                    return None
        return keys

    def _executor(self) -> ThreadPoolExecutor:
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.max_workers, thread_name_prefix="exec")
        return self._pool

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def _try_prepare(self, signed: SignedTransaction) -> "_Outcome | TransactionRejected":
        try:
            return self._prepare(self.state, signed)
        except TransactionRejected as exc:
            return exc

    def _prepare(self, state: LedgerState, signed: SignedTransaction) -> _Outcome:
        """Validate and run ``signed`` against ``state`` without mutating it."""
        block = signed.block
        if not block.commands or len(block.commands) > MAX_COMMANDS or block.gas_budget <= 0:
            raise InvalidTransaction("structurally invalid block")
        if block.expiration_epoch is not None and block.expiration_epoch < state.epoch:
            raise TransactionExpired(f"expired at epoch {block.expiration_epoch}")
        digest = block.digest
        changes = Changeset(state, digest)

        command_refs = [r for c in block.commands for r in command_inputs(c)]
        if any(r.id == block.gas_payment.id for r in command_refs):
            raise InvalidTransaction("gas coin may not be used by commands")
        locker_ids = {c.locker.id for c in block.commands if isinstance(c, ClaimLocker)}
        signers = {block.sender, block.gas_owner}
        for ref in [block.gas_payment, *command_refs]:
            obj = changes.get(ref.id)
            if obj is None:
                if ref.id in locker_ids:
                    raise LockerNotFound(ref.id)
                if ref.id in state.tombstones:
                    raise StaleObjectRef(ref.id, ref.version, state.tombstones[ref.id])
                raise ObjectNotFound(ref.id)
            if obj.version != ref.version:
                raise StaleObjectRef(ref.id, ref.version, obj.version)
            if isinstance(obj.owner, ObjectOwner):
                raise InvalidTransaction(f"0x{ref.id.hex()} is owned by another object")
            if isinstance(obj.owner, AddressOwner):
                signers.add(obj.owner.address)

        gas_coin = changes.get(block.gas_payment.id)
        if not isinstance(gas_coin.contents, Coin):
            raise InvalidTransaction("gas payment is not a coin")
        if gas_coin.owner != AddressOwner(block.gas_owner):
            raise InvalidTransaction("gas coin is not owned by the gas payer")

        for address in sorted(signers):
            auth = signed.signatures.get(address)
            if auth is None:
                raise MissingSignature(address)
            check_signature(address, auth, digest, state.epoch, self.zklogin)

        computation_fee = self.schedule.computation_fee(len(block.commands))
        if block.gas_budget < computation_fee:
            raise InsufficientGas(f"budget {block.gas_budget} below computation fee {computation_fee}")
        if gas_coin.contents.balance < block.gas_budget:
            raise InsufficientGas(f"gas coin holds {gas_coin.contents.balance} < budget {block.gas_budget}")

        error: str | None = None
        try:
            for cmd in block.commands:
                _apply_command(changes, block, cmd)
            gas = compute_gas(changes.bytes_written(), changes.bytes_freed(), len(block.commands), self.schedule)
            if gas.net > block.gas_budget:
                raise GasBudgetExceeded(f"net {gas.net} > budget {block.gas_budget}")
        except CommandFailure as exc:
            error = str(exc)
            # Roll back every command; only the gas coin is charged.
            changes = Changeset(state, digest)
            for object_id in (block.gas_payment.id, *(r.id for r in command_refs)):
                changes.get(object_id)
            gas = GasSummary(computation_fee, 0, 0)

        version = changes.lamport_version()
        gas_coin = changes.get(block.gas_payment.id)
        changes.write(replace(gas_coin, contents=Coin(gas_coin.contents.balance - gas.net)))
        stamp = lambda ids: tuple(ObjectRef(i, version) for i in sorted(ids))  # noqa: E731
        effects = TransactionEffects(
            digest=digest,
            status="success" if error is None else "failure",
            error=error,
            created=stamp(changes.created),
            mutated=stamp(changes.mutated),
            deleted=stamp(changes.deleted),
            gas=gas,
            balance_changes=_balance_changes(changes),
            bytes_written=changes.bytes_written() if error is None else 0,
            bytes_freed=changes.bytes_freed() if error is None else 0,
        )
        return _Outcome(signed, changes, effects, version)

    def _commit(self, outcome: _Outcome) -> None:
        state = self.state
        state.apply(outcome.changes, outcome.version)
        state.fee_sink += outcome.effects.gas.computation_fee
        state.storage_fund += outcome.effects.gas.storage_fee - outcome.effects.gas.storage_rebate
        if self.log is not None:
            self.log.append_transaction(outcome.signed, outcome.effects)


# --- transaction log ----------------------------------------------------------


class TransactionLog:
    """Append-only JSON-lines log of every state change after genesis."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = os.fspath(path)

    def _append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(record, separators=(",", ":"), sort_keys=True) + "\n")

    def append_transaction(self, signed: SignedTransaction, effects: TransactionEffects) -> None:
        self._append({"kind": "txn", "signed": signed.encode().hex(), "effects": effects.to_doc()})

    def append_mint(self, recipient: bytes, contents) -> None:
        if isinstance(contents, Coin):
            self._append({"kind": "mint_coin", "recipient": "0x" + recipient.hex(), "amount": str(contents.balance)})
        else:
            self._append(
                {
                    "kind": "mint_nft",
                    "recipient": "0x" + recipient.hex(),
                    "name": contents.name,
                    "payload": contents.payload.hex(),
                }
            )

    def append_epoch(self) -> None:
        self._append({"kind": "epoch"})

    def records(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


class ReplayMismatch(Exception):
    pass


def replay_log(
    genesis: LedgerState,
    records: Iterable[dict],
    schedule: GasSchedule,
    zklogin: ZkLoginContext | None = None,
) -> LedgerState:
    """Re-apply a transaction log from ``genesis``; effects must match exactly."""
    engine = Engine(genesis.copy(), schedule, zklogin=zklogin)
    for n, record in enumerate(records, start=1):
        kind = record["kind"]
        if kind == "mint_coin":
            engine.mint_coin(bytes.fromhex(record["recipient"][2:]), int(record["amount"]))
        elif kind == "mint_nft":
            engine.mint_nft(bytes.fromhex(record["recipient"][2:]), record["name"], bytes.fromhex(record["payload"]))
        elif kind == "epoch":
            engine.advance_epoch()
        elif kind == "txn":
            signed = SignedTransaction.decode(bytes.fromhex(record["signed"]))
            try:
                effects = engine.execute(signed)
            except TransactionRejected as exc:
                raise ReplayMismatch(f"record {n}: rejected on replay: {exc}") from exc
            if effects.to_doc() != record["effects"]:
                raise ReplayMismatch(f"record {n}: effects differ on replay")
        else:
            raise ReplayMismatch(f"record {n}: unknown kind {kind!r}")
    return engine.state

