"""Backend roles: gas sponsor, salt manager and prover, plus a JSON-over-HTTP facade.

Everything here is usable in-process. ``ServiceApp.handle`` maps HTTP-shaped
requests onto the services without touching sockets; ``make_server`` wraps
it in a stdlib threading HTTP server.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from .codec import DecodeError
from .crypto import Keypair, from_hex
from .errors import TransactionRejected
from .execution import (
    Engine,
    GaslessBlock,
    KeySignature,
    SignedTransaction,
    TransactionBlock,
    TransactionEffects,
    command_kind,
    sign_block,
)
from .ledger import AddressOwner, Coin, ObjectRef
from .zklogin import (
    InvalidJwt,
    NonceMismatch,
    ProofMode,
    SaltStore,
    ZkLoginProof,
    encode_proof,
    prove,
)

log = logging.getLogger(__name__)


# --- sponsor ------------------------------------------------------------------


class PolicyDenied(Exception):
    REASONS = ("CommandNotAllowed", "BudgetTooHigh", "RateLimited", "InsufficientReserve")

    def __init__(self, reason: str, detail: str = "") -> None:
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


class SponsorBusy(Exception):
    """The sponsor's gas coin is reserved by another in-flight sponsorship."""


@dataclass(frozen=True)
class SponsorPolicy:
    allowed_commands: frozenset[str] = frozenset({"ClaimLocker"})
    max_gas_budget: int = 50_000_000
    per_address_daily_limit: int = 10
    min_gas_coin_reserve: int = 0

    def __post_init__(self) -> None:
        if min(self.max_gas_budget, self.per_address_daily_limit, self.min_gas_coin_reserve) < 0:
            raise ValueError("policy limits must be non-negative")


@dataclass(frozen=True)
class SponsorLedgerEntry:
    txn_digest: bytes
    gas_net: int
    timestamp_epoch: int
    requester: bytes


@dataclass(frozen=True)
class SponsorGrant:
    block: TransactionBlock
    gas_payment: ObjectRef
    sponsor: bytes
    signature: KeySignature


@dataclass(frozen=True)
class ProfitReport:
    count: int
    total_net: int
    profitable: bool


class SponsorService:
    """Gas station that co-signs blocks it approves.

    One sponsorship may be in flight per gas coin: ``sponsor_transaction``
    reserves the coin and ``settle`` (or ``release``) frees it.
    """

    def __init__(
        self,
        engine: Engine,
        keypair: Keypair,
        gas_coin: bytes,
        policy: SponsorPolicy | None = None,
        *,
        reservation_timeout: float = 5.0,
    ) -> None:
        self.engine = engine
        self.keypair = keypair
        self.gas_coin = gas_coin
        self.policy = policy or SponsorPolicy()
        self.entries: list[SponsorLedgerEntry] = []
        self.reservation_timeout = reservation_timeout
        self._usage: dict[tuple[int, bytes], int] = {}
        self._cond = threading.Condition()
        self._in_flight: bytes | None = None
        self._requesters: dict[bytes, bytes] = {}

    @property
    def address(self) -> bytes:
        return self.keypair.address

    def evaluate(self, request: GaslessBlock) -> str | None:
        """The first policy rule ``request`` breaks, or None if it passes."""
        policy = self.policy
        for cmd in request.commands:
            if command_kind(cmd) not in policy.allowed_commands:
                return "CommandNotAllowed"
        if request.gas_budget > policy.max_gas_budget:
            return "BudgetTooHigh"
        used = self._usage.get((self.engine.state.epoch, request.sender), 0)
        if used >= policy.per_address_daily_limit:
            return "RateLimited"
        coin = self.engine.state.get_object(self.gas_coin)
        if (
            coin is None
            or not isinstance(coin.contents, Coin)
            or coin.owner != AddressOwner(self.address)
            or coin.contents.balance < policy.min_gas_coin_reserve + request.gas_budget
        ):
            return "InsufficientReserve"
        return None

    def sponsor_transaction(self, request: GaslessBlock) -> SponsorGrant:
        with self._cond:
            if not self._cond.wait_for(lambda: self._in_flight is None, timeout=self.reservation_timeout):
                raise SponsorBusy(f"gas coin 0x{self.gas_coin.hex()} is reserved")
            reason = self.evaluate(request)
            if reason is not None:
                raise PolicyDenied(reason)
            coin = self.engine.state.get_object(self.gas_coin)
            gas_ref = ObjectRef(coin.id, coin.version)
            block = request.with_gas(gas_ref, self.address)
            key = (self.engine.state.epoch, request.sender)
            self._usage[key] = self._usage.get(key, 0) + 1
            self._in_flight = block.digest
            self._requesters[block.digest] = request.sender
        return SponsorGrant(block, gas_ref, self.address, sign_block(block, self.keypair))

    def settle(self, digest: bytes, effects: TransactionEffects | None) -> None:
        """Record the outcome of a sponsored block and free the gas coin.

        ``effects`` is None when the block was rejected before execution.
        """
        with self._cond:
            requester = self._requesters.pop(digest, None)
            if requester is None:
                raise KeyError(f"unknown sponsorship 0x{digest.hex()}")
            if effects is not None:
                self.entries.append(
                    SponsorLedgerEntry(digest, effects.gas.net, self.engine.state.epoch, requester)
                )
            if self._in_flight == digest:
                self._in_flight = None
            self._cond.notify_all()

    def release(self, digest: bytes) -> None:
        self.settle(digest, None)

    def submit(self, grant: SponsorGrant, sender_auth) -> TransactionEffects:
        """Execute a granted block with the requester's authenticator and settle it."""
        digest = grant.block.digest
        signed = SignedTransaction(grant.block, {grant.block.sender: sender_auth, grant.sponsor: grant.signature})
        try:
            effects = self.engine.execute(signed)
        except TransactionRejected:
            self.release(digest)
            raise
        self.settle(digest, effects)
        return effects

    def profit_report(self) -> ProfitReport:
        total = sum(e.gas_net for e in self.entries)
        return ProfitReport(count=len(self.entries), total_net=total, profitable=total < 0)


def sponsor_profit_report(service: SponsorService) -> ProfitReport:
    return service.profit_report()


# --- salt and prover ----------------------------------------------------------


@dataclass
class SaltService:
    store: SaltStore
    registry: Callable[[], dict[str, bytes]]
    epoch: Callable[[], int] = lambda: 0

    def salt(self, jwt: str) -> bytes:
        return self.store.get_or_create(jwt, self.registry(), self.epoch())


@dataclass
class ProverService:
    keypair: Keypair
    registry: Callable[[], dict[str, bytes]]
    epoch: Callable[[], int] = lambda: 0

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def prove(
        self,
        jwt: str,
        salt: bytes,
        eph_pk: bytes,
        max_epoch: int,
        randomness: bytes,
        mode: ProofMode | str = ProofMode.ATTESTED,
    ) -> ZkLoginProof:
        return prove(
            jwt,
            salt,
            eph_pk,
            max_epoch,
            randomness,
            mode,
            self.keypair,
            provider_registry=self.registry(),
            current_epoch=self.epoch(),
        )


# --- HTTP facade --------------------------------------------------------------


@dataclass
class ServiceApp:
    salt: SaltService | None = None
    prover: ProverService | None = None
    sponsor: SponsorService | None = None
    routes: dict = field(init=False)

    def __post_init__(self) -> None:
        self.routes = {
            "/v1/salt": self._salt,
            "/v1/prove": self._prove,
            "/v1/sponsor": self._sponsor,
        }

    def handle(self, method: str, path: str, body: bytes) -> tuple[int, dict]:
        route = self.routes.get(path)
        if route is None:
            return HTTPStatus.NOT_FOUND, {"error": "NotFound"}
        if method != "POST":
            return HTTPStatus.METHOD_NOT_ALLOWED, {"error": "MethodNotAllowed"}
        try:
            doc = json.loads(body or b"{}")
            if not isinstance(doc, dict):
                raise ValueError("body must be an object")
        except ValueError:
            return HTTPStatus.BAD_REQUEST, {"error": "BadRequest"}
        try:
            return route(doc)
        except (KeyError, ValueError, TypeError, DecodeError) as exc:
            log.debug("bad request on %s: %s", path, exc)
            return HTTPStatus.BAD_REQUEST, {"error": "BadRequest", "detail": str(exc)}

    def _salt(self, doc: dict) -> tuple[int, dict]:
        if self.salt is None:
            return HTTPStatus.NOT_FOUND, {"error": "NotFound"}
        try:
            salt = self.salt.salt(doc["jwt"])
        except InvalidJwt as exc:
            return HTTPStatus.UNAUTHORIZED, {"error": "InvalidJwt", "detail": str(exc)}
        return HTTPStatus.OK, {"salt": salt.hex()}

    def _prove(self, doc: dict) -> tuple[int, dict]:
        if self.prover is None:
            return HTTPStatus.NOT_FOUND, {"error": "NotFound"}
        try:
            proof = self.prover.prove(
                doc["jwt"],
                from_hex(doc["salt"]),
                from_hex(doc["eph_pk"]),
                int(doc["max_epoch"]),
                from_hex(doc["randomness"]),
                doc.get("mode", "attested"),
            )
        except InvalidJwt as exc:
            return HTTPStatus.UNAUTHORIZED, {"error": "InvalidJwt", "detail": str(exc)}
        except NonceMismatch:
            return HTTPStatus.UNPROCESSABLE_ENTITY, {"error": "NonceMismatch"}
        return HTTPStatus.OK, {"proof": encode_proof(proof).hex()}

    def _sponsor(self, doc: dict) -> tuple[int, dict]:
        if self.sponsor is None:
            return HTTPStatus.NOT_FOUND, {"error": "NotFound"}
        request = GaslessBlock.decode(from_hex(doc["block"]))
        if request.sender != from_hex(doc["sender"]):
            return HTTPStatus.BAD_REQUEST, {"error": "SenderMismatch"}
        try:
            grant = self.sponsor.sponsor_transaction(request)
        except PolicyDenied as exc:
            return HTTPStatus.FORBIDDEN, {"error": exc.reason}
        except SponsorBusy:
            return HTTPStatus.SERVICE_UNAVAILABLE, {"error": "SponsorBusy"}
        return HTTPStatus.OK, {
            "gas_ref": {"id": grant.gas_payment.id.hex(), "version": grant.gas_payment.version},
            "sponsor": grant.sponsor.hex(),
            "signature": grant.signature.signature.hex(),
        }


def make_server(app: ServiceApp, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self) -> None:  # noqa: N802
            length = int(self.headers.get("Content-Length") or 0)
            status, doc = app.handle("POST", self.path, self.rfile.read(length))
            self._reply(status, doc)

        def do_GET(self) -> None:  # noqa: N802
            status, doc = app.handle("GET", self.path, b"")
            self._reply(status, doc)

        def _reply(self, status: int, doc: dict) -> None:
            payload = json.dumps(doc).encode()
            self.send_response(int(status))
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, fmt: str, *args) -> None:
            log.info("%s " + fmt, self.address_string(), *args)

    return ThreadingHTTPServer((host, port), Handler)
