"""End-to-end flows: zkLogin sign-in, sponsored claims and the two-user gift demo."""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources

from .crypto import Keypair, keygen, sha3_256, to_hex
from .escrow import encode_claim_payload
from .execution import (
    ClaimLocker,
    CreateLocker,
    Engine,
    GasSchedule,
    GaslessBlock,
    TransactionEffects,
    TransactionLog,
    TransferObject,
    ZkLoginContext,
    build_transaction,
    sign_transaction,
)
from .ledger import MIST_PER_SUI, Coin, LedgerState, Locker, ObjectRef
from .services import ProverService, SaltService, SponsorPolicy, SponsorService
from .zklogin import (
    DEFAULT_ISS,
    EphemeralKeyBundle,
    MockProvider,
    ProofMode,
    SaltStore,
    ZkLoginAuthenticator,
    ZkLoginProof,
    derive_zk_address,
    new_ephemeral_bundle,
    sign_with_zklogin,
)

DEFAULT_SEED = 42
DEFAULT_BUDGET = 50_000_000


def format_sui(mist: int) -> str:
    """MIST rendered as SUI with exactly four decimals (0.0087, -0.0062)."""
    value = (Decimal(mist) / MIST_PER_SUI).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)
    return f"{value:.4f}"


def parse_sui(text: str) -> int:
    mist = Decimal(text) * MIST_PER_SUI
    if mist != mist.to_integral_value() or mist < 0:
        raise ValueError(f"{text!r} is not a whole number of MIST")
    return int(mist)


def derive_seed(seed: int, label: str) -> bytes:
    return sha3_256(f"objledger:{seed}:{label}".encode())


def named_keypair(seed: int, name: str) -> Keypair:
    return keygen(derive_seed(seed, f"key:{name}"))


def load_config(name_or_path: str) -> GasSchedule:
    """Gas schedule from a file path, or from a shipped config name (``figure2``, ``default``)."""
    if os.path.exists(name_or_path):
        return GasSchedule.from_config(name_or_path)
    stem = os.path.basename(name_or_path).removesuffix(".cfg")
    ref = resources.files("objledger").joinpath("configs").joinpath(f"{stem}.cfg")
    if not ref.is_file():
        raise FileNotFoundError(f"no config file or shipped config named {name_or_path!r}")
    with ref.open("r", encoding="utf-8") as fh:
        return GasSchedule.from_config(fh)


class Stack:
    """One ledger plus the provider, salt manager and prover that serve it."""

    def __init__(
        self,
        schedule: GasSchedule,
        seed: int = DEFAULT_SEED,
        *,
        state: LedgerState | None = None,
        log: TransactionLog | None = None,
        salt_path=None,
    ) -> None:
        self.seed = seed
        self.provider = MockProvider(DEFAULT_ISS, seed=seed)
        prover_key = named_keypair(seed, "prover")
        self.engine = Engine(
            state,
            schedule,
            zklogin=ZkLoginContext(self.provider.registry, prover_key.public_key),
            log=log,
        )
        epoch = lambda: self.engine.state.epoch  # noqa: E731
        self.salts = SaltService(SaltStore(salt_path, seed=seed), lambda: self.provider.registry, epoch)
        self.prover = ProverService(prover_key, lambda: self.provider.registry, epoch)

    def ref(self, object_id: bytes) -> ObjectRef:
        return ObjectRef(object_id, self.engine.state.objects[object_id].version)

    def balance(self, address: bytes) -> int:
        return sum(o.contents.balance for o in self.engine.state.owned_by(address) if isinstance(o.contents, Coin))

    def largest_coin(self, address: bytes, exclude=()) -> bytes | None:
        coins = [
            o
            for o in self.engine.state.owned_by(address)
            if isinstance(o.contents, Coin) and o.id not in exclude
        ]
        if not coins:
            return None
        return max(coins, key=lambda o: (o.contents.balance, o.id)).id

    def sponsor_service(self, keypair: Keypair, policy: SponsorPolicy | None = None) -> SponsorService:
        gas_coin = self.largest_coin(keypair.address)
        if gas_coin is None:
            raise LookupError(f"sponsor {to_hex(keypair.address)} owns no coin")
        return SponsorService(self.engine, keypair, gas_coin, policy)


@dataclass(frozen=True)
class ZkLoginSession:
    bundle: EphemeralKeyBundle
    jwt: str
    salt: bytes
    address: bytes
    proof: ZkLoginProof
    iss: str

    def authenticate(self, txn_digest: bytes) -> ZkLoginAuthenticator:
        return sign_with_zklogin(txn_digest, self.bundle, self.proof, self.address, self.iss)


def zklogin_sign_in(
    stack: Stack,
    sub: str,
    rng: random.Random,
    *,
    aud: str = "app1",
    validity_epochs: int = 2,
    mode: ProofMode = ProofMode.ATTESTED,
) -> ZkLoginSession:
    """Ephemeral key -> OAuth JWT -> salt -> address -> proof."""
    epoch = stack.engine.state.epoch
    bundle = new_ephemeral_bundle(rng, epoch, validity_epochs)
    jwt = stack.provider.login(sub, bundle.nonce, exp_epoch=bundle.max_epoch, aud=aud)
    salt = stack.salts.salt(jwt)
    address = derive_zk_address(stack.provider.iss, aud, sub, salt)
    proof = stack.prover.prove(
        jwt, salt, bundle.keypair.public_key, bundle.max_epoch, bundle.jwt_randomness, mode
    )
    return ZkLoginSession(bundle, jwt, salt, address, proof, stack.provider.iss)


def sponsored_claim(
    sponsor: SponsorService,
    session: ZkLoginSession,
    locker: ObjectRef,
    key: bytes,
    gas_budget: int = DEFAULT_BUDGET,
) -> TransactionEffects:
    request = GaslessBlock(session.address, gas_budget, (ClaimLocker(locker, key, session.address),))
    grant = sponsor.sponsor_transaction(request)
    return sponsor.submit(grant, session.authenticate(grant.block.digest))


# --- report -------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    label: str
    digest: bytes
    status: str
    computation_fee: int
    storage_fee: int
    storage_rebate: int
    net: int

    @classmethod
    def from_effects(cls, label: str, effects: TransactionEffects) -> "ReportRow":
        gas = effects.gas
        return cls(label, effects.digest, effects.status, gas.computation_fee, gas.storage_fee, gas.storage_rebate, gas.net)


@dataclass
class ScenarioReport:
    rows: list[ReportRow] = field(default_factory=list)
    balances: list[tuple[str, bytes, int]] = field(default_factory=list)
    sponsor_before: int = 0
    sponsor_after: int = 0
    claim_payload: str = ""
    schedule: GasSchedule | None = None
    engine: Engine | None = field(default=None, repr=False, compare=False)

    @property
    def sponsor_profit(self) -> int:
        return self.sponsor_after - self.sponsor_before

    def row(self, label: str) -> ReportRow:
        return next(r for r in self.rows if r.label == label)

    def to_doc(self) -> dict:
        return {
            "rows": [
                {
                    "label": r.label,
                    "digest": to_hex(r.digest),
                    "status": r.status,
                    "computation_fee": str(r.computation_fee),
                    "storage_fee": str(r.storage_fee),
                    "storage_rebate": str(r.storage_rebate),
                    "net": str(r.net),
                    "net_sui": format_sui(r.net),
                }
                for r in self.rows
            ],
            "balances": [
                {"name": n, "address": to_hex(a), "mist": str(b), "sui": format_sui(b)} for n, a, b in self.balances
            ],
            "sponsor": {
                "before": str(self.sponsor_before),
                "after": str(self.sponsor_after),
                "profit": str(self.sponsor_profit),
                "profit_sui": format_sui(self.sponsor_profit),
            },
            "claim_payload": self.claim_payload,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), indent=2) + "\n"

    def render_text(self) -> str:
        out = []
        if self.schedule is not None:
            s = self.schedule
            out.append(
                f"gas schedule: {s.computation_price_per_command} MIST/command, "
                f"{s.storage_price_per_byte} MIST/byte, rebate fraction {s.rebate_fraction}"
            )
            out.append("")
        header = f"{'txn':<18}{'status':<9}{'digest':<20}{'computation':>12}{'storage':>10}{'rebate':>10}{'net SUI':>10}"
        out.append(header)
        out.append("-" * len(header))
        for r in self.rows:
            out.append(
                f"{r.label:<18}{r.status:<9}{to_hex(r.digest)[:18]:<20}"
                f"{format_sui(r.computation_fee):>12}{format_sui(r.storage_fee):>10}"
                f"{format_sui(r.storage_rebate):>10}{format_sui(r.net):>10}"
            )
        out.append("")
        out.append("final balances:")
        for name, address, balance in self.balances:
            out.append(f"  {name:<8}{to_hex(address)[:18]:<20}{format_sui(balance):>10} SUI  ({balance} MIST)")
        out.append("")
        verdict = "profit" if self.sponsor_profit > 0 else "loss" if self.sponsor_profit < 0 else "break-even"
        out.append(
            f"sponsor: {format_sui(self.sponsor_before)} -> {format_sui(self.sponsor_after)} SUI "
            f"({verdict} {format_sui(self.sponsor_profit)} SUI, {self.sponsor_profit} MIST)"
        )
        out.append(f"claim payload: {self.claim_payload}")
        return "\n".join(out) + "\n"


def run_figure2(schedule: GasSchedule, seed: int = DEFAULT_SEED, *, log: TransactionLog | None = None) -> ScenarioReport:
    """Replay the gift flow: fund, transfer + lock in parallel, zkLogin, sponsored claim."""
    stack = Stack(schedule, seed, log=log)
    engine = stack.engine
    rng = random.Random(derive_seed(seed, "figure2"))
    user1 = named_keypair(seed, "user1")
    sponsor = named_keypair(seed, "sponsor")

    one_sui = MIST_PER_SUI
    coin1, coin2, coin3 = (engine.mint_coin(user1.address, one_sui) for _ in range(3))
    # Separate gas coins keep transactions A and B free of shared inputs.
    gas_b = engine.mint_coin(user1.address, one_sui)

    key = rng.randbytes(32)
    txn_a = sign_transaction(
        build_transaction(user1.address, [TransferObject(stack.ref(coin1), sponsor.address)], stack.ref(coin2), DEFAULT_BUDGET),
        user1,
    )
    txn_b = sign_transaction(
        build_transaction(user1.address, [CreateLocker(sha3_256(key), (stack.ref(coin3),))], stack.ref(gas_b), DEFAULT_BUDGET),
        user1,
    )
    effects_a, effects_b = engine.execute_batch([txn_a, txn_b])
    for effects in (effects_a, effects_b):
        if not isinstance(effects, TransactionEffects) or not effects.succeeded:
            raise RuntimeError(f"figure-2 setup transaction failed: {effects}")
    locker_id = next(r.id for r in effects_b.created if isinstance(engine.state.objects[r.id].contents, Locker))
    payload = encode_claim_payload(locker_id, key)

    session = zklogin_sign_in(stack, "user2", rng)
    service = stack.sponsor_service(sponsor)
    sponsor_before = stack.balance(sponsor.address)
    effects_c = sponsored_claim(service, session, stack.ref(locker_id), key)
    sponsor_after = stack.balance(sponsor.address)

    report = ScenarioReport(
        rows=[
            ReportRow.from_effects("A transfer", effects_a),
            ReportRow.from_effects("B create-locker", effects_b),
            ReportRow.from_effects("C sponsored-claim", effects_c),
        ],
        balances=[
            ("user1", user1.address, stack.balance(user1.address)),
            ("sponsor", sponsor.address, sponsor_after),
            ("user2", session.address, stack.balance(session.address)),
        ],
        sponsor_before=sponsor_before,
        sponsor_after=sponsor_after,
        claim_payload=payload,
        schedule=schedule,
        engine=engine,
    )
    return report
