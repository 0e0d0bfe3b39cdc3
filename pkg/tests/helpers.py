"""Shared fixtures for building funded ledgers and random transaction streams."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from objledger.crypto import Keypair, keygen, sha3_256
from objledger.execution import (
    ClaimLocker,
    CreateLocker,
    Engine,
    GasSchedule,
    MergeCoins,
    SignedTransaction,
    SplitCoin,
    TransferObject,
    build_transaction,
    sign_transaction,
)
from objledger.ledger import AddressOwner, Coin, LedgerState, Locker, Nft, ObjectRef, Shared
from objledger.zklogin import (
    ProofMode,
    TransparentProof,
    ZkLoginError,
    derive_zk_address,
    make_nonce,
    new_ephemeral_bundle,
    prove,
    sign_with_zklogin,
    verify_zklogin_sig,
)

SUI = 1_000_000_000


def key_for(label: str) -> Keypair:
    return keygen(sha3_256(f"test-key:{label}".encode()))


def ref_of(state: LedgerState, object_id: bytes) -> ObjectRef:
    return ObjectRef(object_id, state.objects[object_id].version)


@dataclass
class World:
    """A ledger with a handful of funded users and a generator of valid-looking transactions."""

    schedule: GasSchedule = field(default_factory=GasSchedule)
    n_users: int = 4
    coins_per_user: int = 5
    coin_amount: int = 10 * SUI
    nfts_per_user: int = 2
    tag: str = "world"

    def __post_init__(self) -> None:
        self.engine = Engine(schedule=self.schedule)
        self.users = [key_for(f"{self.tag}:{i}") for i in range(self.n_users)]
        self.keys: dict[bytes, bytes] = {}  # key_hash -> key
        for u in self.users:
            for _ in range(self.coins_per_user):
                self.engine.mint_coin(u.address, self.coin_amount)
            for n in range(self.nfts_per_user):
                self.engine.mint_nft(u.address, f"nft-{n}", b"\x00" * n)

    @property
    def state(self) -> LedgerState:
        return self.engine.state

    def owned(self, user: Keypair, avoid=frozenset()) -> list:
        return sorted(
            (o for o in self.state.owned_by(user.address) if o.id not in avoid), key=lambda o: o.id
        )

    def live_lockers(self, avoid=frozenset()) -> list:
        return sorted(
            (
                o
                for o in self.state.objects.values()
                if isinstance(o.contents, Locker) and o.owner == Shared() and o.id not in avoid
            ),
            key=lambda o: o.id,
        )

    def random_txn(self, rng: random.Random, avoid: set | None = None) -> SignedTransaction | None:
        """One random transaction against the current state, or None if nothing fits.

        Every object the transaction reads is added to ``avoid`` so callers can
        build batches of pairwise-disjoint transactions.
        """
        avoid = avoid if avoid is not None else set()
        fee = self.schedule.computation_fee(1)
        users = self.users[:]
        rng.shuffle(users)
        for user in users:
            objs = self.owned(user, avoid)
            coins = [o for o in objs if isinstance(o.contents, Coin)]
            gas_candidates = [c for c in coins if c.contents.balance >= 4 * fee]
            if not gas_candidates:
                continue
            gas = max(gas_candidates, key=lambda o: (o.contents.balance, o.id))
            budget = min(gas.contents.balance, 50_000_000)
            others = [o for o in objs if o.id != gas.id]
            other_coins = [o for o in others if isinstance(o.contents, Coin)]
            options = ["transfer", "split", "merge", "create", "claim", "fail"]
            rng.shuffle(options)
            for kind in options:
                cmd = self._command(kind, rng, user, others, other_coins, avoid)
                if cmd is None:
                    continue
                block = build_transaction(user.address, [cmd], ref_of(self.state, gas.id), budget)
                inputs = {gas.id}
                for attr in ("object", "coin", "target", "source", "locker"):
                    r = getattr(cmd, attr, None)
                    if r is not None:
                        inputs.add(r.id)
                for r in getattr(cmd, "items", ()):
                    inputs.add(r.id)
                avoid.update(inputs)
                return sign_transaction(block, user)
        return None

    def _command(self, kind, rng, user, others, other_coins, avoid):
        st = self.state
        if kind == "transfer" and others:
            obj = rng.choice(others)
            return TransferObject(ref_of(st, obj.id), rng.choice(self.users).address)
        if kind == "split" and other_coins:
            coin = rng.choice(other_coins)
            if coin.contents.balance < 2:
                return None
            return SplitCoin(ref_of(st, coin.id), rng.randint(1, coin.contents.balance - 1))
        if kind == "merge" and len(other_coins) >= 2:
            a, b = rng.sample(other_coins, 2)
            return MergeCoins(ref_of(st, a.id), ref_of(st, b.id))
        if kind == "create" and others:
            items = rng.sample(others, rng.randint(1, min(3, len(others))))
            key = rng.randbytes(rng.randint(16, 32))
            self.keys[sha3_256(key)] = key
            return CreateLocker(sha3_256(key), tuple(ref_of(st, o.id) for o in items))
        if kind == "claim":
            lockers = self.live_lockers(avoid)
            if not lockers:
                return None
            locker = rng.choice(lockers)
            key = self.keys[locker.contents.key_hash]
            if rng.random() < 0.2:
                key = bytes([key[0] ^ 1]) + key[1:]
            return ClaimLocker(ref_of(st, locker.id), key, user.address)
        if kind == "fail" and other_coins:
            # Over-split: a command failure that still charges gas.
            coin = rng.choice(other_coins)
            return SplitCoin(ref_of(st, coin.id), coin.contents.balance + 1)
        return None


def is_nft(obj) -> bool:
    return isinstance(obj.contents, Nft)


def owner_address(obj) -> bytes | None:
    return obj.owner.address if isinstance(obj.owner, AddressOwner) else None


# --- zkLogin differential harness ---------------------------------------------

ZK_MUTATIONS = (
    "honest",
    "wrong_nonce",
    "expired_epoch",
    "tampered_jwt",
    "swapped_salt",
    "claimed_address",
    "other_digest",
)


def _tamper_payload(jwt: str, rng: random.Random) -> str:
    head, payload, sig = jwt.split(".")
    pos = rng.randrange(len(payload))
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
    replacement = rng.choice([c for c in alphabet if c != payload[pos]])
    return f"{head}.{payload[:pos]}{replacement}{payload[pos + 1:]}.{sig}"


def zk_verdicts(rng: random.Random, mutation: str, provider, prover) -> tuple[bool, bool]:
    """Run one login flow under ``mutation``; return (attested verdict, transparent verdict).

    The attested side goes through the prover, which may refuse. The
    transparent side hands the raw witness straight to the verifier.
    """
    epoch = rng.randint(0, 6)
    bundle = new_ephemeral_bundle(rng, epoch, rng.randint(0, 3))
    sub = f"user-{rng.randrange(10**6)}"
    aud = rng.choice(["app1", "app2", "wallet"])
    salt = rng.randbytes(16)
    eph_pk = bundle.keypair.public_key

    nonce = bundle.nonce
    if mutation == "wrong_nonce":
        nonce = make_nonce(keygen(rng.randbytes(32)).public_key, bundle.max_epoch, bundle.jwt_randomness)
    jwt = provider.login(sub, nonce, exp_epoch=bundle.max_epoch, aud=aud)
    if mutation == "tampered_jwt":
        jwt = _tamper_payload(jwt, rng)

    address = derive_zk_address(provider.iss, aud, sub, salt)
    witness_salt = salt
    if mutation == "swapped_salt":
        witness_salt = bytes(b ^ 0xFF for b in salt)
    claimed = address
    if mutation == "claimed_address":
        bit = rng.randrange(256)
        flipped = bytearray(address)
        flipped[bit // 8] ^= 1 << (bit % 8)
        claimed = bytes(flipped)

    sign_digest = rng.randbytes(32)
    check_digest = sign_digest if mutation != "other_digest" else sha3_256(sign_digest)
    check_epoch = rng.randint(epoch, bundle.max_epoch)
    if mutation == "expired_epoch":
        check_epoch = bundle.max_epoch + rng.randint(1, 3)
    registry = provider.registry

    try:
        proof = prove(
            jwt, witness_salt, eph_pk, bundle.max_epoch, bundle.jwt_randomness,
            ProofMode.ATTESTED, prover, provider_registry=registry, current_epoch=epoch,
        )
    except ZkLoginError:
        attested = False
    else:
        auth = sign_with_zklogin(sign_digest, bundle, proof, claimed, provider.iss)
        attested = verify_zklogin_sig(auth, check_digest, check_epoch, registry, prover.public_key)

    witness = TransparentProof(jwt=jwt, salt=witness_salt, jwt_randomness=bundle.jwt_randomness)
    auth = sign_with_zklogin(sign_digest, bundle, witness, claimed, provider.iss)
    transparent = verify_zklogin_sig(auth, check_digest, check_epoch, registry, prover.public_key)
    return attested, transparent


# --- escrow race harness ------------------------------------------------------


def race_claims(trial: int, n_claimers: int = 8, n_items: int = 3, use_threads: bool = False):
    """Lock items, let ``n_claimers`` holders of the key race to claim them.

    Returns (engine, item ids, claimer addresses, per-claimer outcomes,
    signed transactions that succeeded).
    """
    import threading

    from objledger.errors import TransactionRejected
    from objledger.execution import TransactionEffects

    rng = random.Random(trial)
    engine = Engine(schedule=GasSchedule())
    sender = key_for(f"race-sender:{trial}")
    items = [engine.mint_nft(sender.address, f"gift-{i}", rng.randbytes(4)) for i in range(n_items)]
    gas = engine.mint_coin(sender.address, SUI)
    key = rng.randbytes(32)
    fx = engine.execute(
        sign_transaction(
            build_transaction(
                sender.address,
                [CreateLocker(sha3_256(key), tuple(ref_of(engine.state, i) for i in items))],
                ref_of(engine.state, gas),
                10**8,
            ),
            sender,
        )
    )
    locker = next(r.id for r in fx.created if isinstance(engine.state.objects[r.id].contents, Locker))
    claimers = [key_for(f"race-claimer:{trial}:{k}") for k in range(n_claimers)]
    txns = []
    for c in claimers:
        coin = engine.mint_coin(c.address, SUI)
        block = build_transaction(
            c.address, [ClaimLocker(ref_of(engine.state, locker), key, c.address)], ref_of(engine.state, coin), 10**8
        )
        txns.append(sign_transaction(block, c))
    rng.shuffle(txns)

    if use_threads:
        outcomes: list = [None] * len(txns)
        barrier = threading.Barrier(len(txns))

        def run(i):
            barrier.wait()
            try:
                outcomes[i] = engine.execute(txns[i])
            except TransactionRejected as exc:
                outcomes[i] = exc

        threads = [threading.Thread(target=run, args=(i,)) for i in range(len(txns))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    else:
        outcomes = engine.execute_batch(txns)
    winners = [t for t, o in zip(txns, outcomes) if isinstance(o, TransactionEffects) and o.succeeded]
    return engine, items, [c.address for c in claimers], outcomes, winners
