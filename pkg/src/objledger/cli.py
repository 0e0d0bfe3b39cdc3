"""Command-line driver: wallet keys, faucet, send/claim gifts, inspection and the demo."""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import shutil
import sys
from dataclasses import dataclass

from .crypto import from_hex, sha3_256, to_hex
from .errors import LedgerError, TransactionRejected
from .escrow import PayloadError, decode_claim_payload, encode_claim_payload, locked_item_ids
from .execution import (
    CreateLocker,
    ReplayMismatch,
    SignedTransaction,
    TransactionEffects,
    TransactionLog,
    build_transaction,
    command_kind,
    replay_log,
    sign_transaction,
)
from .ledger import AddressOwner, Coin, LedgerState, Locker, dumps_snapshot, load_snapshot, save_snapshot
from .scenario import (
    DEFAULT_BUDGET,
    DEFAULT_SEED,
    ReportRow,
    Stack,
    format_sui,
    load_config,
    named_keypair,
    parse_sui,
    run_figure2,
    sponsored_claim,
    zklogin_sign_in,
)
from .services import PolicyDenied, ServiceApp, SponsorBusy, make_server
from .zklogin import ZkLoginError

log = logging.getLogger("objledger")


class CliError(Exception):
    def __init__(self, message: str, stage: str | None = None) -> None:
        self.stage = stage
        super().__init__(message)


@dataclass
class Workspace:
    root: str

    @property
    def genesis_path(self) -> str:
        return os.path.join(self.root, "genesis.json")

    @property
    def snapshot_path(self) -> str:
        return os.path.join(self.root, "snapshot.json")

    @property
    def log_path(self) -> str:
        return os.path.join(self.root, "txlog.jsonl")

    @property
    def config_path(self) -> str:
        return os.path.join(self.root, "gas.cfg")

    @property
    def meta_path(self) -> str:
        return os.path.join(self.root, "workspace.json")

    @property
    def salts_path(self) -> str:
        return os.path.join(self.root, "salts.json")

    def exists(self) -> bool:
        return os.path.exists(self.snapshot_path)

    def init(self, config: str, seed: int, force: bool = False) -> None:
        if os.path.exists(self.root) and os.listdir(self.root):
            if not force:
                raise CliError(f"{self.root} is not empty; pass --force to overwrite")
            shutil.rmtree(self.root)
        os.makedirs(self.root, exist_ok=True)
        load_config(config)  # validate before writing anything
        if os.path.exists(config):
            shutil.copyfile(config, self.config_path)
        else:
            from importlib import resources

            stem = os.path.basename(config).removesuffix(".cfg")
            text = resources.files("objledger").joinpath("configs").joinpath(f"{stem}.cfg").read_text()
            with open(self.config_path, "w", encoding="utf-8") as fh:
                fh.write(text)
        with open(self.meta_path, "w", encoding="utf-8") as fh:
            json.dump({"seed": seed, "keys": []}, fh, indent=1)
        save_snapshot(LedgerState(), self.genesis_path)
        save_snapshot(LedgerState(), self.snapshot_path)
        open(self.log_path, "w").close()

    def _meta(self) -> dict:
        if not self.exists():
            raise CliError(f"no ledger in {self.root}; run `objledger init` first")
        with open(self.meta_path, encoding="utf-8") as fh:
            return json.load(fh)

    @property
    def seed(self) -> int:
        return self._meta()["seed"]

    def key_names(self) -> list[str]:
        return list(self._meta()["keys"])

    def add_key(self, name: str) -> None:
        meta = self._meta()
        if name not in meta["keys"]:
            meta["keys"].append(name)
            with open(self.meta_path, "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=1)

    def keypair(self, name: str):
        if name not in self.key_names():
            raise CliError(f"unknown key {name!r}; run `objledger keygen --name {name}`")
        return named_keypair(self.seed, name)

    def resolve(self, target: str) -> bytes:
        if target in self.key_names():
            return self.keypair(target).address
        try:
            address = from_hex(target)
        except ValueError:
            raise CliError(f"{target!r} is neither a key name nor a hex address") from None
        if len(address) != 32:
            raise CliError(f"address {target!r} is not 32 bytes")
        return address

    def open_stack(self) -> Stack:
        seed = self.seed
        return Stack(
            load_config(self.config_path),
            seed,
            state=load_snapshot(self.snapshot_path),
            log=TransactionLog(self.log_path),
            salt_path=self.salts_path,
        )

    def save(self, stack: Stack) -> None:
        save_snapshot(stack.engine.state, self.snapshot_path)

    def name_of(self, address: bytes) -> str:
        for name in self.key_names():
            if named_keypair(self.seed, name).address == address:
                return name
        return to_hex(address)[:18]


# --- output helpers -----------------------------------------------------------


def _emit(args, doc: dict, text: str) -> None:
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(text)


def _gas_row(label: str, effects: TransactionEffects) -> tuple[dict, str]:
    row = ReportRow.from_effects(label, effects)
    doc = {
        "label": label,
        "digest": to_hex(row.digest),
        "status": row.status,
        "error": effects.error,
        "computation_fee": str(row.computation_fee),
        "storage_fee": str(row.storage_fee),
        "storage_rebate": str(row.storage_rebate),
        "net": str(row.net),
    }
    text = (
        f"{label}: {row.status} digest={to_hex(row.digest)[:18]} "
        f"computation={format_sui(row.computation_fee)} storage={format_sui(row.storage_fee)} "
        f"rebate={format_sui(row.storage_rebate)} net={format_sui(row.net)} SUI"
    )
    if effects.error:
        text += f" ({effects.error})"
    return doc, text


# --- commands -----------------------------------------------------------------


def cmd_init(args) -> int:
    ws = Workspace(args.state_dir)
    ws.init(args.config or "default", args.seed, force=args.force)
    _emit(args, {"state_dir": ws.root, "epoch": 0}, f"initialised empty ledger at {ws.root} (epoch 0)")
    return 0


def cmd_keygen(args) -> int:
    ws = Workspace(args.state_dir)
    ws._meta()
    ws.add_key(args.name)
    kp = ws.keypair(args.name)
    _emit(
        args,
        {"name": args.name, "address": to_hex(kp.address), "public_key": kp.public_key.hex()},
        f"{args.name}: {to_hex(kp.address)}",
    )
    return 0


def cmd_faucet(args) -> int:
    ws = Workspace(args.state_dir)
    stack = ws.open_stack()
    recipient = ws.resolve(args.target)
    if args.nft is not None:
        object_id = stack.engine.mint_nft(recipient, args.nft, bytes.fromhex(args.payload or ""))
        what = f"NFT {args.nft!r}"
    else:
        if args.amount is None:
            raise CliError("faucet needs an AMOUNT (in SUI) or --nft NAME")
        amount = parse_sui(args.amount)
        object_id = stack.engine.mint_coin(recipient, amount)
        what = f"{format_sui(amount)} SUI ({amount} MIST)"
    ws.save(stack)
    _emit(args, {"object_id": to_hex(object_id), "recipient": to_hex(recipient)}, f"minted {what} as {to_hex(object_id)}")
    return 0


def _run_signed(stack: Stack, signed: SignedTransaction, stage: str) -> TransactionEffects:
    try:
        return stack.engine.execute(signed)
    except TransactionRejected as exc:
        raise CliError(str(exc), stage) from exc


def cmd_send(args) -> int:
    ws = Workspace(args.state_dir)
    stack = ws.open_stack()
    sender = ws.keypair(args.sender)
    items = [from_hex(i) for i in args.items]
    for item in items:
        obj = stack.engine.state.get_object(item)
        if obj is None:
            raise CliError(f"ObjectNotFound: {to_hex(item)}", "send")
        if obj.owner != AddressOwner(sender.address):
            raise CliError(f"NotOwner: {to_hex(item)} is not owned by {args.sender}", "send")
    gas = stack.largest_coin(sender.address, exclude=set(items))
    if gas is None:
        raise CliError(f"{args.sender} has no gas coin besides the items", "send")
    if args.key:
        key = from_hex(args.key)
    else:
        # Deterministic per ledger position so repeated sends differ.
        key = sha3_256(f"locker-key:{ws.seed}:{len(stack.engine.log.records())}".encode())
    if not 16 <= len(key) <= 64:
        raise CliError("locker key must be 16-64 bytes", "send")
    block = build_transaction(
        sender.address,
        [CreateLocker(sha3_256(key), tuple(stack.ref(i) for i in items))],
        stack.ref(gas),
        args.budget,
    )
    effects = _run_signed(stack, sign_transaction(block, sender), "execute")
    ws.save(stack)
    row_doc, row_text = _gas_row("send", effects)
    if not effects.succeeded:
        _emit(args, {"gas": row_doc}, row_text)
        raise CliError(effects.error or "failure", "execute")
    locker = next(r.id for r in effects.created if isinstance(stack.engine.state.objects[r.id].contents, Locker))
    payload = encode_claim_payload(locker, key)
    text = f"{row_text}\nlocker: {to_hex(locker)}\nclaim payload: {payload}"
    if args.qr_ascii:
        width = min(len(payload), 60) + 4
        text += "\n" + "\n".join(["#" * width, "#" + " [QR placeholder: scan payload] ".center(width - 2) + "#", "#" * width])
    _emit(args, {"gas": row_doc, "locker": to_hex(locker), "payload": payload}, text)
    return 0


def cmd_claim(args) -> int:
    if args.login != "google-mock":
        raise CliError(f"unsupported login provider {args.login!r}", "login")
    ws = Workspace(args.state_dir)
    try:
        payload = decode_claim_payload(args.payload)
    except PayloadError as exc:
        raise CliError(f"{exc.code}: {exc}", "decode") from exc
    stack = ws.open_stack()
    rng = random.Random(sha3_256(f"claim:{ws.seed}:{args.sub}:{len(stack.engine.log.records())}".encode()))
    try:
        session = zklogin_sign_in(stack, args.sub, rng)
    except ZkLoginError as exc:
        raise CliError(f"{exc.code}: {exc}", "login") from exc
    locker = stack.engine.state.get_object(payload.locker_id)
    if locker is None:
        raise CliError(f"LockerNotFound: {to_hex(payload.locker_id)}", "execute")
    items = locked_item_ids(stack.engine.state, payload.locker_id)
    try:
        service = stack.sponsor_service(ws.keypair(args.sponsor))
        effects = sponsored_claim(service, session, stack.ref(payload.locker_id), payload.key, args.budget)
    except PolicyDenied as exc:
        raise CliError(f"PolicyDenied: {exc.reason}", "sponsor") from exc
    except (SponsorBusy, LookupError) as exc:
        raise CliError(str(exc), "sponsor") from exc
    except TransactionRejected as exc:
        raise CliError(str(exc), "execute") from exc
    finally:
        ws.save(stack)
    row_doc, row_text = _gas_row("claim (sponsor pays)", effects)
    if not effects.succeeded:
        _emit(args, {"gas": row_doc}, row_text)
        raise CliError(effects.error or "failure", "execute")
    claimer_paid = 0  # the sponsor owns the gas coin
    lines = [f"claimed by {to_hex(session.address)} (zkLogin sub={args.sub})"]
    lines += [f"  item {to_hex(i)}" for i in items]
    lines.append(row_text)
    lines.append(f"claimer paid: {format_sui(claimer_paid)} SUI")
    _emit(
        args,
        {
            "address": to_hex(session.address),
            "items": [to_hex(i) for i in items],
            "gas": row_doc,
            "claimer_paid": str(claimer_paid),
        },
        "\n".join(lines),
    )
    return 0


def cmd_inspect(args) -> int:
    ws = Workspace(args.state_dir)
    state = load_snapshot(ws.snapshot_path)
    if args.verify:
        try:
            replayed = replay_log(
                load_snapshot(ws.genesis_path), TransactionLog(ws.log_path).records(), load_config(ws.config_path),
                ws.open_stack().engine.zklogin,
            )
        except ReplayMismatch as exc:
            raise CliError(str(exc), "verify") from exc
        if dumps_snapshot(replayed) != dumps_snapshot(state):
            raise CliError("replayed log does not reproduce the snapshot", "verify")
    owner_filter = ws.resolve(args.target) if args.target else None
    objects = []
    for object_id in sorted(state.objects):
        obj = state.objects[object_id]
        owner = getattr(obj.owner, "address", None)
        if owner_filter is not None and owner != owner_filter and object_id != owner_filter:
            continue
        objects.append((obj, owner))
    doc = {
        "epoch": state.epoch,
        "storage_fund": str(state.storage_fund),
        "fee_sink": str(state.fee_sink),
        "total_supply": str(state.total_supply),
        "objects": [
            {
                "id": to_hex(o.id),
                "version": o.version,
                "owner": ws.name_of(owner) if owner else type(o.owner).__name__,
                "type": type(o.contents).__name__,
                "balance": str(o.contents.balance) if isinstance(o.contents, Coin) else None,
            }
            for o, owner in objects
        ],
        "verified": bool(args.verify),
    }
    lines = [
        f"epoch {state.epoch}  storage fund {format_sui(state.storage_fund)}  fee sink {format_sui(state.fee_sink)}"
        f"  supply {format_sui(state.total_supply)} SUI"
    ]
    for entry in doc["objects"]:
        extra = f" {format_sui(int(entry['balance']))} SUI" if entry["balance"] is not None else ""
        lines.append(f"  {entry['id'][:18]} v{entry['version']:<4} {entry['type']:<13} {entry['owner']}{extra}")
    if args.verify:
        lines.append("transaction log replay: OK")
    _emit(args, doc, "\n".join(lines))
    return 0


def cmd_gas_report(args) -> int:
    ws = Workspace(args.state_dir)
    ws._meta()
    rows, total = [], 0
    for record in TransactionLog(ws.log_path).records():
        if record["kind"] != "txn":
            continue
        signed = SignedTransaction.decode(bytes.fromhex(record["signed"]))
        effects = TransactionEffects.from_doc(record["effects"])
        label = "+".join(command_kind(c) for c in signed.block.commands)
        if signed.block.sponsor is not None:
            label += " (sponsored)"
        rows.append(_gas_row(label, effects))
        total += effects.gas.net
    text = "\n".join(t for _, t in rows) or "no transactions"
    text += f"\ntotal net gas: {format_sui(total)} SUI ({total} MIST)"
    _emit(args, {"rows": [d for d, _ in rows], "total_net": str(total)}, text)
    return 0


def cmd_advance_epoch(args) -> int:
    ws = Workspace(args.state_dir)
    stack = ws.open_stack()
    epoch = stack.engine.advance_epoch()
    ws.save(stack)
    _emit(args, {"epoch": epoch}, f"epoch {epoch}")
    return 0


def cmd_demo_figure2(args) -> int:
    try:
        schedule = load_config(args.config or "figure2")
    except FileNotFoundError as exc:
        raise CliError(str(exc), "config") from exc
    report = run_figure2(schedule, args.seed)
    sys.stdout.write(report.to_json() if args.json else report.render_text())
    return 0


def cmd_serve(args) -> int:
    ws = Workspace(args.state_dir)
    stack = ws.open_stack()
    sponsor = None
    if "sponsor" in ws.key_names():
        sponsor = stack.sponsor_service(ws.keypair("sponsor"))
    app = ServiceApp(salt=stack.salts, prover=stack.prover, sponsor=sponsor)
    server = make_server(app, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving /v1/salt /v1/prove /v1/sponsor on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--state-dir", default=argparse.SUPPRESS, help="ledger directory (default ./.objledger)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=f"master seed (default {DEFAULT_SEED})")
    common.add_argument("--config", default=argparse.SUPPRESS, help="gas config file or shipped name")
    common.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="machine-readable output")

    parser = argparse.ArgumentParser(prog="objledger", parents=[common], description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create an empty ledger")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("keygen", parents=[common], help="derive a named deterministic key")
    p.add_argument("--name", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("faucet", parents=[common], help="mint a coin or an NFT (local mode only)")
    p.add_argument("target", help="key name or hex address")
    p.add_argument("amount", nargs="?", help="amount in SUI, e.g. 2 or 0.5")
    p.add_argument("--nft", metavar="NAME")
    p.add_argument("--payload", metavar="HEX")
    p.set_defaults(func=cmd_faucet)

    p = sub.add_parser("send", parents=[common], help="lock items and print the claim payload")
    p.add_argument("--from", dest="sender", required=True, help="sender key name")
    p.add_argument("items", nargs="+", help="object ids to lock")
    p.add_argument("--key", help="locker key as hex (16-64 bytes)")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="gas budget in MIST")
    p.add_argument("--qr-ascii", action="store_true", help="print a text QR placeholder")
    p.set_defaults(func=cmd_send)

    p = sub.add_parser("claim", parents=[common], help="zkLogin and claim a payload via the sponsor")
    p.add_argument("payload")
    p.add_argument("--login", default="google-mock")
    p.add_argument("--sub", required=True, help="OAuth subject of the claimer")
    p.add_argument("--sponsor", default="sponsor", help="sponsor key name")
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.set_defaults(func=cmd_claim)

    p = sub.add_parser("inspect", parents=[common], help="show ledger contents")
    p.add_argument("target", nargs="?", help="filter by key name, address or object id")
    p.add_argument("--verify", action="store_true", help="replay the transaction log from genesis")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gas-report", parents=[common], help="gas rows for every logged transaction")
    p.set_defaults(func=cmd_gas_report)

    p = sub.add_parser("advance-epoch", parents=[common], help="advance the ledger epoch by one")
    p.set_defaults(func=cmd_advance_epoch)

    p = sub.add_parser("demo-figure2", parents=[common], help="run the two-user gift scenario in memory")
    p.set_defaults(func=cmd_demo_figure2)

    p = sub.add_parser("serve", parents=[common], help="serve salt/prove/sponsor over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.state_dir = getattr(args, "state_dir", ".objledger")
    args.seed = getattr(args, "seed", DEFAULT_SEED)
    args.config = getattr(args, "config", None)
    args.json = getattr(args, "json", False)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except CliError as exc:
        stage = f" [{exc.stage}]" if exc.stage else ""
        print(f"error{stage}: {exc}", file=sys.stderr)
        return 1
    except LedgerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
