"""Hash-chained transaction ledger with a key-value world state.

Transactions are canonically encoded (fixed field order, length-prefixed,
injective) so digests and signatures are byte-stable across runs and
platforms.  State transitions are deterministic functions of the ordered
transaction history; replaying a chain from genesis reproduces the state
hash bit for bit.  All timestamps are logical counters, never wall clock.

Money is held as integer cents; a settlement amount is always
round(price * delivered_energy * 100), recomputed inside the contract, so
double-entry conservation is exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .identity import verify

ZERO32 = b"\x00" * 32
OPERATOR = "operator"


class LedgerError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def to_cents(price_per_mwh: float, energy_mwh: float) -> int:
    return round(price_per_mwh * energy_mwh * 100)


# ---------------------------------------------------------------------------
# transactions and canonical encoding


@dataclass(frozen=True)
class TxHeader:
    tx_id: str = ""
    submitter: str = ""
    timestamp: int = 0
    signature: bytes = b""


@dataclass(frozen=True)
class Enrollment(TxHeader):
    participant: str = ""
    public_key: bytes = b""


@dataclass(frozen=True)
class Funding(TxHeader):
    """Genesis-only: seed a party's balance (cents)."""

    party: str = ""
    amount_cents: int = 0


@dataclass(frozen=True)
class PreferenceUpdate(TxHeader):
    owner: str = ""
    payload_json: str = "{}"  # operational-constraint payload, canonical JSON

    @property
    def payload(self) -> dict:
        return json.loads(self.payload_json)


@dataclass(frozen=True)
class SetpointContract(TxHeader):
    """One contract per generator / type-1 member covering the horizon."""

    party: str = ""
    periods: tuple = ()
    setpoints: tuple = ()  # MW per period
    energies: tuple = ()  # contracted MWh per period (setpoint x dt)
    prices: tuple = ()  # $/MWh per period


@dataclass(frozen=True)
class IncentiveOffer(TxHeader):
    offer_id: str = ""
    crowdsourcee: str = ""
    period: int = 0
    quantity: float = 0.0  # MW
    energy: float = 0.0  # contracted MWh (quantity x dt)
    price: float = 0.0  # lam + lam_a, $/MWh
    premium: float = 0.0  # lam_a component, $/MWh
    expiry: int = 0  # logical time


@dataclass(frozen=True)
class OfferResponse(TxHeader):
    offer_id: str = ""
    decision: str = "reject"  # accept | reject


@dataclass(frozen=True)
class MeterReading(TxHeader):
    party: str = ""
    period: int = 0
    delivered: float = 0.0  # MWh


@dataclass(frozen=True)
class Settlement(TxHeader):
    party: str = ""
    amount_cents: int = 0
    periods: tuple = ()
    offer_ids: tuple = ()  # settled incentive offers
    contract_periods: tuple = ()  # settled day-ahead contract periods
    kind: str = "incentive"


@dataclass(frozen=True)
class Notice(TxHeader):
    """Operator declaration (e.g. a generation shortfall) pinned on-chain."""

    topic: str = ""
    period: int = -1
    detail: str = ""


TX_TYPES = (Enrollment, Funding, PreferenceUpdate, SetpointContract,
            IncentiveOffer, OfferResponse, MeterReading, Settlement, Notice)
_TAG = {cls: i + 1 for i, cls in enumerate(TX_TYPES)}
_BY_TAG = {v: k for k, v in _TAG.items()}

Tx = TxHeader  # any concrete transaction


def _encode_value(v) -> bytes:
    if isinstance(v, bool):
        return b"B" + (b"\x01" if v else b"\x00")
    if isinstance(v, int):
        return b"i" + struct.pack(">q", v)
    if isinstance(v, float):
        return b"f" + struct.pack(">d", v)
    if isinstance(v, str):
        raw = v.encode("utf-8")
        return b"s" + struct.pack(">I", len(raw)) + raw
    if isinstance(v, bytes):
        return b"b" + struct.pack(">I", len(v)) + v
    if isinstance(v, (list, tuple)):
        out = b"l" + struct.pack(">I", len(v))
        for item in v:
            out += _encode_value(item)
        return out
    raise LedgerError("unencodable", f"cannot encode {type(v).__name__}")


def _decode_value(buf: bytes, off: int):
    kind = buf[off:off + 1]
    off += 1
    if kind == b"B":
        return buf[off] == 1, off + 1
    if kind == b"i":
        return struct.unpack(">q", buf[off:off + 8])[0], off + 8
    if kind == b"f":
        return struct.unpack(">d", buf[off:off + 8])[0], off + 8
    if kind == b"s":
        (ln,) = struct.unpack(">I", buf[off:off + 4])
        off += 4
        return buf[off:off + ln].decode("utf-8"), off + ln
    if kind == b"b":
        (ln,) = struct.unpack(">I", buf[off:off + 4])
        off += 4
        return bytes(buf[off:off + ln]), off + ln
    if kind == b"l":
        (cnt,) = struct.unpack(">I", buf[off:off + 4])
        off += 4
        items = []
        for _ in range(cnt):
            item, off = _decode_value(buf, off)
            items.append(item)
        return tuple(items), off
    raise LedgerError("decode-error", f"unknown value tag {kind!r} at {off - 1}")


def canonical_encode(tx: Tx, *, for_signing: bool = False) -> bytes:
    """Injective, deterministic byte encoding of a transaction.

    ``for_signing`` zeroes the signature field so the signature covers
    everything else, including the tx id.
    """
    cls = type(tx)
    if cls not in _TAG:
        raise LedgerError("unencodable", f"unknown tx type {cls.__name__}")
    out = bytes([_TAG[cls]])
    for f in fields(cls):
        v = getattr(tx, f.name)
        if for_signing and f.name == "signature":
            v = b""
        out += _encode_value(v)
    return out


def canonical_decode(buf: bytes) -> Tx:
    cls = _BY_TAG.get(buf[0])
    if cls is None:
        raise LedgerError("decode-error", f"unknown tx tag {buf[0]}")
    values, off = [], 1
    for _ in fields(cls):
        v, off = _decode_value(buf, off)
        values.append(v)
    if off != len(buf):
        raise LedgerError("decode-error", "trailing bytes after transaction")
    return cls(*values)


def make_tx(cls, submitter: str, timestamp: int, keypair=None, **fields_) -> Tx:
    """Build a transaction: the id is the digest of the unsigned body, and
    the signature (when a keypair is given) covers id and body."""
    tx = cls(tx_id="", submitter=submitter, timestamp=timestamp, signature=b"", **fields_)
    tx_id = sha256(canonical_encode(tx, for_signing=True)).hex()[:32]
    tx = replace(tx, tx_id=tx_id)
    if keypair is not None:
        tx = replace(tx, signature=keypair.sign(canonical_encode(tx, for_signing=True)))
    return tx


# ---------------------------------------------------------------------------
# blocks


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    timestamp: int
    txs: tuple
    tx_root: bytes
    block_hash: bytes


def merkle_root(leaves: list[bytes]) -> bytes:
    if not leaves:
        return ZERO32
    level = [sha256(leaf) for leaf in leaves]
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def _header_bytes(height: int, prev_hash: bytes, timestamp: int, tx_root: bytes) -> bytes:
    return b"CGB1" + struct.pack(">q", height) + prev_hash + struct.pack(">q", timestamp) + tx_root


def make_block(height: int, prev_hash: bytes, timestamp: int, txs: tuple) -> Block:
    root = merkle_root([canonical_encode(tx) for tx in txs])
    return Block(height=height, prev_hash=prev_hash, timestamp=timestamp, txs=tuple(txs),
                 tx_root=root, block_hash=sha256(_header_bytes(height, prev_hash, timestamp, root)))


def encode_block(block: Block) -> bytes:
    out = _header_bytes(block.height, block.prev_hash, block.timestamp, block.tx_root)
    out += block.block_hash
    out += struct.pack(">I", len(block.txs))
    for tx in block.txs:
        enc = canonical_encode(tx)
        out += struct.pack(">I", len(enc)) + enc
    return out


def decode_block(buf: bytes) -> Block:
    """Parse a stored block verbatim; hashes are NOT recomputed here, so
    tampering shows up in ``validate_chain`` at the tampered height."""
    if buf[:4] != b"CGB1":
        raise LedgerError("decode-error", "bad block magic")
    height = struct.unpack(">q", buf[4:12])[0]
    prev_hash = bytes(buf[12:44])
    timestamp = struct.unpack(">q", buf[44:52])[0]
    tx_root = bytes(buf[52:84])
    block_hash = bytes(buf[84:116])
    (ntx,) = struct.unpack(">I", buf[116:120])
    off = 120
    txs = []
    for _ in range(ntx):
        (ln,) = struct.unpack(">I", buf[off:off + 4])
        off += 4
        txs.append(canonical_decode(buf[off:off + ln]))
        off += ln
    return Block(height=height, prev_hash=prev_hash, timestamp=timestamp, txs=tuple(txs),
                 tx_root=tx_root, block_hash=block_hash)


# ---------------------------------------------------------------------------
# world state and contracts


class WorldState:
    """Key-value contract state; mutated only through ``execute``."""

    def __init__(self):
        self.kv: dict = {}
        self.version = 0

    def copy(self) -> "WorldState":
        out = WorldState()
        out.kv = json.loads(json.dumps(self.kv))
        out.version = self.version
        return out

    def balance(self, party: str) -> int:
        return self.kv.get(f"balance/{party}", 0)

    def public_key(self, party: str) -> bytes | None:
        hexkey = self.kv.get(f"key/{party}")
        return bytes.fromhex(hexkey) if hexkey else None

    def offer(self, offer_id: str) -> dict | None:
        return self.kv.get(f"offer/{offer_id}")

    def open_offers(self, crowdsourcee: str | None = None) -> list[dict]:
        out = []
        for k, v in self.kv.items():
            if k.startswith("offer/") and v["status"] == "open":
                if crowdsourcee is None or v["crowdsourcee"] == crowdsourcee:
                    out.append(dict(v, offer_id=k.split("/", 1)[1]))
        return sorted(out, key=lambda o: o["offer_id"])

    def state_hash(self) -> bytes:
        """Digest over canonically sorted key-value pairs."""
        payload = json.dumps(self.kv, sort_keys=True, separators=(",", ":"))
        return sha256(b"CGS1" + payload.encode("utf-8"))


@dataclass(frozen=True)
class Rejection:
    code: str
    detail: str


def execute(state: WorldState, tx: Tx, now: int, height: int) -> list[dict] | Rejection:
    """Apply one transaction; on rejection the state is left untouched."""
    rej = _check_signature(state, tx)
    if rej is not None:
        return rej
    if isinstance(tx, Enrollment):
        if state.public_key(tx.participant) is not None:
            return Rejection("already-enrolled", tx.participant)
        state.kv[f"key/{tx.participant}"] = tx.public_key.hex()
        state.kv.setdefault(f"balance/{tx.participant}", 0)
        return [{"type": "enrolled", "participant": tx.participant}]
    if isinstance(tx, Funding):
        if height > 0:
            return Rejection("funding-after-genesis", tx.tx_id)
        state.kv[f"balance/{tx.party}"] = state.balance(tx.party) + tx.amount_cents
        return [{"type": "funded", "party": tx.party, "amount_cents": tx.amount_cents}]
    if isinstance(tx, PreferenceUpdate):
        state.kv[f"pref/{tx.owner}"] = tx.payload
        return [{"type": "preferences", "owner": tx.owner}]
    if isinstance(tx, SetpointContract):
        if not (len(tx.periods) == len(tx.setpoints) == len(tx.energies) == len(tx.prices)):
            return Rejection("bad-contract", "field length mismatch")
        for period, setpoint, energy, price in zip(tx.periods, tx.setpoints,
                                                   tx.energies, tx.prices):
            state.kv[f"contract/{tx.party}/{period}"] = {
                "setpoint": setpoint, "energy": energy, "price": price}
        return [{"type": "contract", "party": tx.party, "periods": list(tx.periods)}]
    if isinstance(tx, IncentiveOffer):
        key = f"offer/{tx.offer_id}"
        if key in state.kv:
            return Rejection("duplicate-offer", tx.offer_id)
        state.kv[key] = {
            "crowdsourcee": tx.crowdsourcee, "period": tx.period,
            "quantity": tx.quantity, "energy": tx.energy, "price": tx.price,
            "premium": tx.premium, "expiry": tx.expiry, "status": "open"}
        return [{"type": "offer", "offer_id": tx.offer_id, "crowdsourcee": tx.crowdsourcee,
                 "period": tx.period, "quantity": tx.quantity, "price": tx.price,
                 "premium": tx.premium, "expiry": tx.expiry}]
    if isinstance(tx, OfferResponse):
        offer = state.offer(tx.offer_id)
        if offer is None:
            return Rejection("unknown-offer", tx.offer_id)
        if offer["status"] != "open":
            return Rejection("double-response", tx.offer_id)
        if now > offer["expiry"]:
            state.kv[f"offer/{tx.offer_id}"]["status"] = "expired"
            return Rejection("expired", tx.offer_id)
        if tx.submitter not in (offer["crowdsourcee"], OPERATOR):
            return Rejection("forbidden", tx.offer_id)
        offer["status"] = "accepted" if tx.decision == "accept" else "rejected"
        return [{"type": "response", "offer_id": tx.offer_id, "decision": tx.decision,
                 "crowdsourcee": offer["crowdsourcee"], "period": offer["period"]}]
    if isinstance(tx, MeterReading):
        key = f"meter/{tx.party}/{tx.period}"
        if key in state.kv:
            return Rejection("duplicate-meter", key)
        state.kv[key] = tx.delivered
        return [{"type": "meter", "party": tx.party, "period": tx.period,
                 "delivered": tx.delivered}]
    if isinstance(tx, Settlement):
        return _settle(state, tx)
    if isinstance(tx, Notice):
        if tx.submitter != OPERATOR:
            return Rejection("forbidden", "notices are operator-only")
        state.kv[f"notice/{tx.tx_id}"] = {"topic": tx.topic, "period": tx.period,
                                          "detail": tx.detail}
        return [{"type": "notice", "topic": tx.topic, "period": tx.period,
                 "detail": tx.detail}]
    return Rejection("unknown-tx", type(tx).__name__)


def _check_signature(state: WorldState, tx: Tx) -> Rejection | None:
    body = canonical_encode(tx, for_signing=True)
    if isinstance(tx, Enrollment):
        # self-certifying: signed by the key being enrolled
        if not verify(tx.public_key, body, tx.signature):
            return Rejection("bad-signature", tx.tx_id)
        return None
    key = state.public_key(tx.submitter)
    if key is None:
        return Rejection("unknown-submitter", tx.submitter)
    if not verify(key, body, tx.signature):
        return Rejection("bad-signature", tx.tx_id)
    return None


def _settle(state: WorldState, tx: Settlement) -> list[dict] | Rejection:
    expected = 0
    for offer_id in tx.offer_ids:
        offer = state.offer(offer_id)
        if offer is None:
            return Rejection("unknown-offer", offer_id)
        if offer["status"] == "settled":
            return Rejection("double-settlement", offer_id)
        if offer["status"] != "accepted":
            return Rejection("offer-not-accepted", offer_id)
        if offer["crowdsourcee"] != tx.party:
            return Rejection("wrong-party", offer_id)
        metered = state.kv.get(f"meter/{tx.party}/{offer['period']}", 0.0)
        expected += to_cents(offer["price"], min(metered, offer["energy"]))
    for period in tx.contract_periods:
        contract = state.kv.get(f"contract/{tx.party}/{period}")
        if contract is None:
            return Rejection("unknown-contract", f"{tx.party}/{period}")
        if contract.get("settled"):
            return Rejection("double-settlement", f"{tx.party}/{period}")
        metered = state.kv.get(f"meter/{tx.party}/{period}", 0.0)
        expected += to_cents(contract["price"], min(metered, contract["energy"]))
    if expected != tx.amount_cents:
        return Rejection("amount-mismatch", f"expected {expected}, got {tx.amount_cents}")
    if state.balance(OPERATOR) < tx.amount_cents:
        return Rejection("insufficient-funds", OPERATOR)
    state.kv[f"balance/{OPERATOR}"] = state.balance(OPERATOR) - tx.amount_cents
    state.kv[f"balance/{tx.party}"] = state.balance(tx.party) + tx.amount_cents
    for offer_id in tx.offer_ids:
        state.kv[f"offer/{offer_id}"]["status"] = "settled"
    for period in tx.contract_periods:
        state.kv[f"contract/{tx.party}/{period}"]["settled"] = True
    return [{"type": "settlement", "party": tx.party, "amount_cents": tx.amount_cents,
             "periods": list(tx.periods), "kind": tx.kind}]


# ---------------------------------------------------------------------------
# the chain


class Ledger:
    """Ordered blocks plus the world state they produce."""

    def __init__(self):
        self.blocks: list[Block] = []
        self.state = WorldState()

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else ZERO32

    def append_block(self, block: Block) -> list[dict]:
        """Verify header invariants, execute every transaction (rejections
        are recorded, not fatal), and advance the state atomically."""
        if block.height != len(self.blocks):
            raise LedgerError("height-gap",
                              f"expected height {len(self.blocks)}, got {block.height}")
        if block.prev_hash != self.tip_hash:
            raise LedgerError("bad-prev-hash", f"at height {block.height}")
        root = merkle_root([canonical_encode(tx) for tx in block.txs])
        if root != block.tx_root:
            raise LedgerError("bad-tx-root", f"at height {block.height}")
        expected_hash = sha256(_header_bytes(block.height, block.prev_hash,
                                             block.timestamp, block.tx_root))
        if expected_hash != block.block_hash:
            raise LedgerError("bad-block-hash", f"at height {block.height}")
        staged = self.state.copy()
        events = []
        for tx in block.txs:
            scratch = staged.copy()
            result = execute(scratch, tx, now=block.timestamp, height=block.height)
            if isinstance(result, Rejection):
                events.append({"type": "rejected", "tx_id": tx.tx_id,
                               "code": result.code, "detail": result.detail})
            else:
                staged = scratch
                for ev in result:
                    events.append(dict(ev, tx_id=tx.tx_id))
        staged.version = self.state.version + 1
        self.state = staged
        self.blocks.append(block)
        for ev in events:
            ev["height"] = block.height
        return events

    def state_hash(self) -> bytes:
        return self.state.state_hash()


def validate_chain(blocks: list[Block]) -> int | None:
    """Re-scan hash links and tx roots; returns the first bad height, or
    None when the chain is intact."""
    prev = ZERO32
    for i, block in enumerate(blocks):
        if block.height != i:
            return i
        if block.prev_hash != prev:
            return i
        if merkle_root([canonical_encode(tx) for tx in block.txs]) != block.tx_root:
            return i
        if sha256(_header_bytes(block.height, block.prev_hash, block.timestamp,
                                block.tx_root)) != block.block_hash:
            return i
        prev = block.block_hash
    return None


def replay(blocks: list[Block]) -> Ledger:
    """Re-execute the whole chain on a fresh world state."""
    led = Ledger()
    for block in blocks:
        led.append_block(block)
    return led


# ---------------------------------------------------------------------------
# chain files: length-prefixed canonical block encodings


def export_chain(blocks: list[Block], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = b"CGLEDGER"+ struct.pack(">I", len(blocks))
    for block in blocks:
        enc = encode_block(block)
        out += struct.pack(">I", len(enc)) + enc
    path.write_bytes(out)


def import_chain(path: str | Path) -> list[Block]:
    buf = Path(path).read_bytes()
    if buf[:8] != b"CGLEDGER":
        raise LedgerError("decode-error", "bad ledger file magic")
    (count,) = struct.unpack(">I", buf[8:12])
    off = 12
    blocks = []
    for _ in range(count):
        (ln,) = struct.unpack(">I", buf[off:off + 4])
        off += 4
        blocks.append(decode_block(buf[off:off + ln]))
        off += ln
    return blocks
