"""Marketplace state machine: accounts, sensors, streams, subscriptions.

Every action is a signed ledger transaction with a canonical payload
(byte layouts in docs/FORMATS.md). Validation happens twice: the
build_* helpers fast-reject against the current state before a
transaction is submitted, and apply_committed() re-validates
authoritatively when the committed transaction comes back off the
ledger — the ledger is the only source of truth, so a committed
transaction that fails validation means the ledger itself is corrupt
(StateDivergence).

Token rules: supply is minted only by sign-up grants; subscriptions
and transfers move existing tokens atomically, so the sum of balances
always equals total_supply.

PublishData and Deliver are signed by whichever account operates the
ingestion service (the node operator); the sensor owner's authority
over ingestion is a service-level session check, since envelope ids
only exist after server-side encryption.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from datchain import codec
from datchain.codec import DecodeError, Reader
from datchain.errors import (
    DuplicateAccount,
    DuplicateSensor,
    InsufficientFunds,
    InvalidTransaction,
    StateDivergence,
    UnknownAccount,
    UnknownSensor,
    UnknownStream,
    UnknownSubscription,
)
from datchain.keys import KeyPair
from datchain.ledger import Transaction, TxKind, sign_transaction

ROLE_OWNER = 1
ROLE_BUYER = 2
ROLE_BOTH = 3

ROLE_NAMES = {ROLE_OWNER: "owner", ROLE_BUYER: "buyer", ROLE_BOTH: "both"}
ROLE_CODES = {name: code for code, name in ROLE_NAMES.items()}


# -- state ----------------------------------------------------------------

@dataclass(frozen=True)
class Account:
    address: bytes
    public_key: bytes
    balance: int
    role: int
    created_at: int


@dataclass(frozen=True)
class SensorRecord:
    sensor_id: bytes
    owner: bytes
    metadata: dict[str, str]
    stream_id: bytes


@dataclass(frozen=True)
class Stream:
    stream_id: bytes
    sensor_id: bytes
    owner: bytes
    price: int
    period: int
    schema_tag: str


@dataclass(frozen=True)
class Subscription:
    sub_id: bytes
    buyer: bytes
    stream_id: bytes
    start: int
    expiry: int
    watermark_key_id: bytes
    paid: int


@dataclass(frozen=True)
class Publication:
    envelope_id: bytes
    sensor_id: bytes
    captured_at: int
    publisher: bytes


@dataclass
class MarketState:
    accounts: dict[bytes, Account] = field(default_factory=dict)
    sensors: dict[bytes, SensorRecord] = field(default_factory=dict)
    streams: dict[bytes, Stream] = field(default_factory=dict)
    subscriptions: dict[bytes, Subscription] = field(default_factory=dict)
    publications: dict[bytes, Publication] = field(default_factory=dict)
    deliveries: set[tuple[bytes, bytes, int]] = field(default_factory=set)
    total_supply: int = 0
    applied_tx: set[bytes] = field(default_factory=set)
    sequences: dict[bytes, int] = field(default_factory=dict)

    def balance_sum(self) -> int:
        return sum(a.balance for a in self.accounts.values())


def next_sequence(state: MarketState, address: bytes) -> int:
    return state.sequences.get(address, 0) + 1


# -- canonical action payloads ------------------------------------------------

@dataclass(frozen=True)
class SignUpAction:
    public_key: bytes
    role: int
    initial_grant: int
    created_at: int

    def encode(self) -> bytes:
        return (
            self.public_key
            + codec.enc_u8(self.role)
            + codec.enc_u64(self.initial_grant)
            + codec.enc_u64(self.created_at)
        )

    @classmethod
    def decode(cls, payload: bytes) -> "SignUpAction":
        r = Reader(payload)
        action = cls(r.take(32), r.u8(), r.u64(), r.u64())
        r.done()
        return action


@dataclass(frozen=True)
class RegisterSensorAction:
    metadata: dict[str, str]
    price: int
    period: int
    schema_tag: str

    def encode(self) -> bytes:
        return (
            codec.enc_str_map(self.metadata)
            + codec.enc_u64(self.price)
            + codec.enc_u64(self.period)
            + codec.enc_str(self.schema_tag)
        )

    @classmethod
    def decode(cls, payload: bytes) -> "RegisterSensorAction":
        r = Reader(payload)
        action = cls(r.str_map(), r.u64(), r.u64(), r.vstr())
        r.done()
        return action


@dataclass(frozen=True)
class PublishDataAction:
    sensor_id: bytes
    envelope_id: bytes
    captured_at: int

    def encode(self) -> bytes:
        return self.sensor_id + self.envelope_id + codec.enc_u64(self.captured_at)

    @classmethod
    def decode(cls, payload: bytes) -> "PublishDataAction":
        r = Reader(payload)
        action = cls(r.take(32), r.take(32), r.u64())
        r.done()
        return action


@dataclass(frozen=True)
class SubscribeAction:
    stream_id: bytes
    start: int
    expiry: int
    paid: int

    def encode(self) -> bytes:
        return (
            self.stream_id
            + codec.enc_u64(self.start)
            + codec.enc_u64(self.expiry)
            + codec.enc_u64(self.paid)
        )

    @classmethod
    def decode(cls, payload: bytes) -> "SubscribeAction":
        r = Reader(payload)
        action = cls(r.take(32), r.u64(), r.u64(), r.u64())
        r.done()
        return action


@dataclass(frozen=True)
class TransferAction:
    to: bytes
    amount: int

    def encode(self) -> bytes:
        return self.to + codec.enc_u64(self.amount)

    @classmethod
    def decode(cls, payload: bytes) -> "TransferAction":
        r = Reader(payload)
        action = cls(r.take(32), r.u64())
        r.done()
        return action


@dataclass(frozen=True)
class DeliverAction:
    sub_id: bytes
    envelope_id: bytes
    delivered_at: int

    def encode(self) -> bytes:
        return self.sub_id + self.envelope_id + codec.enc_u64(self.delivered_at)

    @classmethod
    def decode(cls, payload: bytes) -> "DeliverAction":
        r = Reader(payload)
        action = cls(r.take(32), r.take(32), r.u64())
        r.done()
        return action


ACTION_CODECS = {
    TxKind.SIGN_UP: SignUpAction,
    TxKind.REGISTER_SENSOR: RegisterSensorAction,
    TxKind.PUBLISH_DATA: PublishDataAction,
    TxKind.SUBSCRIBE: SubscribeAction,
    TxKind.TRANSFER: TransferAction,
    TxKind.DELIVER: DeliverAction,
}


def decode_action(tx: Transaction):
    action_cls = ACTION_CODECS.get(tx.kind)
    if action_cls is None:
        raise InvalidTransaction(f"unsupported transaction kind {tx.kind!r}")
    return action_cls.decode(tx.payload)


# -- derived identifiers ---------------------------------------------------------

def derive_sensor_id(owner: bytes, metadata: dict[str, str], sequence: int) -> bytes:
    return hashlib.sha256(
        owner + codec.enc_str_map(metadata) + codec.enc_u64(sequence)
    ).digest()


def derive_stream_id(sensor_id: bytes) -> bytes:
    return hashlib.sha256(b"stream:" + sensor_id).digest()


def derive_sub_id(buyer: bytes, stream_id: bytes, sequence: int) -> bytes:
    return hashlib.sha256(
        b"sub:" + buyer + stream_id + codec.enc_u64(sequence)
    ).digest()


def derive_watermark_key_id(sub_id: bytes) -> bytes:
    return hashlib.sha256(b"wm:" + sub_id).digest()


# -- submission-side builders ------------------------------------------------------

def build_sign_up(
    state: MarketState,
    keypair: KeyPair,
    role: int,
    initial_grant: int,
    created_at: int,
) -> Transaction:
    if keypair.address in state.accounts:
        raise DuplicateAccount(keypair.address.hex())
    if role not in ROLE_NAMES:
        raise InvalidTransaction(f"unknown role code {role}")
    action = SignUpAction(keypair.public_key, role, initial_grant, created_at)
    return sign_transaction(TxKind.SIGN_UP, action.encode(), keypair, sequence=1)


def build_register_sensor(
    state: MarketState,
    keypair: KeyPair,
    metadata: dict[str, str],
    price: int,
    period: int,
    schema_tag: str = "",
    sequence: int | None = None,
) -> Transaction:
    if keypair.address not in state.accounts:
        raise UnknownAccount(keypair.address.hex())
    if period < 1:
        raise InvalidTransaction("period must be >= 1 second")
    sequence = next_sequence(state, keypair.address) if sequence is None else sequence
    sensor_id = derive_sensor_id(keypair.address, metadata, sequence)
    if sensor_id in state.sensors:
        raise DuplicateSensor(sensor_id.hex())
    action = RegisterSensorAction(dict(metadata), price, period, schema_tag)
    return sign_transaction(TxKind.REGISTER_SENSOR, action.encode(), keypair, sequence)


def build_subscribe(
    state: MarketState,
    keypair: KeyPair,
    stream_id: bytes,
    now: int,
    sequence: int | None = None,
) -> Transaction:
    if keypair.address not in state.accounts:
        raise UnknownAccount(keypair.address.hex())
    stream = state.streams.get(stream_id)
    if stream is None:
        raise UnknownStream(stream_id.hex())
    buyer = state.accounts[keypair.address]
    if buyer.balance < stream.price:
        raise InsufficientFunds(f"balance {buyer.balance} < price {stream.price}")
    sequence = next_sequence(state, keypair.address) if sequence is None else sequence
    action = SubscribeAction(stream_id, now, now + stream.period, stream.price)
    return sign_transaction(TxKind.SUBSCRIBE, action.encode(), keypair, sequence)


def build_transfer(
    state: MarketState,
    keypair: KeyPair,
    to: bytes,
    amount: int,
    sequence: int | None = None,
) -> Transaction:
    if keypair.address not in state.accounts:
        raise UnknownAccount(keypair.address.hex())
    if to not in state.accounts:
        raise UnknownAccount(to.hex())
    if state.accounts[keypair.address].balance < amount:
        raise InsufficientFunds(
            f"balance {state.accounts[keypair.address].balance} < amount {amount}"
        )
    sequence = next_sequence(state, keypair.address) if sequence is None else sequence
    action = TransferAction(to, amount)
    return sign_transaction(TxKind.TRANSFER, action.encode(), keypair, sequence)


def build_publish_data(
    state: MarketState,
    keypair: KeyPair,
    sensor_id: bytes,
    envelope_id: bytes,
    captured_at: int,
    sequence: int | None = None,
) -> Transaction:
    if keypair.address not in state.accounts:
        raise UnknownAccount(keypair.address.hex())
    if sensor_id not in state.sensors:
        raise UnknownSensor(sensor_id.hex())
    sequence = next_sequence(state, keypair.address) if sequence is None else sequence
    action = PublishDataAction(sensor_id, envelope_id, captured_at)
    return sign_transaction(TxKind.PUBLISH_DATA, action.encode(), keypair, sequence)


def build_deliver(
    state: MarketState,
    keypair: KeyPair,
    sub_id: bytes,
    envelope_id: bytes,
    delivered_at: int,
    sequence: int | None = None,
) -> Transaction:
    if keypair.address not in state.accounts:
        raise UnknownAccount(keypair.address.hex())
    if sub_id not in state.subscriptions:
        raise UnknownSubscription(sub_id.hex())
    sequence = next_sequence(state, keypair.address) if sequence is None else sequence
    action = DeliverAction(sub_id, envelope_id, delivered_at)
    return sign_transaction(TxKind.DELIVER, action.encode(), keypair, sequence)


# -- authoritative apply -------------------------------------------------------------

def _apply_sign_up(state: MarketState, tx: Transaction, action: SignUpAction) -> None:
    if tx.sender in state.accounts:
        raise StateDivergence(f"duplicate account {tx.sender.hex()[:16]}")
    if action.public_key != tx.public_key:
        raise StateDivergence("sign-up payload key differs from signing key")
    if action.role not in ROLE_NAMES:
        raise StateDivergence(f"unknown role code {action.role}")
    state.accounts[tx.sender] = Account(
        address=tx.sender,
        public_key=action.public_key,
        balance=action.initial_grant,
        role=action.role,
        created_at=action.created_at,
    )
    state.total_supply += action.initial_grant


def _apply_register_sensor(
    state: MarketState, tx: Transaction, action: RegisterSensorAction
) -> None:
    if tx.sender not in state.accounts:
        raise StateDivergence(f"unknown owner {tx.sender.hex()[:16]}")
    if action.period < 1:
        raise StateDivergence("sensor period must be >= 1 second")
    sensor_id = derive_sensor_id(tx.sender, action.metadata, tx.sequence)
    if sensor_id in state.sensors:
        raise StateDivergence(f"duplicate sensor {sensor_id.hex()[:16]}")
    stream_id = derive_stream_id(sensor_id)
    state.sensors[sensor_id] = SensorRecord(
        sensor_id=sensor_id,
        owner=tx.sender,
        metadata=dict(action.metadata),
        stream_id=stream_id,
    )
    state.streams[stream_id] = Stream(
        stream_id=stream_id,
        sensor_id=sensor_id,
        owner=tx.sender,
        price=action.price,
        period=action.period,
        schema_tag=action.schema_tag,
    )


def _apply_subscribe(state: MarketState, tx: Transaction, action: SubscribeAction) -> None:
    stream = state.streams.get(action.stream_id)
    if stream is None:
        raise StateDivergence(f"unknown stream {action.stream_id.hex()[:16]}")
    buyer = state.accounts.get(tx.sender)
    if buyer is None:
        raise StateDivergence(f"unknown buyer {tx.sender.hex()[:16]}")
    if action.paid != stream.price:
        raise StateDivergence(f"paid {action.paid} != stream price {stream.price}")
    if action.expiry <= action.start:
        raise StateDivergence("subscription expiry not after start")
    if action.expiry - action.start != stream.period:
        raise StateDivergence("subscription interval differs from stream period")
    if buyer.balance < action.paid:
        raise StateDivergence(f"balance {buyer.balance} < price {action.paid}")
    sub_id = derive_sub_id(tx.sender, action.stream_id, tx.sequence)
    state.accounts[tx.sender] = replace(buyer, balance=buyer.balance - action.paid)
    owner = state.accounts[stream.owner]
    state.accounts[stream.owner] = replace(owner, balance=owner.balance + action.paid)
    state.subscriptions[sub_id] = Subscription(
        sub_id=sub_id,
        buyer=tx.sender,
        stream_id=action.stream_id,
        start=action.start,
        expiry=action.expiry,
        watermark_key_id=derive_watermark_key_id(sub_id),
        paid=action.paid,
    )


def _apply_transfer(state: MarketState, tx: Transaction, action: TransferAction) -> None:
    sender = state.accounts.get(tx.sender)
    receiver = state.accounts.get(action.to)
    if sender is None or receiver is None:
        raise StateDivergence("transfer endpoint account missing")
    if sender.balance < action.amount:
        raise StateDivergence(f"balance {sender.balance} < amount {action.amount}")
    if tx.sender == action.to:
        return  # self-transfer: accepted no-op
    state.accounts[tx.sender] = replace(sender, balance=sender.balance - action.amount)
    state.accounts[action.to] = replace(
        receiver, balance=receiver.balance + action.amount
    )


def _apply_publish(state: MarketState, tx: Transaction, action: PublishDataAction) -> None:
    if tx.sender not in state.accounts:
        raise StateDivergence(f"unknown publisher {tx.sender.hex()[:16]}")
    if action.sensor_id not in state.sensors:
        raise StateDivergence(f"unknown sensor {action.sensor_id.hex()[:16]}")
    state.publications[action.envelope_id] = Publication(
        envelope_id=action.envelope_id,
        sensor_id=action.sensor_id,
        captured_at=action.captured_at,
        publisher=tx.sender,
    )


def _apply_deliver(state: MarketState, tx: Transaction, action: DeliverAction) -> None:
    if tx.sender not in state.accounts:
        raise StateDivergence(f"unknown deliverer {tx.sender.hex()[:16]}")
    if action.sub_id not in state.subscriptions:
        raise StateDivergence(f"unknown subscription {action.sub_id.hex()[:16]}")
    state.deliveries.add((action.sub_id, action.envelope_id, action.delivered_at))


_APPLY = {
    TxKind.SIGN_UP: (_apply_sign_up, SignUpAction),
    TxKind.REGISTER_SENSOR: (_apply_register_sensor, RegisterSensorAction),
    TxKind.SUBSCRIBE: (_apply_subscribe, SubscribeAction),
    TxKind.TRANSFER: (_apply_transfer, TransferAction),
    TxKind.PUBLISH_DATA: (_apply_publish, PublishDataAction),
    TxKind.DELIVER: (_apply_deliver, DeliverAction),
}


def apply_committed(state: MarketState, transactions) -> MarketState:
    """Replay committed transactions in ledger order onto state.

    Already-applied tx ids are skipped (idempotent replay). Any
    validation failure here means the committed ledger contradicts the
    market rules, which is fatal: StateDivergence.
    """
    for tx in transactions:
        if tx.tx_id in state.applied_tx:
            continue
        entry = _APPLY.get(tx.kind)
        if entry is None:
            raise StateDivergence(f"unsupported committed kind {tx.kind!r}")
        apply_fn, action_cls = entry
        try:
            action = action_cls.decode(tx.payload)
        except DecodeError as exc:
            raise StateDivergence(f"undecodable committed payload: {exc}") from exc
        apply_fn(state, tx, action)
        state.applied_tx.add(tx.tx_id)
        state.sequences[tx.sender] = max(
            state.sequences.get(tx.sender, 0), tx.sequence
        )
    return state


def replay(transactions) -> MarketState:
    """Fresh MarketState from a full ledger transaction sequence."""
    return apply_committed(MarketState(), transactions)


# -- queries ---------------------------------------------------------------------

def has_access(state: MarketState, buyer: bytes, stream_id: bytes, now: int) -> bool:
    """True iff an unexpired subscription covers now (half-open interval)."""
    return any(
        sub.buyer == buyer and sub.stream_id == stream_id and sub.start <= now < sub.expiry
        for sub in state.subscriptions.values()
    )


def subscription_for(
    state: MarketState, buyer: bytes, stream_id: bytes, now: int
) -> Subscription | None:
    """The covering subscription with the latest expiry, if any."""
    live = [
        sub
        for sub in state.subscriptions.values()
        if sub.buyer == buyer and sub.stream_id == stream_id and sub.start <= now < sub.expiry
    ]
    return max(live, key=lambda s: (s.expiry, s.sub_id), default=None)


def is_self_subscription(state: MarketState, sub_id: bytes) -> bool:
    """Flag subscriptions where the buyer owns the stream (allowed, but
    surfaced so operators can spot wash trading)."""
    sub = state.subscriptions.get(sub_id)
    if sub is None:
        raise UnknownSubscription(sub_id.hex())
    return state.streams[sub.stream_id].owner == sub.buyer


# -- canonical serialization --------------------------------------------------------

def encode_market_state(state: MarketState) -> bytes:
    """Canonical bytes of the whole market state (sorted maps), used for
    the replay-equality oracle and state digests."""
    parts: list[bytes] = [codec.enc_u64(state.total_supply)]

    parts.append(codec.enc_u32(len(state.accounts)))
    for address in sorted(state.accounts):
        a = state.accounts[address]
        parts.extend(
            (address, a.public_key, codec.enc_u64(a.balance), codec.enc_u8(a.role),
             codec.enc_u64(a.created_at))
        )

    parts.append(codec.enc_u32(len(state.sensors)))
    for sensor_id in sorted(state.sensors):
        s = state.sensors[sensor_id]
        parts.extend((sensor_id, s.owner, codec.enc_str_map(s.metadata), s.stream_id))

    parts.append(codec.enc_u32(len(state.streams)))
    for stream_id in sorted(state.streams):
        s = state.streams[stream_id]
        parts.extend(
            (stream_id, s.sensor_id, s.owner, codec.enc_u64(s.price),
             codec.enc_u64(s.period), codec.enc_str(s.schema_tag))
        )

    parts.append(codec.enc_u32(len(state.subscriptions)))
    for sub_id in sorted(state.subscriptions):
        s = state.subscriptions[sub_id]
        parts.extend(
            (sub_id, s.buyer, s.stream_id, codec.enc_u64(s.start),
             codec.enc_u64(s.expiry), s.watermark_key_id, codec.enc_u64(s.paid))
        )

    parts.append(codec.enc_u32(len(state.publications)))
    for envelope_id in sorted(state.publications):
        p = state.publications[envelope_id]
        parts.extend(
            (envelope_id, p.sensor_id, codec.enc_u64(p.captured_at), p.publisher)
        )

    parts.append(codec.enc_u32(len(state.deliveries)))
    for sub_id, envelope_id, delivered_at in sorted(state.deliveries):
        parts.extend((sub_id, envelope_id, codec.enc_u64(delivered_at)))

    parts.append(codec.enc_u32(len(state.applied_tx)))
    parts.extend(sorted(state.applied_tx))

    parts.append(codec.enc_u32(len(state.sequences)))
    for address in sorted(state.sequences):
        parts.extend((address, codec.enc_u64(state.sequences[address])))

    return b"".join(parts)


def market_digest(state: MarketState) -> bytes:
    return hashlib.sha256(encode_market_state(state)).digest()
