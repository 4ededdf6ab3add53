"""Hash-linked block ledger: block anatomy, genesis, append, verification.

Canonical encodings are byte-exact per docs/FORMATS.md. A block's hash
is the SHA-256 of its entire canonical encoding up to (not including)
the trailing hash field, so any change to any earlier byte, including
transaction bytes, changes the hash.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum

from datchain import codec
from datchain.codec import DecodeError, Reader
from datchain.errors import (
    BadSignature,
    InvalidParent,
    InvalidProof,
    InvalidTransaction,
    StaleIndex,
    UnknownSender,
)
from datchain.keys import KeyPair, address_of, verify_signature

HASH_LEN = 32
ZERO_HASH = b"\x00" * 32

# Trailing-hash input starts at byte 0; the nonce sits at this fixed
# offset (index u64 + prev_hash 32 + timestamp u64) for miners.
NONCE_OFFSET = 8 + 32 + 8

MAX_BLOCK_TXS = 100

_GENESIS_ROOT_TAG = b"DATCHAIN-GENESIS\x00"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class TxKind(IntEnum):
    SIGN_UP = 1
    REGISTER_SENSOR = 2
    CREATE_STREAM = 3
    PUBLISH_DATA = 4
    SUBSCRIBE = 5
    TRANSFER = 6
    DELIVER = 7


@dataclass(frozen=True)
class Transaction:
    """A signed marketplace action.

    body = u8 kind || sender (32) || u64 sequence || payload, signed as a
    whole; tx_id = SHA-256(body).
    """

    kind: TxKind
    sender: bytes
    sequence: int
    payload: bytes
    public_key: bytes
    signature: bytes

    @property
    def body(self) -> bytes:
        return (
            codec.enc_u8(self.kind)
            + self.sender
            + codec.enc_u64(self.sequence)
            + self.payload
        )

    @property
    def tx_id(self) -> bytes:
        return sha256(self.body)

    def encode(self) -> bytes:
        return codec.enc_bytes(self.body) + self.public_key + self.signature

    @classmethod
    def decode(cls, reader: Reader) -> "Transaction":
        body = reader.vbytes()
        public_key = reader.take(32)
        signature = reader.take(64)
        br = Reader(body)
        try:
            kind = TxKind(br.u8())
        except ValueError as exc:
            raise DecodeError(f"unknown transaction kind: {exc}") from exc
        sender = br.take(32)
        sequence = br.u64()
        payload = br.take(br.remaining())
        return cls(kind, sender, sequence, payload, public_key, signature)

    def verify(self) -> None:
        """Self-contained checks: key binds to sender and signature holds."""
        if address_of(self.public_key) != self.sender:
            raise BadSignature("public key does not hash to sender address")
        if not verify_signature(self.public_key, self.signature, self.body):
            raise BadSignature("signature does not verify")


def sign_transaction(
    kind: TxKind, payload: bytes, keypair: KeyPair, sequence: int
) -> Transaction:
    """Build and sign a transaction from the caller's keypair."""
    body = codec.enc_u8(kind) + keypair.address + codec.enc_u64(sequence) + payload
    return Transaction(
        kind=kind,
        sender=keypair.address,
        sequence=sequence,
        payload=payload,
        public_key=keypair.public_key,
        signature=keypair.sign(body),
    )


def verify_transaction(tx: Transaction, registry: dict[bytes, bytes]) -> bool:
    """Check tx against a sender -> public key registry.

    Raises UnknownSender when the sender is not registered at all (sign-up
    transactions register themselves, so they are checked self-contained).
    """
    if tx.kind != TxKind.SIGN_UP:
        known = registry.get(tx.sender)
        if known is None:
            raise UnknownSender(tx.sender.hex())
        if known != tx.public_key:
            return False
    try:
        tx.verify()
    except BadSignature:
        return False
    return True


def compute_tx_root(transactions: list[Transaction]) -> bytes:
    """Hash over the ordered transaction ids."""
    return sha256(b"".join(tx.tx_id for tx in transactions))


def genesis_tx_root(chain_id: str) -> bytes:
    """The genesis block has no transactions; its tx_root commits to the
    chain id instead so distinct chains get distinct genesis hashes."""
    return sha256(_GENESIS_ROOT_TAG + chain_id.encode("utf-8"))


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: bytes
    timestamp: int
    nonce: int
    tx_root: bytes
    transactions: tuple[Transaction, ...]
    hash: bytes = b""

    def encode_header(self) -> bytes:
        return (
            codec.enc_u64(self.index)
            + self.prev_hash
            + codec.enc_u64(self.timestamp)
            + codec.enc_u64(self.nonce)
            + self.tx_root
        )

    def encode_for_hash(self) -> bytes:
        """All fields preceding the hash: header plus transaction section."""
        parts = [self.encode_header(), codec.enc_u32(len(self.transactions))]
        parts.extend(tx.encode() for tx in self.transactions)
        return b"".join(parts)

    def encode(self) -> bytes:
        return self.encode_for_hash() + self.hash

    def with_hash(self) -> "Block":
        return Block(
            self.index,
            self.prev_hash,
            self.timestamp,
            self.nonce,
            self.tx_root,
            self.transactions,
            compute_block_hash(self),
        )

    def with_nonce(self, nonce: int) -> "Block":
        block = Block(
            self.index,
            self.prev_hash,
            self.timestamp,
            nonce,
            self.tx_root,
            self.transactions,
        )
        return block.with_hash()

    @classmethod
    def decode(cls, data: bytes) -> "Block":
        r = Reader(data)
        index = r.u64()
        prev_hash = r.take(32)
        timestamp = r.u64()
        nonce = r.u64()
        tx_root = r.take(32)
        count = r.u32()
        if count > MAX_BLOCK_TXS:
            raise DecodeError(f"block has {count} transactions, cap is {MAX_BLOCK_TXS}")
        txs = tuple(Transaction.decode(r) for _ in range(count))
        stored_hash = r.take(32)
        r.done()
        return cls(index, prev_hash, timestamp, nonce, tx_root, txs, stored_hash)


def compute_block_hash(block: Block) -> bytes:
    return sha256(block.encode_for_hash())


def make_genesis(chain_id: str, timestamp: int) -> Block:
    block = Block(
        index=0,
        prev_hash=ZERO_HASH,
        timestamp=timestamp,
        nonce=0,
        tx_root=genesis_tx_root(chain_id),
        transactions=(),
    )
    return block.with_hash()


@dataclass
class ChainState:
    """Append-only ordered block store plus derived lookups."""

    blocks: list[Block] = field(default_factory=list)
    last_sequence: dict[bytes, int] = field(default_factory=dict)
    tx_index: dict[bytes, int] = field(default_factory=dict)  # tx_id -> height

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    @classmethod
    def from_genesis(cls, genesis: Block) -> "ChainState":
        state = cls()
        state.blocks.append(genesis)
        return state


def append_block(state: ChainState, block: Block, engine=None) -> ChainState:
    """Validate and commit one block. Mutates and returns state.

    engine, when given, must expose validate_block(block) -> bool; it is
    consulted after the structural checks (consensus proof-of-validity).
    """
    if block.index != state.height + 1:
        raise StaleIndex(f"expected index {state.height + 1}, got {block.index}")
    if block.prev_hash != state.head_hash:
        raise InvalidParent(
            f"prev_hash {block.prev_hash.hex()[:16]} != head {state.head_hash.hex()[:16]}"
        )
    if block.hash != compute_block_hash(block):
        raise InvalidProof("stored hash does not recompute")
    if block.tx_root != compute_tx_root(list(block.transactions)):
        raise InvalidTransaction("tx_root does not match transactions")
    if len(block.transactions) > MAX_BLOCK_TXS:
        raise InvalidTransaction("block over transaction cap")
    if engine is not None and not engine.validate_block(block):
        raise InvalidProof("consensus validity check failed")

    seen_seq: dict[bytes, int] = {}
    for tx in block.transactions:
        try:
            tx.verify()
        except BadSignature as exc:
            raise InvalidTransaction(str(exc)) from exc
        floor_seq = max(
            state.last_sequence.get(tx.sender, 0), seen_seq.get(tx.sender, 0)
        )
        if tx.sequence <= floor_seq:
            raise InvalidTransaction(
                f"sequence {tx.sequence} not above {floor_seq} for {tx.sender.hex()[:16]}"
            )
        seen_seq[tx.sender] = tx.sequence

    height = block.index
    for tx in block.transactions:
        state.last_sequence[tx.sender] = max(
            state.last_sequence.get(tx.sender, 0), tx.sequence
        )
        state.tx_index[tx.tx_id] = height
    state.blocks.append(block)
    return state


@dataclass(frozen=True)
class ChainReport:
    valid: bool
    first_bad_index: int | None = None
    reason: str | None = None


def verify_chain(state: ChainState) -> ChainReport:
    """Recompute every hash and link; report the first violation."""
    if not state.blocks:
        return ChainReport(valid=False, first_bad_index=0, reason="empty chain")
    for i, block in enumerate(state.blocks):
        if block.index != i:
            return ChainReport(False, i, f"index {block.index} at position {i}")
        if i == 0:
            if block.prev_hash != ZERO_HASH:
                return ChainReport(False, 0, "genesis prev_hash not all-zero")
        else:
            if block.prev_hash != state.blocks[i - 1].hash:
                return ChainReport(False, i, "prev_hash does not match parent hash")
            if block.tx_root != compute_tx_root(list(block.transactions)):
                return ChainReport(False, i, "tx_root mismatch")
        if block.hash != compute_block_hash(block):
            return ChainReport(False, i, "stored hash does not recompute")
    return ChainReport(valid=True)


def chain_digest(state: ChainState) -> bytes:
    """Hash over the canonical serialization of the whole chain."""
    h = hashlib.sha256()
    for block in state.blocks:
        h.update(block.encode())
    return h.digest()
