"""Single marketplace node: persistent ledger, synchronous commits, vault.

One process owns one data directory. Every marketplace action is a
signed transaction committed synchronously to the configured ledger
(hash-linked chain or tangle) and applied to the in-memory market
state; sensor payloads are encrypted into the blob store with
per-stream keys before anything touches disk. Restarting a node replays
the persisted ledger from genesis, which must reproduce the exact same
market state and explorer views.

Transactions that clients can author (sign-up, sensor registration,
subscription) arrive fully signed by the account key. Data publication
and delivery receipts are signed by the node's operator key instead:
an envelope id only exists after server-side encryption, so the node
attests those events itself. The operator holds a zero-balance account
created on first start.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from datchain import market, vault
from datchain.codec import Reader
from datchain.consensus import (
    DPosConfig,
    FpcConfig,
    PbftConfig,
    PosConfig,
    PowConfig,
    RpcaConfig,
    pow_mine,
)
from datchain.errors import (
    AccessDenied,
    ConfigError,
    DatchainError,
    InvalidTransaction,
    NotFound,
    StateDivergence,
)
from datchain.keys import KeyPair
from datchain.ledger import (
    Block,
    ChainState,
    Transaction,
    TxKind,
    append_block,
    chain_digest,
    compute_tx_root,
    make_genesis,
    verify_chain,
)
from datchain.rng import Rng, derive_seed
from datchain.store import RECORD_BLOCK, RECORD_SITE, RecordFile
from datchain.tangle import (
    DEFAULT_ATTACH_DIFFICULTY,
    TangleSite,
    attach,
    genesis_site_id,
    insert_site,
    tangle_digest,
    tangle_genesis,
    verify_tangle,
)

_ENGINE_NAMES = ("pow", "pos", "dpos", "pbft", "rpca", "fpc")
_LEDGER_MODES = ("chain", "tangle")

OPERATOR_KEY_FILE = "operator.key"
AUTH_SECRET_FILE = "auth.secret"
LEDGER_FILE = "ledger.dat"
KEYSTORE_FILE = "keys.bin"
BLOB_DIR = "blobs"


@dataclass(frozen=True)
class NodeConfig:
    data_dir: Path = Path("datchain-data")
    ledger_mode: str = "chain"
    engine: str = "pow"
    difficulty_bits: int = 8
    attach_difficulty: int = DEFAULT_ATTACH_DIFFICULTY
    host: str = "127.0.0.1"
    port: int = 8570
    initial_grant: int = 100
    chain_id: str = "datchain"
    session_ttl: int = 3600
    auth_secret: bytes | None = None

    def validate(self) -> "NodeConfig":
        if self.ledger_mode not in _LEDGER_MODES:
            raise ConfigError(f"unknown ledger_mode {self.ledger_mode!r}")
        if self.engine not in _ENGINE_NAMES:
            raise ConfigError(f"unknown engine {self.engine!r}")
        if not 0 <= self.difficulty_bits <= 32:
            raise ConfigError("difficulty_bits must be in 0..=32")
        if not 0 < self.port < 65536:
            raise ConfigError(f"invalid port {self.port}")
        if self.initial_grant < 0 or self.session_ttl < 1:
            raise ConfigError("initial_grant >= 0 and session_ttl >= 1 required")
        if self.auth_secret is not None and len(self.auth_secret) != 32:
            raise ConfigError("auth_secret must be 32 bytes (64 hex chars)")
        return self


_CONFIG_FIELDS = {
    "data_dir": Path,
    "ledger_mode": str,
    "engine": str,
    "difficulty_bits": int,
    "attach_difficulty": int,
    "host": str,
    "port": int,
    "initial_grant": int,
    "chain_id": str,
    "session_ttl": int,
    "auth_secret": bytes.fromhex,
}


def parse_node_config(text: str) -> NodeConfig:
    """Parse the `key = value` node config format (# starts a comment)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_FIELDS[key](value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return NodeConfig(**values).validate()


def load_node_config(path: str | Path) -> NodeConfig:
    return parse_node_config(Path(path).read_text("utf-8"))


def _engine_config(config: NodeConfig):
    return {
        "pow": PowConfig(difficulty_bits=config.difficulty_bits),
        "pos": PosConfig(),
        "dpos": DPosConfig(),
        "pbft": PbftConfig(),
        "rpca": RpcaConfig(),
        "fpc": FpcConfig(),
    }[config.engine]


def _load_or_create_secret(path: Path, nbytes: int = 32) -> bytes:
    if path.exists():
        data = path.read_bytes()
        if len(data) == nbytes:
            return data
        try:  # keygen writes the seed as hex text
            text = data.decode("ascii").strip()
            raw = bytes.fromhex(text)
        except (UnicodeDecodeError, ValueError):
            raw = b""
        if len(raw) == nbytes:
            return raw
        raise ConfigError(f"{path} is corrupt: expected {nbytes} raw or hex bytes")
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    try:
        secret = os.urandom(nbytes)
        os.write(fd, secret)
        os.fsync(fd)
    finally:
        os.close(fd)
    return secret


@dataclass(frozen=True)
class CommitReceipt:
    tx_id: bytes
    location: str  # "block:<index>" or "site:<hex id>"


@dataclass
class NodeMetrics:
    commits: int = 0
    publishes: int = 0
    deliveries: int = 0
    started_at: int = field(default_factory=lambda: int(time.time()))


class DatchainNode:
    """Owns the ledger, market state, and vault for one data directory."""

    def __init__(self, config: NodeConfig, now=None):
        self.config = config.validate()
        self.now = now or (lambda: int(time.time()))
        data_dir = Path(config.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        self.operator = KeyPair.from_seed(
            _load_or_create_secret(data_dir / OPERATOR_KEY_FILE)
        )
        self.auth_secret = config.auth_secret or _load_or_create_secret(
            data_dir / AUTH_SECRET_FILE
        )
        self.keystore = vault.KeyStore(data_dir / KEYSTORE_FILE)
        self.blobs = vault.BlobStore(data_dir / BLOB_DIR)
        self.records = RecordFile(data_dir / LEDGER_FILE)
        self.engine_cfg = _engine_config(config)
        self.metrics = NodeMetrics()
        self._lock = threading.Lock()
        self._attach_seed = derive_seed(0, "node-attach-" + self.operator.address.hex())
        self.chain: ChainState | None = None
        self.tangle = None
        self.market = market.MarketState()
        if self.records.exists() and self.records.count() > 0:
            self._load_from_disk()
        else:
            self._init_fresh()
        if self.operator.address not in self.market.accounts:
            self._commit_operator_account()

    # -- startup ------------------------------------------------------------

    def _init_fresh(self) -> None:
        if self.config.ledger_mode == "chain":
            genesis = make_genesis(self.config.chain_id, 0)
            self.chain = ChainState.from_genesis(genesis)
            self.records.append(RECORD_BLOCK, genesis.encode())
        else:
            self.tangle = tangle_genesis(self.config.chain_id)
            genesis = self.tangle.sites[self.tangle.genesis_id]
            self.records.append(RECORD_SITE, genesis.encode())

    def _load_from_disk(self) -> None:
        records = self.records.read_all()
        txs: list[Transaction] = []
        if self.config.ledger_mode == "chain":
            rtype, raw = records[0]
            if rtype != RECORD_BLOCK:
                raise StateDivergence("ledger file does not start with a block")
            self.chain = ChainState.from_genesis(Block.decode(raw))
            for rtype, raw in records[1:]:
                if rtype != RECORD_BLOCK:
                    raise StateDivergence("mixed record types in chain ledger")
                block = Block.decode(raw)
                append_block(self.chain, block, engine=self.engine_cfg)
                txs.extend(block.transactions)
        else:
            expected_genesis = genesis_site_id(self.config.chain_id)
            rtype, raw = records[0]
            genesis = TangleSite.decode(raw, genesis_id=expected_genesis)
            if rtype != RECORD_SITE or genesis.site_id != expected_genesis:
                raise StateDivergence("ledger file does not start with genesis site")
            self.tangle = tangle_genesis(self.config.chain_id)
            for rtype, raw in records[1:]:
                if rtype != RECORD_SITE:
                    raise StateDivergence("mixed record types in tangle ledger")
                site = TangleSite.decode(raw)
                insert_site(self.tangle, site)
                if site.payload is not None:
                    txs.append(site.payload)
        self.market = market.replay(txs)

    def _commit_operator_account(self) -> None:
        tx = market.build_sign_up(
            self.market, self.operator, market.ROLE_BOTH, 0, self.now()
        )
        self.commit(tx)

    # -- ledger views ---------------------------------------------------------

    def height(self) -> int:
        if self.chain is not None:
            return self.chain.height
        return self.tangle.site_count() - 1

    def ledger_digest(self) -> bytes:
        if self.chain is not None:
            return chain_digest(self.chain)
        return tangle_digest(self.tangle)

    def verify_ledger(self):
        """Full structural re-verification; returns the module's report."""
        if self.chain is not None:
            return verify_chain(self.chain)
        return verify_tangle(self.tangle, difficulty_bits=self.config.attach_difficulty)

    def get_block(self, index: int) -> Block:
        if self.chain is None:
            raise NotFound("node runs a tangle ledger")
        if not 0 <= index <= self.chain.height:
            raise NotFound(f"no block at index {index}")
        return self.chain.blocks[index]

    def get_site(self, ordinal: int) -> TangleSite:
        if self.tangle is None:
            raise NotFound("node runs a chain ledger")
        if not 0 <= ordinal < self.tangle.site_count():
            raise NotFound(f"no site at ordinal {ordinal}")
        return self.tangle.sites[self.tangle.order[ordinal]]

    def find_tx(self, tx_id: bytes) -> tuple[Transaction, str]:
        """Transaction plus its inclusion location."""
        if self.chain is not None:
            index = self.chain.tx_index.get(tx_id)
            if index is None:
                raise NotFound(f"unknown tx {tx_id.hex()[:16]}")
            for tx in self.chain.blocks[index].transactions:
                if tx.tx_id == tx_id:
                    return tx, f"block:{index}"
            raise NotFound(f"unknown tx {tx_id.hex()[:16]}")
        site_id = self.tangle.tx_index.get(tx_id)
        if site_id is None:
            raise NotFound(f"unknown tx {tx_id.hex()[:16]}")
        return self.tangle.sites[site_id].payload, f"site:{site_id.hex()}"

    # -- commit path -----------------------------------------------------------

    def commit(self, tx: Transaction) -> CommitReceipt:
        """Apply one transaction to the market and the ledger, then persist.

        Single-writer: market application is the authoritative validation
        (raises on any divergence, mutating nothing); the ledger append
        after it cannot fail for a tx the market accepted, short of disk
        failure, in which case the replayed state stays consistent.
        """
        with self._lock:
            market.apply_committed(self.market, [tx])
            if self.chain is not None:
                block = Block(
                    index=self.chain.height + 1,
                    prev_hash=self.chain.head_hash,
                    timestamp=self.now(),
                    nonce=0,
                    tx_root=compute_tx_root([tx]),
                    transactions=(tx,),
                )
                if isinstance(self.engine_cfg, PowConfig):
                    block = block.with_nonce(
                        pow_mine(block.with_hash(), self.engine_cfg.difficulty_bits)
                    )
                else:
                    block = block.with_hash()
                append_block(self.chain, block, engine=self.engine_cfg)
                self.records.append(RECORD_BLOCK, block.encode())
                location = f"block:{block.index}"
            else:
                ordinal = self.tangle.site_count()
                rng = Rng(derive_seed(self._attach_seed, f"attach-{ordinal}"))
                site = attach(
                    self.tangle,
                    tx,
                    strategy="uniform",
                    difficulty_bits=self.config.attach_difficulty,
                    rng=rng,
                )
                self.records.append(RECORD_SITE, site.encode())
                location = f"site:{site.site_id.hex()}"
            self.metrics.commits += 1
            return CommitReceipt(tx_id=tx.tx_id, location=location)

    # -- client-signed submissions ------------------------------------------------

    def submit_signed(
        self, tx_bytes: bytes, allowed_kinds: tuple[TxKind, ...]
    ) -> tuple[Transaction, CommitReceipt]:
        """Validate and commit a client-authored transaction."""
        try:
            tx = Transaction.decode(Reader(tx_bytes))
            tx.verify()
            kind = TxKind(tx.kind)
        except (DatchainError, ValueError) as exc:
            raise InvalidTransaction(f"undecodable or unsigned tx: {exc}") from exc
        if kind not in allowed_kinds:
            raise InvalidTransaction(f"kind {tx.kind} not allowed here")
        expected = market.next_sequence(self.market, tx.sender)
        if tx.sequence != expected:
            raise InvalidTransaction(
                f"sequence {tx.sequence} != expected {expected}"
            )
        if kind is TxKind.SIGN_UP:
            action = market.SignUpAction.decode(tx.payload)
            if action.initial_grant != self.config.initial_grant:
                raise InvalidTransaction(
                    f"grant {action.initial_grant} != configured "
                    f"{self.config.initial_grant}"
                )
        return tx, self.commit(tx)

    # -- data path -------------------------------------------------------------

    def publish(
        self, sensor_id: bytes, plaintext: bytes, captured_at: int
    ) -> tuple[vault.DataEnvelope, CommitReceipt]:
        """Encrypt a sensor payload, store the envelope, attest on-ledger."""
        sensor = self.market.sensors.get(sensor_id)
        if sensor is None:
            raise NotFound(f"unknown sensor {sensor_id.hex()[:16]}")
        stream_key = self.keystore.get_or_create(sensor.stream_id)
        nonce = self.keystore.next_nonce(sensor.stream_id)
        envelope = vault.encrypt_payload(
            plaintext, stream_key, captured_at, sensor_id, nonce
        )
        self.blobs.store(envelope)
        tx = market.build_publish_data(
            self.market, self.operator, sensor_id, envelope.envelope_id, captured_at
        )
        receipt = self.commit(tx)
        self.metrics.publishes += 1
        return envelope, receipt

    def deliver(
        self, envelope_id: bytes, buyer: bytes
    ) -> tuple[vault.WatermarkedDelivery, market.Subscription, CommitReceipt]:
        """Watermarked decryption for a live subscriber, receipted on-ledger."""
        publication = self.market.publications.get(envelope_id)
        if publication is None:
            raise NotFound(f"unknown envelope {envelope_id.hex()[:16]}")
        sensor = self.market.sensors[publication.sensor_id]
        now = self.now()
        is_owner = buyer == sensor.owner
        subscription = market.subscription_for(
            self.market, buyer, sensor.stream_id, now
        )
        if subscription is None and not is_owner:
            raise AccessDenied("no live subscription for this stream")
        envelope = self.blobs.fetch(envelope_id)
        stream_key = self.keystore.get(sensor.stream_id)
        if subscription is not None:
            delivery = vault.deliver(
                envelope,
                subscription,
                stream_key,
                self.keystore.watermark_master,
                now,
            )
            tx = market.build_deliver(
                self.market, self.operator, subscription.sub_id, envelope_id, now
            )
            receipt = self.commit(tx)
            self.metrics.deliveries += 1
            return delivery, subscription, receipt
        # owners read their own streams without a subscription or receipt
        plaintext = vault.decrypt_payload(envelope, stream_key)
        delivery = vault.WatermarkedDelivery(
            plaintext=plaintext,
            watermark_tag=b"",
            sub_id=bytes(32),
            envelope_id=envelope_id,
        )
        return delivery, None, None

    # -- snapshots ---------------------------------------------------------------

    def info(self) -> dict:
        return {
            "chain_id": self.config.chain_id,
            "ledger_mode": self.config.ledger_mode,
            "engine": self.config.engine,
            "height": self.height(),
            "initial_grant": self.config.initial_grant,
            "operator": self.operator.address.hex(),
            "ledger_digest": self.ledger_digest().hex(),
        }

    def counters(self) -> dict:
        return {
            "height": self.height(),
            "commits": self.metrics.commits,
            "publishes": self.metrics.publishes,
            "deliveries": self.metrics.deliveries,
            "accounts": len(self.market.accounts),
            "sensors": len(self.market.sensors),
            "streams": len(self.market.streams),
            "subscriptions": len(self.market.subscriptions),
            "publications": len(self.market.publications),
            "deliveries_recorded": len(self.market.deliveries),
            "total_supply": self.market.total_supply,
            "uptime_seconds": int(time.time()) - self.metrics.started_at,
        }
