"""Node integration: commits, persistence, restart replay, data path."""

import os
from pathlib import Path

import pytest

from datchain import market, vault
from datchain.consensus import PowConfig
from datchain.errors import (
    AccessDenied,
    ConfigError,
    InvalidTransaction,
    NotFound,
)
from datchain.kernels import leading_zero_bits
from datchain.keys import KeyPair
from datchain.ledger import TxKind
from datchain.node import (
    DatchainNode,
    NodeConfig,
    load_node_config,
    parse_node_config,
)

T0 = 1_700_000_000
OWNER = KeyPair.from_seed(bytes([21]) * 32)
BUYER = KeyPair.from_seed(bytes([22]) * 32)
OTHER = KeyPair.from_seed(bytes([23]) * 32)


@pytest.fixture(params=["chain", "tangle"])
def mode(request):
    return request.param


@pytest.fixture()
def clock():
    return [T0]


@pytest.fixture()
def node(tmp_path, mode, clock):
    cfg = NodeConfig(
        data_dir=tmp_path / "data",
        ledger_mode=mode,
        engine="pow",
        difficulty_bits=4,
    )
    return DatchainNode(cfg, now=lambda: clock[0])


def _sign_up(node, keypair, role=market.ROLE_BOTH, grant=100):
    tx = market.build_sign_up(node.market, keypair, role, grant, node.now())
    return node.submit_signed(tx.encode(), (TxKind.SIGN_UP,))


def _sensor(node, keypair, price=30, period=3600):
    tx = market.build_register_sensor(
        node.market, keypair, {"kind": "temp", "unit": "C"}, price, period, "v1"
    )
    tx, receipt = node.submit_signed(tx.encode(), (TxKind.REGISTER_SENSOR,))
    action = market.RegisterSensorAction.decode(tx.payload)
    sensor_id = market.derive_sensor_id(tx.sender, action.metadata, tx.sequence)
    return sensor_id, market.derive_stream_id(sensor_id), receipt


def _subscribe(node, keypair, stream_id):
    tx = market.build_subscribe(node.market, keypair, stream_id, node.now())
    return node.submit_signed(tx.encode(), (TxKind.SUBSCRIBE,))


class TestLifecycle:
    def test_full_flow_and_receipts(self, node):
        receipts = []
        _, r = _sign_up(node, OWNER)
        receipts.append(r)
        _, r = _sign_up(node, BUYER)
        receipts.append(r)
        sensor_id, stream_id, r = _sensor(node, OWNER)
        receipts.append(r)
        envelope, r = node.publish(sensor_id, b"temp=21.5C", node.now())
        receipts.append(r)
        _, r = _subscribe(node, BUYER, stream_id)
        receipts.append(r)
        delivery, sub, r = node.deliver(envelope.envelope_id, BUYER.address)
        receipts.append(r)

        assert delivery.plaintext == b"temp=21.5C"
        assert node.market.accounts[BUYER.address].balance == 70
        assert node.market.accounts[OWNER.address].balance == 130
        assert node.market.total_supply == 200
        # every step's transaction is retrievable at its stated location
        for receipt in receipts:
            tx, location = node.find_tx(receipt.tx_id)
            assert tx.tx_id == receipt.tx_id
            assert location == receipt.location

    def test_operator_account_exists_with_zero_balance(self, node):
        account = node.market.accounts[node.operator.address]
        assert account.balance == 0
        assert node.market.total_supply == 0

    def test_watermark_tag_verifies_and_distinguishes_buyers(self, node):
        _sign_up(node, OWNER)
        _sign_up(node, BUYER)
        _sign_up(node, OTHER)
        sensor_id, stream_id, _ = _sensor(node, OWNER)
        envelope, _ = node.publish(sensor_id, b"payload", node.now())
        _subscribe(node, BUYER, stream_id)
        _subscribe(node, OTHER, stream_id)
        d1, s1, _ = node.deliver(envelope.envelope_id, BUYER.address)
        d2, s2, _ = node.deliver(envelope.envelope_id, OTHER.address)
        master = node.keystore.watermark_master
        assert vault.verify_delivery(d1, s1, master)
        assert not vault.verify_delivery(d1, s2, master)
        assert d1.watermark_tag != d2.watermark_tag

    def test_owner_reads_own_stream_without_subscription(self, node):
        _sign_up(node, OWNER)
        sensor_id, _, _ = _sensor(node, OWNER)
        envelope, _ = node.publish(sensor_id, b"mine", node.now())
        delivery, sub, receipt = node.deliver(envelope.envelope_id, OWNER.address)
        assert delivery.plaintext == b"mine"
        assert sub is None and receipt is None

    def test_deliver_requires_live_subscription(self, node, clock):
        _sign_up(node, OWNER)
        _sign_up(node, BUYER)
        sensor_id, stream_id, _ = _sensor(node, OWNER, period=3600)
        envelope, _ = node.publish(sensor_id, b"x", node.now())
        with pytest.raises(AccessDenied):
            node.deliver(envelope.envelope_id, BUYER.address)
        _subscribe(node, BUYER, stream_id)
        node.deliver(envelope.envelope_id, BUYER.address)
        clock[0] += 3600  # subscription window is half-open at expiry
        with pytest.raises(AccessDenied):
            node.deliver(envelope.envelope_id, BUYER.address)

    def test_publish_unknown_sensor(self, node):
        with pytest.raises(NotFound):
            node.publish(bytes(32), b"x", T0)

    def test_deliver_unknown_envelope(self, node):
        _sign_up(node, BUYER)
        with pytest.raises(NotFound):
            node.deliver(bytes(32), BUYER.address)


class TestSubmission:
    def test_rejects_wrong_kind(self, node):
        tx = market.build_sign_up(node.market, OWNER, market.ROLE_BOTH, 100, T0)
        with pytest.raises(InvalidTransaction, match="kind"):
            node.submit_signed(tx.encode(), (TxKind.TRANSFER,))

    def test_rejects_bad_sequence(self, node):
        _sign_up(node, OWNER)
        tx = market.build_register_sensor(
            node.market, OWNER, {"k": "v"}, 1, 60, sequence=7
        )
        with pytest.raises(InvalidTransaction, match="sequence"):
            node.submit_signed(tx.encode(), (TxKind.REGISTER_SENSOR,))

    def test_rejects_forged_signature(self, node):
        tx = market.build_sign_up(node.market, OWNER, market.ROLE_BOTH, 100, T0)
        raw = bytearray(tx.encode())
        raw[-1] ^= 0x01
        with pytest.raises(InvalidTransaction):
            node.submit_signed(bytes(raw), (TxKind.SIGN_UP,))

    def test_rejects_wrong_grant(self, node):
        tx = market.build_sign_up(node.market, OWNER, market.ROLE_BOTH, 9999, T0)
        with pytest.raises(InvalidTransaction, match="grant"):
            node.submit_signed(tx.encode(), (TxKind.SIGN_UP,))

    def test_rejects_garbage_bytes(self, node):
        with pytest.raises(InvalidTransaction):
            node.submit_signed(b"not a transaction", (TxKind.SIGN_UP,))


class TestPersistence:
    def test_restart_reproduces_state(self, tmp_path, mode, clock):
        cfg = NodeConfig(
            data_dir=tmp_path / "data",
            ledger_mode=mode,
            engine="pow",
            difficulty_bits=4,
        )
        node = DatchainNode(cfg, now=lambda: clock[0])
        _sign_up(node, OWNER)
        _sign_up(node, BUYER)
        sensor_id, stream_id, _ = _sensor(node, OWNER)
        envelope, _ = node.publish(sensor_id, b"persist me", node.now())
        _subscribe(node, BUYER, stream_id)
        node.deliver(envelope.envelope_id, BUYER.address)

        before_ledger = node.ledger_digest()
        before_market = market.market_digest(node.market)
        height = node.height()

        node2 = DatchainNode(cfg, now=lambda: clock[0])
        assert node2.height() == height
        assert node2.ledger_digest() == before_ledger
        assert market.market_digest(node2.market) == before_market
        assert node2.operator.address == node.operator.address
        assert node2.verify_ledger().valid
        # envelope still decryptable after restart
        delivery, _, _ = node2.deliver(envelope.envelope_id, BUYER.address)
        assert delivery.plaintext == b"persist me"

    def test_market_state_equals_ledger_replay(self, node):
        _sign_up(node, OWNER)
        _sign_up(node, BUYER)
        sensor_id, stream_id, _ = _sensor(node, OWNER)
        node.publish(sensor_id, b"a", node.now())
        _subscribe(node, BUYER, stream_id)
        if node.chain is not None:
            txs = [tx for b in node.chain.blocks for tx in b.transactions]
        else:
            txs = [
                node.tangle.sites[s].payload
                for s in node.tangle.order
                if node.tangle.sites[s].payload is not None
            ]
        assert market.market_digest(market.replay(txs)) == market.market_digest(
            node.market
        )

    def test_secret_files_created_restrictively(self, node, tmp_path):
        for name in ("operator.key", "auth.secret"):
            path = tmp_path / "data" / name
            assert path.exists()
            assert os.stat(path).st_mode & 0o777 == 0o600

    def test_preprovisioned_hex_operator_key(self, tmp_path, clock):
        seed = bytes(range(32))
        data_dir = tmp_path / "pre"
        data_dir.mkdir()
        (data_dir / "operator.key").write_text(seed.hex() + "\n")
        node = DatchainNode(NodeConfig(data_dir=data_dir), now=lambda: clock[0])
        assert node.operator.address == KeyPair.from_seed(seed).address

    def test_corrupt_operator_key_rejected(self, tmp_path, clock):
        data_dir = tmp_path / "bad"
        data_dir.mkdir()
        (data_dir / "operator.key").write_bytes(b"short")
        with pytest.raises(ConfigError):
            DatchainNode(NodeConfig(data_dir=data_dir), now=lambda: clock[0])


class TestLedgerRules:
    def test_chain_blocks_meet_pow_difficulty(self, tmp_path, clock):
        cfg = NodeConfig(
            data_dir=tmp_path / "d", ledger_mode="chain", engine="pow", difficulty_bits=6
        )
        node = DatchainNode(cfg, now=lambda: clock[0])
        _sign_up(node, OWNER)
        assert isinstance(node.engine_cfg, PowConfig)
        for block in node.chain.blocks[1:]:
            assert leading_zero_bits(block.hash) >= 6

    def test_non_pow_engine_appends_without_mining(self, tmp_path, clock):
        cfg = NodeConfig(data_dir=tmp_path / "d", ledger_mode="chain", engine="pbft")
        node = DatchainNode(cfg, now=lambda: clock[0])
        _sign_up(node, OWNER)
        assert node.chain.height == 2  # operator + one sign-up
        assert all(b.nonce == 0 for b in node.chain.blocks[1:])

    def test_tangle_mode_structure_verifies(self, tmp_path, clock):
        cfg = NodeConfig(data_dir=tmp_path / "d", ledger_mode="tangle")
        node = DatchainNode(cfg, now=lambda: clock[0])
        _sign_up(node, OWNER)
        _sign_up(node, BUYER)
        _sensor(node, OWNER)
        report = node.verify_ledger()
        assert report.valid
        assert node.tangle.site_count() == 5  # genesis + operator + 3 actions


class TestConfig:
    def test_parse_defaults_and_overrides(self):
        cfg = parse_node_config("")
        assert cfg.ledger_mode == "chain" and cfg.engine == "pow"
        cfg = parse_node_config(
            "ledger_mode = tangle\nengine = fpc\nport = 9000\n"
            "initial_grant = 55\nauth_secret = " + "ab" * 32 + "\n"
        )
        assert cfg.ledger_mode == "tangle"
        assert cfg.engine == "fpc"
        assert cfg.port == 9000
        assert cfg.initial_grant == 55
        assert cfg.auth_secret == bytes.fromhex("ab" * 32)

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "node.conf"
        path.write_text("port = 8599\n# comment\ndata_dir = /tmp/x\n")
        cfg = load_node_config(path)
        assert cfg.port == 8599
        assert cfg.data_dir == Path("/tmp/x")

    @pytest.mark.parametrize(
        "text",
        [
            "ledger_mode = scroll",
            "engine = raft",
            "port = 0",
            "port = notanumber",
            "difficulty_bits = 40",
            "session_ttl = 0",
            "auth_secret = abcd",  # wrong length
            "mystery = 1",
            "justakey",
        ],
    )
    def test_parse_rejects(self, text):
        with pytest.raises(ConfigError):
            parse_node_config(text)
