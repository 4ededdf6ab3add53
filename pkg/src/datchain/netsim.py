"""Deterministic multi-node simulation harness.

N nodes replicate one ledger (chain or tangle) over a seeded in-process
message bus with uniform delivery delay and independent Bernoulli drops.
Injected transactions enter at node 0 (the gateway), are gossiped, and
get committed through the scenario's consensus engine; after the network
quiesces, honest nodes' ledger digests are compared. Everything — the
tick clock, delays, drops, Byzantine choices, mining times — derives
from the scenario seed, so a (scenario, seed) pair fully determines
every emitted byte.

Model boundaries (scale-appropriate simplifications): the winners of
proof-of-work races, the stake-ordered producer schedule, and
voting-epoch closure are computed by the harness scheduler, while every
block, batch, vote, query, response, and sync transfer is a real bus
message subject to delay and drops. Byzantine nodes occupy the highest
node ids (node 0 is always honest); they replicate the ledger normally
but act adversarially in every consensus role. Chain replicas have no
fork choice — the first valid block at an index wins — so a producer
equivocating with two valid blocks splits naive replicas; the
divergence detector exists to catch exactly that.

In tangle mode the agreed unit is a transaction batch anchored to a
site ordinal; honest replicas attach batches in ordinal order with
tip-selection randomness derived from the ordinal, so replicas that
commit the same batches build bit-identical DAGs.

Scenario files use a `key = value` text format; metrics are emitted as
CSV with a fixed column order (both in docs/FORMATS.md).
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, replace
from pathlib import Path

from datchain import codec
from datchain.codec import Reader
from datchain.consensus import (
    Behavior,
    DPosConfig,
    FpcConfig,
    PbftConfig,
    PosConfig,
    PowConfig,
    RpcaConfig,
    Validator,
    dpos_elect,
    pow_mine,
)
from datchain.errors import DatchainError, ScenarioInvalid
from datchain.keys import KeyPair
from datchain.ledger import (
    MAX_BLOCK_TXS,
    Block,
    ChainState,
    Transaction,
    TxKind,
    append_block,
    chain_digest,
    compute_tx_root,
    make_genesis,
    sign_transaction,
)
from datchain.market import SignUpAction
from datchain.rng import Rng, derive_seed
from datchain.tangle import (
    DEFAULT_ATTACH_DIFFICULTY,
    TangleSite,
    attach,
    insert_site,
    tangle_digest,
    tangle_genesis,
)

ENGINES = ("pow", "pos", "dpos", "pbft", "rpca", "fpc")
LEDGER_MODES = ("chain", "tangle")

SIM_CHAIN_ID = "datchain-sim"
QUIESCENCE_TICKS = 100
SLOT_TICKS = 10  # pos/dpos production interval
RPCA_INTERVAL = 20
STATUS_INTERVAL = 25
ACTIVITY_WINDOW = 400  # anti-entropy chatter stops this long after progress
STALL_GIVEUP = 2000  # drivers stop scheduling work this long after progress
GOSSIP_RETRY = 50
POW_HASHRATE = 64.0  # modeled hash attempts per miner per tick
PBFT_RETRY_BACKOFF = (10, 20, 40, 80, 160)

CSV_COLUMNS = (
    "engine,ledger_mode,node_count,byzantine_count,byzantine_behavior,seed,"
    "committed_tx_count,blocks_or_sites,rounds_to_agreement,messages_sent,"
    "wall_ticks,divergence_detected,throughput_tx_per_1000_ticks,"
    "messages_per_committed_tx"
)


# -- scenario -----------------------------------------------------------------

@dataclass(frozen=True)
class SimScenario:
    node_count: int = 4
    byzantine_count: int = 0
    byzantine_behavior: Behavior = Behavior.SILENT
    engine: str = "pbft"
    ledger_mode: str = "chain"
    tx_count: int = 10
    duration_ticks: int = 1000
    delay_min: int = 1
    delay_max: int = 5
    drop_rate: float = 0.0
    seed: int = 1
    difficulty_bits: int = 8  # pow
    attach_difficulty: int = DEFAULT_ATTACH_DIFFICULTY  # tangle
    pbft_f: int | None = None
    rpca_threshold: float = 0.80
    fpc_k: int = 10
    fpc_theta_low: float = 0.55
    fpc_theta_high: float = 0.75
    fpc_ell: int = 3
    num_delegates: int = 3

    def validate(self) -> "SimScenario":
        if self.node_count < 1:
            raise ScenarioInvalid("node_count must be >= 1")
        if not 0 <= self.byzantine_count < self.node_count:
            raise ScenarioInvalid("byzantine_count must be < node_count")
        if self.engine not in ENGINES:
            raise ScenarioInvalid(f"unknown engine {self.engine!r}")
        if self.ledger_mode not in LEDGER_MODES:
            raise ScenarioInvalid(f"unknown ledger_mode {self.ledger_mode!r}")
        if self.tx_count < 0 or self.duration_ticks < 1:
            raise ScenarioInvalid("tx_count >= 0 and duration_ticks >= 1 required")
        if not 0 <= self.delay_min <= self.delay_max:
            raise ScenarioInvalid("need 0 <= delay_min <= delay_max")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ScenarioInvalid("drop_rate must be in [0, 1)")
        if not 0 <= self.seed < 1 << 64:
            raise ScenarioInvalid("seed must fit in 64 bits")
        return self


_SCENARIO_FIELDS = {
    "node_count": int,
    "byzantine_count": int,
    "byzantine_behavior": Behavior,
    "engine": str,
    "ledger_mode": str,
    "tx_count": int,
    "duration_ticks": int,
    "delay_min": int,
    "delay_max": int,
    "drop_rate": float,
    "seed": int,
    "difficulty_bits": int,
    "attach_difficulty": int,
    "pbft_f": int,
    "rpca_threshold": float,
    "fpc_k": int,
    "fpc_theta_low": float,
    "fpc_theta_high": float,
    "fpc_ell": int,
    "num_delegates": int,
}


def parse_scenario(text: str) -> SimScenario:
    """Parse the `key = value` scenario format (# starts a comment)."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioInvalid(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCENARIO_FIELDS:
            raise ScenarioInvalid(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _SCENARIO_FIELDS[key](value)
        except (ValueError, TypeError) as exc:
            raise ScenarioInvalid(f"line {lineno}: bad value for {key}: {exc}") from exc
    return SimScenario(**values).validate()


def load_scenario(path: str | Path) -> SimScenario:
    return parse_scenario(Path(path).read_text("utf-8"))


def scenario_text(scenario: SimScenario) -> str:
    """Render a scenario back to its key = value file form."""
    lines = []
    for name in _SCENARIO_FIELDS:
        value = getattr(scenario, name)
        if value is None:
            continue
        if isinstance(value, Behavior):
            value = value.value
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


# -- metrics ---------------------------------------------------------------------

@dataclass(frozen=True)
class SimMetrics:
    committed_tx_count: int
    blocks_or_sites: int
    rounds_to_agreement: int
    messages_sent: int
    divergence_detected: bool
    wall_ticks: int


def metrics_row(scenario: SimScenario, metrics: SimMetrics) -> str:
    """One CSV row in the documented fixed column order."""
    throughput = (
        f"{metrics.committed_tx_count / metrics.wall_ticks * 1000:.3f}"
        if metrics.wall_ticks
        else "NA"
    )
    per_tx = (
        f"{metrics.messages_sent / metrics.committed_tx_count:.3f}"
        if metrics.committed_tx_count
        else "NA"
    )
    return ",".join(
        [
            scenario.engine,
            scenario.ledger_mode,
            str(scenario.node_count),
            str(scenario.byzantine_count),
            scenario.byzantine_behavior.value,
            str(scenario.seed),
            str(metrics.committed_tx_count),
            str(metrics.blocks_or_sites),
            str(metrics.rounds_to_agreement),
            str(metrics.messages_sent),
            str(metrics.wall_ticks),
            "true" if metrics.divergence_detected else "false",
            throughput,
            per_tx,
        ]
    )


# -- message bus ------------------------------------------------------------------

@dataclass(frozen=True)
class Msg:
    kind: str
    src: int
    dst: int
    data: tuple


class Bus:
    """Seeded delay/drop queue; messages_sent = delivered + dropped."""

    def __init__(self, scenario: SimScenario):
        self._delay_rng = Rng(derive_seed(scenario.seed, "bus-delay"))
        self._drop_rng = Rng(derive_seed(scenario.seed, "bus-drop"))
        self._delay_min = scenario.delay_min
        self._delay_max = scenario.delay_max
        self._drop_rate = scenario.drop_rate
        self._queue: list[tuple[int, int, Msg]] = []
        self._seq = 0
        self.delivered = 0
        self.dropped = 0

    @property
    def messages_sent(self) -> int:
        return self.delivered + self.dropped

    def send(self, tick: int, msg: Msg) -> None:
        if self._drop_rate and self._drop_rng.bernoulli(self._drop_rate):
            self.dropped += 1
            return
        self.delivered += 1
        delay = self._delay_rng.randint(self._delay_min, self._delay_max)
        self._seq += 1
        heapq.heappush(self._queue, (tick + delay, self._seq, msg))

    def pop_due(self, tick: int) -> list[Msg]:
        due = []
        while self._queue and self._queue[0][0] <= tick:
            due.append(heapq.heappop(self._queue)[2])
        return due

    def pending(self) -> int:
        return len(self._queue)


# -- replicas ---------------------------------------------------------------------

class Replica:
    """One node's ledger copy plus mempool and sync bookkeeping."""

    def __init__(self, node_id: int, scenario: SimScenario, engine_cfg):
        self.id = node_id
        self.mode = scenario.ledger_mode
        self.scenario = scenario
        self.engine_cfg = engine_cfg
        if self.mode == "chain":
            self.chain = ChainState.from_genesis(make_genesis(SIM_CHAIN_ID, 0))
            self.tangle = None
        else:
            self.chain = None
            self.tangle = tangle_genesis(SIM_CHAIN_ID)
        self.mempool: dict[bytes, Transaction] = {}
        self.committed: set[bytes] = set()
        self.block_buffer: dict[int, Block] = {}
        self.batch_buffer: dict[int, list[Transaction]] = {}
        self.last_progress = 0

    # -- ledger views

    def height(self) -> int:
        """Committed units beyond genesis (blocks or sites)."""
        if self.mode == "chain":
            return self.chain.height
        return self.tangle.site_count() - 1

    def digest(self) -> bytes:
        if self.mode == "chain":
            return chain_digest(self.chain)
        return tangle_digest(self.tangle)

    def suffix(self, have: int) -> tuple:
        """Encoded ledger units after the peer's reported height."""
        if self.mode == "chain":
            return tuple(b.encode() for b in self.chain.blocks[have + 1 :])
        order = self.tangle.order[have + 1 :]
        return tuple(self.tangle.sites[sid].encode() for sid in order)

    def note_progress(self, tick: int) -> None:
        self.last_progress = tick

    def _index_committed(self, txs) -> None:
        for tx in txs:
            self.committed.add(tx.tx_id)
            self.mempool.pop(tx.tx_id, None)

    # -- chain path

    def build_block(self, txs: list[Transaction], timestamp: int, nonce: int = 0) -> Block:
        block = Block(
            index=self.chain.height + 1,
            prev_hash=self.chain.head_hash,
            timestamp=timestamp,
            nonce=nonce,
            tx_root=compute_tx_root(txs),
            transactions=tuple(txs),
        )
        if isinstance(self.engine_cfg, PowConfig):
            mined = pow_mine(block.with_hash(), self.engine_cfg.difficulty_bits)
            return block.with_nonce(mined)
        return block.with_hash()

    def adopt_block(self, block: Block, tick: int) -> str:
        """Returns 'applied', 'ahead' (buffered), 'stale', or 'invalid'."""
        if block.index <= self.chain.height:
            return "stale"  # duplicate or conflicting index: first valid wins
        if block.index > self.chain.height + 1:
            self.block_buffer[block.index] = block
            return "ahead"
        try:
            append_block(self.chain, block, engine=self.engine_cfg)
        except DatchainError:
            return "invalid"
        self._index_committed(block.transactions)
        self.note_progress(tick)
        while (nxt := self.block_buffer.pop(self.chain.height + 1, None)) is not None:
            try:
                append_block(self.chain, nxt, engine=self.engine_cfg)
            except DatchainError:
                break
            self._index_committed(nxt.transactions)
        return "applied"

    # -- tangle path

    def attach_batch(self, txs: list[Transaction], tick: int) -> None:
        """Attach txs in the given canonical order. The tip-selection rng
        derives from each site's ordinal, so all replicas attaching the
        same batches in ordinal order build identical DAGs."""
        for tx in txs:
            if tx.tx_id in self.tangle.tx_index:
                continue
            ordinal = self.tangle.site_count()
            rng = Rng(derive_seed(self.scenario.seed, f"attach-{ordinal}"))
            attach(
                self.tangle,
                tx,
                strategy="uniform",
                difficulty_bits=self.scenario.attach_difficulty,
                rng=rng,
            )
        self._index_committed(txs)
        self.note_progress(tick)

    def adopt_batch(self, base: int, txs: list[Transaction], tick: int) -> str:
        """Apply a batch anchored at site ordinal `base` (see attach_batch)."""
        count = self.tangle.site_count()
        if base < count:
            return "stale"
        if base > count:
            self.batch_buffer[base] = txs
            return "ahead"
        if not self._batch_valid(txs):
            return "invalid"
        self.attach_batch(txs, tick)
        while (pending := self.batch_buffer.pop(self.tangle.site_count(), None)) is not None:
            if not self._batch_valid(pending):
                break
            self.attach_batch(pending, tick)
        self.batch_buffer = {
            b: t for b, t in self.batch_buffer.items() if b > self.tangle.site_count()
        }
        return "applied"

    def _batch_valid(self, txs: list[Transaction]) -> bool:
        """All-or-nothing pre-check so a bad batch cannot half-attach."""
        seen: dict[bytes, int] = {}
        for tx in txs:
            try:
                tx.verify()
            except DatchainError:
                return False
            floor = max(
                self.tangle.last_sequence.get(tx.sender, 0), seen.get(tx.sender, 0)
            )
            if tx.tx_id not in self.tangle.tx_index and tx.sequence <= floor:
                return False
            seen[tx.sender] = tx.sequence
        return True

    def adopt_sites(self, encoded_sites: tuple, tick: int) -> bool:
        """Insert replicated sites (sync path) after recomputing their ids."""
        changed = False
        for raw in encoded_sites:
            try:
                site = TangleSite.decode(raw)
            except (DatchainError, ValueError):
                continue
            if site.site_id in self.tangle.sites:
                continue
            try:
                insert_site(self.tangle, site)
            except DatchainError:
                continue
            if site.payload is not None:
                self._index_committed([site.payload])
            changed = True
        if changed:
            self.note_progress(tick)
            self.batch_buffer = {
                b: t for b, t in self.batch_buffer.items() if b > self.tangle.site_count()
            }
        return changed


# -- engine drivers ------------------------------------------------------------------

def _canonical(txs) -> list[Transaction]:
    return sorted(txs, key=lambda tx: tx.tx_id)


def _batch_digest(base: int, txs: list[Transaction]) -> bytes:
    return hashlib.sha256(
        b"batch" + codec.enc_u64(base) + b"".join(tx.tx_id for tx in txs)
    ).digest()


class Driver:
    """Engine-specific commit machinery; shares the sim's bus and replicas."""

    def __init__(self, sim: "Simulation"):
        self.sim = sim
        self.rounds = 0

    def on_tick(self, tick: int) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def on_message(self, node: int, msg: Msg, tick: int) -> None:
        pass

    def pending_work(self) -> bool:
        return any(self.sim.replicas[i].mempool for i in self.sim.honest_ids)

    def busy(self, tick: int) -> bool:
        return self.pending_work()

    # shared commit helpers -------------------------------------------------

    def _pending_batch(self, replica: Replica) -> list[Transaction]:
        ids = sorted(replica.mempool)[:MAX_BLOCK_TXS]
        return [replica.mempool[i] for i in ids]

    def _commit_and_broadcast(
        self, proposer: int, txs: list[Transaction], tick: int, nonce: int = 0
    ) -> None:
        """Proposer applies the decided batch locally and replicates it."""
        sim = self.sim
        replica = sim.replicas[proposer]
        txs = _canonical(txs)
        if replica.mode == "chain":
            block = replica.build_block(txs, timestamp=tick, nonce=nonce)
            replica.adopt_block(block, tick)
            sim.broadcast(proposer, "BLOCK", (block.encode(),), tick)
        else:
            base = replica.tangle.site_count()
            replica.adopt_batch(base, txs, tick)
            sim.broadcast(
                proposer, "BATCH", (base, tuple(tx.encode() for tx in txs)), tick
            )
        sim.note_commit(self.rounds)

    def _broadcast_corrupt(self, proposer: int, txs: list[Transaction], tick: int, nonce: int = 0) -> None:
        """Byzantine proposer output: structurally broken, always rejected."""
        sim = self.sim
        replica = sim.replicas[proposer]
        txs = _canonical(txs)
        if replica.mode == "chain":
            block = replica.build_block(txs, timestamp=tick, nonce=nonce)
            bad = replace(block, tx_root=bytes(32)).with_hash()
            sim.broadcast(proposer, "BLOCK", (bad.encode(),), tick)
        else:
            base = replica.tangle.site_count()
            blobs = []
            for tx in txs:
                raw = bytearray(tx.encode())
                raw[-1] ^= 0xFF  # break the signature
                blobs.append(bytes(raw))
            sim.broadcast(proposer, "BATCH", (base, tuple(blobs)), tick)


class PowDriver(Driver):
    """Difficulty-paced block races.

    Miners' solve times are geometric draws with success probability
    hashrate/2^d per tick; the scheduler names the earliest finisher
    (ties to the lowest id) among miners at maximal honest height. The
    winner assembles the block or batch for real and broadcasts it.
    """

    def __init__(self, sim):
        super().__init__(sim)
        self.race = None  # (win_tick, winner, deadline, target_height)

    def _solve_ticks(self, rng: Rng) -> int:
        p = min(1.0, POW_HASHRATE / float(1 << self.sim.scenario.difficulty_bits))
        ticks = 1
        while not rng.bernoulli(p):
            ticks += 1
        return ticks

    def busy(self, tick: int) -> bool:
        return self.race is not None or self.pending_work()

    def on_tick(self, tick: int) -> None:
        sim = self.sim
        if self.race is not None:
            win_tick, winner, deadline, target_height = self.race
            if tick == win_tick:
                self._winner_acts(winner, target_height, tick)
            done = sim.replicas[sim.honest_ids[0]].height() >= target_height
            if done or tick >= deadline:
                self.race = None
        if self.race is None and self.pending_work():
            self._start_race(tick)

    def _start_race(self, tick: int) -> None:
        sim = self.sim
        self.rounds += 1
        rng = Rng(derive_seed(sim.scenario.seed, f"pow-race-{self.rounds}"))
        max_height = max(sim.replicas[i].height() for i in sim.honest_ids)
        silent = sim.scenario.byzantine_behavior == Behavior.SILENT
        contenders = [
            i
            for i in range(sim.scenario.node_count)
            if not (sim.is_byzantine(i) and silent)
            and sim.replicas[i].height() == max_height
            and sim.replicas[i].mempool
        ]
        if not contenders:
            self.race = None
            self.rounds -= 1
            return
        solves = [(self._solve_ticks(rng), i) for i in sorted(contenders)]
        ticks, winner = min(solves)
        win_tick = tick + ticks
        deadline = win_tick + sim.scenario.delay_max + 3
        self.race = (win_tick, winner, deadline, max_height + 1)

    def _winner_acts(self, winner: int, target_height: int, tick: int) -> None:
        sim = self.sim
        replica = sim.replicas[winner]
        if replica.height() != target_height - 1:
            return  # fell behind since the race started; race times out
        txs = self._pending_batch(replica)
        if not txs:
            return
        if sim.is_byzantine(winner):
            self._broadcast_corrupt(winner, txs, tick)
            return
        self._commit_and_broadcast(winner, txs, tick)


class SlotDriver(Driver):
    """Shared machinery for the stake-scheduled engines (PoS / DPoS)."""

    def __init__(self, sim):
        super().__init__(sim)
        n = sim.scenario.node_count
        # stake biased toward low ids so default schedules start honest
        self.validators = {
            i: Validator(
                id=i.to_bytes(4, "big"),
                coins=100 + 10 * (n - i),
                held_since=0,
                approval_stake=100 + (n - i),
            )
            for i in range(n)
        }

    def _producer(self, tick: int) -> int:
        raise NotImplementedError

    def _penalize(self, node: int, tick: int) -> None:
        pass

    def on_tick(self, tick: int) -> None:
        sim = self.sim
        if tick == 0 or tick % SLOT_TICKS != 0 or not self.pending_work():
            return
        self.rounds += 1
        producer = self._producer(tick)
        replica = sim.replicas[producer]
        if sim.is_byzantine(producer):
            self._byzantine_slot(producer, tick)
            self._penalize(producer, tick)
            return
        max_height = max(sim.replicas[i].height() for i in sim.honest_ids)
        if replica.height() < max_height or not replica.mempool:
            return  # catching up or nothing to do; slot is skipped
        txs = self._pending_batch(replica)
        self._commit_and_broadcast(producer, txs, tick, nonce=producer)
        self._penalize(producer, tick)  # production resets stake age

    def _byzantine_slot(self, producer: int, tick: int) -> None:
        sim = self.sim
        behavior = sim.scenario.byzantine_behavior
        replica = sim.replicas[producer]
        if behavior == Behavior.SILENT:
            return
        txs = _canonical(self._pending_batch(replica))
        if behavior == Behavior.EQUIVOCATE and txs and sim.scenario.node_count > 2:
            self._equivocate(producer, txs, tick)
            return
        self._broadcast_corrupt(producer, txs, tick, nonce=producer)

    def _equivocate(self, producer: int, txs: list[Transaction], tick: int) -> None:
        """Two VALID conflicting units, one per receiver half."""
        sim = self.sim
        replica = sim.replicas[producer]
        half_txs = txs[: len(txs) // 2]
        if replica.mode == "chain":
            unit_a = ("BLOCK", (replica.build_block(txs, tick, producer).encode(),))
            unit_b = ("BLOCK", (replica.build_block(half_txs, tick, producer).encode(),))
        else:
            base = replica.tangle.site_count()
            unit_a = ("BATCH", (base, tuple(tx.encode() for tx in txs)))
            unit_b = ("BATCH", (base, tuple(tx.encode() for tx in half_txs)))
        others = [i for i in range(sim.scenario.node_count) if i != producer]
        split = len(others) // 2
        for dst in others[:split]:
            sim.send(producer, dst, unit_a[0], unit_a[1], tick)
        for dst in others[split:]:
            sim.send(producer, dst, unit_b[0], unit_b[1], tick)


class PosDriver(SlotDriver):
    """Highest coin-age produces; age resets on production or a missed slot."""

    def _producer(self, tick: int) -> int:
        def age(i: int) -> int:
            v = self.validators[i]
            return v.coins * (tick - v.held_since)

        return max(range(self.sim.scenario.node_count), key=lambda i: (age(i), -i))

    def _penalize(self, node: int, tick: int) -> None:
        self.validators[node] = replace(self.validators[node], held_since=tick)


class DPosDriver(SlotDriver):
    """Top-stake delegates produce round-robin by slot index."""

    def __init__(self, sim):
        super().__init__(sim)
        num = min(sim.scenario.num_delegates, sim.scenario.node_count)
        elected = dpos_elect(list(self.validators.values()), num)
        self.delegates = [int.from_bytes(vid, "big") for vid in elected]

    def _producer(self, tick: int) -> int:
        slot = tick // SLOT_TICKS
        return self.delegates[slot % len(self.delegates)]


class PbftDriver(Driver):
    """Three-phase commit with node 0 as the (honest, fixed) leader.

    PRE_PREPARE carries the full proposed unit; PREPARE and COMMIT carry
    its digest. Quorum is floor(2n/3)+1 including the node's own vote.
    The leader retransmits an uncommitted proposal on a bounded backoff,
    so modest message loss delays commits instead of killing them; past
    the fault bound the protocol stalls without diverging.
    """

    def __init__(self, sim):
        super().__init__(sim)
        n = sim.scenario.node_count
        self.quorum = (2 * n) // 3 + 1
        self.leader = 0
        self.proposal = None  # (digest, payload_tuple, first_tx_id)
        self.retries = 0
        self.retry_tick = 0
        self.state: dict[bytes, dict] = {}
        self._equiv_rng = Rng(derive_seed(sim.scenario.seed, "pbft-equiv"))

    def _entry(self, digest: bytes) -> dict:
        return self.state.setdefault(
            digest,
            {"unit": None, "prepares": {}, "commits": {}, "sent_commit": set(), "done": set()},
        )

    def busy(self, tick: int) -> bool:
        if self.proposal is not None and self.retries < len(PBFT_RETRY_BACKOFF):
            return True
        return self.pending_work()

    def _proposal_done(self) -> bool:
        digest, payload, first_tx = self.proposal
        leader = self.sim.replicas[self.leader]
        return first_tx in leader.committed

    def on_tick(self, tick: int) -> None:
        sim = self.sim
        leader = sim.replicas[self.leader]
        if self.proposal is not None:
            if self._proposal_done():
                self.proposal = None
            elif self.retries < len(PBFT_RETRY_BACKOFF) and tick >= self.retry_tick:
                self._send_preprepare(tick)
        if self.proposal is None and leader.mempool:
            txs = self._pending_batch(leader)
            if leader.mode == "chain":
                block = leader.build_block(txs, timestamp=tick)
                digest = block.hash
                payload = (block.encode(),)
            else:
                base = leader.tangle.site_count()
                digest = _batch_digest(base, txs)
                payload = (base, tuple(tx.encode() for tx in txs))
            self.proposal = (digest, payload, txs[0].tx_id)
            self.rounds += 1
            self.retries = 0
            self._send_preprepare(tick)

    def _send_preprepare(self, tick: int) -> None:
        sim = self.sim
        backoff = PBFT_RETRY_BACKOFF[min(self.retries, len(PBFT_RETRY_BACKOFF) - 1)]
        self.retry_tick = tick + backoff
        self.retries += 1
        digest, payload, _ = self.proposal
        entry = self._entry(digest)
        entry["unit"] = payload
        entry["prepares"].setdefault(self.leader, digest)
        sim.broadcast(self.leader, "PRE_PREPARE", (digest,) + payload, tick)
        self._advance(self.leader, digest, tick)

    def _decode_unit(self, msg: Msg):
        digest = msg.data[0]
        payload = msg.data[1:]
        return digest, payload

    def on_message(self, node: int, msg: Msg, tick: int) -> None:
        sim = self.sim
        if sim.is_byzantine(node):
            if msg.kind == "PRE_PREPARE":
                self._byzantine_votes(node, msg, tick)
            return
        if msg.kind == "PRE_PREPARE":
            digest, payload = self._decode_unit(msg)
            entry = self._entry(digest)
            entry["unit"] = payload
            if node not in entry["prepares"]:
                entry["prepares"][node] = digest
                sim.broadcast(node, "PREPARE", (digest, node), tick)
            self._advance(node, digest, tick)
        elif msg.kind == "PREPARE":
            digest, voter = msg.data
            entry = self._entry(digest)
            entry["prepares"].setdefault(voter, digest)
            self._advance(node, digest, tick)
        elif msg.kind == "COMMIT":
            digest, voter = msg.data
            entry = self._entry(digest)
            entry["commits"].setdefault(voter, digest)
            self._advance(node, digest, tick)

    def _advance(self, node: int, digest: bytes, tick: int) -> None:
        sim = self.sim
        entry = self._entry(digest)
        prepared = sum(1 for d in entry["prepares"].values() if d == digest)
        if prepared >= self.quorum and node not in entry["sent_commit"]:
            entry["sent_commit"].add(node)
            entry["commits"].setdefault(node, digest)
            sim.broadcast(node, "COMMIT", (digest, node), tick)
        committed = sum(1 for d in entry["commits"].values() if d == digest)
        if committed >= self.quorum and entry["unit"] is not None and node not in entry["done"]:
            entry["done"].add(node)
            replica = sim.replicas[node]
            if replica.mode == "chain":
                status = replica.adopt_block(Block.decode(entry["unit"][0]), tick)
            else:
                base, blobs = entry["unit"]
                txs = [Transaction.decode(Reader(b)) for b in blobs]
                status = replica.adopt_batch(base, txs, tick)
            if status == "applied":
                sim.note_commit(self.rounds)
            elif status == "ahead":
                sim.send(node, self.leader, "SYNC_REQ", (replica.height(),), tick)

    def _byzantine_votes(self, node: int, msg: Msg, tick: int) -> None:
        sim = self.sim
        behavior = sim.scenario.byzantine_behavior
        if behavior == Behavior.SILENT:
            return
        digest = msg.data[0]
        if behavior in (Behavior.VOTE_NO, Behavior.MINORITY):
            sim.broadcast(node, "PREPARE", (bytes(32), node), tick)
            return
        # equivocate: a per-receiver coin flip between real and wrong digest
        for dst in range(sim.scenario.node_count):
            if dst == node:
                continue
            vote = digest if self._equiv_rng.bernoulli(0.5) else bytes(32)
            sim.send(node, dst, "PREPARE", (vote, node), tick)


class RpcaDriver(Driver):
    """Leader-tallied validation rounds.

    Every interval, nodes send their candidate tx sets to node 0, which
    at a fixed deadline approves the candidates reaching the threshold
    over ALL nodes (missing votes count against) and replicates the
    result. Unapproved candidates stay pending for the next round.
    """

    def __init__(self, sim):
        super().__init__(sim)
        self.leader = 0
        self.votes: dict[bytes, set[int]] = {}
        self.vote_round = 0
        self.close_tick: int | None = None
        self._byz_rng = Rng(derive_seed(sim.scenario.seed, "rpca-byz"))

    def busy(self, tick: int) -> bool:
        return self.close_tick is not None or self.pending_work()

    def on_tick(self, tick: int) -> None:
        sim = self.sim
        if self.close_tick is not None and tick >= self.close_tick:
            self._close(tick)
        if tick == 0 or tick % RPCA_INTERVAL != 0 or self.close_tick is not None:
            return
        if not self.pending_work():
            return
        self.rounds += 1
        self.vote_round += 1
        self.votes = {}
        self.close_tick = tick + sim.scenario.delay_max + 2
        for node in range(sim.scenario.node_count):
            replica = sim.replicas[node]
            if sim.is_byzantine(node):
                behavior = sim.scenario.byzantine_behavior
                if behavior == Behavior.SILENT:
                    continue
                if behavior == Behavior.VOTE_NO:
                    candidate_ids = ()
                else:  # equivocate / minority: a seeded random subset
                    candidate_ids = tuple(
                        cid for cid in sorted(replica.mempool) if self._byz_rng.bernoulli(0.5)
                    )
            else:
                candidate_ids = tuple(sorted(replica.mempool))
            if node == self.leader:
                self._record_vote(node, candidate_ids)
            else:
                sim.send(node, self.leader, "VOTE", (self.vote_round, candidate_ids), tick)

    def on_message(self, node: int, msg: Msg, tick: int) -> None:
        sim = self.sim
        if msg.kind == "VOTE" and node == self.leader:
            vote_round, candidate_ids = msg.data
            if vote_round == self.vote_round and self.close_tick is not None:
                self._record_vote(msg.src, candidate_ids)
        elif msg.kind == "RESULT":
            replica = sim.replicas[node]
            if replica.mode == "chain":
                status = replica.adopt_block(Block.decode(msg.data[0]), tick)
            else:
                base, blobs = msg.data
                txs = [Transaction.decode(Reader(b)) for b in blobs]
                status = replica.adopt_batch(base, txs, tick)
            if status == "ahead":
                sim.send(node, msg.src, "SYNC_REQ", (replica.height(),), tick)

    def _record_vote(self, voter: int, candidate_ids) -> None:
        for cid in candidate_ids:
            self.votes.setdefault(cid, set()).add(voter)

    def _close(self, tick: int) -> None:
        sim = self.sim
        self.close_tick = None
        n = sim.scenario.node_count
        leader = sim.replicas[self.leader]
        approved = [
            cid
            for cid, voters in sorted(self.votes.items())
            if len(voters) / n >= sim.scenario.rpca_threshold and cid in leader.mempool
        ]
        self.votes = {}
        if not approved:
            return
        txs = [leader.mempool[cid] for cid in approved[:MAX_BLOCK_TXS]]
        if leader.mode == "chain":
            block = leader.build_block(txs, timestamp=tick)
            leader.adopt_block(block, tick)
            sim.broadcast(self.leader, "RESULT", (block.encode(),), tick)
        else:
            base = leader.tangle.site_count()
            canonical = _canonical(txs)
            leader.adopt_batch(base, canonical, tick)
            sim.broadcast(
                self.leader, "RESULT", (base, tuple(t.encode() for t in canonical)), tick
            )
        sim.note_commit(self.rounds)


class FpcDriver(Driver):
    """Messaged fast probabilistic consensus on transaction validity.

    Voting happens in epochs over a harness-chosen batch. Each round,
    honest nodes query k sampled peers and update against a shared
    random threshold with band hysteresis; ell consecutive stable
    rounds finalize an opinion. The harness closes the epoch once all
    honest nodes are finalized (or a round cap passes) and every node
    then commits its own yes-set — agreement shows up as digest
    equality, disagreement as detected divergence.
    """

    ROUND_SLACK = 3

    def __init__(self, sim):
        super().__init__(sim)
        scenario = sim.scenario
        self.k = min(scenario.fpc_k, scenario.node_count - 1)
        self.round_ticks = scenario.delay_max * 2 + self.ROUND_SLACK
        self.max_rounds = FpcConfig(k=max(1, scenario.fpc_k)).max_rounds
        self._thr_rng = Rng(derive_seed(scenario.seed, "fpc-thr"))
        self._byz_rng = Rng(derive_seed(scenario.seed, "fpc-byz"))
        self.epoch = None
        self.epochs_done = 0

    def busy(self, tick: int) -> bool:
        return self.epoch is not None or self.pending_work()

    def on_tick(self, tick: int) -> None:
        if self.epoch is None:
            if self.pending_work():
                self._start_epoch(tick)
            return
        if tick >= self.epoch["round_end"]:
            self._finish_round(tick)

    def _start_epoch(self, tick: int) -> None:
        sim = self.sim
        # vote only on txs most honest nodes already hold: a vote opened
        # mid-gossip starts from a mixed prior that random-threshold
        # sampling legitimately fails to converge from (and losers get
        # purged), so fresh txs wait for a later epoch instead
        counts: dict[bytes, int] = {}
        for i in sim.honest_ids:
            for cid in sim.replicas[i].mempool:
                counts[cid] = counts.get(cid, 0) + 1
        need = max(len(sim.honest_ids) // 2 + 1, -(-len(sim.honest_ids) * 9 // 10))
        batch = sorted(cid for cid, n in counts.items() if n >= need)
        batch = batch[:MAX_BLOCK_TXS]
        if not batch:
            return
        self.epoch = {
            "batch": batch,
            "opinions": {
                i: {cid: cid in sim.replicas[i].mempool for cid in batch}
                for i in sim.honest_ids
            },
            "streak": {i: {cid: 0 for cid in batch} for i in sim.honest_ids},
            "finalized": {i: {} for i in sim.honest_ids},
            "responses": {},
            "round": 0,
            "round_end": 0,
        }
        self._start_round(tick)

    def _start_round(self, tick: int) -> None:
        sim = self.sim
        ep = self.epoch
        ep["round"] += 1
        self.rounds += 1
        low, high = sim.scenario.fpc_theta_low, sim.scenario.fpc_theta_high
        ep["threshold"] = low + self._thr_rng.random() * (high - low)
        ep["round_end"] = tick + self.round_ticks
        ep["responses"] = {i: {cid: [] for cid in ep["batch"]} for i in sim.honest_ids}
        if self.k == 0:
            return
        for i in sim.honest_ids:
            open_ids = [cid for cid in ep["batch"] if cid not in ep["finalized"][i]]
            if not open_ids:
                continue
            rng = Rng(
                derive_seed(
                    sim.scenario.seed, f"fpc-q-{self.epochs_done}-{ep['round']}-{i}"
                )
            )
            peers = [p for p in range(sim.scenario.node_count) if p != i]
            for dst in sorted(rng.sample(peers, min(self.k, len(peers)))):
                sim.send(i, dst, "QUERY", (ep["round"], tuple(open_ids)), tick)

    def on_message(self, node: int, msg: Msg, tick: int) -> None:
        sim = self.sim
        ep = self.epoch
        if ep is None:
            return
        if msg.kind == "QUERY":
            qround, tx_ids = msg.data
            if qround != ep["round"]:
                return
            if sim.is_byzantine(node):
                behavior = sim.scenario.byzantine_behavior
                if behavior == Behavior.SILENT:
                    return
                if behavior == Behavior.VOTE_NO:
                    answers = tuple((cid, False) for cid in tx_ids)
                else:  # equivocate / minority: push the honest minority view
                    answers = tuple((cid, self._minority(cid)) for cid in tx_ids)
            else:
                opinions = ep["opinions"].get(node, {})
                answers = tuple(
                    (cid, opinions.get(cid, cid in sim.replicas[node].mempool))
                    for cid in tx_ids
                )
            sim.send(node, msg.src, "RESPONSE", (qround, answers), tick)
        elif msg.kind == "RESPONSE" and not sim.is_byzantine(node):
            qround, answers = msg.data
            if qround != ep["round"] or node not in ep["responses"]:
                return
            for cid, opinion in answers:
                if cid in ep["responses"][node]:
                    ep["responses"][node][cid].append(opinion)

    def _minority(self, cid: bytes) -> bool:
        ep = self.epoch
        yes = sum(1 for i in self.sim.honest_ids if ep["opinions"][i].get(cid, False))
        no = len(self.sim.honest_ids) - yes
        if yes == no:
            return self._byz_rng.bernoulli(0.5)
        return yes < no

    def _finish_round(self, tick: int) -> None:
        sim = self.sim
        ep = self.epoch
        theta = ep["threshold"]
        for i in sim.honest_ids:
            for cid in ep["batch"]:
                if cid in ep["finalized"][i]:
                    continue
                got = ep["responses"][i][cid]
                old = ep["opinions"][i][cid]
                new = old
                if got:
                    fraction = sum(got) / len(got)
                    if fraction >= theta:
                        new = True
                    elif fraction <= 1.0 - theta:
                        new = False
                ep["opinions"][i][cid] = new
                ep["streak"][i][cid] = ep["streak"][i][cid] + 1 if new == old else 1
                if ep["streak"][i][cid] >= sim.scenario.fpc_ell:
                    ep["finalized"][i][cid] = new
        all_done = all(
            len(ep["finalized"][i]) == len(ep["batch"]) for i in sim.honest_ids
        )
        if all_done or ep["round"] >= self.max_rounds:
            self._close_epoch(tick)
        else:
            self._start_round(tick)

    def _close_epoch(self, tick: int) -> None:
        sim = self.sim
        ep = self.epoch
        committed_any = False
        for i in sim.honest_ids:
            replica = sim.replicas[i]
            yes_ids = [cid for cid in ep["batch"] if ep["finalized"][i].get(cid, False)]
            txs = [sim.tx_registry[cid] for cid in yes_ids if cid in sim.tx_registry]
            if txs:
                committed_any = True
                if replica.mode == "chain":
                    block = replica.build_block(_canonical(txs), timestamp=tick)
                    replica.adopt_block(block, tick)
                else:
                    base = replica.tangle.site_count()
                    replica.adopt_batch(base, _canonical(txs), tick)
            for cid in ep["batch"]:
                if not ep["finalized"][i].get(cid, False):
                    replica.mempool.pop(cid, None)  # rejected by the vote
        if committed_any:
            sim.note_commit(self.rounds)
        self.epochs_done += 1
        self.epoch = None


_DRIVERS = {
    "pow": PowDriver,
    "pos": PosDriver,
    "dpos": DPosDriver,
    "pbft": PbftDriver,
    "rpca": RpcaDriver,
    "fpc": FpcDriver,
}


def _engine_config(scenario: SimScenario):
    n = scenario.node_count
    if scenario.engine == "pow":
        return PowConfig(difficulty_bits=scenario.difficulty_bits)
    if scenario.engine == "pos":
        return PosConfig()
    if scenario.engine == "dpos":
        return DPosConfig(num_delegates=min(scenario.num_delegates, n))
    if scenario.engine == "pbft":
        f = scenario.pbft_f if scenario.pbft_f is not None else max(0, (n - 1) // 3)
        return PbftConfig(n=n, f=f)
    if scenario.engine == "rpca":
        return RpcaConfig(threshold=scenario.rpca_threshold)
    if scenario.engine == "fpc":
        return FpcConfig(
            k=scenario.fpc_k,
            theta_low=scenario.fpc_theta_low,
            theta_high=scenario.fpc_theta_high,
            ell=scenario.fpc_ell,
        )
    raise ScenarioInvalid(f"unknown engine {scenario.engine!r}")


# -- simulation -----------------------------------------------------------------------

def _make_load(scenario: SimScenario) -> list[tuple[int, Transaction]]:
    """Deterministic injection schedule: fresh sign-up txs, evenly spaced."""
    load = []
    for j in range(scenario.tx_count):
        tick = 1 + (j * scenario.duration_ticks) // max(1, scenario.tx_count)
        seed_material = b"sim-client" + codec.enc_u64(scenario.seed) + codec.enc_u32(j)
        kp = KeyPair.from_seed(hashlib.sha256(seed_material).digest())
        payload = SignUpAction(kp.public_key, 3, 10, tick).encode()
        tx = sign_transaction(TxKind.SIGN_UP, payload, kp, sequence=1)
        load.append((tick, tx))
    return load


class Simulation:
    def __init__(self, scenario: SimScenario):
        self.scenario = scenario.validate()
        self.bus = Bus(scenario)
        engine_cfg = _engine_config(scenario)
        self.replicas = [
            Replica(i, scenario, engine_cfg) for i in range(scenario.node_count)
        ]
        first_byz = scenario.node_count - scenario.byzantine_count
        self.byzantine_ids = frozenset(range(first_byz, scenario.node_count))
        self.honest_ids = [
            i for i in range(scenario.node_count) if i not in self.byzantine_ids
        ]
        self.driver: Driver = _DRIVERS[scenario.engine](self)
        self.load = _make_load(scenario)
        self.tx_registry = {tx.tx_id: tx for _, tx in self.load}
        self.rounds_at_last_commit = 0
        self._status_rng = Rng(derive_seed(scenario.seed, "status-peer"))
        self._next_inject = 0

    # -- helpers used by drivers

    def is_byzantine(self, node: int) -> bool:
        return node in self.byzantine_ids

    def send(self, src: int, dst: int, kind: str, data: tuple, tick: int) -> None:
        self.bus.send(tick, Msg(kind, src, dst, data))

    def broadcast(self, src: int, kind: str, data: tuple, tick: int) -> None:
        for dst in range(self.scenario.node_count):
            if dst != src:
                self.send(src, dst, kind, data, tick)

    def note_commit(self, rounds: int) -> None:
        self.rounds_at_last_commit = rounds

    def _last_honest_progress(self) -> int:
        return max(self.replicas[i].last_progress for i in self.honest_ids)

    # -- event handlers

    def _inject_due(self, tick: int) -> bool:
        injected = False
        gateway = self.replicas[0]
        while (
            self._next_inject < len(self.load)
            and self.load[self._next_inject][0] <= tick
        ):
            _, tx = self.load[self._next_inject]
            self._next_inject += 1
            injected = True
            if tx.tx_id not in gateway.committed:
                gateway.mempool[tx.tx_id] = tx
            self.broadcast(0, "TX", (tx.encode(),), tick)
        return injected

    def _handle(self, msg: Msg, tick: int) -> None:
        node = msg.dst
        replica = self.replicas[node]
        if msg.kind == "TX":
            tx = Transaction.decode(Reader(msg.data[0]))
            if tx.tx_id not in replica.committed:
                replica.mempool.setdefault(tx.tx_id, tx)
        elif msg.kind == "BLOCK":
            status = replica.adopt_block(Block.decode(msg.data[0]), tick)
            if status == "ahead":
                self.send(node, msg.src, "SYNC_REQ", (replica.height(),), tick)
        elif msg.kind == "BATCH":
            base, blobs = msg.data
            try:
                txs = [Transaction.decode(Reader(b)) for b in blobs]
            except DatchainError:
                return
            status = replica.adopt_batch(base, txs, tick)
            if status == "ahead":
                self.send(node, msg.src, "SYNC_REQ", (replica.height(),), tick)
        elif msg.kind == "STATUS":
            if msg.data[0] > replica.height():
                self.send(node, msg.src, "SYNC_REQ", (replica.height(),), tick)
        elif msg.kind == "SYNC_REQ":
            if msg.data[0] < replica.height():
                self.send(node, msg.src, "SYNC_RESP", (replica.suffix(msg.data[0]),), tick)
        elif msg.kind == "SYNC_RESP":
            if replica.mode == "chain":
                for raw in msg.data[0]:
                    replica.adopt_block(Block.decode(raw), tick)
            else:
                replica.adopt_sites(msg.data[0], tick)
        else:
            self.driver.on_message(node, msg, tick)

    def _anti_entropy(self, tick: int) -> None:
        """Bounded height gossip; quiet once the network has been idle."""
        n = self.scenario.node_count
        if n < 2 or tick == 0:
            return
        for node in self.honest_ids:
            if tick % STATUS_INTERVAL != node % STATUS_INTERVAL:
                continue
            replica = self.replicas[node]
            if tick - replica.last_progress > ACTIVITY_WINDOW:
                continue
            if replica.height() == 0 and not replica.mempool:
                continue  # nothing to advertise yet
            peer = self._status_rng.randbelow(n - 1)
            if peer >= node:
                peer += 1
            self.send(node, peer, "STATUS", (replica.height(),), tick)
        # the gateway re-offers still-pending transactions while activity lasts
        gateway = self.replicas[0]
        if (
            tick % GOSSIP_RETRY == 0
            and gateway.mempool
            and tick - self._last_honest_progress() <= ACTIVITY_WINDOW
        ):
            for cid in sorted(gateway.mempool):
                self.broadcast(0, "TX", (gateway.mempool[cid].encode(),), tick)

    def run(self) -> tuple[SimMetrics, dict[int, str]]:
        tick = 0
        idle = 0
        while idle < QUIESCENCE_TICKS:
            busy = self._inject_due(tick)
            for msg in self.bus.pop_due(tick):
                busy = True
                self._handle(msg, tick)
            sent_before = self.bus.messages_sent
            stalled = tick - self._last_honest_progress() > STALL_GIVEUP
            if not stalled:
                self.driver.on_tick(tick)
                self._anti_entropy(tick)
            if self.bus.messages_sent > sent_before or self.bus.pending():
                busy = True
            if self._next_inject < len(self.load):
                busy = True
            if not stalled and self.driver.busy(tick):
                busy = True
            idle = 0 if busy else idle + 1
            tick += 1

        reference = self.replicas[self.honest_ids[0]]
        digests = {
            i: self.replicas[i].digest().hex() for i in range(self.scenario.node_count)
        }
        honest_digests = {digests[i] for i in self.honest_ids}
        return (
            SimMetrics(
                committed_tx_count=len(reference.committed),
                blocks_or_sites=reference.height(),
                rounds_to_agreement=self.rounds_at_last_commit,
                messages_sent=self.bus.messages_sent,
                divergence_detected=len(honest_digests) > 1,
                wall_ticks=tick,
            ),
            digests,
        )


def run_scenario(scenario: SimScenario) -> tuple[SimMetrics, dict[int, str]]:
    """One deterministic end-to-end simulation run."""
    return Simulation(scenario).run()


def compare_engines(template: SimScenario, engines=ENGINES) -> str:
    """Run the same load/seed across engines; CSV comparison text."""
    lines = [CSV_COLUMNS]
    for engine in engines:
        if engine not in ENGINES:
            raise ScenarioInvalid(f"unknown engine {engine!r}")
        scenario = replace(template, engine=engine).validate()
        metrics, _ = run_scenario(scenario)
        lines.append(metrics_row(scenario, metrics))
    return "\n".join(lines) + "\n"
