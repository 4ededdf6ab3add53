"""Pluggable consensus engines.

Five block-ledger algorithms (PoW, PoS, DPoS, PBFT, RPCA) plus FPC for
the tangle. Every engine is a pure, seedable decision procedure: the
standalone entry points here simulate one synchronous exchange with a
reliable bus, while netsim drives the same quorum rules over a lossy
delayed bus.

Numeric rules:
  - PoW difficulty is leading zero bits of the block hash.
  - PoS stake is coin-days: coins * floor(whole days held).
  - PBFT quorum is floor(2n/3) + 1 matching messages per phase.
  - RPCA approval is inclusive: yes votes / total nodes >= threshold.
  - FPC compares the sampled yes-fraction against a per-round shared
    random threshold tau drawn uniformly from [theta_low, theta_high]:
    >= tau adopts yes, <= 1 - tau adopts no, in between holds. A node
    finalizes after ell consecutive rounds with the same opinion.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

from datchain import kernels
from datchain.errors import ClockSkew, EmptySet, Exhausted, TooFewValidators
from datchain.ledger import NONCE_OFFSET, Block
from datchain.rng import Rng, derive_seed

SECONDS_PER_DAY = 86_400


class Behavior(str, Enum):
    """Byzantine behavior menu used by all engines and netsim."""

    SILENT = "silent"
    VOTE_NO = "vote_no"
    EQUIVOCATE = "equivocate"
    MINORITY = "minority"


# -- engine configurations ------------------------------------------------

@dataclass(frozen=True)
class PowConfig:
    difficulty_bits: int = 8
    name: str = "pow"

    def __post_init__(self):
        if not 0 <= self.difficulty_bits <= 32:
            raise ValueError("difficulty_bits must be in 0..=32")

    def validate_block(self, block: Block) -> bool:
        return kernels.leading_zero_bits(block.hash) >= self.difficulty_bits


@dataclass(frozen=True)
class PosConfig:
    name: str = "pos"

    def validate_block(self, block: Block) -> bool:
        return True


@dataclass(frozen=True)
class DPosConfig:
    num_delegates: int = 3
    name: str = "dpos"

    def __post_init__(self):
        if self.num_delegates < 1:
            raise ValueError("num_delegates must be >= 1")

    def validate_block(self, block: Block) -> bool:
        return True


@dataclass(frozen=True)
class PbftConfig:
    n: int = 4
    f: int = 1
    name: str = "pbft"

    def __post_init__(self):
        if self.n < 1 or self.f < 0:
            raise ValueError("pbft requires n >= 1 and f >= 0")
        if self.n < 3 * self.f + 1:
            warnings.warn(
                f"pbft n={self.n} < 3f+1={3 * self.f + 1}: liveness not guaranteed",
                stacklevel=2,
            )

    @property
    def quorum(self) -> int:
        return (2 * self.n) // 3 + 1

    def validate_block(self, block: Block) -> bool:
        return True


@dataclass(frozen=True)
class RpcaConfig:
    threshold: float = 0.80
    max_rounds: int = 4
    name: str = "rpca"

    def __post_init__(self):
        if not 0.5 < self.threshold <= 1.0:
            raise ValueError("rpca threshold must be in (0.5, 1.0]")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def validate_block(self, block: Block) -> bool:
        return True


@dataclass(frozen=True)
class FpcConfig:
    k: int = 10
    theta_low: float = 0.55
    theta_high: float = 0.75
    ell: int = 3
    max_rounds: int = 100
    name: str = "fpc"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.5 < self.theta_low <= self.theta_high < 1.0:
            raise ValueError("theta band must satisfy 0.5 < low <= high < 1.0")
        if self.ell < 1 or self.max_rounds < 1:
            raise ValueError("ell and max_rounds must be >= 1")

    def validate_block(self, block: Block) -> bool:
        return True


ConsensusConfig = PowConfig | PosConfig | DPosConfig | PbftConfig | RpcaConfig | FpcConfig


# -- proof of work ---------------------------------------------------------

def pow_mine(
    block: Block,
    difficulty_bits: int,
    max_iters: int = 1 << 24,
    start_nonce: int = 0,
) -> int:
    """Search nonces upward from start_nonce until the block hash has the
    required leading zero bits. Returns the winning nonce."""
    encoded = block.encode_for_hash()
    prefix = encoded[:NONCE_OFFSET]
    suffix = encoded[NONCE_OFFSET + 8 :]
    nonce = kernels.pow_search(prefix, suffix, difficulty_bits, start_nonce, max_iters)
    if nonce < 0:
        raise Exhausted(f"no nonce in {max_iters} attempts at {difficulty_bits} bits")
    return nonce


def pow_verify(block: Block, nonce: int, difficulty_bits: int) -> bool:
    """One hash: does this nonce satisfy the difficulty rule?"""
    candidate = block.with_nonce(nonce)
    return kernels.leading_zero_bits(candidate.hash) >= difficulty_bits


# -- proof of stake --------------------------------------------------------

@dataclass
class Validator:
    id: bytes
    coins: int = 0
    held_since: int = 0
    is_byzantine: bool = False
    approval_stake: int = 0

    def __post_init__(self):
        if self.coins < 0:
            raise ValueError("coins must be >= 0")


@dataclass(frozen=True)
class VoteRecord:
    round: int
    voter: bytes
    subject: bytes
    vote: bool


def pos_coin_age(validator: Validator, now: int) -> int:
    """Coin-days: coins held times whole days held."""
    if now < validator.held_since:
        raise ClockSkew(f"now {now} before held_since {validator.held_since}")
    days = (now - validator.held_since) // SECONDS_PER_DAY
    return validator.coins * days


def pos_select_leader(validators: list[Validator], now: int) -> bytes:
    """Validator with the largest coin-day stake; ties go to the
    lexicographically smallest address."""
    if not validators:
        raise EmptySet("no validators")
    best = min(validators, key=lambda v: (-pos_coin_age(v, now), v.id))
    return best.id


# -- delegated proof of stake ----------------------------------------------

def dpos_elect(validators: list[Validator], num_delegates: int) -> list[bytes]:
    """Top num_delegates by approval stake (ties: smallest address)."""
    if num_delegates > len(validators):
        raise TooFewValidators(
            f"{num_delegates} delegates requested from {len(validators)} validators"
        )
    ranked = sorted(validators, key=lambda v: (-v.approval_stake, v.id))
    return [v.id for v in ranked[:num_delegates]]


def dpos_producer(delegates: list[bytes], slot_index: int) -> bytes:
    if not delegates:
        raise EmptySet("no delegates")
    return delegates[slot_index % len(delegates)]


# -- practical byzantine fault tolerance ------------------------------------

_REJECT = object()  # the "some other value" byzantine voters push


@dataclass
class PbftResult:
    outcomes: dict[int, object | None]  # node -> committed value or None
    prepared: dict[int, bool]
    messages_sent: int
    quorum: int

    def honest_committed(self) -> set:
        return {v for v in self.outcomes.values() if v is not None}

    @property
    def committed(self) -> bool:
        return any(v is not None for v in self.outcomes.values())


def pbft_round(
    n: int,
    proposal: object,
    byzantine_behaviors: dict[int, Behavior] | None = None,
    seed: int = 0,
) -> PbftResult:
    """One synchronous three-phase round over a reliable bus.

    Nodes are 0..n-1; byzantine_behaviors maps node id -> Behavior.
    The proposal is taken as pre-prepared at every node (an honest
    primary), so the decision hinges on the prepare and commit quorums.
    """
    byz = byzantine_behaviors or {}
    honest = [i for i in range(n) if i not in byz]
    quorum = (2 * n) // 3 + 1
    rng = Rng(derive_seed(seed, "pbft-equivocate"))
    messages = 0

    def phase(senders: list[int]) -> dict[int, int]:
        """Broadcast one vote per sender; returns per-receiver count of
        messages matching the proposal."""
        nonlocal messages
        matching = {i: 0 for i in range(n)}
        for sender in range(n):
            behavior = byz.get(sender)
            if behavior is None:
                if sender not in senders:
                    continue
                messages += n - 1
                for receiver in range(n):
                    matching[receiver] += 1
            elif behavior == Behavior.SILENT:
                continue
            elif behavior in (Behavior.VOTE_NO, Behavior.MINORITY):
                messages += n - 1
            elif behavior == Behavior.EQUIVOCATE:
                messages += n - 1
                for receiver in range(n):
                    if rng.bernoulli(0.5):
                        matching[receiver] += 1
        return matching

    prepare_counts = phase(senders=honest)
    prepared = {i: prepare_counts[i] >= quorum for i in honest}

    commit_senders = [i for i in honest if prepared[i]]
    commit_counts = phase(senders=commit_senders)

    outcomes: dict[int, object | None] = {}
    for i in honest:
        outcomes[i] = proposal if commit_counts[i] >= quorum else None
    return PbftResult(outcomes, prepared, messages, quorum)


# -- ripple protocol consensus ----------------------------------------------

@dataclass
class RpcaResult:
    approved: frozenset
    dropped: frozenset
    rounds_used: int
    votes: list[VoteRecord]


def rpca_run(
    votes: dict[bytes, dict[int, bool]],
    num_nodes: int,
    config: RpcaConfig,
    seed: int = 0,
    byzantine_behaviors: dict[int, Behavior] | None = None,
) -> RpcaResult:
    """Iterative approval voting over candidate transactions.

    votes maps candidate id -> {node id -> fixed yes/no}. A missing vote
    is an abstention. Byzantine nodes override per behavior: SILENT
    abstains, VOTE_NO votes no. The denominator is always num_nodes, so
    approval needs yes / num_nodes >= threshold (inclusive, default 80%).
    Candidates short of the threshold after max_rounds are dropped.
    Honest voters hold their votes across rounds.
    """
    byz = byzantine_behaviors or {}
    approved: set[bytes] = set()
    records: list[VoteRecord] = []
    pending = sorted(votes.keys())
    rounds_used = 0

    for round_no in range(1, config.max_rounds + 1):
        if not pending:
            break
        rounds_used = round_no
        still_pending = []
        for subject in pending:
            yes = 0
            for node in range(num_nodes):
                behavior = byz.get(node)
                if behavior in (Behavior.SILENT,):
                    continue
                if behavior in (Behavior.VOTE_NO, Behavior.MINORITY):
                    vote = False
                else:
                    if node not in votes[subject]:
                        continue
                    vote = votes[subject][node]
                records.append(
                    VoteRecord(round_no, node.to_bytes(8, "big"), subject, vote)
                )
                if vote:
                    yes += 1
            if yes / num_nodes >= config.threshold:
                approved.add(subject)
            else:
                still_pending.append(subject)
        pending = still_pending

    return RpcaResult(
        approved=frozenset(approved),
        dropped=frozenset(pending),
        rounds_used=rounds_used,
        votes=records,
    )


# -- fast probabilistic consensus --------------------------------------------

@dataclass
class FpcResult:
    final_opinions: dict[int, bool]  # honest node -> opinion
    finalized: dict[int, bool]
    rounds_used: int
    terminated: bool
    thresholds: list[float] = field(default_factory=list)

    @property
    def agreed(self) -> bool:
        return len(set(self.final_opinions.values())) <= 1


def fpc_run(
    initial_opinions: dict[int, bool],
    adversaries: set[int] | None = None,
    config: FpcConfig | None = None,
    seed: int = 0,
) -> FpcResult:
    """Randomized-threshold binary voting by sampling peers.

    initial_opinions covers the honest nodes; adversaries answer every
    query with the opinion currently held by the minority of honest
    nodes (ties answered "no"). Each round every unfinalized honest node
    queries k distinct nodes (self included in the population) and
    updates against the shared per-round threshold tau: yes-fraction
    >= tau adopts "yes", <= 1 - tau adopts "no", and the band in
    between keeps the current opinion (the hysteresis that makes the
    vote robust to sampling noise near the boundary). A node finalizes
    after ell consecutive rounds holding the same opinion, counting the
    round an opinion was adopted; the run ends at global finalization
    or max_rounds (reported via terminated=False).
    """
    config = config or FpcConfig()
    adversaries = adversaries or set()
    node_ids = sorted(set(initial_opinions) | adversaries)
    n = len(node_ids)
    if config.k > n:
        raise ValueError(f"k={config.k} exceeds population {n}")

    threshold_rng = Rng(derive_seed(seed, "fpc-threshold"))
    query_rng = Rng(derive_seed(seed, "fpc-query"))

    opinions = dict(initial_opinions)
    streak = {i: 0 for i in opinions}
    finalized = {i: False for i in opinions}
    honest_ids = sorted(opinions)
    thresholds: list[float] = []
    rounds_used = 0

    for _ in range(config.max_rounds):
        if all(finalized.values()):
            break
        rounds_used += 1
        tau = config.theta_low + threshold_rng.random() * (
            config.theta_high - config.theta_low
        )
        thresholds.append(tau)

        yes_honest = sum(opinions.values())
        minority_opinion = yes_honest < len(opinions) - yes_honest
        snapshot = dict(opinions)

        for node in honest_ids:
            if finalized[node]:
                continue
            sampled = query_rng.sample(node_ids, config.k)
            yes = 0
            for peer in sampled:
                if peer in adversaries:
                    answer = minority_opinion
                else:
                    answer = snapshot[peer]
                if answer:
                    yes += 1
            fraction = yes / config.k
            if fraction >= tau:
                new_opinion = True
            elif fraction <= 1.0 - tau:
                new_opinion = False
            else:
                new_opinion = snapshot[node]
            if new_opinion == snapshot[node]:
                streak[node] += 1
            else:
                streak[node] = 1
            opinions[node] = new_opinion
            if streak[node] >= config.ell:
                finalized[node] = True

    return FpcResult(
        final_opinions=opinions,
        finalized=finalized,
        rounds_used=rounds_used,
        terminated=all(finalized.values()),
        thresholds=thresholds,
    )
