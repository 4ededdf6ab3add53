"""Consensus engines: mining statistics, stake selection, quorum voting.

Statistical bounds were computed from the closed-form models before the
tests were written (geometric/binomial oracles, noted inline), then
frozen here; everything else checks against brute-force enumerators.
"""

import hashlib
from itertools import combinations

import pytest

from datchain.consensus import (
    Behavior,
    DPosConfig,
    FpcConfig,
    PbftConfig,
    PosConfig,
    PowConfig,
    RpcaConfig,
    Validator,
    VoteRecord,
    dpos_elect,
    dpos_producer,
    fpc_run,
    pbft_round,
    pos_coin_age,
    pos_select_leader,
    pow_mine,
    pow_verify,
    rpca_run,
)
from datchain.errors import ClockSkew, EmptySet, Exhausted, TooFewValidators
from datchain.kernels import leading_zero_bits
from datchain.ledger import Block, compute_tx_root, make_genesis
from datchain.rng import Rng

DAY = 86_400


def _header(tag: int) -> Block:
    return Block(
        index=1,
        prev_hash=hashlib.sha256(b"parent%d" % tag).digest(),
        timestamp=tag,
        nonce=0,
        tx_root=compute_tx_root([]),
        transactions=(),
        hash=b"",
    ).with_hash()


# -- configuration validation --------------------------------------------------

def test_config_bounds():
    with pytest.raises(ValueError):
        PowConfig(difficulty_bits=33)
    with pytest.raises(ValueError):
        DPosConfig(num_delegates=0)
    with pytest.raises(ValueError):
        RpcaConfig(threshold=0.5)
    with pytest.raises(ValueError):
        RpcaConfig(threshold=1.01)
    RpcaConfig(threshold=1.0)  # inclusive upper bound
    with pytest.raises(ValueError):
        FpcConfig(theta_low=0.5)
    with pytest.raises(ValueError):
        FpcConfig(theta_low=0.7, theta_high=0.6)


def test_pbft_liveness_warning():
    with pytest.warns(UserWarning, match="3f\\+1"):
        PbftConfig(n=3, f=1)
    PbftConfig(n=4, f=1)  # no warning
    assert PbftConfig(n=4).quorum == 3
    assert PbftConfig(n=7, f=2).quorum == 5
    assert PbftConfig(n=1, f=0).quorum == 1


# -- proof of work ---------------------------------------------------------------

def test_pow_difficulty_zero_returns_start_nonce():
    header = _header(1)
    assert pow_mine(header, 0, start_nonce=77) == 77


def test_pow_difficulty_8_first_byte_zero():
    header = _header(2)
    nonce = pow_mine(header, 8)
    mined = header.with_nonce(nonce)
    assert mined.hash[0] == 0x00
    assert pow_verify(header, nonce, 8)


@pytest.mark.parametrize("difficulty", [0, 4, 8, 12, 16])
def test_pow_mine_verify_soundness(difficulty):
    header = _header(3)
    nonce = pow_mine(header, difficulty)
    assert pow_verify(header, nonce, difficulty)
    assert leading_zero_bits(header.with_nonce(nonce).hash) >= difficulty


def test_pow_exhaustion():
    with pytest.raises(Exhausted):
        pow_mine(_header(4), 32, max_iters=8)


def test_pow_search_is_deterministic_from_start():
    header = _header(5)
    assert pow_mine(header, 8) == pow_mine(header, 8)
    n0 = pow_mine(header, 8, start_nonce=0)
    assert pow_mine(header, 8, start_nonce=n0) == n0


def test_pow_verify_rejects_first_bit_set():
    header = _header(6)
    # find a nonce whose hash leads with a 1 bit (probability 1/2 each try)
    nonce = 0
    while leading_zero_bits(header.with_nonce(nonce).hash) != 0:
        nonce += 1
    assert not pow_verify(header, nonce, 1)


def test_pow_mean_attempts_sanity():
    # Attempts to find an 8-bit-zero hash follow Geometric(p = 1/256),
    # mean 256, sd 255.5; the mean of 40 headers has sd ≈ 40.4, so the
    # assertion window below sits beyond 3.5 sd on either side. The
    # full 200-header statistical run lives in the acceptance suite.
    attempts = []
    for tag in range(40):
        nonce = pow_mine(_header(1000 + tag), 8)
        attempts.append(nonce + 1)  # upward search from zero
    mean = sum(attempts) / len(attempts)
    assert 110 <= mean <= 410, mean


def test_pow_verify_acceptance_rate():
    # Binomial oracle: 100 independent nonces at difficulty 8 accept
    # with p = 1/256; P(successes ≤ 3) > 0.9999, so [0, 3] is the
    # two-sided 99% envelope.
    header = _header(7)
    hits = sum(pow_verify(header, nonce, 8) for nonce in range(5000, 5100))
    assert hits <= 3


# -- proof of stake ----------------------------------------------------------------

def test_coin_age_examples():
    v = Validator(id=b"\x01" * 32, coins=10, held_since=0)
    assert pos_coin_age(v, 5 * DAY) == 50
    assert pos_coin_age(Validator(id=b"\x02" * 32, coins=0, held_since=0), 99 * DAY) == 0
    v36h = Validator(id=b"\x03" * 32, coins=7, held_since=0)
    assert pos_coin_age(v36h, 36 * 3600) == 7  # floor to whole days


def test_coin_age_clock_skew():
    v = Validator(id=b"\x01" * 32, coins=1, held_since=100)
    with pytest.raises(ClockSkew):
        pos_coin_age(v, 99)


def test_select_leader_argmax_and_tie():
    a = Validator(id=b"\x0a" * 32, coins=10, held_since=0)  # 50 coin-days
    b = Validator(id=b"\x0b" * 32, coins=8, held_since=0)  # 40 coin-days
    assert pos_select_leader([a, b], 5 * DAY) == a.id
    assert pos_select_leader([a], 5 * DAY) == a.id
    tie_low = Validator(id=b"\x01" * 32, coins=10, held_since=0)
    tie_high = Validator(id=b"\x02" * 32, coins=10, held_since=0)
    assert pos_select_leader([tie_high, tie_low], DAY) == tie_low.id
    with pytest.raises(EmptySet):
        pos_select_leader([], 0)


def test_select_leader_matches_brute_force():
    rng = Rng(21)
    for _ in range(20):
        validators = [
            Validator(id=rng.bytes(32), coins=rng.randbelow(1000), held_since=rng.randbelow(50) * DAY)
            for _ in range(20)
        ]
        now = 60 * DAY
        ages = {v.id: pos_coin_age(v, now) for v in validators}
        best = max(ages.values())
        expected = min(vid for vid, age in ages.items() if age == best)
        assert pos_select_leader(validators, now) == expected


def test_selection_invariant_under_stake_scaling():
    rng = Rng(22)
    validators = [
        Validator(id=rng.bytes(32), coins=1 + rng.randbelow(500), held_since=0)
        for _ in range(12)
    ]
    now = 30 * DAY
    baseline = pos_select_leader(validators, now)
    scaled = [
        Validator(id=v.id, coins=v.coins * 7, held_since=v.held_since)
        for v in validators
    ]
    assert pos_select_leader(scaled, now) == baseline


# -- delegated proof of stake ---------------------------------------------------

def test_dpos_single_validator():
    v = Validator(id=b"\x05" * 32, approval_stake=1)
    delegates = dpos_elect([v], 1)
    assert delegates == [v.id]
    for slot in range(5):
        assert dpos_producer(delegates, slot) == v.id


def test_dpos_election_tie_rule():
    a = Validator(id=b"\x0a" * 32, approval_stake=5)
    b = Validator(id=b"\x0b" * 32, approval_stake=9)
    c = Validator(id=b"\x0c" * 32, approval_stake=9)
    assert dpos_elect([a, b, c], 2) == [b.id, c.id]  # tie: smaller address first
    assert dpos_elect([c, b, a], 2) == [b.id, c.id]  # input order irrelevant


def test_dpos_matches_brute_force_sort():
    rng = Rng(23)
    for _ in range(20):
        validators = [
            Validator(id=rng.bytes(32), approval_stake=rng.randbelow(20))
            for _ in range(15)
        ]
        expected = [
            v.id for v in sorted(validators, key=lambda v: (-v.approval_stake, v.id))
        ][:4]
        assert dpos_elect(validators, 4) == expected


def test_dpos_producer_rotation():
    delegates = [b"\x01" * 32, b"\x02" * 32, b"\x03" * 32]
    assert dpos_producer(delegates, 7) == delegates[1]  # 7 mod 3
    assert [dpos_producer(delegates, s) for s in range(6)] == delegates * 2
    with pytest.raises(EmptySet):
        dpos_producer([], 0)


def test_dpos_too_few_validators():
    with pytest.raises(TooFewValidators):
        dpos_elect([Validator(id=b"\x01" * 32)], 2)


# -- pbft -----------------------------------------------------------------------

def test_pbft_full_quorum_commits():
    result = pbft_round(4, "blk", {}, seed=0)
    assert result.outcomes == {i: "blk" for i in range(4)}
    assert result.committed


def test_pbft_one_silent_commits():
    result = pbft_round(4, "blk", {3: Behavior.SILENT}, seed=0)
    assert all(result.outcomes[i] == "blk" for i in range(3))


def test_pbft_two_silent_no_commit():
    for seed in range(50):
        result = pbft_round(4, "blk", {2: Behavior.SILENT, 3: Behavior.SILENT}, seed)
        assert all(v is None for v in result.outcomes.values())


def test_pbft_never_commits_conflicting_values():
    for seed in range(100):
        for behavior in Behavior:
            result = pbft_round(
                5, "blk", {3: behavior, 4: behavior}, seed=seed
            )
            assert len(result.honest_committed()) <= 1


def test_pbft_quorum_matches_enumerator():
    # For silent and vote-no byzantines, honest participation is exactly
    # n - b at both phases, so commit ⟺ n - b ≥ floor(2n/3) + 1.
    # Checked exhaustively over every byzantine subset for n ≤ 7.
    for n in range(1, 8):
        quorum = (2 * n) // 3 + 1
        for behavior in (Behavior.SILENT, Behavior.VOTE_NO):
            for b in range(n):
                for members in combinations(range(n), b):
                    byz = {i: behavior for i in members}
                    result = pbft_round(n, "v", byz, seed=1)
                    expected = (n - b) >= quorum
                    honest = [i for i in range(n) if i not in byz]
                    assert result.quorum == quorum
                    for node in honest:
                        assert (result.outcomes[node] == "v") == expected, (n, b)


def test_pbft_message_accounting():
    # n=4, all honest: 4 prepare broadcasts + 4 commit broadcasts,
    # each reaching the 3 other nodes.
    result = pbft_round(4, "blk", {}, seed=0)
    assert result.messages_sent == 2 * 4 * 3
    silent = pbft_round(4, "blk", {3: Behavior.SILENT}, seed=0)
    assert silent.messages_sent == 2 * 3 * 3


# -- rpca -----------------------------------------------------------------------

def _rpca_votes(yes_count, total, subject=b"\xaa" * 32):
    return {subject: {node: node < yes_count for node in range(total)}}


def test_rpca_inclusive_boundary():
    config = RpcaConfig()
    approved = rpca_run(_rpca_votes(8, 10), 10, config).approved
    assert approved == frozenset({b"\xaa" * 32})  # 8/10 = threshold exactly
    rejected = rpca_run(_rpca_votes(7, 10), 10, config)
    assert rejected.approved == frozenset()
    assert rejected.dropped == frozenset({b"\xaa" * 32})
    assert rejected.rounds_used == config.max_rounds


def test_rpca_unanimous_first_round():
    result = rpca_run(_rpca_votes(10, 10), 10, RpcaConfig())
    assert result.approved and result.rounds_used == 1


def test_rpca_abstentions_count_against():
    # 8 yes of 10 nodes but 2 voters missing entirely: denominator stays 10.
    votes = {b"\xbb" * 32: {node: True for node in range(8)}}
    assert rpca_run(votes, 10, RpcaConfig()).approved  # 8/10 ≥ 0.8
    votes = {b"\xbb" * 32: {node: True for node in range(7)}}
    assert not rpca_run(votes, 10, RpcaConfig()).approved


def test_rpca_byzantine_overrides():
    # 8 honest yes, but 1 of them silenced: 7/10 < 0.8.
    votes = _rpca_votes(8, 10)
    result = rpca_run(votes, 10, RpcaConfig(), byzantine_behaviors={7: Behavior.SILENT})
    assert not result.approved
    result = rpca_run(votes, 10, RpcaConfig(), byzantine_behaviors={9: Behavior.VOTE_NO})
    assert result.approved  # node 9 already voted no


def test_rpca_mixed_candidates():
    good, bad = b"\x01" * 32, b"\x02" * 32
    votes = {
        good: {n: True for n in range(9)},
        bad: {n: n < 5 for n in range(10)},
    }
    result = rpca_run(votes, 10, RpcaConfig(max_rounds=3))
    assert result.approved == frozenset({good})
    assert result.dropped == frozenset({bad})


def test_rpca_vote_records_unique():
    result = rpca_run(_rpca_votes(8, 10), 10, RpcaConfig())
    keys = [(v.round, v.voter, v.subject) for v in result.votes]
    assert len(keys) == len(set(keys))
    assert all(isinstance(v, VoteRecord) for v in result.votes)


# -- fpc ------------------------------------------------------------------------

def test_fpc_all_yes_finalizes_in_ell_rounds():
    config = FpcConfig()
    result = fpc_run({i: True for i in range(20)}, set(), config, seed=5)
    assert result.terminated
    assert result.rounds_used == config.ell
    assert all(result.final_opinions.values())
    assert result.agreed


def test_fpc_query_everyone_deterministic_round():
    # k = n, no adversaries, 60% yes, fixed threshold 0.55: every node
    # sees yes-fraction 0.6 ≥ 0.55 in round 1, so all adopt yes, then
    # finalize after ell stable rounds.
    config = FpcConfig(k=20, theta_low=0.55, theta_high=0.55)
    result = fpc_run({i: (i < 12) for i in range(20)}, set(), config, seed=1)
    assert all(result.final_opinions.values())
    assert result.rounds_used == config.ell
    assert result.terminated


def test_fpc_agreement_under_adversaries():
    # Oracle measured before freezing (500 seeds): zero disagreements.
    # Keep a 30-seed slice in the regular suite; acceptance runs 100.
    agreed = 0
    for seed in range(30):
        opinions = {i: (i < 40) for i in range(45)}
        result = fpc_run(opinions, set(range(45, 50)), FpcConfig(), seed=seed)
        assert result.terminated
        agreed += result.agreed
    assert agreed == 30


def test_fpc_threshold_band_respected():
    result = fpc_run({i: True for i in range(10)}, set(), FpcConfig(), seed=9)
    assert all(0.55 <= t <= 0.75 for t in result.thresholds)
    r2 = fpc_run({i: True for i in range(10)}, set(), FpcConfig(), seed=9)
    assert result.thresholds == r2.thresholds  # shared stream is seeded


def test_fpc_k_larger_than_population():
    with pytest.raises(ValueError):
        fpc_run({0: True, 1: True}, set(), FpcConfig(k=10), seed=0)


def test_fpc_max_rounds_reported():
    # ell > max_rounds can never finalize: reported, not raised.
    config = FpcConfig(k=3, ell=5, max_rounds=3)
    result = fpc_run({i: True for i in range(5)}, set(), config, seed=2)
    assert not result.terminated
    assert result.rounds_used == 3


# -- engine block validation -----------------------------------------------------

def test_engine_validate_block():
    genesis = make_genesis("engine-test", 0)
    assert PowConfig(difficulty_bits=0).validate_block(genesis)
    assert PosConfig().validate_block(genesis)
    assert DPosConfig().validate_block(genesis)
    assert PbftConfig().validate_block(genesis)
    assert RpcaConfig().validate_block(genesis)
    header = _header(50)
    nonce = pow_mine(header, 8)
    assert PowConfig(difficulty_bits=8).validate_block(header.with_nonce(nonce))
    assert not PowConfig(difficulty_bits=8).validate_block(header.with_nonce(nonce + 1))
