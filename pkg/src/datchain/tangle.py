"""Tangle-style DAG ledger: sites approve two parents.

A site is content-addressed: site_id = SHA-256 of its canonical
encoding (parents, attachment nonce, payload), so any change to any
field changes the id and breaks every approver that references it —
the DAG analogue of the block chain's hash links. The genesis site is
the one exception: its id is derived from the chain id tag and its
stored parent fields point at itself.

Confirmation weight of a site is 1 + the number of distinct sites that
transitively approve it; tip selection is either uniform over tips or
a weight-proportional random walk from genesis (exponent alpha = 1).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from datchain import codec
from datchain.codec import DecodeError, Reader
from datchain.errors import (
    BadSignature,
    Exhausted,
    InvalidTransaction,
    UnknownParent,
    UnknownSite,
)
from datchain.kernels import leading_zero_bits, pow_search
from datchain.ledger import Transaction
from datchain.rng import Rng

_GENESIS_TAG = b"DATCHAIN-TANGLE-GENESIS\x00"

# Site encoding: parent_a (32) || parent_b (32) || u64 nonce || u8
# has_payload || payload transaction wire. The attachment nonce sits at
# this fixed offset for the proof-of-work splice.
SITE_NONCE_OFFSET = 64

DEFAULT_ATTACH_DIFFICULTY = 4

TIP_STRATEGIES = ("uniform", "weighted-walk")


@dataclass(frozen=True)
class TangleSite:
    site_id: bytes
    parent_a: bytes
    parent_b: bytes
    payload: Transaction | None
    nonce: int
    own_weight: int = 1

    def encode(self) -> bytes:
        return encode_site_fields(self.parent_a, self.parent_b, self.nonce, self.payload)

    @classmethod
    def decode(cls, data: bytes, genesis_id: bytes | None = None) -> "TangleSite":
        r = Reader(data)
        parent_a = r.take(32)
        parent_b = r.take(32)
        nonce = r.u64()
        has_payload = r.u8()
        if has_payload not in (0, 1):
            raise DecodeError(f"bad payload flag {has_payload}")
        payload = Transaction.decode(r) if has_payload else None
        r.done()
        if genesis_id is not None:
            site_id = genesis_id
        else:
            site_id = hashlib.sha256(data).digest()
        return cls(site_id, parent_a, parent_b, payload, nonce)


def encode_site_fields(
    parent_a: bytes, parent_b: bytes, nonce: int, payload: Transaction | None
) -> bytes:
    parts = [parent_a, parent_b, codec.enc_u64(nonce)]
    if payload is None:
        parts.append(codec.enc_u8(0))
    else:
        parts.append(codec.enc_u8(1))
        parts.append(payload.encode())
    return b"".join(parts)


@dataclass
class TangleState:
    """Site map plus the derived tip set and approver index."""

    chain_id: str
    sites: dict[bytes, TangleSite] = field(default_factory=dict)
    order: list[bytes] = field(default_factory=list)  # insertion = topological
    tips: set[bytes] = field(default_factory=set)
    approvers: dict[bytes, set[bytes]] = field(default_factory=dict)
    last_sequence: dict[bytes, int] = field(default_factory=dict)
    tx_index: dict[bytes, bytes] = field(default_factory=dict)  # tx_id -> site_id

    @property
    def genesis_id(self) -> bytes:
        return self.order[0]

    def site_count(self) -> int:
        return len(self.order)


def genesis_site_id(chain_id: str) -> bytes:
    return hashlib.sha256(_GENESIS_TAG + chain_id.encode("utf-8")).digest()


def tangle_genesis(chain_id: str = "datchain") -> TangleState:
    """Fresh tangle holding only the self-parented genesis site."""
    gid = genesis_site_id(chain_id)
    genesis = TangleSite(gid, gid, gid, payload=None, nonce=0)
    state = TangleState(chain_id=chain_id)
    state.sites[gid] = genesis
    state.order.append(gid)
    state.tips.add(gid)
    state.approvers[gid] = set()
    return state


def _weights_by_site(state: TangleState) -> dict[bytes, int]:
    """Cumulative weight of every site in one reverse-topological pass.

    Distinct transitive approvers are tracked as bitmasks over insertion
    ordinals, so shared descendants are not double counted.
    """
    ordinal = {sid: i for i, sid in enumerate(state.order)}
    masks: dict[bytes, int] = {}
    for sid in reversed(state.order):
        mask = 0
        for child in state.approvers[sid]:
            mask |= masks[child] | (1 << ordinal[child])
        masks[sid] = mask
    return {sid: 1 + mask.bit_count() for sid, mask in masks.items()}


def cumulative_weight(state: TangleState, site_id: bytes) -> int:
    """1 + number of distinct sites transitively approving site_id."""
    if site_id not in state.sites:
        raise UnknownSite(site_id.hex())
    seen: set[bytes] = set()
    frontier = [site_id]
    while frontier:
        current = frontier.pop()
        for child in state.approvers[current]:
            if child not in seen:
                seen.add(child)
                frontier.append(child)
    return 1 + len(seen)


def is_confirmed(state: TangleState, site_id: bytes, weight_threshold: int) -> bool:
    return cumulative_weight(state, site_id) >= weight_threshold


def _walk_to_tip(state: TangleState, weights: dict[bytes, int], rng: Rng) -> bytes:
    current = state.genesis_id
    while True:
        children = sorted(state.approvers[current])
        if not children:
            return current
        total = sum(weights[c] for c in children)
        pick = rng.randbelow(total)
        acc = 0
        for child in children:
            acc += weights[child]
            if pick < acc:
                current = child
                break


def select_tips(
    state: TangleState,
    strategy: str = "uniform",
    seed: int = 0,
    rng: Rng | None = None,
) -> tuple[bytes, bytes]:
    """Two tip ids for a new site to approve (may coincide)."""
    if strategy not in TIP_STRATEGIES:
        raise ValueError(f"unknown tip strategy {strategy!r}")
    if rng is None:
        rng = Rng(seed)
    if strategy == "uniform":
        tips = sorted(state.tips)
        return rng.choice(tips), rng.choice(tips)
    weights = _weights_by_site(state)
    return _walk_to_tip(state, weights, rng), _walk_to_tip(state, weights, rng)


def solve_attachment(
    parent_a: bytes,
    parent_b: bytes,
    payload: Transaction | None,
    difficulty_bits: int,
    max_iters: int = 1 << 24,
) -> tuple[int, bytes]:
    """Find the attachment nonce: the site id itself must carry the
    required leading zero bits. Returns (nonce, site_id)."""
    encoded = encode_site_fields(parent_a, parent_b, 0, payload)
    prefix = encoded[:SITE_NONCE_OFFSET]
    suffix = encoded[SITE_NONCE_OFFSET + 8 :]
    nonce = pow_search(prefix, suffix, difficulty_bits, 0, max_iters)
    if nonce < 0:
        raise Exhausted(f"no attachment nonce in {max_iters} tries")
    site_id = hashlib.sha256(
        prefix + nonce.to_bytes(8, "big") + suffix
    ).digest()
    return nonce, site_id


def attach(
    state: TangleState,
    tx: Transaction,
    strategy: str = "uniform",
    difficulty_bits: int = DEFAULT_ATTACH_DIFFICULTY,
    seed: int = 0,
    rng: Rng | None = None,
) -> TangleSite:
    """Validate tx, pick two parents, solve the attachment proof, and
    add the new site. Mutates state; returns the new site."""
    try:
        tx.verify()
    except BadSignature as exc:
        raise InvalidTransaction(str(exc)) from exc
    floor_seq = state.last_sequence.get(tx.sender, 0)
    if tx.sequence <= floor_seq:
        raise InvalidTransaction(
            f"sequence {tx.sequence} not above {floor_seq} for {tx.sender.hex()[:16]}"
        )
    parent_a, parent_b = select_tips(state, strategy, seed=seed, rng=rng)
    nonce, site_id = solve_attachment(parent_a, parent_b, tx, difficulty_bits)
    site = TangleSite(site_id, parent_a, parent_b, tx, nonce)
    insert_site(state, site)
    return site


def insert_site(state: TangleState, site: TangleSite) -> None:
    """Add a fully formed site (attach() and replay both land here)."""
    if site.parent_a not in state.sites or site.parent_b not in state.sites:
        raise UnknownParent(f"site {site.site_id.hex()[:16]} references missing parent")
    state.sites[site.site_id] = site
    state.order.append(site.site_id)
    state.approvers[site.site_id] = set()
    for parent in {site.parent_a, site.parent_b}:
        state.approvers[parent].add(site.site_id)
        state.tips.discard(parent)
    state.tips.add(site.site_id)
    if site.payload is not None:
        state.last_sequence[site.payload.sender] = max(
            state.last_sequence.get(site.payload.sender, 0), site.payload.sequence
        )
        state.tx_index[site.payload.tx_id] = site.site_id


@dataclass(frozen=True)
class TangleReport:
    valid: bool
    first_bad_ordinal: int | None = None
    reason: str | None = None


def verify_tangle(state: TangleState, difficulty_bits: int | None = None) -> TangleReport:
    """Recompute every site id and parent link in insertion order."""
    if not state.order:
        return TangleReport(False, 0, "empty tangle")
    seen: set[bytes] = set()
    for i, sid in enumerate(state.order):
        site = state.sites[sid]
        if i == 0:
            if sid != genesis_site_id(state.chain_id):
                return TangleReport(False, 0, "genesis id does not recompute")
            if site.parent_a != sid or site.parent_b != sid:
                return TangleReport(False, 0, "genesis must self-parent")
        else:
            if hashlib.sha256(site.encode()).digest() != sid:
                return TangleReport(False, i, "site id does not recompute")
            if site.parent_a not in seen or site.parent_b not in seen:
                return TangleReport(False, i, "parent does not precede site")
            if difficulty_bits is not None and leading_zero_bits(sid) < difficulty_bits:
                return TangleReport(False, i, "attachment proof below difficulty")
        seen.add(sid)
    expected_tips = set(state.order) - {
        p for s in state.sites.values() for p in (s.parent_a, s.parent_b)
        if s.site_id != state.genesis_id
    }
    if state.tips != expected_tips:
        return TangleReport(False, len(state.order) - 1, "tip index inconsistent")
    return TangleReport(valid=True)


def tangle_digest(state: TangleState) -> bytes:
    """Hash over the canonical serialization of all sites in order."""
    h = hashlib.sha256()
    for sid in state.order:
        h.update(state.sites[sid].encode())
    return h.digest()
