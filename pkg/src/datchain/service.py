"""HTTP service: ingestion, marketplace, and ledger-explorer endpoints.

One FastAPI app wraps one node. Marketplace actions that clients author
(sign-up, sensor registration, subscription) arrive as client-signed
transaction blobs, so the service never touches an account's private
key; publication and delivery are orchestrated server-side under the
operator key. Mutating endpoints except sign-up require a bearer
session token (an HMAC over address and validity window). Sign-in is an
off-ledger exchange: the client signs a timestamped challenge with its
account key and receives a fresh token.

Conventions (docs/API.md): identifiers (addresses, hashes, ids) are
hex strings; opaque blobs (payloads, signatures, transaction bytes,
watermark tags) are base64. Every 2xx mutating response carries the
committed transaction id, retrievable via GET /ledger/tx/{tx_id}.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac as hmac_mod
import time

from fastapi import FastAPI, Header, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from datchain import market
from datchain.codec import enc_u64
from datchain.errors import (
    AccessDenied,
    AmbiguousAttribution,
    AuthFailure,
    DatchainError,
    DuplicateAccount,
    DuplicateSensor,
    InsufficientFunds,
    IntegrityFailure,
    InvalidTransaction,
    NotFound,
    PayloadTooLarge,
    StateDivergence,
    UnknownAccount,
    UnknownSensor,
    UnknownStream,
    UnknownSubscription,
)
from datchain.keys import verify_signature
from datchain.ledger import Transaction, TxKind
from datchain.node import DatchainNode

SESSION_CHALLENGE_PREFIX = b"datchain-session:"
SESSION_SKEW_SECONDS = 300
MAX_PAGE = 100

_STATUS_BY_ERROR = (
    (AuthFailure, 401),
    (InsufficientFunds, 402),
    (AccessDenied, 403),
    ((NotFound, UnknownAccount, UnknownSensor, UnknownStream, UnknownSubscription), 404),
    ((DuplicateAccount, DuplicateSensor), 409),
    ((StateDivergence, IntegrityFailure, AmbiguousAttribution), 500),
    ((InvalidTransaction, PayloadTooLarge), 400),
)


def _status_for(exc: DatchainError) -> int:
    for types, status in _STATUS_BY_ERROR:
        if isinstance(exc, types):
            return status
    return 400


# -- session tokens ------------------------------------------------------------

def mint_token(secret: bytes, address: bytes, now: int, ttl: int) -> str:
    raw = address + enc_u64(now) + enc_u64(now + ttl)
    mac = hmac_mod.new(secret, raw, hashlib.sha256).digest()
    return base64.urlsafe_b64encode(raw + mac).decode("ascii")


def verify_token(secret: bytes, token: str, now: int) -> bytes:
    """Address the token vouches for; raises AuthFailure otherwise."""
    try:
        blob = base64.urlsafe_b64decode(token.encode("ascii"))
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise AuthFailure("undecodable token") from exc
    if len(blob) != 32 + 8 + 8 + 32:
        raise AuthFailure("malformed token")
    raw, mac = blob[:48], blob[48:]
    expected = hmac_mod.new(secret, raw, hashlib.sha256).digest()
    if not hmac_mod.compare_digest(mac, expected):
        raise AuthFailure("bad token signature")
    issued = int.from_bytes(raw[32:40], "big")
    expiry = int.from_bytes(raw[40:48], "big")
    if not issued <= now < expiry:
        raise AuthFailure("token expired or not yet valid")
    return raw[:32]


# -- request schemas -------------------------------------------------------------

class TxBody(BaseModel):
    tx: str = Field(description="base64 client-signed transaction")


class SessionBody(BaseModel):
    address: str
    timestamp: int
    signature: str = Field(description="base64 signature over the challenge")


class DataBody(BaseModel):
    sensor_id: str
    payload: str = Field(description="base64 sensor payload")
    captured_at: int


# -- helpers --------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _from_b64(text: str, what: str) -> bytes:
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except (binascii.Error, ValueError, UnicodeEncodeError) as exc:
        raise InvalidTransaction(f"{what} is not valid base64") from exc


def _from_hex(text: str, what: str, nbytes: int = 32) -> bytes:
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise InvalidTransaction(f"{what} is not valid hex") from exc
    if len(raw) != nbytes:
        raise InvalidTransaction(f"{what} must be {nbytes} bytes")
    return raw


def _tx_view(tx: Transaction) -> dict:
    return {
        "tx_id": tx.tx_id.hex(),
        "kind": TxKind(tx.kind).name.lower(),
        "sender": tx.sender.hex(),
        "sequence": tx.sequence,
    }


def _account_view(state: market.MarketState, address: bytes) -> dict:
    account = state.accounts[address]
    return {
        "address": address.hex(),
        "role": market.ROLE_NAMES[account.role],
        "balance": account.balance,
        "created_at": account.created_at,
        "next_sequence": market.next_sequence(state, address),
    }


def _stream_view(state: market.MarketState, stream: market.Stream) -> dict:
    sensor = state.sensors[stream.sensor_id]
    return {
        "stream_id": stream.stream_id.hex(),
        "sensor_id": stream.sensor_id.hex(),
        "owner": stream.owner.hex(),
        "price": stream.price,
        "period": stream.period,
        "schema_tag": stream.schema_tag,
        "metadata": dict(sensor.metadata),
    }


def create_app(node: DatchainNode) -> FastAPI:
    app = FastAPI(title="datchain", docs_url=None, redoc_url=None)
    # The web portal is served as static files from another origin; tokens
    # travel in the Authorization header, so wildcard origins are safe.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.exception_handler(DatchainError)
    async def on_domain_error(request: Request, exc: DatchainError):
        return JSONResponse(
            status_code=_status_for(exc),
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.exception_handler(RequestValidationError)
    async def on_schema_error(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": "SchemaViolation", "detail": str(exc.errors()[:3])},
        )

    def require_token(authorization: str | None) -> bytes:
        if not authorization or not authorization.startswith("Bearer "):
            raise AuthFailure("missing bearer token")
        return verify_token(node.auth_secret, authorization[7:], node.now())

    # -- accounts and sessions

    @app.post("/accounts", status_code=201)
    def create_account(body: TxBody):
        tx_bytes = _from_b64(body.tx, "tx")
        sender = _peek_sender(tx_bytes)
        if sender in node.market.accounts:
            raise DuplicateAccount(sender.hex())
        tx, receipt = node.submit_signed(tx_bytes, (TxKind.SIGN_UP,))
        now = node.now()
        return {
            "account": _account_view(node.market, tx.sender),
            "token": mint_token(node.auth_secret, tx.sender, now, node.config.session_ttl),
            "tx_id": receipt.tx_id.hex(),
            "location": receipt.location,
        }

    def _peek_sender(tx_bytes: bytes) -> bytes:
        from datchain.codec import Reader

        try:
            tx = Transaction.decode(Reader(tx_bytes))
        except (DatchainError, ValueError) as exc:
            raise InvalidTransaction(f"undecodable tx: {exc}") from exc
        return tx.sender

    @app.post("/sessions")
    def create_session(body: SessionBody):
        address = _from_hex(body.address, "address")
        account = node.market.accounts.get(address)
        if account is None:
            raise NotFound(f"unknown account {body.address[:16]}")
        now = node.now()
        if abs(now - body.timestamp) > SESSION_SKEW_SECONDS:
            raise AuthFailure("challenge timestamp outside the freshness window")
        message = SESSION_CHALLENGE_PREFIX + address + enc_u64(body.timestamp)
        signature = _from_b64(body.signature, "signature")
        if not verify_signature(account.public_key, signature, message):
            raise AuthFailure("challenge signature does not verify")
        return {
            "token": mint_token(node.auth_secret, address, now, node.config.session_ttl),
            "address": body.address,
        }

    @app.get("/accounts/{address}")
    def get_account(address: str):
        raw = _from_hex(address, "address")
        if raw not in node.market.accounts:
            raise NotFound(f"unknown account {address[:16]}")
        return _account_view(node.market, raw)

    # -- sensors and streams

    @app.post("/sensors", status_code=201)
    def register_sensor(body: TxBody, authorization: str | None = Header(default=None)):
        caller = require_token(authorization)
        tx_bytes = _from_b64(body.tx, "tx")
        sender = _peek_sender(tx_bytes)
        if sender != caller:
            raise AccessDenied("token does not match the transaction sender")
        tx, receipt = node.submit_signed(tx_bytes, (TxKind.REGISTER_SENSOR,))
        action = market.RegisterSensorAction.decode(tx.payload)
        sensor_id = market.derive_sensor_id(tx.sender, action.metadata, tx.sequence)
        stream_id = market.derive_stream_id(sensor_id)
        return {
            "sensor_id": sensor_id.hex(),
            "stream_id": stream_id.hex(),
            "tx_id": receipt.tx_id.hex(),
            "location": receipt.location,
        }

    @app.get("/streams")
    def list_streams():
        streams = sorted(node.market.streams.values(), key=lambda s: s.stream_id)
        return {"streams": [_stream_view(node.market, s) for s in streams]}

    # -- data path

    @app.post("/data", status_code=201)
    def post_data(body: DataBody, authorization: str | None = Header(default=None)):
        caller = require_token(authorization)
        sensor_id = _from_hex(body.sensor_id, "sensor_id")
        sensor = node.market.sensors.get(sensor_id)
        if sensor is None:
            raise NotFound(f"unknown sensor {body.sensor_id[:16]}")
        if sensor.owner != caller:
            raise AccessDenied("only the sensor owner may publish to it")
        payload = _from_b64(body.payload, "payload")
        envelope, receipt = node.publish(sensor_id, payload, body.captured_at)
        return {
            "envelope_id": envelope.envelope_id.hex(),
            "sensor_id": body.sensor_id,
            "captured_at": body.captured_at,
            "tx_id": receipt.tx_id.hex(),
            "location": receipt.location,
        }

    @app.get("/data/{envelope_id}")
    def get_data(envelope_id: str, authorization: str | None = Header(default=None)):
        caller = require_token(authorization)
        raw_id = _from_hex(envelope_id, "envelope_id")
        delivery, subscription, receipt = node.deliver(raw_id, caller)
        return {
            "envelope_id": envelope_id,
            "payload": _b64(delivery.plaintext),
            "watermark_tag": _b64(delivery.watermark_tag),
            "sub_id": subscription.sub_id.hex() if subscription else None,
            "tx_id": receipt.tx_id.hex() if receipt else None,
            "location": receipt.location if receipt else None,
        }

    # -- subscriptions

    @app.post("/subscriptions", status_code=201)
    def subscribe(body: TxBody, authorization: str | None = Header(default=None)):
        caller = require_token(authorization)
        tx_bytes = _from_b64(body.tx, "tx")
        sender = _peek_sender(tx_bytes)
        if sender != caller:
            raise AccessDenied("token does not match the transaction sender")
        _precheck_subscribe(tx_bytes, sender)
        tx, receipt = node.submit_signed(tx_bytes, (TxKind.SUBSCRIBE,))
        action = market.SubscribeAction.decode(tx.payload)
        sub_id = market.derive_sub_id(tx.sender, action.stream_id, tx.sequence)
        sub = node.market.subscriptions[sub_id]
        return {
            "sub_id": sub_id.hex(),
            "stream_id": action.stream_id.hex(),
            "start": sub.start,
            "expiry": sub.expiry,
            "paid": sub.paid,
            "watermark_key_id": sub.watermark_key_id.hex(),
            "balance": node.market.accounts[tx.sender].balance,
            "tx_id": receipt.tx_id.hex(),
            "location": receipt.location,
        }

    def _precheck_subscribe(tx_bytes: bytes, sender: bytes) -> None:
        """Friendly status codes before the authoritative commit-time apply."""
        from datchain.codec import Reader

        try:
            tx = Transaction.decode(Reader(tx_bytes))
            if TxKind(tx.kind) is not TxKind.SUBSCRIBE:
                return  # submit_signed reports the kind mismatch
            action = market.SubscribeAction.decode(tx.payload)
        except (DatchainError, ValueError):
            return  # submit_signed reports the malformed transaction
        stream = node.market.streams.get(action.stream_id)
        if stream is None:
            raise UnknownStream(action.stream_id.hex())
        account = node.market.accounts.get(sender)
        if account is None:
            raise NotFound(f"unknown account {sender.hex()[:16]}")
        if account.balance < stream.price:
            raise InsufficientFunds(
                f"balance {account.balance} < price {stream.price}"
            )

    # -- explorer

    @app.get("/ledger/blocks")
    def ledger_blocks(
        frm: int | None = Query(default=None, alias="from"),
        to: int | None = None,
    ):
        if node.chain is None:
            raise InvalidTransaction("node runs a tangle ledger; use /ledger/sites")
        height = node.chain.height
        lo = max(0, height - 24) if frm is None else max(0, frm)
        hi = height + 1 if to is None else min(to, height + 1)
        hi = min(hi, lo + MAX_PAGE)
        blocks = []
        for block in node.chain.blocks[lo:hi]:
            blocks.append(
                {
                    "index": block.index,
                    "hash": block.hash.hex(),
                    "prev_hash": block.prev_hash.hex(),
                    "timestamp": block.timestamp,
                    "nonce": block.nonce,
                    "tx_root": block.tx_root.hex(),
                    "transactions": [_tx_view(tx) for tx in block.transactions],
                }
            )
        return {"height": height, "from": lo, "to": hi, "blocks": blocks}

    @app.get("/ledger/sites")
    def ledger_sites(
        frm: int | None = Query(default=None, alias="from"),
        to: int | None = None,
    ):
        if node.tangle is None:
            raise InvalidTransaction("node runs a chain ledger; use /ledger/blocks")
        count = node.tangle.site_count()
        lo = max(0, count - 25) if frm is None else max(0, frm)
        hi = count if to is None else min(to, count)
        hi = min(hi, lo + MAX_PAGE)
        sites = []
        for ordinal in range(lo, hi):
            site = node.tangle.sites[node.tangle.order[ordinal]]
            sites.append(
                {
                    "ordinal": ordinal,
                    "site_id": site.site_id.hex(),
                    "parent_a": site.parent_a.hex(),
                    "parent_b": site.parent_b.hex(),
                    "nonce": site.nonce,
                    "transaction": _tx_view(site.payload) if site.payload else None,
                }
            )
        return {"count": count, "from": lo, "to": hi, "sites": sites}

    @app.get("/ledger/tx/{tx_id}")
    def ledger_tx(tx_id: str):
        raw = _from_hex(tx_id, "tx_id")
        tx, location = node.find_tx(raw)
        view = _tx_view(tx)
        view.update(
            {
                "public_key": tx.public_key.hex(),
                "payload": _b64(tx.payload),
                "signature": _b64(tx.signature),
                "location": location,
            }
        )
        return view

    # -- introspection

    @app.get("/info")
    def info():
        return node.info()

    @app.get("/metrics")
    def metrics():
        return node.counters()

    return app


def run_service(node: DatchainNode) -> None:  # pragma: no cover - process entry
    import uvicorn

    uvicorn.run(
        create_app(node),
        host=node.config.host,
        port=node.config.port,
        log_level="warning",
    )
