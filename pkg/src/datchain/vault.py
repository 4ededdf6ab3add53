"""Encrypted, content-addressed payload vault with per-buyer watermarking.

Sensor payloads are sealed with ChaCha20-Poly1305 under a per-stream
key using 12-byte big-endian counter nonces; the associated data binds
each ciphertext to (sensor_id, captured_at). Envelopes are stored
content-addressed (envelope_id = SHA-256 of ciphertext) in a two-level
fan-out directory, and fetch re-verifies the hash, so silent disk
corruption is detected.

Deliveries carry a detached watermark: a keyed MAC over
(sub_id ‖ envelope_id) under a per-subscription key derived from a
single master secret. A leaked copy can be attributed to the unique
subscription whose derived key verifies the tag. This is a metadata
watermark, not content-embedded steganography: it attributes copies
that retain their provenance framing, which is the deterrence target
at this scale.

Stream keys and the watermark master secret live only in a local,
permission-restricted key file, never on the ledger.
"""

from __future__ import annotations

import hashlib
import hmac
import os
import threading
from dataclasses import dataclass
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from datchain import codec
from datchain.codec import DecodeError, Reader
from datchain.errors import (
    AccessDenied,
    AmbiguousAttribution,
    AuthFailure,
    IntegrityFailure,
    NonceExhausted,
    NotFound,
    PayloadTooLarge,
)
from datchain.market import Subscription

MAX_PLAINTEXT = 1 << 20  # 1 MiB
NONCE_BYTES = 12
_NONCE_LIMIT = 1 << (8 * NONCE_BYTES)

_KEYFILE_MAGIC = b"DVK1"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# -- raw AEAD -----------------------------------------------------------------

def aead_seal(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    """ChaCha20-Poly1305 seal; returns ciphertext with the 16-byte tag appended."""
    return ChaCha20Poly1305(key).encrypt(nonce, plaintext, aad)


def aead_open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise AuthFailure("ciphertext failed authentication") from exc


# -- envelopes ------------------------------------------------------------------

@dataclass(frozen=True)
class DataEnvelope:
    """One sealed sensor payload; envelope_id = SHA-256(ciphertext)."""

    envelope_id: bytes
    sensor_id: bytes
    captured_at: int
    ciphertext: bytes
    aead_nonce: bytes

    @property
    def aad(self) -> bytes:
        return self.sensor_id + codec.enc_u64(self.captured_at)

    def encode(self) -> bytes:
        return (
            self.sensor_id
            + codec.enc_u64(self.captured_at)
            + self.aead_nonce
            + codec.enc_bytes(self.ciphertext)
        )

    @classmethod
    def decode(cls, data: bytes) -> "DataEnvelope":
        r = Reader(data)
        sensor_id = r.take(32)
        captured_at = r.u64()
        nonce = r.take(NONCE_BYTES)
        ciphertext = r.vbytes()
        r.done()
        return cls(sha256(ciphertext), sensor_id, captured_at, ciphertext, nonce)


@dataclass(frozen=True)
class StreamKey:
    key_id: bytes
    stream_id: bytes
    secret: bytes

    @classmethod
    def new(cls, stream_id: bytes, secret: bytes) -> "StreamKey":
        if len(secret) != 32:
            raise ValueError("stream key secret must be 32 bytes")
        return cls(sha256(b"skey:" + secret), stream_id, secret)


@dataclass(frozen=True)
class WatermarkedDelivery:
    plaintext: bytes
    watermark_tag: bytes
    sub_id: bytes
    envelope_id: bytes


def encrypt_payload(
    plaintext: bytes,
    stream_key: StreamKey,
    captured_at: int,
    sensor_id: bytes,
    nonce: bytes,
) -> DataEnvelope:
    """Seal one payload. Nonces must come from the per-key counter."""
    if len(plaintext) > MAX_PLAINTEXT:
        raise PayloadTooLarge(f"{len(plaintext)} bytes > {MAX_PLAINTEXT}")
    if len(nonce) != NONCE_BYTES:
        raise ValueError(f"nonce must be {NONCE_BYTES} bytes")
    aad = sensor_id + codec.enc_u64(captured_at)
    ciphertext = aead_seal(stream_key.secret, nonce, plaintext, aad)
    return DataEnvelope(sha256(ciphertext), sensor_id, captured_at, ciphertext, nonce)


def decrypt_payload(envelope: DataEnvelope, stream_key: StreamKey) -> bytes:
    """Authenticated open; wrong key or any tamper raises AuthFailure."""
    return aead_open(
        stream_key.secret, envelope.aead_nonce, envelope.ciphertext, envelope.aad
    )


# -- watermarking -----------------------------------------------------------------

def derive_sub_key(master: bytes, watermark_key_id: bytes) -> bytes:
    """Per-subscription watermark key from the single master secret."""
    return hmac.new(master, b"wm" + watermark_key_id, hashlib.sha256).digest()


def watermark_tag(sub_key: bytes, sub_id: bytes, envelope_id: bytes) -> bytes:
    return hmac.new(sub_key, sub_id + envelope_id, hashlib.sha256).digest()


def deliver(
    envelope: DataEnvelope,
    subscription: Subscription,
    stream_key: StreamKey,
    watermark_master_key: bytes,
    now: int,
) -> WatermarkedDelivery:
    """Decrypt for a live subscriber and attach their watermark tag."""
    if not subscription.start <= now < subscription.expiry:
        raise AccessDenied(
            f"subscription {subscription.sub_id.hex()[:16]} not live at {now}"
        )
    plaintext = decrypt_payload(envelope, stream_key)
    sub_key = derive_sub_key(watermark_master_key, subscription.watermark_key_id)
    tag = watermark_tag(sub_key, subscription.sub_id, envelope.envelope_id)
    return WatermarkedDelivery(
        plaintext=plaintext,
        watermark_tag=tag,
        sub_id=subscription.sub_id,
        envelope_id=envelope.envelope_id,
    )


def verify_delivery(
    delivery: WatermarkedDelivery,
    subscription: Subscription,
    watermark_master_key: bytes,
) -> bool:
    sub_key = derive_sub_key(watermark_master_key, subscription.watermark_key_id)
    expected = watermark_tag(sub_key, delivery.sub_id, delivery.envelope_id)
    return hmac.compare_digest(expected, delivery.watermark_tag)


def attribute_leak(
    leaked: WatermarkedDelivery,
    subscriptions,
    watermark_master_key: bytes,
) -> bytes | None:
    """Find the unique subscription whose derived key verifies the tag.

    Returns its sub_id, or None when no candidate authenticates the
    leaked copy. More than one match would mean a MAC collision, which
    is a fatal inconsistency rather than an answer.
    """
    matches = []
    for sub in subscriptions:
        sub_key = derive_sub_key(watermark_master_key, sub.watermark_key_id)
        expected = watermark_tag(sub_key, sub.sub_id, leaked.envelope_id)
        if hmac.compare_digest(expected, leaked.watermark_tag):
            matches.append(sub.sub_id)
    if len(matches) > 1:
        raise AmbiguousAttribution(f"{len(matches)} subscription keys verify the tag")
    return matches[0] if matches else None


# -- key registry -----------------------------------------------------------------

class KeyStore:
    """Stream keys + nonce counters + watermark master, in one restricted file.

    File layout: magic ‖ master secret (32) ‖ repeated length-prefixed
    records of stream_id (32) ‖ secret (32) ‖ next nonce counter (u64).
    The whole file is rewritten atomically on every change and kept at
    mode 0600. Access is serialized: nonce counters must never repeat.
    """

    def __init__(self, path: str | Path, secret_source=os.urandom):
        self.path = Path(path)
        self._secret_source = secret_source
        self._lock = threading.Lock()
        self._master: bytes | None = None
        self._keys: dict[bytes, StreamKey] = {}
        self._counters: dict[bytes, int] = {}
        if self.path.exists():
            self._load()
        else:
            self._master = secret_source(32)
            self._flush()

    @property
    def watermark_master(self) -> bytes:
        return self._master

    def _load(self) -> None:
        data = self.path.read_bytes()
        r = Reader(data)
        if r.take(len(_KEYFILE_MAGIC)) != _KEYFILE_MAGIC:
            raise DecodeError("not a key file")
        self._master = r.take(32)
        while r.remaining():
            body = Reader(r.vbytes())
            stream_id = body.take(32)
            secret = body.take(32)
            counter = body.u64()
            body.done()
            self._keys[stream_id] = StreamKey.new(stream_id, secret)
            self._counters[stream_id] = counter
        r.done()

    def _flush(self) -> None:
        parts = [_KEYFILE_MAGIC, self._master]
        for stream_id in sorted(self._keys):
            body = (
                stream_id
                + self._keys[stream_id].secret
                + codec.enc_u64(self._counters[stream_id])
            )
            parts.append(codec.enc_bytes(body))
        tmp = self.path.with_name(self.path.name + ".tmp")
        fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        try:
            os.write(fd, b"".join(parts))
            os.fsync(fd)
        finally:
            os.close(fd)
        os.replace(tmp, self.path)
        os.chmod(self.path, 0o600)

    def get_or_create(self, stream_id: bytes) -> StreamKey:
        """The stream's active key, minting one on first use."""
        with self._lock:
            key = self._keys.get(stream_id)
            if key is None:
                key = StreamKey.new(stream_id, self._secret_source(32))
                self._keys[stream_id] = key
                self._counters[stream_id] = 0
                self._flush()
            return key

    def get(self, stream_id: bytes) -> StreamKey:
        with self._lock:
            key = self._keys.get(stream_id)
            if key is None:
                raise NotFound(f"no key for stream {stream_id.hex()[:16]}")
            return key

    def next_nonce(self, stream_id: bytes) -> bytes:
        """Fresh counter nonce for the stream's key; persisted before use."""
        with self._lock:
            if stream_id not in self._keys:
                raise NotFound(f"no key for stream {stream_id.hex()[:16]}")
            counter = self._counters[stream_id]
            if counter >= _NONCE_LIMIT:
                raise NonceExhausted(f"stream {stream_id.hex()[:16]} nonce space spent")
            self._counters[stream_id] = counter + 1
            self._flush()
            return counter.to_bytes(NONCE_BYTES, "big")


# -- blob store ---------------------------------------------------------------------

class BlobStore:
    """Content-addressed envelope files under a two-level hex fan-out."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, envelope_id: bytes) -> Path:
        hexid = envelope_id.hex()
        return self.root / hexid[:2] / hexid[2:4] / hexid

    def store(self, envelope: DataEnvelope) -> Path:
        """Idempotent content-addressed put (duplicate id is a no-op)."""
        path = self._path(envelope.envelope_id)
        if path.exists():
            return path
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + f".tmp{os.getpid()}")
        tmp.write_bytes(envelope.encode())
        os.replace(tmp, path)
        return path

    def fetch(self, envelope_id: bytes) -> DataEnvelope:
        path = self._path(envelope_id)
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise NotFound(f"envelope {envelope_id.hex()[:16]} not stored") from None
        try:
            envelope = DataEnvelope.decode(data)
        except DecodeError as exc:
            raise IntegrityFailure(f"stored envelope undecodable: {exc}") from exc
        if envelope.envelope_id != envelope_id:
            raise IntegrityFailure(
                f"stored bytes hash to {envelope.envelope_id.hex()[:16]}, "
                f"expected {envelope_id.hex()[:16]}"
            )
        return envelope

    def exists(self, envelope_id: bytes) -> bool:
        return self._path(envelope_id).exists()
