"""Vault: AEAD sealing, content-addressed blobs, watermark attribution."""

import hashlib
import hmac as hmac_mod
import os
import stat

import pytest

from datchain.codec import DecodeError
from datchain.errors import (
    AccessDenied,
    AmbiguousAttribution,
    AuthFailure,
    IntegrityFailure,
    NonceExhausted,
    NotFound,
    PayloadTooLarge,
)
from datchain.market import Subscription, derive_watermark_key_id
from datchain.rng import Rng
from datchain.vault import (
    MAX_PLAINTEXT,
    NONCE_BYTES,
    BlobStore,
    DataEnvelope,
    KeyStore,
    StreamKey,
    WatermarkedDelivery,
    aead_open,
    aead_seal,
    attribute_leak,
    decrypt_payload,
    deliver,
    derive_sub_key,
    encrypt_payload,
    verify_delivery,
    watermark_tag,
)

T0 = 1_700_000_000


def _stream_key(tag: bytes = b"k") -> StreamKey:
    return StreamKey.new(bytes([5]) * 32, hashlib.sha256(b"secret" + tag).digest())


def _subscription(n: int, stream_id: bytes = bytes([5]) * 32) -> Subscription:
    sub_id = hashlib.sha256(b"sub" + bytes([n])).digest()
    return Subscription(
        sub_id=sub_id,
        buyer=hashlib.sha256(b"buyer" + bytes([n])).digest(),
        stream_id=stream_id,
        start=T0,
        expiry=T0 + 3600,
        watermark_key_id=derive_watermark_key_id(sub_id),
        paid=30,
    )


# -- AEAD oracle: the published ChaCha20-Poly1305 test vector -------------------------

VECTOR_KEY = bytes.fromhex(
    "808182838485868788898a8b8c8d8e8f909192939495969798999a9b9c9d9e9f"
)
VECTOR_NONCE = bytes.fromhex("070000004041424344454647")
VECTOR_AAD = bytes.fromhex("50515253c0c1c2c3c4c5c6c7")
VECTOR_PLAINTEXT = (
    b"Ladies and Gentlemen of the class of '99: If I could offer you "
    b"only one tip for the future, sunscreen would be it."
)
VECTOR_CIPHERTEXT = bytes.fromhex(
    "d31a8d34648e60db7b86afbc53ef7ec2"
    "a4aded51296e08fea9e2b5a736ee62d6"
    "3dbea45e8ca9671282fafb69da92728b"
    "1a71de0a9e060b2905d6a5b67ecd3b36"
    "92ddbd7f2d778b8c9803aee328091b58"
    "fab324e4fad675945585808b4831d7bc"
    "3ff4def08e4b7a9de576d26586cec64b"
    "6116"
)
VECTOR_TAG = bytes.fromhex("1ae10b594f09e26a7e902ecbd0600691")


def test_aead_matches_published_vector():
    sealed = aead_seal(VECTOR_KEY, VECTOR_NONCE, VECTOR_PLAINTEXT, VECTOR_AAD)
    assert sealed == VECTOR_CIPHERTEXT + VECTOR_TAG
    assert aead_open(VECTOR_KEY, VECTOR_NONCE, sealed, VECTOR_AAD) == VECTOR_PLAINTEXT


def test_aead_vector_tamper_fails_closed():
    sealed = VECTOR_CIPHERTEXT + VECTOR_TAG
    for pos in (0, 1, len(sealed) - 1):
        bad = bytearray(sealed)
        bad[pos] ^= 0x01
        with pytest.raises(AuthFailure):
            aead_open(VECTOR_KEY, VECTOR_NONCE, bytes(bad), VECTOR_AAD)


# -- envelope sealing ------------------------------------------------------------------


@pytest.mark.parametrize("size", [0, 1, 77, 4096, MAX_PLAINTEXT])
def test_encrypt_decrypt_roundtrip(size):
    key = _stream_key()
    plaintext = Rng(size + 1).bytes(size)
    env = encrypt_payload(plaintext, key, T0, bytes([5]) * 32, bytes(NONCE_BYTES))
    assert decrypt_payload(env, key) == plaintext
    assert env.envelope_id == hashlib.sha256(env.ciphertext).digest()
    assert len(env.ciphertext) == size + 16  # Poly1305 tag appended


def test_payload_size_cap():
    key = _stream_key()
    with pytest.raises(PayloadTooLarge):
        encrypt_payload(
            b"\x00" * (MAX_PLAINTEXT + 1), key, T0, bytes(32), bytes(NONCE_BYTES)
        )


def test_distinct_nonces_distinct_ciphertexts():
    key = _stream_key()
    sid = bytes([5]) * 32
    e1 = encrypt_payload(b"same plaintext", key, T0, sid, (0).to_bytes(12, "big"))
    e2 = encrypt_payload(b"same plaintext", key, T0, sid, (1).to_bytes(12, "big"))
    assert e1.ciphertext != e2.ciphertext
    assert e1.envelope_id != e2.envelope_id


def test_every_tamper_path_fails_closed():
    key = _stream_key()
    sid = bytes([5]) * 32
    env = encrypt_payload(b"x" * 64, key, T0, sid, bytes(NONCE_BYTES))

    for pos in range(0, len(env.ciphertext), len(env.ciphertext) // 16):
        bad = bytearray(env.ciphertext)
        bad[pos] ^= 0x80
        tampered = DataEnvelope(env.envelope_id, sid, T0, bytes(bad), env.aead_nonce)
        with pytest.raises(AuthFailure):
            decrypt_payload(tampered, key)

    with pytest.raises(AuthFailure):  # wrong key
        decrypt_payload(env, _stream_key(b"other"))
    with pytest.raises(AuthFailure):  # altered aad: sensor
        decrypt_payload(
            DataEnvelope(env.envelope_id, bytes(32), T0, env.ciphertext, env.aead_nonce),
            key,
        )
    with pytest.raises(AuthFailure):  # altered aad: timestamp
        decrypt_payload(
            DataEnvelope(env.envelope_id, sid, T0 + 1, env.ciphertext, env.aead_nonce),
            key,
        )
    with pytest.raises(AuthFailure):  # altered nonce
        decrypt_payload(
            DataEnvelope(env.envelope_id, sid, T0, env.ciphertext, (1).to_bytes(12, "big")),
            key,
        )


@pytest.mark.parametrize("seed", [1, 2])
def test_confidentiality_proxy_no_plaintext_substrings(seed):
    key = _stream_key()
    rng = Rng(seed)
    plaintext = rng.bytes(4096) if seed == 1 else b"REPEATING-SENSOR-DATA-" * 200
    env = encrypt_payload(plaintext, key, T0, bytes([5]) * 32, bytes(NONCE_BYTES))
    hits = sum(
        1
        for i in range(len(plaintext) - 7)
        if plaintext[i : i + 8] in env.ciphertext
    )
    assert hits == 0


def test_envelope_codec_roundtrip_and_strictness():
    key = _stream_key()
    env = encrypt_payload(b"payload", key, T0, bytes([5]) * 32, bytes(NONCE_BYTES))
    wire = env.encode()
    assert DataEnvelope.decode(wire) == env
    with pytest.raises(DecodeError):
        DataEnvelope.decode(wire + b"\x00")
    with pytest.raises(DecodeError):
        DataEnvelope.decode(wire[:-1])


# -- watermark derivation (oracle: direct hmac recomputation) ---------------------------


def test_watermark_tag_matches_manual_hmac():
    master = hashlib.sha256(b"master").digest()
    sub = _subscription(1)
    env_id = hashlib.sha256(b"env").digest()
    sub_key = derive_sub_key(master, sub.watermark_key_id)
    assert sub_key == hmac_mod.new(
        master, b"wm" + sub.watermark_key_id, hashlib.sha256
    ).digest()
    tag = watermark_tag(sub_key, sub.sub_id, env_id)
    assert tag == hmac_mod.new(sub_key, sub.sub_id + env_id, hashlib.sha256).digest()


def test_deliver_roundtrip_and_access_window():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env = encrypt_payload(b"reading: 21.5C", key, T0, bytes([5]) * 32, bytes(12))
    sub = _subscription(1)

    delivery = deliver(env, sub, key, master, now=T0)
    assert delivery.plaintext == b"reading: 21.5C"
    assert verify_delivery(delivery, sub, master) is True
    assert deliver(env, sub, key, master, now=T0 + 3599).plaintext

    with pytest.raises(AccessDenied):  # at expiry: half-open
        deliver(env, sub, key, master, now=T0 + 3600)
    with pytest.raises(AccessDenied):  # before start
        deliver(env, sub, key, master, now=T0 - 1)


def test_two_buyers_same_envelope_distinct_tags():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env = encrypt_payload(b"shared data", key, T0, bytes([5]) * 32, bytes(12))
    d1 = deliver(env, _subscription(1), key, master, now=T0)
    d2 = deliver(env, _subscription(2), key, master, now=T0)
    assert d1.plaintext == d2.plaintext
    assert d1.watermark_tag != d2.watermark_tag
    # cross-verification must fail: tags are subscription-bound
    assert verify_delivery(d1, _subscription(2), master) is False


def test_wrong_master_key_rejects_tag():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env = encrypt_payload(b"data", key, T0, bytes([5]) * 32, bytes(12))
    sub = _subscription(1)
    delivery = deliver(env, sub, key, master, now=T0)
    assert verify_delivery(delivery, sub, hashlib.sha256(b"other").digest()) is False


# -- leak attribution --------------------------------------------------------------------


def test_attribute_leak_identifies_the_leaker():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env = encrypt_payload(b"leaked dataset", key, T0, bytes([5]) * 32, bytes(12))
    subs = [_subscription(n) for n in range(10)]
    leak = deliver(env, subs[7], key, master, now=T0)
    assert attribute_leak(leak, subs, master) == subs[7].sub_id


def test_zero_tag_and_foreign_tag_unattributed():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env_a = encrypt_payload(b"dataset A", key, T0, bytes([5]) * 32, (0).to_bytes(12, "big"))
    env_b = encrypt_payload(b"dataset B", key, T0, bytes([5]) * 32, (1).to_bytes(12, "big"))
    subs = [_subscription(n) for n in range(10)]

    zeroed = WatermarkedDelivery(b"dataset A", bytes(32), subs[0].sub_id, env_a.envelope_id)
    assert attribute_leak(zeroed, subs, master) is None

    # tag lifted from the same buyer's delivery of a DIFFERENT envelope
    other = deliver(env_b, subs[3], key, master, now=T0)
    spliced = WatermarkedDelivery(
        b"dataset A", other.watermark_tag, subs[3].sub_id, env_a.envelope_id
    )
    assert attribute_leak(spliced, subs, master) is None


def test_attribution_sweep_no_false_positives():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    subs = [_subscription(n) for n in range(20)]
    rng = Rng(99)
    for trial in range(50):
        env = encrypt_payload(
            rng.bytes(64), key, T0, bytes([5]) * 32, trial.to_bytes(12, "big")
        )
        culprit = rng.randbelow(len(subs))
        leak = deliver(env, subs[culprit], key, master, now=T0)
        assert attribute_leak(leak, subs, master) == subs[culprit].sub_id


def test_duplicate_candidates_raise_ambiguity():
    master = hashlib.sha256(b"master").digest()
    key = _stream_key()
    env = encrypt_payload(b"data", key, T0, bytes([5]) * 32, bytes(12))
    sub = _subscription(1)
    leak = deliver(env, sub, key, master, now=T0)
    with pytest.raises(AmbiguousAttribution):
        attribute_leak(leak, [sub, sub], master)


# -- key store ------------------------------------------------------------------------


def _counting_source(counter=[0]):
    def source(n: int) -> bytes:
        counter[0] += 1
        return hashlib.sha256(b"det" + bytes([counter[0]])).digest()[:n]

    return source


def test_keystore_file_is_restricted(tmp_path):
    store = KeyStore(tmp_path / "keys.bin", secret_source=_counting_source())
    mode = stat.S_IMODE(os.stat(store.path).st_mode)
    assert mode == 0o600


def test_keystore_persists_keys_and_counters(tmp_path):
    path = tmp_path / "keys.bin"
    sid = bytes([9]) * 32
    store = KeyStore(path, secret_source=_counting_source())
    key = store.get_or_create(sid)
    assert store.next_nonce(sid) == (0).to_bytes(12, "big")
    assert store.next_nonce(sid) == (1).to_bytes(12, "big")

    reopened = KeyStore(path)
    assert reopened.get(sid) == key
    assert reopened.watermark_master == store.watermark_master
    assert reopened.next_nonce(sid) == (2).to_bytes(12, "big")  # counter resumed
    assert reopened.get_or_create(sid) == key  # stable, not re-minted


def test_keystore_nonces_never_repeat_across_reopens(tmp_path):
    path = tmp_path / "keys.bin"
    sid = bytes([9]) * 32
    seen = set()
    for _ in range(5):
        store = KeyStore(path, secret_source=_counting_source())
        store.get_or_create(sid)
        for _ in range(7):
            nonce = store.next_nonce(sid)
            assert nonce not in seen
            seen.add(nonce)
    assert len(seen) == 35


def test_keystore_unknown_stream_and_exhaustion(tmp_path):
    store = KeyStore(tmp_path / "keys.bin", secret_source=_counting_source())
    with pytest.raises(NotFound):
        store.get(bytes(32))
    with pytest.raises(NotFound):
        store.next_nonce(bytes(32))
    sid = bytes([9]) * 32
    store.get_or_create(sid)
    store._counters[sid] = 1 << 96  # force the counter to the end of its space
    with pytest.raises(NonceExhausted):
        store.next_nonce(sid)


def test_keystore_distinct_streams_distinct_secrets(tmp_path):
    store = KeyStore(tmp_path / "keys.bin", secret_source=_counting_source())
    k1 = store.get_or_create(bytes([1]) * 32)
    k2 = store.get_or_create(bytes([2]) * 32)
    assert k1.secret != k2.secret and k1.key_id != k2.key_id


# -- blob store ----------------------------------------------------------------------


def test_blobstore_fetch_after_store_identity(tmp_path):
    store = BlobStore(tmp_path / "blobs")
    key = _stream_key()
    env = encrypt_payload(b"reading", key, T0, bytes([5]) * 32, bytes(12))
    path = store.store(env)
    hexid = env.envelope_id.hex()
    assert path == tmp_path / "blobs" / hexid[:2] / hexid[2:4] / hexid
    assert store.fetch(env.envelope_id) == env
    assert store.exists(env.envelope_id)
    assert store.store(env) == path  # idempotent duplicate put


def test_blobstore_unknown_id(tmp_path):
    store = BlobStore(tmp_path / "blobs")
    with pytest.raises(NotFound):
        store.fetch(bytes(32))
    assert not store.exists(bytes(32))


def test_blobstore_detects_corruption(tmp_path):
    store = BlobStore(tmp_path / "blobs")
    key = _stream_key()
    env = encrypt_payload(b"reading", key, T0, bytes([5]) * 32, bytes(12))
    path = store.store(env)

    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF  # flip a ciphertext byte in the backing file
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityFailure):
        store.fetch(env.envelope_id)

    path.write_bytes(raw[: len(raw) // 2])  # truncate
    with pytest.raises(IntegrityFailure):
        store.fetch(env.envelope_id)
