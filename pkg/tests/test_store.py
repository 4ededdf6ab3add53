"""Append-only record file and its offset index sidecar."""

import struct

import pytest

from datchain.codec import DecodeError
from datchain.store import RECORD_BLOCK, RECORD_SITE, RecordFile


def test_append_read_roundtrip(tmp_path):
    rf = RecordFile(tmp_path / "ledger.dat")
    assert not rf.exists()
    assert rf.count() == 0
    assert rf.read_all() == []

    off0 = rf.append(RECORD_BLOCK, b"first")
    off1 = rf.append(RECORD_SITE, b"second record")
    assert off0 == 0
    assert off1 == 5 + len(b"first")
    assert rf.count() == 2
    assert rf.offsets() == [off0, off1]
    assert rf.read_at(off0) == (RECORD_BLOCK, b"first")
    assert rf.read_at(off1) == (RECORD_SITE, b"second record")
    assert rf.read_all() == [(RECORD_BLOCK, b"first"), (RECORD_SITE, b"second record")]


def test_on_disk_layout(tmp_path):
    # u32 length (type byte + payload) || u8 type || payload
    rf = RecordFile(tmp_path / "x.dat")
    rf.append(RECORD_BLOCK, b"abc")
    raw = (tmp_path / "x.dat").read_bytes()
    assert raw == struct.pack(">IB", 4, RECORD_BLOCK) + b"abc"
    idx = (tmp_path / "x.dat.idx").read_bytes()
    assert idx == struct.pack(">Q", 0)


def test_empty_payload_allowed(tmp_path):
    rf = RecordFile(tmp_path / "e.dat")
    off = rf.append(RECORD_BLOCK, b"")
    assert rf.read_at(off) == (RECORD_BLOCK, b"")
    assert rf.read_all() == [(RECORD_BLOCK, b"")]


def test_truncated_file_detected(tmp_path):
    rf = RecordFile(tmp_path / "t.dat")
    rf.append(RECORD_BLOCK, b"payload-bytes")
    raw = (tmp_path / "t.dat").read_bytes()
    (tmp_path / "t.dat").write_bytes(raw[:-3])
    with pytest.raises(DecodeError):
        rf.read_all()
    with pytest.raises(DecodeError):
        rf.read_at(0)


def test_truncated_header_detected(tmp_path):
    rf = RecordFile(tmp_path / "h.dat")
    rf.append(RECORD_BLOCK, b"x")
    rf.append(RECORD_BLOCK, b"y")
    raw = (tmp_path / "h.dat").read_bytes()
    (tmp_path / "h.dat").write_bytes(raw[: len(raw) - len(b"y") - 2])
    with pytest.raises(DecodeError):
        rf.read_all()


def test_remove(tmp_path):
    rf = RecordFile(tmp_path / "r.dat")
    rf.append(RECORD_BLOCK, b"z")
    assert rf.exists()
    rf.remove()
    assert not rf.exists()
    assert rf.count() == 0
    rf.remove()  # idempotent


def test_reopen_appends_continue(tmp_path):
    path = tmp_path / "c.dat"
    RecordFile(path).append(RECORD_BLOCK, b"one")
    rf = RecordFile(path)
    rf.append(RECORD_BLOCK, b"two")
    assert [p for _, p in rf.read_all()] == [b"one", b"two"]
    assert rf.count() == 2
