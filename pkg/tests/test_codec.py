"""Canonical encoding primitives: exact bytes, round-trips, strict decode."""

import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from datchain import codec
from datchain.codec import DecodeError, Reader


def test_integer_encodings_match_struct():
    assert codec.enc_u8(0) == b"\x00"
    assert codec.enc_u8(255) == b"\xff"
    assert codec.enc_u32(0xDEADBEEF) == struct.pack(">I", 0xDEADBEEF)
    assert codec.enc_u64(1) == b"\x00" * 7 + b"\x01"
    assert codec.enc_u64(2**64 - 1) == b"\xff" * 8


@pytest.mark.parametrize(
    "fn,bad",
    [
        (codec.enc_u8, -1),
        (codec.enc_u8, 256),
        (codec.enc_u32, -1),
        (codec.enc_u32, 2**32),
        (codec.enc_u64, -1),
        (codec.enc_u64, 2**64),
    ],
)
def test_integer_range_checks(fn, bad):
    with pytest.raises(ValueError):
        fn(bad)


def test_bytes_and_str_prefixing():
    assert codec.enc_bytes(b"") == b"\x00\x00\x00\x00"
    assert codec.enc_bytes(b"ab") == b"\x00\x00\x00\x02ab"
    assert codec.enc_str("hi") == b"\x00\x00\x00\x02hi"
    assert codec.enc_str("é") == b"\x00\x00\x00\x02\xc3\xa9"


def test_str_map_sorted_by_key_bytes():
    encoded = codec.enc_str_map({"b": "2", "a": "1"})
    assert encoded == (
        codec.enc_u32(2)
        + codec.enc_str("a")
        + codec.enc_str("1")
        + codec.enc_str("b")
        + codec.enc_str("2")
    )
    # insertion order never matters
    assert codec.enc_str_map({"a": "1", "b": "2"}) == encoded


def test_reader_roundtrip():
    blob = (
        codec.enc_u8(7)
        + codec.enc_u32(1000)
        + codec.enc_u64(2**40)
        + codec.enc_bytes(b"xyz")
        + codec.enc_str("hé")
        + codec.enc_str_map({"k": "v", "a": "b"})
    )
    r = Reader(blob)
    assert r.u8() == 7
    assert r.u32() == 1000
    assert r.u64() == 2**40
    assert r.vbytes() == b"xyz"
    assert r.vstr() == "hé"
    assert r.str_map() == {"k": "v", "a": "b"}
    r.done()


def test_reader_truncation():
    r = Reader(b"\x00\x00\x00\x05ab")  # claims 5 bytes, has 2
    with pytest.raises(DecodeError):
        r.vbytes()


def test_reader_trailing_bytes_rejected():
    r = Reader(b"\x01\x02")
    r.u8()
    with pytest.raises(DecodeError):
        r.done()


def test_reader_bad_utf8():
    r = Reader(codec.enc_bytes(b"\xff\xfe"))
    with pytest.raises(DecodeError):
        r.vstr()


def test_str_map_rejects_unsorted_and_duplicate_keys():
    body = codec.enc_u32(2) + codec.enc_str("b") + codec.enc_str("2")
    unsorted = body + codec.enc_str("a") + codec.enc_str("1")
    with pytest.raises(DecodeError):
        Reader(unsorted).str_map()
    duplicate = body + codec.enc_str("b") + codec.enc_str("9")
    with pytest.raises(DecodeError):
        Reader(duplicate).str_map()


@given(st.binary(max_size=200))
def test_bytes_roundtrip(data):
    r = Reader(codec.enc_bytes(data))
    assert r.vbytes() == data
    r.done()


@given(st.dictionaries(st.text(max_size=8), st.text(max_size=8), max_size=8))
def test_str_map_roundtrip(mapping):
    r = Reader(codec.enc_str_map(mapping))
    assert r.str_map() == mapping
    r.done()


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_u64_roundtrip(value):
    r = Reader(codec.enc_u64(value))
    assert r.u64() == value
    r.done()
