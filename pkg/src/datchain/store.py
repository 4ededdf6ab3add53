"""Append-only record files with an offset index sidecar.

Layout (docs/FORMATS.md): the data file is a sequence of records,
each `u32 length || u8 record_type || payload` where length covers the
type byte plus payload. The sidecar holds one u64 big-endian byte
offset per record, pointing at the record's length prefix, so height ->
offset lookups are a single seek.

Record types: 1 = chain block, 2 = tangle site.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

from datchain.codec import DecodeError

RECORD_BLOCK = 1
RECORD_SITE = 2


class RecordFile:
    """One append-only data file plus its index sidecar."""

    def __init__(self, data_path: str | Path):
        self.data_path = Path(data_path)
        self.index_path = self.data_path.with_suffix(self.data_path.suffix + ".idx")

    def exists(self) -> bool:
        return self.data_path.exists()

    def count(self) -> int:
        if not self.index_path.exists():
            return 0
        return self.index_path.stat().st_size // 8

    def append(self, rtype: int, payload: bytes) -> int:
        """Append one record; returns its byte offset."""
        record = struct.pack(">IB", 1 + len(payload), rtype) + payload
        with open(self.data_path, "ab") as data:
            offset = data.tell()
            data.write(record)
        with open(self.index_path, "ab") as index:
            index.write(struct.pack(">Q", offset))
        return offset

    def offsets(self) -> list[int]:
        if not self.index_path.exists():
            return []
        raw = self.index_path.read_bytes()
        return [v[0] for v in struct.iter_unpack(">Q", raw)]

    def read_at(self, offset: int) -> tuple[int, bytes]:
        with open(self.data_path, "rb") as data:
            data.seek(offset)
            header = data.read(5)
            if len(header) < 5:
                raise DecodeError(f"truncated record header at offset {offset}")
            length, rtype = struct.unpack(">IB", header)
            payload = data.read(length - 1)
            if len(payload) != length - 1:
                raise DecodeError(f"truncated record payload at offset {offset}")
            return rtype, payload

    def read_all(self) -> list[tuple[int, bytes]]:
        """Sequential scan of the data file (ignores the sidecar)."""
        records: list[tuple[int, bytes]] = []
        if not self.data_path.exists():
            return records
        raw = self.data_path.read_bytes()
        pos = 0
        while pos < len(raw):
            if pos + 5 > len(raw):
                raise DecodeError(f"truncated record header at offset {pos}")
            length, rtype = struct.unpack(">IB", raw[pos : pos + 5])
            end = pos + 4 + length
            if length < 1 or end > len(raw):
                raise DecodeError(f"truncated record payload at offset {pos}")
            records.append((rtype, raw[pos + 5 : end]))
            pos = end
        return records

    def remove(self) -> None:
        for path in (self.data_path, self.index_path):
            if path.exists():
                os.remove(path)
