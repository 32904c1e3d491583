"""Length-prefixed JSON header followed by a raw little-endian payload.

Layout: 8-byte magic, u64 header length, UTF-8 JSON header, payload bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

MAGIC = b"PROTOKD\x00"


class FormatError(Exception):
    """Base class for malformed artifact files."""


class MalformedHeaderError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


def dump_bytes(header: dict, payload: bytes) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + payload


def write_file(path, header: dict, payload: bytes) -> None:
    """Write atomically so readers never observe a half-written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dump_bytes(header, payload))
    os.replace(tmp, path)


def parse_bytes(blob: bytes, kind: str, version: int) -> tuple[dict, memoryview]:
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise MalformedHeaderError("missing file magic")
    (length,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    if start + length > len(blob):
        raise MalformedHeaderError("header runs past end of file")
    try:
        header = json.loads(blob[start:start + length].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("kind") != kind:
        raise MalformedHeaderError(f"expected a {kind} file")
    if header.get("version") != version:
        raise VersionMismatchError(f"{kind} version {header.get('version')} != supported {version}")
    return header, memoryview(blob)[start + length:]


def read_file(path, kind: str, version: int) -> tuple[dict, memoryview]:
    return parse_bytes(Path(path).read_bytes(), kind, version)
