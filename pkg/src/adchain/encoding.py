"""Length-prefixed byte framing used by node protocol messages."""

from __future__ import annotations

from typing import Iterable, Iterator


def lp(raw: bytes) -> bytes:
    """4-byte big-endian length prefix + raw bytes."""
    return len(raw).to_bytes(4, "big") + raw


def frame(*parts: bytes) -> bytes:
    return b"".join(lp(p) for p in parts)


def unframe(raw: bytes) -> list[bytes]:
    return list(iter_frames(raw))


def iter_frames(raw: bytes) -> Iterator[bytes]:
    off = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise ValueError("truncated frame")
        n = int.from_bytes(raw[off : off + 4], "big")
        off += 4
        if off + n > len(raw):
            raise ValueError("truncated frame")
        yield raw[off : off + n]
        off += n


def frame_all(parts: Iterable[bytes]) -> bytes:
    return b"".join(lp(p) for p in parts)
