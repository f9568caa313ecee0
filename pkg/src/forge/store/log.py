"""Append-only segment log.

Each segment file is a sequence of frames: ``u32 length | u32 crc32 | body``
(integers little-endian, crc over the body). A frame is the atomic unit of
persistence: recovery replays frames in order and truncates a torn or
corrupt tail of the newest segment, so an interrupted write leaves the store
exactly as it was before the write began.
"""

from __future__ import annotations

import errno
import os
import struct
import zlib
from pathlib import Path

from forge.errors import CorruptStore, StorageFull

_HEADER = struct.Struct("<II")

SEGMENT_GLOB = "segment-*.log"
SEGMENT_ROLL_BYTES = 64 * 1024 * 1024


def segment_path(root: Path, number: int) -> Path:
    return root / f"segment-{number:06d}.log"


def segment_number(path: Path) -> int:
    return int(path.stem.split("-")[1])


def list_segments(root: Path) -> list[Path]:
    return sorted(root.glob(SEGMENT_GLOB), key=segment_number)


def frame(body: bytes) -> bytes:
    return _HEADER.pack(len(body), zlib.crc32(body)) + body


def iter_frames(path: Path, *, tolerate_torn_tail: bool):
    """Yield ``(offset, body)`` per intact frame.

    A damaged frame stops iteration: when ``tolerate_torn_tail`` the file is
    truncated back to the last intact frame (crash recovery of the active
    segment), otherwise CorruptStore is raised.
    """
    data = path.read_bytes()
    off = 0
    n = len(data)
    good_end = 0
    out = []
    while off + _HEADER.size <= n:
        length, crc = _HEADER.unpack_from(data, off)
        body_start = off + _HEADER.size
        body_end = body_start + length
        if body_end > n:
            break
        body = data[body_start:body_end]
        if zlib.crc32(body) != crc:
            break
        out.append((off, body))
        off = body_end
        good_end = off
    if good_end != n:
        if not tolerate_torn_tail:
            raise CorruptStore(f"corrupt frame in {path.name} at byte {good_end}")
        with open(path, "r+b") as f:
            f.truncate(good_end)
    return out


class LogWriter:
    """Single appender over the active segment; rolls at SEGMENT_ROLL_BYTES."""

    def __init__(self, root: Path, *, fsync: bool):
        self.root = root
        self.fsync = fsync
        segments = list_segments(root)
        if segments:
            self.number = segment_number(segments[-1])
            self._file = open(segments[-1], "ab")
        else:
            self.number = 1
            self._file = open(segment_path(root, 1), "ab")

    def append(self, body: bytes) -> None:
        data = frame(body)
        try:
            self._file.write(data)
            self._file.flush()
            if self.fsync:
                os.fsync(self._file.fileno())
        except OSError as exc:
            if exc.errno == errno.ENOSPC:
                raise StorageFull("log device full") from exc
            raise
        if self._file.tell() >= SEGMENT_ROLL_BYTES:
            self.roll()

    def roll(self) -> Path:
        self._file.close()
        self.number += 1
        path = segment_path(self.root, self.number)
        self._file = open(path, "ab")
        return path

    def close(self) -> None:
        if not self._file.closed:
            self._file.flush()
            if self.fsync:
                os.fsync(self._file.fileno())
            self._file.close()


def replay(root: Path):
    """Yield intact record bodies across all segments, oldest first.

    Compaction writes a full snapshot into a fresh segment whose first frame
    is an OP_SNAPSHOT marker; replay starts at the newest such segment, so
    older segments become dead weight that is deleted lazily.
    """
    from forge.store.records import OP_SNAPSHOT

    segments = list_segments(root)
    if not segments:
        return []
    parsed: list[tuple[Path, list[tuple[int, bytes]]]] = []
    for i, path in enumerate(segments):
        frames = iter_frames(path, tolerate_torn_tail=(i == len(segments) - 1))
        parsed.append((path, frames))
    start = 0
    for i in range(len(parsed) - 1, -1, -1):
        frames = parsed[i][1]
        if frames and frames[0][1][:1] == bytes([OP_SNAPSHOT]):
            start = i
            break
    bodies = []
    for _, frames in parsed[start:]:
        bodies.extend(body for _, body in frames)
    return bodies
