"""Time-tagged detection events, bit sequences, and their file formats.

Everything downstream (coincidence matching, certification, extraction)
consumes the types defined here. Timestamps are integer picoseconds from
acquisition start; a 1 ns coincidence window is therefore 1000 units.
All containers are immutable values after construction and safe to share
across workers.

Binary tag file (``QTT1``):
    header  = magic ``QTT1`` | version u16 LE | channel count u16 LE (=6)
              | duration u64 LE (ps) | record count u64 LE          (24 bytes)
    records = timestamp u64 LE | channel u8                         (9 bytes each)

Bit file: bits packed MSB-first within each byte, trailing pad bits zero.
The logical bit count lives in a sidecar JSON manifest ``{"bits": N}``
stored at ``<path>.json``.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAX_TIMESTAMP = 2**63 - 1  # headroom for signed arithmetic on differences

_MAGIC = b"QTT1"
_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")
_RECORD_DTYPE = np.dtype([("t", "<u8"), ("ch", "u1")])


class TagFileError(Exception):
    """Base class for tag-file codec failures."""


class FormatError(TagFileError):
    """Bad magic, unsupported version, or malformed header."""


class CorruptionError(TagFileError):
    """Structurally valid file whose payload violates stream invariants."""


class TruncationError(TagFileError):
    """File ends before the declared record count."""


class Channel(enum.IntEnum):
    """The six detector channels, one per ring section.

    Values are the on-wire channel codes. The three diametric section
    pairs are (U1, D2), (U2, D1) and (C1, C2); ``partner`` maps each
    channel to its opposite section.
    """

    U1 = 0
    U2 = 1
    D1 = 2
    D2 = 3
    C1 = 4
    C2 = 5

    @property
    def partner(self) -> "Channel":
        return _PARTNER[self]


_PARTNER = {
    Channel.U1: Channel.D2,
    Channel.D2: Channel.U1,
    Channel.U2: Channel.D1,
    Channel.D1: Channel.U2,
    Channel.C1: Channel.C2,
    Channel.C2: Channel.C1,
}

#: Section pairs that emit correlated photon pairs.
SECTION_PAIRS = (
    (Channel.U1, Channel.D2),
    (Channel.U2, Channel.D1),
    (Channel.C1, Channel.C2),
)


@dataclass(frozen=True)
class TimeTag:
    """A single detection event: picosecond timestamp plus channel."""

    timestamp: int
    channel: Channel

    def __post_init__(self):
        if not 0 <= self.timestamp <= MAX_TIMESTAMP:
            raise ValueError(f"timestamp {self.timestamp} outside [0, 2^63)")


class TagStream:
    """A time-sorted sequence of detection events over a fixed duration.

    Stored columnar (int64 timestamps, uint8 channel codes) so bulk
    operations stay vectorized; iteration yields :class:`TimeTag` values.
    Ties across channels at equal timestamps are legal and their relative
    order is preserved.
    """

    __slots__ = ("timestamps", "channels", "duration")

    def __init__(self, timestamps, channels, duration: int, validate: bool = True):
        ts = np.ascontiguousarray(timestamps, dtype=np.int64)
        ch = np.ascontiguousarray(channels, dtype=np.uint8)
        duration = int(duration)
        if validate:
            if ts.shape != ch.shape or ts.ndim != 1:
                raise ValueError("timestamps and channels must be 1-d and equal length")
            if duration <= 0:
                raise ValueError("duration must be a positive picosecond count")
            if ts.size:
                if ts.min() < 0 or ts.max() > MAX_TIMESTAMP:
                    raise ValueError("timestamps outside [0, 2^63)")
                if ts.max() > duration:
                    raise ValueError("timestamps exceed stream duration")
                if np.any(np.diff(ts) < 0):
                    raise ValueError("timestamps must be non-decreasing")
            if ch.size and ch.max() > max(Channel):
                raise ValueError("invalid channel code")
        ts.setflags(write=False)
        ch.setflags(write=False)
        self.timestamps = ts
        self.channels = ch
        self.duration = duration

    @classmethod
    def from_tags(cls, tags: Iterable[TimeTag], duration: int) -> "TagStream":
        tags = list(tags)
        return cls(
            np.array([t.timestamp for t in tags], dtype=np.int64),
            np.array([int(t.channel) for t in tags], dtype=np.uint8),
            duration,
        )

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __iter__(self) -> Iterator[TimeTag]:
        for t, c in zip(self.timestamps.tolist(), self.channels.tolist()):
            yield TimeTag(t, Channel(c))

    def __getitem__(self, i: int) -> TimeTag:
        return TimeTag(int(self.timestamps[i]), Channel(int(self.channels[i])))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TagStream):
            return NotImplemented
        return (
            self.duration == other.duration
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.channels, other.channels)
        )

    def __repr__(self) -> str:
        return f"TagStream({len(self)} tags, duration={self.duration} ps)"

    def channel_times(self, channel: Channel) -> np.ndarray:
        """Timestamps of one channel, sorted (a view-copy)."""
        return self.timestamps[self.channels == int(channel)]

    def counts_by_channel(self) -> dict[Channel, int]:
        counts = np.bincount(self.channels, minlength=6)
        return {ch: int(counts[int(ch)]) for ch in Channel}


def encode_stream(stream: TagStream) -> bytes:
    """Serialize a stream to the canonical QTT1 byte layout."""
    header = _HEADER.pack(_MAGIC, _VERSION, 6, stream.duration, len(stream))
    records = np.empty(len(stream), dtype=_RECORD_DTYPE)
    records["t"] = stream.timestamps
    records["ch"] = stream.channels
    return header + records.tobytes()


def decode_stream(data: bytes) -> TagStream:
    """Parse QTT1 bytes back into a :class:`TagStream`.

    Raises :class:`FormatError` on bad magic/version, :class:`TruncationError`
    when records are missing or cut short, and :class:`CorruptionError` when
    the payload violates stream invariants (bad channel code, unsorted or
    out-of-range timestamps).
    """
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than QTT1 header")
    magic, version, n_channels, duration, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}")
    if n_channels != 6:
        raise FormatError(f"expected 6 channels, header says {n_channels}")
    body = data[_HEADER.size:]
    if len(body) < count * _RECORD_DTYPE.itemsize:
        raise TruncationError(
            f"header declares {count} records, payload holds "
            f"{len(body) // _RECORD_DTYPE.itemsize}"
        )
    records = np.frombuffer(body, dtype=_RECORD_DTYPE, count=count)
    ts = records["t"].astype(np.int64)
    ch = records["ch"].copy()
    if ts.size:
        if records["t"].max() > MAX_TIMESTAMP:
            raise CorruptionError("timestamp outside 63-bit range")
        if ch.max() > max(Channel):
            raise CorruptionError(f"channel byte {ch.max()} outside 0..5")
        if np.any(np.diff(ts) < 0):
            raise CorruptionError("timestamps not sorted")
        if ts.max() > duration:
            raise CorruptionError("timestamp exceeds declared duration")
    try:
        return TagStream(ts, ch, duration)
    except ValueError as exc:
        raise CorruptionError(str(exc)) from exc


def write_stream(stream: TagStream, path) -> None:
    Path(path).write_bytes(encode_stream(stream))


def read_stream(path) -> TagStream:
    return decode_stream(Path(path).read_bytes())


def merge_streams(streams: Sequence[TagStream]) -> TagStream:
    """Merge sorted streams into one sorted stream.

    Equal timestamps keep input order (stream order first, then position
    within each stream). All inputs must share one duration.
    """
    if not streams:
        raise ValueError("merge_streams needs at least one stream")
    duration = streams[0].duration
    for s in streams[1:]:
        if s.duration != duration:
            raise ValueError(
                f"mismatched durations: {s.duration} != {duration}"
            )
    ts = np.concatenate([s.timestamps for s in streams])
    ch = np.concatenate([s.channels for s in streams])
    order = np.argsort(ts, kind="stable")
    return TagStream(ts[order], ch[order], duration, validate=False)


def import_csv(text: str, duration: int | None = None) -> TagStream:
    """Parse ``timestamp_ps,channel_name`` lines into a sorted stream.

    Lines may arrive unsorted; blank lines are skipped. Unknown channel
    names and non-integer timestamps raise ValueError. If ``duration`` is
    omitted it defaults to the latest timestamp (or 1 ps for no tags).
    """
    ts_list: list[int] = []
    ch_list: list[int] = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'timestamp,channel', got {line!r}")
        t_text, ch_text = parts[0].strip(), parts[1].strip()
        try:
            t = int(t_text)
        except ValueError:
            raise ValueError(f"line {lineno}: non-integer timestamp {t_text!r}") from None
        if t < 0 or t > MAX_TIMESTAMP:
            raise ValueError(f"line {lineno}: timestamp {t} outside [0, 2^63)")
        try:
            ch = Channel[ch_text]
        except KeyError:
            raise ValueError(f"line {lineno}: unknown channel {ch_text!r}") from None
        ts_list.append(t)
        ch_list.append(int(ch))
    ts = np.array(ts_list, dtype=np.int64)
    ch = np.array(ch_list, dtype=np.uint8)
    order = np.argsort(ts, kind="stable")
    if duration is None:
        duration = int(ts.max()) if ts.size else 1
    return TagStream(ts[order], ch[order], duration)


class BitSequence:
    """An immutable bit string, packed MSB-first into bytes.

    ``length`` is the logical bit count; pad bits beyond it are zero.
    """

    __slots__ = ("packed", "length")

    def __init__(self, packed, length: int):
        packed = np.ascontiguousarray(packed, dtype=np.uint8)
        length = int(length)
        if length < 0 or packed.size != (length + 7) // 8:
            raise ValueError(f"{packed.size} bytes cannot hold exactly {length} bits")
        if length % 8:
            tail_mask = 0xFF >> (length % 8)
            if packed.size and (packed[-1] & tail_mask):
                raise ValueError("nonzero pad bits in final byte")
        packed.setflags(write=False)
        self.packed = packed
        self.length = length

    @classmethod
    def from_bits(cls, bits) -> "BitSequence":
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.size and bits.max() > 1:
            raise ValueError("bits must be 0/1")
        return cls(np.packbits(bits), bits.size)

    @classmethod
    def from_bytes(cls, data: bytes, length: int) -> "BitSequence":
        return cls(np.frombuffer(data, dtype=np.uint8).copy(), length)

    def to_bits(self) -> np.ndarray:
        """Unpack to a 0/1 uint8 array of the logical length."""
        return np.unpackbits(self.packed, count=self.length)

    def to_bytes(self) -> bytes:
        return self.packed.tobytes()

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return (int(self.packed[i >> 3]) >> (7 - (i & 7))) & 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitSequence):
            return NotImplemented
        return self.length == other.length and np.array_equal(self.packed, other.packed)

    def __hash__(self) -> int:
        return hash((self.length, self.packed.tobytes()))

    def __repr__(self) -> str:
        return f"BitSequence({self.length} bits)"


def write_bits(bits: BitSequence, path) -> None:
    """Write packed bits plus the ``{"bits": N}`` sidecar manifest."""
    path = Path(path)
    path.write_bytes(bits.to_bytes())
    Path(str(path) + ".json").write_text(json.dumps({"bits": bits.length}))


def read_bits(path) -> BitSequence:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    return BitSequence.from_bytes(path.read_bytes(), manifest["bits"])
