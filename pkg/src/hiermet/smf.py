"""Minimal Standard MIDI File reader.

Covers the subset needed to build piano rolls from quantized MIDI: header
parsing, formats 0 and 1, variable-length quantities, running status,
note-on/note-off pairing (velocity-0 note-ons are note-offs), tempo and
time-signature meta events, and track names.  Everything else is skipped by
its declared length.  The parser never reads past a chunk's declared length;
truncated input raises a parse error carrying the byte offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DEFAULT_TEMPO = 500000  # microseconds per quarter, 120 bpm
DEFAULT_TIME_SIGNATURE = (4, 4)

# Data-byte counts for channel messages by high status nibble.
_CHANNEL_DATA_BYTES = {0x8: 2, 0x9: 2, 0xA: 2, 0xB: 2, 0xC: 1, 0xD: 1, 0xE: 2}

# Data-byte counts for system common messages (no running status).
_SYSTEM_DATA_BYTES = {0xF1: 1, 0xF2: 2, 0xF3: 1, 0xF6: 0}


class SmfParseError(ValueError):
    """Malformed SMF data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte {offset})")
        self.offset = offset


class SmfUnsupportedError(SmfParseError):
    """Well-formed SMF data using a feature outside the supported subset."""


@dataclass(frozen=True)
class MidiNote:
    track: int
    pitch: int
    onset: int
    offset: int
    velocity: int


@dataclass
class MidiSong:
    """Parsed note list plus tempo and meter maps, all in absolute ticks."""

    notes: list[MidiNote]
    tempo_map: list[tuple[int, int]]
    time_signatures: list[tuple[int, int, int]]
    ticks_per_quarter: int
    track_names: list[str] = field(default_factory=list)
    unterminated_notes: int = 0

    @property
    def end_tick(self) -> int:
        return max((note.offset for note in self.notes), default=0)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def need(self, count: int, what: str) -> None:
        if self.pos + count > len(self.data):
            raise SmfParseError(f"truncated {what}", self.pos)

    def bytes(self, count: int, what: str) -> bytes:
        self.need(count, what)
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def u8(self, what: str) -> int:
        return self.bytes(1, what)[0]

    def u16(self, what: str) -> int:
        return int.from_bytes(self.bytes(2, what), "big")

    def u32(self, what: str) -> int:
        return int.from_bytes(self.bytes(4, what), "big")

    def vlq(self, what: str) -> int:
        """Variable-length quantity: 7 bits per byte, high bit continues."""
        value = 0
        for _ in range(4):
            byte = self.u8(what)
            value = (value << 7) | (byte & 0x7F)
            if not byte & 0x80:
                return value
        raise SmfParseError(f"variable-length quantity too long in {what}", self.pos - 1)


def _data_byte(reader: _Reader, what: str) -> int:
    value = reader.u8(what)
    if value & 0x80:
        raise SmfParseError(f"invalid data byte 0x{value:02x} in {what}", reader.pos - 1)
    return value


def parse_smf(data: bytes) -> MidiSong:
    """Parse SMF bytes into a :class:`MidiSong`.

    Raises :class:`SmfParseError` on malformed input and
    :class:`SmfUnsupportedError` for format 2 or SMPTE time division.
    Note-ons left open at end of track are closed at the track's final tick
    and counted in ``unterminated_notes``.
    """
    reader = _Reader(data)
    if reader.bytes(4, "header") != b"MThd":
        raise SmfParseError("missing MThd header", 0)
    header_len = reader.u32("header")
    if header_len < 6:
        raise SmfParseError(f"header length {header_len} too short", reader.pos - 4)
    fmt = reader.u16("header")
    declared_tracks = reader.u16("header")
    division = reader.u16("header")
    reader.bytes(header_len - 6, "header")
    if fmt not in (0, 1):
        raise SmfUnsupportedError(f"unsupported SMF format {fmt}", 8)
    if division & 0x8000:
        raise SmfUnsupportedError("SMPTE time division not supported", 12)
    if division == 0:
        raise SmfParseError("ticks per quarter must be positive", 12)

    song = MidiSong(
        notes=[],
        tempo_map=[],
        time_signatures=[],
        ticks_per_quarter=division,
    )
    tracks_found = 0
    while tracks_found < declared_tracks:
        if reader.pos == len(data):
            raise SmfParseError(
                f"expected {declared_tracks} tracks, found {tracks_found}", reader.pos
            )
        tag = reader.bytes(4, "chunk header")
        length = reader.u32("chunk header")
        if tag != b"MTrk":
            reader.bytes(length, "chunk body")  # alien chunks are skipped
            continue
        reader.need(length, "track body")
        _parse_track(reader, length, tracks_found, song)
        tracks_found += 1

    song.notes.sort(key=lambda n: (n.track, n.onset, n.pitch, n.offset))
    song.tempo_map.sort(key=lambda e: e[0])
    song.time_signatures.sort(key=lambda e: e[0])
    if not song.tempo_map or song.tempo_map[0][0] != 0:
        song.tempo_map.insert(0, (0, DEFAULT_TEMPO))
    if not song.time_signatures or song.time_signatures[0][0] != 0:
        song.time_signatures.insert(0, (0, *DEFAULT_TIME_SIGNATURE))
    return song


def _parse_track(reader: _Reader, length: int, track_index: int, song: MidiSong) -> None:
    end = reader.pos + length
    tick = 0
    running_status: int | None = None
    # FIFO per (channel, pitch): the earliest open note gets the next off.
    active: dict[tuple[int, int], list[tuple[int, int]]] = {}
    name = ""
    ended = False

    def close(key: tuple[int, int], off_tick: int) -> None:
        onset, velocity = active[key].pop(0)
        if not active[key]:
            del active[key]
        song.notes.append(
            MidiNote(
                track=track_index,
                pitch=key[1],
                onset=onset,
                offset=max(off_tick, onset + 1),
                velocity=velocity,
            )
        )

    while reader.pos < end and not ended:
        tick += reader.vlq("delta time")
        status = reader.u8("event")
        if status < 0x80:
            if running_status is None:
                raise SmfParseError("data byte without running status", reader.pos - 1)
            status = running_status
            reader.pos -= 1
        if status == 0xFF:
            running_status = None
            meta_type = reader.u8("meta event")
            meta_len = reader.vlq("meta event")
            if reader.pos + meta_len > end:
                raise SmfParseError("meta event runs past declared track length", end)
            payload = reader.bytes(meta_len, "meta event")
            if meta_type == 0x2F:
                ended = True
            elif meta_type == 0x51 and meta_len == 3:
                song.tempo_map.append((tick, int.from_bytes(payload, "big")))
            elif meta_type == 0x58 and meta_len >= 2:
                song.time_signatures.append((tick, payload[0], 1 << payload[1]))
            elif meta_type == 0x03 and not name:
                name = payload.decode("latin-1")
        elif status in (0xF0, 0xF7):
            running_status = None
            sysex_len = reader.vlq("sysex event")
            if reader.pos + sysex_len > end:
                raise SmfParseError("sysex event runs past declared track length", end)
            reader.bytes(sysex_len, "sysex event")
        elif status >= 0xF0:
            running_status = None
            count = _SYSTEM_DATA_BYTES.get(status)
            if count is None:
                raise SmfParseError(f"unexpected status 0x{status:02x}", reader.pos - 1)
            reader.bytes(count, "system event")
        else:
            running_status = status
            kind = status >> 4
            channel = status & 0x0F
            if kind in (0x8, 0x9):
                pitch = _data_byte(reader, "note event")
                velocity = _data_byte(reader, "note event")
                key = (channel, pitch)
                if kind == 0x9 and velocity > 0:
                    active.setdefault(key, []).append((tick, velocity))
                elif key in active:
                    close(key, tick)
            else:
                for _ in range(_CHANNEL_DATA_BYTES[kind]):
                    _data_byte(reader, "channel event")
        if reader.pos > end:
            raise SmfParseError("event runs past declared track length", end)

    for key in sorted(active):
        while key in active:
            close(key, tick)
            song.unterminated_notes += 1
    song.track_names.append(name)
    reader.pos = end
