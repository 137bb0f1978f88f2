"""Melody ingestion: MIDI parsing, transposition, ternary tokenization and windowing.

A melody is held as a list of :class:`NoteEvent`. Three aligned token streams are
derived from it (pitch, interval, rhythm) and cut into fixed-length windows that
carry the song's region label.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import mido
import numpy as np

log = logging.getLogger(__name__)

REST = "REST"
NONE = "NONE"
PAD = "PAD"

WINDOW_LENGTH = 32
DEFAULT_GRID = 16

# Krumhansl-Kessler key profiles, index 0 = tonic.
_MAJOR_PROFILE = np.array([6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88])
_MINOR_PROFILE = np.array([6.33, 2.68, 3.52, 5.38, 2.60, 3.53, 2.54, 4.75, 3.98, 2.69, 3.34, 3.17])
_NOTE_NAMES = {"C": 0, "D": 2, "E": 4, "F": 5, "G": 7, "A": 9, "B": 11}


class MidiParseError(ValueError):
    """Raised for unreadable MIDI files; carries the byte offset where reading stopped."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        where = f" at byte offset {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}")


class PolyphonyError(ValueError):
    def __init__(self, onsets: Sequence[Fraction]):
        self.onsets = list(onsets)
        shown = ", ".join(str(o) for o in self.onsets[:20])
        super().__init__(f"overlapping notes at onsets (quarters): {shown}")


@dataclass(frozen=True)
class NoteEvent:
    """One melodic event. ``pitch`` is a MIDI number or :data:`REST`; duration is in quarters."""

    pitch: int | str
    duration: Fraction

    def __post_init__(self):
        if self.pitch != REST and not (isinstance(self.pitch, (int, np.integer)) and 0 <= self.pitch <= 127):
            raise ValueError(f"pitch must be in [0, 127] or REST, got {self.pitch!r}")
        object.__setattr__(self, "duration", Fraction(self.duration))
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")


@dataclass
class Song:
    """A tokenized melody: three aligned streams plus its region label."""

    song_id: str
    region: str
    pitches: list
    intervals: list
    durations: list[Fraction]

    def __len__(self) -> int:
        return len(self.pitches)

    @classmethod
    def from_events(cls, song_id: str, region: str, events: Sequence[NoteEvent]) -> "Song":
        pitches = [e.pitch for e in events]
        return cls(song_id, region, pitches, derive_intervals(pitches), [e.duration for e in events])


def _token_key(tok):
    # ints/fractions first in numeric order, sentinels after in a fixed order
    if isinstance(tok, str):
        return (1, (REST, NONE, PAD).index(tok) if tok in (REST, NONE, PAD) else 99, 0)
    return (0, 0, tok)


@dataclass
class Vocabulary:
    """Bijective token<->id maps for the three streams and the region labels."""

    pitch_tokens: list
    interval_tokens: list
    rhythm_tokens: list[Fraction]
    region_labels: list[str]
    _maps: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._maps = {
            "pitch": {t: i for i, t in enumerate(self.pitch_tokens)},
            "interval": {t: i for i, t in enumerate(self.interval_tokens)},
            "rhythm": {t: i for i, t in enumerate(self.rhythm_tokens)},
            "region": {t: i for i, t in enumerate(self.region_labels)},
        }
        for name, m in self._maps.items():
            if len(m) != len(getattr(self, f"{name}_tokens" if name != "region" else "region_labels")):
                raise ValueError(f"duplicate tokens in {name} vocabulary")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.pitch_tokens), len(self.interval_tokens), len(self.rhythm_tokens)

    @property
    def n_regions(self) -> int:
        return len(self.region_labels)

    def pitch_id(self, tok) -> int:
        return self._maps["pitch"][tok]

    def interval_id(self, tok) -> int:
        return self._maps["interval"][tok]

    def rhythm_id(self, tok) -> int:
        return self._maps["rhythm"][Fraction(tok)]

    def region_id(self, label: str) -> int:
        try:
            return self._maps["region"][label]
        except KeyError:
            raise KeyError(f"unknown region {label!r}; known: {self.region_labels}") from None

    def interval_id_or_none(self, tok) -> int:
        """Like :meth:`interval_id` but maps unseen deltas to NONE (used on generated pitches)."""
        return self._maps["interval"].get(tok, self._maps["interval"][NONE])

    def to_dict(self) -> dict:
        return {
            "pitch": list(self.pitch_tokens),
            "interval": list(self.interval_tokens),
            "rhythm": [str(r) for r in self.rhythm_tokens],
            "regions": list(self.region_labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(
            [t if t == REST else int(t) for t in d["pitch"]],
            [t if t in (NONE, PAD) else int(t) for t in d["interval"]],
            [Fraction(r) for r in d["rhythm"]],
            list(d["regions"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class TernaryWindow:
    pitch_ids: list[int]
    interval_ids: list[int]
    rhythm_ids: list[int]
    region: int
    source_song: str = ""

    def __post_init__(self):
        n = len(self.pitch_ids)
        if len(self.interval_ids) != n or len(self.rhythm_ids) != n:
            raise ValueError("pitch/interval/rhythm id arrays must have equal length")

    def validate(self, vocab: Vocabulary, length: int = WINDOW_LENGTH) -> None:
        sizes = vocab.sizes
        for name, ids, size in zip(("pitch", "interval", "rhythm"),
                                   (self.pitch_ids, self.interval_ids, self.rhythm_ids), sizes):
            if len(ids) != length:
                raise ValueError(f"{name}_ids has length {len(ids)}, expected {length}")
            bad = [i for i in ids if not 0 <= i < size]
            if bad:
                raise ValueError(f"{name} ids out of range [0, {size}): {bad[:5]}")
        if not 0 <= self.region < vocab.n_regions:
            raise ValueError(f"region id {self.region} out of range")

    def to_record(self, vocab: Vocabulary) -> dict:
        return {
            "song_id": self.source_song,
            "region": vocab.region_labels[self.region],
            "pitch_ids": [int(i) for i in self.pitch_ids],
            "interval_ids": [int(i) for i in self.interval_ids],
            "rhythm_ids": [int(i) for i in self.rhythm_ids],
        }

    @classmethod
    def from_record(cls, rec: dict, vocab: Vocabulary) -> "TernaryWindow":
        return cls(list(rec["pitch_ids"]), list(rec["interval_ids"]), list(rec["rhythm_ids"]),
                   vocab.region_id(rec["region"]), rec.get("song_id", ""))


@dataclass
class SyntheticStyleSpec:
    """Generative recipe for one planted style.

    ``pitch_set`` holds absolute MIDI pitches. ``interval_bias`` weights signed
    semitone moves of a random walk restricted to the pitch set. With a positive
    ``phrase_length`` each song repeats one phrase of that many drawn events.
    """

    name: str
    pitch_set: list[int]
    duration_distribution: dict[Fraction, float]
    interval_bias: dict[int, float]
    phrase_length: int = 0

    def __post_init__(self):
        self.pitch_set = sorted(int(p) for p in self.pitch_set)
        self.duration_distribution = {Fraction(k): float(v) for k, v in self.duration_distribution.items()}
        self.interval_bias = {int(k): float(v) for k, v in self.interval_bias.items()}
        if not self.pitch_set:
            raise ValueError(f"style {self.name!r}: empty pitch_set")
        for label, dist in (("duration_distribution", self.duration_distribution),
                            ("interval_bias", self.interval_bias)):
            if not dist or any(v < 0 for v in dist.values()):
                raise ValueError(f"style {self.name!r}: {label} has empty support or negative mass")
            if abs(sum(dist.values()) - 1.0) > 1e-9:
                raise ValueError(f"style {self.name!r}: {label} sums to {sum(dist.values())}, not 1")
        if any(d <= 0 for d in self.duration_distribution):
            raise ValueError(f"style {self.name!r}: durations must be positive")
        if self.phrase_length < 0:
            raise ValueError(f"style {self.name!r}: phrase_length must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticStyleSpec":
        return cls(d["name"], d["pitch_set"], d["duration_distribution"], d["interval_bias"],
                   int(d.get("phrase_length", 0)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pitch_set": list(self.pitch_set),
            "duration_distribution": {str(k): v for k, v in self.duration_distribution.items()},
            "interval_bias": {str(k): v for k, v in self.interval_bias.items()},
            "phrase_length": self.phrase_length,
        }


# ---------------------------------------------------------------------------
# MIDI
# ---------------------------------------------------------------------------

def _quantize(ticks: int, ticks_per_beat: int, grid: int) -> int:
    """Ticks -> integer count of grid steps (grid steps per quarter)."""
    return int(round(ticks * grid / ticks_per_beat))


def _read_midi(path: Path) -> mido.MidiFile:
    with open(path, "rb") as fh:
        try:
            return mido.MidiFile(file=fh, clip=True)
        except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
            raise MidiParseError(f"{path}: malformed MIDI ({exc})", fh.tell()) from exc


def read_key_signature(path: str | Path) -> int | None:
    """Tonic pitch class from the first key-signature meta event, if any."""
    mid = _read_midi(Path(path))
    for track in mid.tracks:
        for msg in track:
            if msg.type == "key_signature":
                key = msg.key
                pc = _NOTE_NAMES[key[0]]
                if len(key) > 1 and key[1] == "#":
                    pc += 1
                elif len(key) > 1 and key[1] == "b":
                    pc -= 1
                return pc % 12
    return None


def parse_midi(path: str | Path, grid: int = DEFAULT_GRID, keep_highest: bool = False) -> list[NoteEvent]:
    """Read a monophonic melody as note events quantized to ``1/grid`` of a quarter.

    Notes from every track are merged. Silence before the first note, between
    notes and before the end-of-track marker becomes REST events (adjacent rests
    are therefore merged). Overlapping notes raise :class:`PolyphonyError` unless ``keep_highest``
    is set, in which case simultaneous onsets keep the highest pitch and a note
    still sounding at the next onset is cut short.
    """
    path = Path(path)
    mid = _read_midi(path)
    tpb = mid.ticks_per_beat
    notes = []  # (onset, offset, pitch) in ticks
    end_tick = 0
    for track in mid.tracks:
        now = 0
        sounding: dict[int, list[int]] = {}
        for msg in track:
            now += msg.time
            if msg.type == "note_on" and msg.velocity > 0:
                sounding.setdefault(msg.note, []).append(now)
            elif msg.type == "note_off" or (msg.type == "note_on" and msg.velocity == 0):
                starts = sounding.get(msg.note)
                if starts:
                    start = starts.pop(0)
                    notes.append((start, now, msg.note))
        end_tick = max(end_tick, now)
    if not notes:
        return []

    q = []
    for start, end, pitch in notes:
        on = _quantize(start, tpb, grid)
        off = max(_quantize(end, tpb, grid), on + 1)
        q.append((on, off, pitch))
    q.sort(key=lambda n: (n[0], -n[2]))

    if keep_highest:
        dedup = []
        for n in q:
            if dedup and dedup[-1][0] == n[0]:
                continue  # same onset, lower pitch
            dedup.append(n)
        q = []
        for i, (on, off, p) in enumerate(dedup):
            if i + 1 < len(dedup):
                off = min(off, dedup[i + 1][0])
            q.append((on, off, p))
    else:
        colliding = sorted({Fraction(b[0], grid) for a, b in zip(q, q[1:]) if b[0] < a[1]})
        if colliding:
            raise PolyphonyError(colliding)

    events: list[NoteEvent] = []
    prev_off = 0
    for on, off, pitch in q:
        if on > prev_off:
            events.append(NoteEvent(REST, Fraction(on - prev_off, grid)))
        events.append(NoteEvent(int(pitch), Fraction(off - on, grid)))
        prev_off = off
    end = _quantize(end_tick, tpb, grid)
    if end > prev_off:
        events.append(NoteEvent(REST, Fraction(end - prev_off, grid)))
    return events


def write_midi(events: Sequence[NoteEvent], path: str | Path, ticks_per_beat: int = 480,
               velocity: int = 80, tempo: int = 500000) -> None:
    """Write note events as a single-track format-0 MIDI file; rests become silence."""
    mid = mido.MidiFile(type=0, ticks_per_beat=ticks_per_beat)
    track = mido.MidiTrack()
    mid.tracks.append(track)
    track.append(mido.MetaMessage("set_tempo", tempo=tempo, time=0))
    pending = 0
    for ev in events:
        ticks = ev.duration * ticks_per_beat
        if ticks.denominator != 1:
            raise ValueError(f"duration {ev.duration} not representable at {ticks_per_beat} ticks per quarter")
        ticks = int(ticks)
        if ev.pitch == REST:
            pending += ticks
            continue
        track.append(mido.Message("note_on", note=int(ev.pitch), velocity=velocity, time=pending))
        track.append(mido.Message("note_off", note=int(ev.pitch), velocity=0, time=ticks))
        pending = 0
    track.append(mido.MetaMessage("end_of_track", time=pending))
    mid.save(str(path))


# ---------------------------------------------------------------------------
# Transposition
# ---------------------------------------------------------------------------

def detect_tonic(events: Sequence[NoteEvent]) -> int:
    """Tonic pitch class by correlating the duration-weighted pitch-class profile with 24 key profiles."""
    profile = np.zeros(12)
    for e in events:
        if e.pitch != REST:
            profile[e.pitch % 12] += float(e.duration)
    if not profile.any():
        return 0
    best, best_r = 0, -np.inf
    for tonic in range(12):
        for ref in (_MAJOR_PROFILE, _MINOR_PROFILE):
            r = np.corrcoef(profile, np.roll(ref, tonic))[0, 1]
            if np.isfinite(r) and r > best_r:
                best, best_r = tonic, r
    return best


def transposition_shift(tonic: int) -> int:
    """Signed semitone shift in [-6, +5] that sends ``tonic`` to pitch class C."""
    if not 0 <= tonic <= 11:
        raise ValueError(f"tonic pitch class must be in [0, 11], got {tonic}")
    return (-tonic + 6) % 12 - 6


def transpose_to_c(events: Sequence[NoteEvent], detected_tonic: int) -> list[NoteEvent]:
    shift = transposition_shift(detected_tonic)
    out = []
    for e in events:
        if e.pitch == REST:
            out.append(e)
            continue
        p = e.pitch + shift
        if not 0 <= p <= 127:
            folded = p - 12 if p > 127 else p + 12
            warnings.warn(f"pitch {e.pitch} shifted by {shift} leaves MIDI range; octave-folded to {folded}")
            p = folded
        out.append(NoteEvent(p, e.duration))
    return out


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

def derive_intervals(pitches: Sequence) -> list:
    """Semitone step to the next pitch; NONE next to a rest, PAD at the final position."""
    if len(pitches) == 0:
        raise ValueError("need at least one pitch")
    out = []
    for cur, nxt in zip(pitches, pitches[1:]):
        out.append(NONE if REST in (cur, nxt) else int(nxt) - int(cur))
    out.append(PAD)
    return out


def build_vocabulary(songs: Iterable[Song]) -> Vocabulary:
    songs = list(songs)
    if not songs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    pitches, intervals, rhythms, regions = {REST}, {NONE, PAD}, set(), set()
    for s in songs:
        pitches.update(s.pitches)
        intervals.update(s.intervals)
        rhythms.update(Fraction(d) for d in s.durations)
        regions.add(s.region)
    vocab = Vocabulary(sorted(pitches, key=_token_key), sorted(intervals, key=_token_key),
                       sorted(rhythms), sorted(regions))
    log.info("vocabulary sizes pitch=%d interval=%d rhythm=%d regions=%d", *vocab.sizes, vocab.n_regions)
    return vocab


def encode_song(song: Song, vocab: Vocabulary) -> tuple[list[int], list[int], list[int]]:
    return ([vocab.pitch_id(p) for p in song.pitches],
            [vocab.interval_id(i) for i in song.intervals],
            [vocab.rhythm_id(d) for d in song.durations])


def make_windows(song: Song, vocab: Vocabulary, length: int = WINDOW_LENGTH, hop: int = 1) -> list[TernaryWindow]:
    if not len(song.pitches) == len(song.intervals) == len(song.durations):
        raise ValueError(f"song {song.song_id}: streams differ in length")
    p, i, r = encode_song(song, vocab)
    region = vocab.region_id(song.region)
    return [TernaryWindow(p[s:s + length], i[s:s + length], r[s:s + length], region, song.song_id)
            for s in range(0, len(p) - length + 1, hop)]


def window_events(window: TernaryWindow, vocab: Vocabulary) -> list[NoteEvent]:
    return [NoteEvent(vocab.pitch_tokens[p], vocab.rhythm_tokens[r])
            for p, r in zip(window.pitch_ids, window.rhythm_ids)]


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------

def load_midi_dir(midi_dir: str | Path, grid: int = DEFAULT_GRID, keep_highest: bool = False,
                  transpose: bool = True, min_length: int = WINDOW_LENGTH) -> list[Song]:
    """Parse every MIDI file below ``midi_dir``; the first-level folder name is the region."""
    root = Path(midi_dir)
    songs = []
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in (".mid", ".midi")):
        rel = path.relative_to(root)
        if len(rel.parts) < 2:
            log.warning("skipping %s: not inside a region folder", rel)
            continue
        events = parse_midi(path, grid=grid, keep_highest=keep_highest)
        if transpose and events:
            tonic = read_key_signature(path)
            if tonic is None:
                tonic = detect_tonic(events)
            events = transpose_to_c(events, tonic)
        if len(events) < min_length:
            log.info("dropping %s: %d events < %d", rel, len(events), min_length)
            continue
        songs.append(Song.from_events(rel.with_suffix("").as_posix(), rel.parts[0], events))
    return songs


def synthesize_corpus(specs: Sequence[SyntheticStyleSpec], songs_per_style: int, song_length: int,
                      rng_seed: int) -> list[Song]:
    """Draw labelled songs from planted styles with a seeded random walk."""
    if not specs:
        raise ValueError("need at least one style spec")
    if songs_per_style <= 0 or song_length <= 0:
        raise ValueError("songs_per_style and song_length must be positive")
    rng = np.random.default_rng(rng_seed)
    songs = []
    for spec in specs:
        durs = list(spec.duration_distribution)
        dprob = np.array([spec.duration_distribution[d] for d in durs])
        moves = np.array(list(spec.interval_bias), dtype=int)
        mprob = np.array(list(spec.interval_bias.values()))
        allowed = set(spec.pitch_set)
        n_draw = min(spec.phrase_length or song_length, song_length)
        for k in range(songs_per_style):
            pitches = [int(rng.choice(spec.pitch_set))]
            for _ in range(n_draw - 1):
                cur = pitches[-1]
                ok = np.array([cur + m in allowed for m in moves])
                w = mprob * ok
                if w.sum() > 0:
                    pitches.append(int(cur + rng.choice(moves, p=w / w.sum())))
                else:
                    pitches.append(int(rng.choice(spec.pitch_set)))
            durations = [durs[j] for j in rng.choice(len(durs), size=n_draw, p=dprob)]
            reps = -(-song_length // n_draw)
            pitches, durations = (pitches * reps)[:song_length], (durations * reps)[:song_length]
            events = [NoteEvent(p, d) for p, d in zip(pitches, durations)]
            songs.append(Song.from_events(f"{spec.name}/{k:04d}", spec.name, events))
    return songs


def default_styles(phrase_length: int = 0) -> list[SyntheticStyleSpec]:
    """Three planted styles: one pentatonic walk in three registers, each with its own rhythm codebook."""
    walk = {2: 0.3, -2: 0.3, 3: 0.15, -3: 0.15, 0: 0.1}
    penta = [0, 2, 4, 7, 9]
    return [
        SyntheticStyleSpec("high", [72 + p for p in penta],
                           {Fraction(1, 4): 0.8, Fraction(3, 4): 0.15, Fraction(3, 2): 0.05}, walk, phrase_length),
        SyntheticStyleSpec("mid", [60 + p for p in penta],
                           {Fraction(1, 2): 0.8, Fraction(1): 0.15, Fraction(2): 0.05}, walk, phrase_length),
        SyntheticStyleSpec("low", [48 + p for p in penta],
                           {Fraction(1, 8): 0.8, Fraction(3, 8): 0.15, Fraction(5, 4): 0.05}, walk, phrase_length),
    ]


def load_style_specs(path: str | Path) -> tuple[list[SyntheticStyleSpec], dict]:
    """Read a style file: either a list of styles or ``{"styles": [...], **options}``."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, list):
        data = {"styles": data}
    opts = {k: v for k, v in data.items() if k != "styles"}
    return [SyntheticStyleSpec.from_dict(d) for d in data["styles"]], opts


def songs_to_windows(songs: Sequence[Song], vocab: Vocabulary, length: int = WINDOW_LENGTH) -> list[TernaryWindow]:
    out = []
    for s in songs:
        out.extend(make_windows(s, vocab, length))
    return out


def split_by_song(windows: Sequence[TernaryWindow], val_fraction: float, seed: int
                  ) -> tuple[list[TernaryWindow], list[TernaryWindow]]:
    """Seeded split where all windows of a song land on the same side."""
    ids = sorted({w.source_song for w in windows})
    rng = np.random.default_rng(seed)
    rng.shuffle(ids)
    n_val = int(round(len(ids) * val_fraction))
    if val_fraction > 0 and n_val == 0 and len(ids) > 1:
        n_val = 1
    held = set(ids[:n_val])
    return ([w for w in windows if w.source_song not in held],
            [w for w in windows if w.source_song in held])


def save_windows(windows: Iterable[TernaryWindow], vocab: Vocabulary, path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_record(vocab), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_windows(path: str | Path, vocab: Vocabulary) -> list[TernaryWindow]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                w = TernaryWindow.from_record(json.loads(line), vocab)
                w.validate(vocab, len(w.pitch_ids))
                out.append(w)
    return out
