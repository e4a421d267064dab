"""Session ingestion, filtering, splitting, augmentation, and vocabulary.

The pipeline turns a raw interaction log into a SessionDataset:

    ingest_events -> build_sessions -> chronological_split
        -> filter_dataset (iterated to a fixed point) -> build_vocab
        -> encode_sessions

Item indices are contiguous starting at 2; index 0 is PAD and index 1 is
MASK, so special tokens can never collide with real items.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

PAD = 0
MASK = 1
FIRST_ITEM = 2

MIN_ITEM_FREQ = 5
MIN_SESSION_LEN = 2


@dataclass(frozen=True)
class RawEvent:
    session_id: str
    item_id: str
    timestamp: int  # epoch milliseconds


@dataclass
class Session:
    session_id: str
    items: list  # raw item ids (str) before encoding, int indices after
    start_time: int = 0

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class PrefixPair:
    prefix: tuple
    target: int


@dataclass
class Vocabulary:
    item_to_index: dict
    index_to_item: dict
    num_items: int
    pad: int = PAD
    mask: int = MASK

    def encode(self, item_id: str) -> int:
        return self.item_to_index[item_id]

    def decode(self, index: int) -> str:
        return self.index_to_item[index]

    def real_indices(self) -> range:
        """Contiguous range of non-special item indices."""
        return range(FIRST_ITEM, FIRST_ITEM + self.num_items)


@dataclass
class SessionDataset:
    train: list  # list[Session] with int item indices
    test: list
    vocab: Vocabulary


@dataclass
class DatasetStats:
    train_sessions: int  # augmented sample counts (one per prefix/target pair)
    test_sessions: int
    items: int
    avg_length: float
    raw_train_sessions: int = 0
    raw_test_sessions: int = 0


@dataclass
class ColumnMap:
    session_id: str = "session_id"
    item_id: str = "item_id"
    timestamp: str = "timestamp"
    delimiter: str | None = None  # None = sniff comma vs tab from header


@dataclass(frozen=True)
class RowError:
    line_number: int
    message: str


def _parse_timestamp(raw: str) -> int:
    raw = raw.strip()
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1000)


def ingest_events(
    lines: Iterable[str], columns: ColumnMap | None = None
) -> tuple[list[RawEvent], list[RowError]]:
    """Parse a header-bearing delimited text stream into RawEvents.

    Returns the events in file order plus a list of per-row errors for
    rows that could not be parsed (remaining rows are still ingested).
    Missing mandatory columns raise ConfigurationError.
    """
    columns = columns or ColumnMap()
    it = iter(lines)
    try:
        header_line = next(it).rstrip("\r\n")
    except StopIteration:
        raise ConfigurationError("input stream is empty (no header row)")

    delim = columns.delimiter
    if delim is None:
        delim = "\t" if "\t" in header_line else ","
    header = [h.strip() for h in header_line.split(delim)]
    try:
        sid_col = header.index(columns.session_id)
        item_col = header.index(columns.item_id)
        time_col = header.index(columns.timestamp)
    except ValueError as exc:
        raise ConfigurationError(
            f"missing mandatory column in header {header}: {exc}"
        ) from None

    events: list[RawEvent] = []
    errors: list[RowError] = []
    needed = max(sid_col, item_col, time_col) + 1
    for line_number, line in enumerate(it, start=2):
        line = line.rstrip("\r\n")
        if not line:
            continue
        parts = line.split(delim)
        if len(parts) < needed:
            errors.append(RowError(line_number, f"expected {needed}+ fields, got {len(parts)}"))
            continue
        sid = parts[sid_col].strip()
        item = parts[item_col].strip()
        if not sid or not item:
            errors.append(RowError(line_number, "empty session_id or item_id"))
            continue
        try:
            ts = _parse_timestamp(parts[time_col])
        except ValueError as exc:
            errors.append(RowError(line_number, str(exc)))
            continue
        if ts < 0:
            errors.append(RowError(line_number, f"negative timestamp {ts}"))
            continue
        events.append(RawEvent(sid, item, ts))

    if errors:
        log.warning("ingest: %d malformed row(s) skipped, %d ingested", len(errors), len(events))
        for err in errors:
            log.debug("ingest: line %d: %s", err.line_number, err.message)
    return events, errors


def build_sessions(events: Sequence[RawEvent]) -> list[Session]:
    """Group events by session id, order items chronologically.

    Within a session, ties on timestamp keep input file order (stable
    sort). Sessions are returned sorted by start time, ties broken by
    first appearance in the input.
    """
    grouped: dict[str, list[RawEvent]] = {}
    first_seen: dict[str, int] = {}
    for pos, ev in enumerate(events):
        if ev.session_id not in grouped:
            grouped[ev.session_id] = []
            first_seen[ev.session_id] = pos
        grouped[ev.session_id].append(ev)

    sessions = []
    for sid, evs in grouped.items():
        ordered = sorted(evs, key=lambda e: e.timestamp)
        sessions.append(Session(sid, [e.item_id for e in ordered], ordered[0].timestamp))
    sessions.sort(key=lambda s: (s.start_time, first_seen[s.session_id]))
    return sessions


def chronological_split(
    sessions: Sequence[Session],
    boundary: int | None = None,
    test_fraction: float | None = None,
) -> tuple[list[Session], list[Session]]:
    """Split time-ordered sessions into train/test.

    With an absolute `boundary` timestamp, sessions starting at or after
    it go to test. With `test_fraction` f, the last ceil(f*N) sessions
    form the test set.
    """
    if (boundary is None) == (test_fraction is None):
        raise ConfigurationError("specify exactly one of boundary or test_fraction")
    sessions = list(sessions)
    if test_fraction is not None:
        if not 0.0 < test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in (0,1), got {test_fraction}")
        n_test = math.ceil(test_fraction * len(sessions))
        cut = len(sessions) - n_test
        return sessions[:cut], sessions[cut:]
    train = [s for s in sessions if s.start_time < boundary]
    test = [s for s in sessions if s.start_time >= boundary]
    return train, test


def _drop_short(sessions: list[Session]) -> list[Session]:
    return [s for s in sessions if len(s) >= MIN_SESSION_LEN]


def filter_dataset(
    train: Sequence[Session],
    test: Sequence[Session],
    min_item_freq: int = MIN_ITEM_FREQ,
) -> tuple[list[Session], list[Session]]:
    """Apply the item/session filters, iterated to a fixed point.

    Each pass removes items with fewer than `min_item_freq` occurrences
    in the current train partition (from train and test), removes test
    items absent from train, and drops sessions shorter than 2. A single
    pass is not enough: dropping a shortened session can push another
    item below the frequency threshold, so passes repeat until nothing
    changes.
    """
    train = [Session(s.session_id, list(s.items), s.start_time) for s in train]
    test = [Session(s.session_id, list(s.items), s.start_time) for s in test]

    while True:
        counts = Counter(item for s in train for item in s.items)
        allowed = {item for item, c in counts.items() if c >= min_item_freq}
        changed = False

        new_train = []
        for s in train:
            kept = [i for i in s.items if i in allowed]
            if len(kept) != len(s.items):
                changed = True
            if len(kept) >= MIN_SESSION_LEN:
                new_train.append(Session(s.session_id, kept, s.start_time))
            else:
                changed = True
        new_test = []
        for s in test:
            kept = [i for i in s.items if i in allowed]
            if len(kept) != len(s.items):
                changed = True
            if len(kept) >= MIN_SESSION_LEN:
                new_test.append(Session(s.session_id, kept, s.start_time))
            else:
                changed = True

        train, test = new_train, new_test
        if not changed:
            break

    if not train:
        raise DataError("training partition is empty after filtering")
    return train, test


def build_vocab(train: Sequence[Session]) -> Vocabulary:
    """Assign contiguous indices to items, most frequent first.

    Ordering is (descending train frequency, ascending raw id), which
    makes the mapping deterministic for identical inputs.
    """
    counts = Counter(item for s in train for item in s.items)
    ordered = sorted(counts.keys(), key=lambda item: (-counts[item], str(item)))
    item_to_index = {item: FIRST_ITEM + i for i, item in enumerate(ordered)}
    index_to_item = {v: k for k, v in item_to_index.items()}
    return Vocabulary(item_to_index, index_to_item, num_items=len(ordered))


def encode_sessions(sessions: Sequence[Session], vocab: Vocabulary) -> list[Session]:
    return [
        Session(s.session_id, [vocab.encode(i) for i in s.items], s.start_time)
        for s in sessions
    ]


def prefix_augment(sessions: Sequence[Session], window: int = 30) -> list[PrefixPair]:
    """Expand each session into all (prefix, next-item) pairs.

    A session of length n yields n-1 pairs, longest prefix first; each
    prefix keeps only its last `window` items.
    """
    pairs = []
    for s in sessions:
        items = s.items
        for k in range(len(items) - 1, 0, -1):
            prefix = tuple(items[max(0, k - window):k])
            pairs.append(PrefixPair(prefix, items[k]))
    return pairs


def dataset_stats(dataset: SessionDataset) -> DatasetStats:
    """Summary counts; session counts follow the augmented-sample convention.

    train_sessions/test_sessions count one entry per (prefix, target)
    pair, i.e. sum of (len-1) over sessions; the raw session counts are
    reported alongside. avg_length is over raw (pre-augmentation)
    session lengths of train and test combined.
    """
    raw = dataset.train + dataset.test
    total_len = sum(len(s) for s in raw)
    return DatasetStats(
        train_sessions=sum(len(s) - 1 for s in dataset.train),
        test_sessions=sum(len(s) - 1 for s in dataset.test),
        items=dataset.vocab.num_items,
        avg_length=total_len / len(raw) if raw else 0.0,
        raw_train_sessions=len(dataset.train),
        raw_test_sessions=len(dataset.test),
    )


def preprocess_events(
    events: Sequence[RawEvent],
    boundary: int | None = None,
    test_fraction: float | None = 0.1,
    min_item_freq: int = MIN_ITEM_FREQ,
) -> SessionDataset:
    """Full preprocessing pipeline from raw events to an encoded dataset."""
    sessions = build_sessions(events)
    if boundary is not None:
        train, test = chronological_split(sessions, boundary=boundary)
    else:
        train, test = chronological_split(sessions, test_fraction=test_fraction)
    train, test = filter_dataset(train, test, min_item_freq=min_item_freq)
    vocab = build_vocab(train)
    return SessionDataset(
        train=encode_sessions(train, vocab),
        test=encode_sessions(test, vocab),
        vocab=vocab,
    )


# ---------------------------------------------------------------------------
# On-disk dataset directory: train.jsonl, test.jsonl, vocab.json, stats.json
# ---------------------------------------------------------------------------


def _write_jsonl(path: Path, sessions: Sequence[Session]) -> None:
    with path.open("w") as fh:
        for s in sessions:
            fh.write(json.dumps({"sid": s.session_id, "items": list(s.items)}) + "\n")


def _read_jsonl(path: Path) -> list[Session]:
    sessions = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            sessions.append(Session(str(obj["sid"]), [int(i) for i in obj["items"]]))
    return sessions


def save_dataset(dataset: SessionDataset, out_dir: str | Path) -> DatasetStats:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / "train.jsonl", dataset.train)
    _write_jsonl(out / "test.jsonl", dataset.test)
    vocab = dataset.vocab
    items_in_order = [vocab.index_to_item[i] for i in vocab.real_indices()]
    (out / "vocab.json").write_text(
        json.dumps({"pad": vocab.pad, "mask": vocab.mask, "items": items_in_order}, indent=2)
    )
    stats = dataset_stats(dataset)
    (out / "stats.json").write_text(json.dumps(stats.__dict__, indent=2))
    return stats


def load_dataset(dir_path: str | Path) -> SessionDataset:
    d = Path(dir_path)
    for name in ("train.jsonl", "test.jsonl", "vocab.json"):
        if not (d / name).exists():
            raise ConfigurationError(f"dataset directory {d} is missing {name}")
    raw_vocab = json.loads((d / "vocab.json").read_text())
    items = raw_vocab["items"]
    item_to_index = {item: FIRST_ITEM + i for i, item in enumerate(items)}
    vocab = Vocabulary(item_to_index, {v: k for k, v in item_to_index.items()}, len(items))
    return SessionDataset(
        train=_read_jsonl(d / "train.jsonl"),
        test=_read_jsonl(d / "test.jsonl"),
        vocab=vocab,
    )
