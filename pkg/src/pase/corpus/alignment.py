"""Readers for forced-alignment output: plain TSV and Praat TextGrid tiers."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from pase.corpus.inventory import SILENCE_LABELS, PhonemeInventory, normalize_label
from pase.errors import DataError


@dataclass(frozen=True)
class PhonemeInterval:
    phoneme: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def _check_order(items):
    """items: (interval, line_no) pairs; sorts and rejects overlaps."""
    items = sorted(items, key=lambda it: (it[0].start_s, it[0].end_s))
    for (prev, _), (cur, line) in zip(items, items[1:]):
        if cur.start_s < prev.end_s:
            raise DataError(f"non-monotonic alignment (line {line})")
    return [it for it, _ in items]


def _keep(label, inventory):
    if label in SILENCE_LABELS:
        return False
    return inventory is None or label in inventory


def parse_tsv(text: str, inventory: PhonemeInventory | None = None, source="<tsv>") -> list[PhonemeInterval]:
    items = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) != 3:
            raise DataError(f"{source}:{line_no}: expected LABEL<TAB>start<TAB>end")
        try:
            start, end = float(parts[1]), float(parts[2])
        except ValueError:
            raise DataError(f"{source}:{line_no}: malformed time value") from None
        if not (0.0 <= start < end) or end == float("inf"):
            raise DataError(f"{source}:{line_no}: invalid interval {start}-{end}")
        items.append((PhonemeInterval(normalize_label(parts[0]), start, end), line_no))
    ordered = _check_order(items)
    return [iv for iv in ordered if _keep(iv.phoneme, inventory)]


_TOKEN = re.compile(
    r'"(?P<str>(?:[^"]|"")*)"'
    r"|(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<flag><exists>|<absent>)"
    r"|(?P<bracket>\[\d*\])"
)


def _textgrid_tokens(text):
    for m in _TOKEN.finditer(text):
        if m.group("bracket") is not None:
            continue
        line = text.count("\n", 0, m.start()) + 1
        if m.group("str") is not None:
            yield "str", m.group("str").replace('""', '"'), line
        elif m.group("num") is not None:
            yield "num", float(m.group("num")), line
        else:
            yield "flag", m.group("flag"), line


def parse_textgrid(text: str, inventory: PhonemeInventory | None = None, tier: str | None = None,
                   source="<textgrid>") -> list[PhonemeInterval]:
    """Read one interval tier from a long- or short-format TextGrid.

    Picks ``tier`` by name, else a tier called ``phones``, else the first
    interval tier.
    """
    tokens = list(_textgrid_tokens(text))
    pos = 0

    def take(kind):
        nonlocal pos
        if pos >= len(tokens):
            last = tokens[-1][2] if tokens else 1
            raise DataError(f"{source}:{last}: unexpected end of TextGrid")
        k, value, line = tokens[pos]
        if k != kind:
            raise DataError(f"{source}:{line}: expected {kind}, found {value!r}")
        pos += 1
        return value, line

    header, _ = take("str")
    if header != "ooTextFile":
        raise DataError(f"{source}:1: not a TextGrid")
    take("str")
    take("num"), take("num")
    if pos < len(tokens) and tokens[pos][0] == "flag":
        pos += 1
    n_tiers, _ = take("num")
    tiers = []
    for _ in range(int(n_tiers)):
        kind, _ = take("str")
        name, _ = take("str")
        take("num"), take("num")
        count, _ = take("num")
        entries = []
        for _ in range(int(count)):
            if kind == "IntervalTier":
                xmin, line = take("num")
                xmax, _ = take("num")
                label, _ = take("str")
                entries.append((xmin, xmax, label, line))
            else:
                take("num"), take("str")
        if kind == "IntervalTier":
            tiers.append((name, entries))
    if not tiers:
        return []
    chosen = None
    for name, entries in tiers:
        if (tier is not None and name == tier) or (tier is None and name.lower() == "phones"):
            chosen = entries
            break
    if chosen is None:
        if tier is not None:
            raise DataError(f"{source}: no interval tier named {tier!r}")
        chosen = tiers[0][1]
    items = []
    for xmin, xmax, label, line in chosen:
        if not (0.0 <= xmin < xmax):
            raise DataError(f"{source}:{line}: invalid interval {xmin}-{xmax}")
        items.append((PhonemeInterval(normalize_label(label), xmin, xmax), line))
    ordered = _check_order(items)
    return [iv for iv in ordered if _keep(iv.phoneme, inventory)]


def parse_alignment(path, inventory: PhonemeInventory | None = None) -> list[PhonemeInterval]:
    """Parse an alignment file; silence and labels outside ``inventory`` are dropped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: no such alignment file") from None
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 ({exc})") from None
    if text.lstrip().startswith("File type"):
        return parse_textgrid(text, inventory, source=str(path))
    return parse_tsv(text, inventory, source=str(path))


def format_tsv(intervals) -> str:
    # repr keeps floats exact across a write/read cycle
    return "".join(f"{iv.phoneme}\t{iv.start_s!r}\t{iv.end_s!r}\n" for iv in intervals)


def write_alignment(path, intervals) -> None:
    Path(path).write_text(format_tsv(intervals), encoding="utf-8")
