"""Phoneme inventories and viseme-sharing classes."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

# Consonant groups whose members share a lip shape.
VISEME_GROUPS = (
    ("P", "B"),
    ("T", "D"),
    ("K", "G"),
    ("M", "N", "NG"),
    ("F", "V"),
    ("S", "Z"),
    ("TH", "DH"),
    ("SH", "ZH"),
    ("CH", "JH"),
)

ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG OW OY P R S SH T TH UH UW V W Y Z ZH"
).split()

SILENCE_LABELS = frozenset({"", "SIL", "SP", "SPN", "NSN", "<EPS>", "<SIL>", "<UNK>", "NOISE"})

_STRESS = re.compile(r"(?<=[A-Z])[0-2]$")


def normalize_label(label: str) -> str:
    """Upper-case and strip an ARPAbet stress digit (``AH0`` -> ``AH``)."""
    return _STRESS.sub("", label.strip().upper())


@dataclass(frozen=True)
class PhonemeInventory:
    labels: tuple
    viseme_class: dict = field(hash=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("phoneme labels must be unique")
        missing = [p for p in self.labels if p not in self.viseme_class]
        if missing:
            raise ValueError(f"no viseme class for {missing}")
        object.__setattr__(self, "_lookup", {p: i for i, p in enumerate(self.labels)})

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._lookup

    def index(self, label: str) -> int:
        try:
            return self._lookup[label]
        except KeyError:
            raise KeyError(f"unknown phoneme {label!r}") from None

    def viseme_of(self, phoneme_id: int) -> int:
        return self.viseme_class[self.labels[phoneme_id]]

    @property
    def viseme_ids(self) -> list[int]:
        """Viseme class per phoneme id."""
        return [self.viseme_class[p] for p in self.labels]

    @property
    def n_visemes(self) -> int:
        return len(set(self.viseme_class[p] for p in self.labels))

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "viseme_class": {p: self.viseme_class[p] for p in self.labels}}

    @classmethod
    def from_dict(cls, data) -> "PhonemeInventory":
        return cls(tuple(data["labels"]), {k: int(v) for k, v in data["viseme_class"].items()})

    @classmethod
    def from_labels(cls, labels, groups=VISEME_GROUPS) -> "PhonemeInventory":
        """Assign viseme classes in order of first appearance; grouped labels share one."""
        group_of = {p: g for g in groups for p in g}
        classes, seen = {}, {}
        for p in labels:
            key = group_of.get(p, (p,))
            if key not in seen:
                seen[key] = len(seen)
            classes[p] = seen[key]
        return cls(tuple(labels), classes)


def arpabet_inventory() -> PhonemeInventory:
    return PhonemeInventory.from_labels(ARPABET)


def desk_inventory() -> PhonemeInventory:
    """Eight consonants in four lip-shape classes: {P,B} {T,D} {M,N} {S,Z}."""
    return PhonemeInventory.from_labels(["P", "B", "T", "D", "M", "N", "S", "Z"])
