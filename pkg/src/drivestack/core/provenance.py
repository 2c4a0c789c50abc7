"""Error-source lineage carried by every derived datum.

A mask records which error sources a value has been exposed to. Joining two
masks is set union, so lineage only ever accumulates as data flows through
the stack.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Iterable

from .errors import ContractViolation


class Source(str, enum.Enum):
    VEH = "VEH"
    ENV = "ENV"
    MAP = "MAP"
    V2X = "V2X"


_ORDER = {Source.VEH: 0, Source.ENV: 1, Source.MAP: 2, Source.V2X: 3}


class Color(str, enum.Enum):
    GREEN = "green"
    BLUE = "blue"
    YELLOW = "yellow"
    VIOLET = "violet"

    @property
    def rank(self) -> int:
        return _COLOR_RANK[self]


_COLOR_RANK = {Color.GREEN: 0, Color.BLUE: 1, Color.YELLOW: 2, Color.VIOLET: 3}


@dataclass(frozen=True)
class ProvenanceMask:
    flags: frozenset[Source]

    @classmethod
    def of(cls, *names: str | Source) -> "ProvenanceMask":
        return cls(frozenset(Source(n) for n in names))

    def __contains__(self, item: "str | Source | ProvenanceMask") -> bool:
        if isinstance(item, ProvenanceMask):
            return item.flags <= self.flags
        return Source(item) in self.flags

    def __or__(self, other: "ProvenanceMask") -> "ProvenanceMask":
        return provenance_join(self, other)

    def __bool__(self) -> bool:
        return bool(self.flags)

    def names(self) -> list[str]:
        return [s.value for s in sorted(self.flags, key=_ORDER.__getitem__)]

    def __repr__(self) -> str:
        return "{" + ", ".join(self.names()) + "}"


EMPTY = ProvenanceMask(frozenset())
VEH = ProvenanceMask.of("VEH")
VEH_ENV = ProvenanceMask.of("VEH", "ENV")
MAP = ProvenanceMask.of("MAP")
V2X = ProvenanceMask.of("V2X")


def provenance_join(a: ProvenanceMask, b: ProvenanceMask) -> ProvenanceMask:
    if not a.flags or not b.flags:
        raise ContractViolation("provenance_join requires non-empty masks")
    return ProvenanceMask(a.flags | b.flags)


def join_all(masks: Iterable[ProvenanceMask]) -> ProvenanceMask:
    masks = list(masks)
    if not masks:
        raise ContractViolation("join_all requires at least one mask")
    out = masks[0]
    for m in masks[1:]:
        out = provenance_join(out, m)
    return out


def provenance_class(m: ProvenanceMask) -> Color:
    """Color class by precedence MAP > V2X > ENV > VEH."""
    if not m.flags:
        raise ContractViolation("provenance_class of an empty mask")
    if Source.MAP in m.flags:
        return Color.VIOLET
    if Source.V2X in m.flags:
        return Color.YELLOW
    if Source.ENV in m.flags:
        return Color.BLUE
    return Color.GREEN


def all_masks() -> list[ProvenanceMask]:
    """The 15 non-empty masks."""
    out = []
    for r in range(1, len(Source) + 1):
        for combo in itertools.combinations(list(Source), r):
            out.append(ProvenanceMask(frozenset(combo)))
    return out
