"""Append-only run trace, one JSON object per line."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

from ..core import codec
from ..core.errors import ContractViolation

MODULE_ORDER = ("world", "sensors", "perception", "localization", "guidance", "communication", "navigation",
                "stabilization", "actuation")
_RANK = {m: i for i, m in enumerate(MODULE_ORDER)}


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    module: str
    kind: str
    payload: Any  # JSON-ready

    def to_json(self) -> str:
        return json.dumps({"tick": self.tick, "module": self.module, "kind": self.kind, "payload": self.payload},
                          sort_keys=True, separators=(",", ":"), allow_nan=False)

    @staticmethod
    def from_json(line: str) -> "TraceRecord":
        d = json.loads(line)
        return TraceRecord(int(d["tick"]), str(d["module"]), str(d["kind"]), d.get("payload"))


class Trace:
    """In-memory trace enforcing the (tick, module) ordering of the scheduler."""

    def __init__(self) -> None:
        self.records: list[TraceRecord] = []
        self._last = (-1, -1)

    def add(self, tick: int, module: str, kind: str, payload: Any = None) -> TraceRecord:
        if module not in _RANK:
            raise ContractViolation(f"trace record from unknown module {module!r}", module=module, tick=tick)
        key = (tick, _RANK[module])
        if key < self._last:
            raise ContractViolation(f"trace record {module}/{kind} at tick {tick} out of scheduler order",
                                    module=module, tick=tick)
        self._last = key
        rec = TraceRecord(tick, module, kind, codec.encode(payload))
        self.records.append(rec)
        return rec

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json())
                fh.write("\n")
        return path


def read_trace(path: str | Path) -> list[TraceRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(TraceRecord.from_json(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: malformed trace record ({exc})") from None
    return out


def records_of(trace: Iterable[TraceRecord], kind: str, module: Optional[str] = None) -> list[TraceRecord]:
    return [r for r in trace if r.kind == kind and (module is None or r.module == module)]
