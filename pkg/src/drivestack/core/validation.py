from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .provenance import Source
from .types import ElementId, Scene


@dataclass(frozen=True)
class Violation:
    rule: str
    element_id: ElementId | None
    detail: str = ""


def validate_scene(s: Scene) -> list[Violation]:
    """Check every Scene invariant; an empty list means the scene is well formed."""
    out: list[Violation] = []
    counts = Counter(s.element_ids())
    for eid, n in counts.items():
        if n > 1:
            out.append(Violation("unique_ids", eid, f"appears {n} times"))
    if s.self_rep is None:
        out.append(Violation("self_rep_present", None))
    elements = list(s.scenery) + list(s.dynamic_elements)
    for e in elements:
        if not e.provenance.flags:
            out.append(Violation("provenance_nonempty", e.id))
        elif not s.extended and Source.MAP in e.provenance.flags:
            out.append(Violation("local_no_map", e.id))
    for d in s.dynamic_elements:
        if not (math.isfinite(d.pose.x) and math.isfinite(d.pose.y)):
            out.append(Violation("finite_pose", d.id))
        cov = np.asarray(d.state_covariance)
        if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() < -1e-9:
            out.append(Violation("covariance_psd", d.id))
    if s.self_rep is not None and not s.extended and Source.MAP in s.self_rep.provenance.flags:
        out.append(Violation("local_no_map", 0, "self representation"))
    return out
