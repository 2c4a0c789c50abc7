from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from ..core.errors import ContractViolation
from ..core.geometry import Pose2D
from ..core.provenance import VEH, ProvenanceMask
from ..world.sensors import ProprioFrame


@dataclass(frozen=True)
class EgoMotion:
    """Displacement over one cycle, expressed in the vehicle frame at cycle start."""

    dx: float
    dy: float
    dheading: float
    var_translation: float = 0.0
    var_heading: float = 0.0
    provenance: ProvenanceMask = VEH
    degraded: bool = False
    speed: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self):
        vals = (self.dx, self.dy, self.dheading, self.var_translation, self.var_heading)
        if not all(math.isfinite(v) for v in vals):
            raise ContractViolation("ego motion must be finite")
        if self.var_translation < 0 or self.var_heading < 0:
            raise ContractViolation("ego motion uncertainty must be non-negative")

    def as_pose(self) -> Pose2D:
        return Pose2D(self.dx, self.dy, self.dheading)


ZERO_MOTION = EgoMotion(0.0, 0.0, 0.0)


def estimate_ego_motion(f: ProprioFrame, dt: float, last_yaw_rate: Optional[float] = None,
                        sigma_speed: float = 0.0, sigma_yaw_rate: float = 0.0) -> EgoMotion:
    """Dead-reckon one step from wheel speed and yaw rate (constant-turn arc).

    A missing yaw rate falls back to ``last_yaw_rate`` and marks the result
    degraded.
    """
    if not dt > 0:
        raise ContractViolation("estimate_ego_motion requires dt > 0")
    degraded = False
    w = f.yaw_rate
    if w is None:
        w = 0.0 if last_yaw_rate is None else last_yaw_rate
        degraded = True
    v = f.wheel_speed
    dth = w * dt
    if abs(dth) < 1e-12:
        dx, dy = v * dt, 0.0
    else:
        dx = v / w * math.sin(dth)
        dy = v / w * (1.0 - math.cos(dth))
    return EgoMotion(
        dx, dy, dth,
        var_translation=(sigma_speed * dt) ** 2,
        var_heading=(sigma_yaw_rate * dt) ** 2 * (4.0 if degraded else 1.0),
        degraded=degraded,
        speed=v,
        yaw_rate=w,
    )


def compose_motion(a: EgoMotion, b: EgoMotion) -> EgoMotion:
    """Motion ``a`` followed by ``b``."""
    p = a.as_pose().compose(b.as_pose())
    return EgoMotion(
        p.x, p.y, a.dheading + b.dheading,
        var_translation=a.var_translation + b.var_translation,
        var_heading=a.var_heading + b.var_heading,
        provenance=a.provenance | b.provenance,
        degraded=a.degraded or b.degraded,
        speed=b.speed,
        yaw_rate=b.yaw_rate,
    )
