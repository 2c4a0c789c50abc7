from .errors import CodecError, ContractViolation
from .geometry import Polyline, Pose2D, wrap_angle
from .provenance import (
    Color,
    ProvenanceMask,
    Source,
    all_masks,
    join_all,
    provenance_class,
    provenance_join,
)
from .types import *  # noqa: F401,F403
from .validation import Violation, validate_scene
