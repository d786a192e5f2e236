"""Motion ground truth from global positions, plus non-keyframe box/label estimation."""

from __future__ import annotations

import bisect
import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .bboxprep import Box2D
from .errors import (
    ExtrapolationError,
    InsufficientTrackError,
    NoPredecessorError,
    TemporalOrderError,
)

SPEED_THRESHOLD = 2.0  # m/s
MICROSECONDS = 1e-6

Vec3 = Tuple[float, float, float]


class MotionLabel(enum.Enum):
    STILL = "still"
    MOVING = "moving"

    @property
    def as_int(self) -> int:
        return 1 if self is MotionLabel.MOVING else 0

    @classmethod
    def from_int(cls, value: int) -> "MotionLabel":
        return cls.MOVING if value else cls.STILL


@dataclass(frozen=True)
class Observation:
    timestamp: int  # microseconds
    position: Vec3  # global frame, meters
    corners: Tuple[Tuple[float, float], ...]
    visibility: float = 1.0
    is_keyframe: bool = True

    def __post_init__(self):
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"visibility must be in [0, 1], got {self.visibility}")


@dataclass(frozen=True)
class TrackedObject:
    object_id: str
    category: str
    observations: Tuple[Observation, ...] = field(default_factory=tuple)

    def __post_init__(self):
        obs = tuple(self.observations)
        object.__setattr__(self, "observations", obs)
        if not obs:
            raise ValueError(f"object {self.object_id} has no observations")
        for a, b in zip(obs, obs[1:]):
            if b.timestamp <= a.timestamp:
                raise TemporalOrderError(
                    f"object {self.object_id}: timestamps not strictly increasing "
                    f"({a.timestamp} -> {b.timestamp})"
                )

    def keyframe_indices(self) -> List[int]:
        return [i for i, o in enumerate(self.observations) if o.is_keyframe]


def velocity(p1: Sequence[float], p2: Sequence[float], t1: int, t2: int) -> Vec3:
    """Finite-difference velocity in m/s between two timestamped positions (µs)."""
    if t2 <= t1:
        raise TemporalOrderError(f"t2 ({t2}) must be later than t1 ({t1})")
    dt = (t2 - t1) * MICROSECONDS
    return tuple((b - a) / dt for a, b in zip(p1, p2))  # type: ignore[return-value]


def planar_speed(v: Sequence[float]) -> float:
    """Ground-plane speed; the vertical component is ignored."""
    return math.hypot(v[0], v[1])


def classify_motion(speed: float, threshold: float = SPEED_THRESHOLD) -> MotionLabel:
    if speed < 0:
        raise ValueError(f"speed must be non-negative, got {speed}")
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return MotionLabel.MOVING if speed >= threshold else MotionLabel.STILL


def label_object(obj: TrackedObject, at: int, threshold: float = SPEED_THRESHOLD) -> MotionLabel:
    """Label keyframe observation ``at`` using the next keyframe as its partner."""
    obs = obj.observations
    if not 0 <= at < len(obs) or not obs[at].is_keyframe:
        raise ValueError(f"observation {at} of {obj.object_id} is not a keyframe")
    partner = next((o for o in obs[at + 1:] if o.is_keyframe), None)
    if partner is None:
        raise InsufficientTrackError(
            f"object {obj.object_id} has no keyframe after observation {at}"
        )
    first = obs[at]
    v = velocity(first.position, partner.position, first.timestamp, partner.timestamp)
    return classify_motion(planar_speed(v), threshold)


def interpolate_box(box_a: Box2D, t_a: int, box_b: Box2D, t_b: int, t: int) -> Box2D:
    """Linearly interpolate box edges between two annotated times."""
    if t_b <= t_a:
        raise TemporalOrderError(f"t_b ({t_b}) must be later than t_a ({t_a})")
    if not t_a <= t <= t_b:
        raise ExtrapolationError(f"t={t} lies outside [{t_a}, {t_b}]")
    if t == t_a:
        return box_a
    if t == t_b:
        return box_b
    w = (t - t_a) / (t_b - t_a)

    def lerp(a: float, b: float) -> float:
        return a + w * (b - a)

    return Box2D(
        lerp(box_a.xmin, box_b.xmin), lerp(box_a.xmax, box_b.xmax),
        lerp(box_a.ymin, box_b.ymin), lerp(box_a.ymax, box_b.ymax),
    )


def propagate_label(
    keyframe_labels: Sequence[Tuple[int, MotionLabel]], query_t: int
) -> MotionLabel:
    """Label of the latest keyframe at or before ``query_t``.

    ``keyframe_labels`` must be sorted by timestamp.
    """
    times = [t for t, _ in keyframe_labels]
    i = bisect.bisect_right(times, query_t)
    if i == 0:
        raise NoPredecessorError(f"no keyframe at or before t={query_t}")
    return keyframe_labels[i - 1][1]


def keyframe_labels(
    obj: TrackedObject, threshold: float = SPEED_THRESHOLD
) -> List[Tuple[int, MotionLabel]]:
    """``(timestamp, label)`` for every keyframe that has a keyframe successor."""
    out = []
    for i in obj.keyframe_indices():
        try:
            out.append((obj.observations[i].timestamp, label_object(obj, i, threshold)))
        except InsufficientTrackError:
            break
    return out


def bracketing_keyframes(obj: TrackedObject, t: int) -> Optional[Tuple[Observation, Observation]]:
    """Nearest keyframe observations at-or-before and at-or-after ``t``."""
    keys = [obj.observations[i] for i in obj.keyframe_indices()]
    before = [o for o in keys if o.timestamp <= t]
    after = [o for o in keys if o.timestamp >= t]
    if not before or not after:
        return None
    return before[-1], after[0]
