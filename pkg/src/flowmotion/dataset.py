"""Scene metadata ingestion, filtering, frame pairing, sample building and splitting.

Each scene lives in its own directory with a ``meta.json`` file; image and
flow references inside it are paths relative to that directory.
"""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .bboxprep import Box2D, box_from_corners
from .errors import InsufficientTrackError
from .flowcore import FlowField, hflip
from .labeling import (
    SPEED_THRESHOLD,
    MotionLabel,
    Observation,
    TrackedObject,
    bracketing_keyframes,
    interpolate_box,
    keyframe_labels,
    label_object,
    propagate_label,
)

log = logging.getLogger(__name__)

META_FILE = "meta.json"
KEYFRAMES = "keyframes"

VEHICLE_CATEGORIES = frozenset({
    "vehicle.car",
    "vehicle.emergency.ambulance",
    "vehicle.emergency.police",
    "vehicle.truck",
    "vehicle.bus.bendy",
    "vehicle.bus.rigid",
    "vehicle.construction",
})

Point = Tuple[float, float]
PairMode = Union[str, int]


@dataclass(frozen=True)
class Annotation:
    object_id: str
    category: str
    corners: Tuple[Point, ...]
    distance: float
    visibility: float
    position: Tuple[float, float, float]

    def __post_init__(self):
        if self.distance < 0:
            raise ValueError(f"annotation {self.object_id}: negative distance")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError(f"annotation {self.object_id}: visibility outside [0, 1]")

    @property
    def box(self) -> Box2D:
        return box_from_corners(self.corners)

    def to_json(self) -> dict:
        return {
            "object_id": self.object_id,
            "category": self.category,
            "corners": [list(c) for c in self.corners],
            "position": list(self.position),
            "visibility": self.visibility,
            "distance": self.distance,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Annotation":
        return cls(
            object_id=str(d["object_id"]),
            category=str(d["category"]),
            corners=tuple((float(x), float(y)) for x, y in d["corners"]),
            distance=float(d["distance"]),
            visibility=float(d["visibility"]),
            position=tuple(float(c) for c in d["position"]),  # type: ignore[arg-type]
        )


@dataclass(frozen=True)
class FrameRecord:
    timestamp: int
    is_keyframe: bool
    image_ref: str
    flow_ref: Optional[str] = None
    annotations: Tuple[Annotation, ...] = ()

    def to_json(self) -> dict:
        return {
            "timestamp": self.timestamp,
            "is_keyframe": self.is_keyframe,
            "image": self.image_ref,
            "flow": self.flow_ref,
            "annotations": [a.to_json() for a in self.annotations],
        }

    @classmethod
    def from_json(cls, d: dict) -> "FrameRecord":
        return cls(
            timestamp=int(d["timestamp"]),
            is_keyframe=bool(d["is_keyframe"]),
            image_ref=str(d["image"]),
            flow_ref=d.get("flow"),
            annotations=tuple(Annotation.from_json(a) for a in d.get("annotations", ())),
        )


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    description: str
    frames: Tuple[FrameRecord, ...]
    ego_positions: Tuple[Tuple[int, float, float, float], ...] = ()
    sensor: str = "CAM_FRONT"
    root: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        for a, b in zip(self.frames, self.frames[1:]):
            if b.timestamp <= a.timestamp:
                raise ValueError(f"scene {self.scene_id}: frame timestamps not strictly increasing")

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        if p.is_absolute() or self.root is None:
            return p
        return Path(self.root) / p

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "description": self.description,
            "sensor": self.sensor,
            "ego_positions": [list(e) for e in self.ego_positions],
            "frames": [f.to_json() for f in self.frames],
        }

    @classmethod
    def from_json(cls, d: dict, root: Optional[str] = None) -> "SceneRecord":
        return cls(
            scene_id=str(d["scene_id"]),
            description=str(d.get("description", "")),
            frames=tuple(FrameRecord.from_json(f) for f in d["frames"]),
            ego_positions=tuple(
                (int(e[0]), float(e[1]), float(e[2]), float(e[3])) for e in d.get("ego_positions", ())
            ),
            sensor=str(d.get("sensor", "CAM_FRONT")),
            root=root,
        )

    def tracks(self) -> Dict[str, TrackedObject]:
        """Keyframe annotations grouped into per-object tracks."""
        obs: Dict[str, List[Observation]] = {}
        categories: Dict[str, str] = {}
        for frame in self.frames:
            for ann in frame.annotations:
                categories.setdefault(ann.object_id, ann.category)
                obs.setdefault(ann.object_id, []).append(
                    Observation(frame.timestamp, ann.position, ann.corners, ann.visibility, frame.is_keyframe)
                )
        return {oid: TrackedObject(oid, categories[oid], tuple(o)) for oid, o in obs.items()}


def load_scene(path: Union[str, Path]) -> SceneRecord:
    """Load a scene from its directory or its ``meta.json`` file."""
    path = Path(path)
    meta = path / META_FILE if path.is_dir() else path
    with open(meta) as fh:
        return SceneRecord.from_json(json.load(fh), root=str(meta.parent))


def save_scene(scene: SceneRecord, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = directory / META_FILE
    meta.write_text(json.dumps(scene.to_json(), indent=1) + "\n")
    return meta


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FilterCriteria:
    categories: FrozenSet[str] = VEHICLE_CATEGORIES
    min_distance: float = 30.0
    max_distance: float = 70.0
    min_visibility: float = 0.8
    max_visibility: float = 1.0
    sensor: str = "CAM_FRONT"
    scene_exclusion_keywords: FrozenSet[str] = frozenset({"night", "rain", "lightning"})

    def __post_init__(self):
        object.__setattr__(self, "categories", frozenset(self.categories))
        object.__setattr__(self, "scene_exclusion_keywords", frozenset(self.scene_exclusion_keywords))
        if self.min_distance > self.max_distance or self.min_visibility > self.max_visibility:
            raise ValueError("filter range has min > max")

    @classmethod
    def generalized(cls) -> "FilterCriteria":
        """Also admits nearby vehicles (closer than 30 m)."""
        return cls(min_distance=0.0)

    def to_json(self) -> dict:
        return {
            "categories": sorted(self.categories),
            "min_distance": self.min_distance,
            "max_distance": self.max_distance,
            "min_visibility": self.min_visibility,
            "max_visibility": self.max_visibility,
            "sensor": self.sensor,
            "scene_exclusion_keywords": sorted(self.scene_exclusion_keywords),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FilterCriteria":
        return cls(**{k: frozenset(v) if isinstance(v, list) else v for k, v in d.items()})


def filter_scenes(scenes: Iterable[SceneRecord], criteria: FilterCriteria) -> List[SceneRecord]:
    """Drop scenes whose description mentions an excluded condition, or from another sensor."""
    keywords = [k.lower() for k in criteria.scene_exclusion_keywords]
    kept = []
    for scene in scenes:
        desc = scene.description.lower()
        if any(k in desc for k in keywords):
            continue
        if criteria.sensor and scene.sensor != criteria.sensor:
            continue
        kept.append(scene)
    return kept


def annotation_passes(ann: Annotation, criteria: FilterCriteria) -> bool:
    return (
        ann.category in criteria.categories
        and criteria.min_distance <= ann.distance <= criteria.max_distance
        and criteria.min_visibility <= ann.visibility <= criteria.max_visibility
    )


def filter_annotations(frame: FrameRecord, criteria: FilterCriteria) -> List[Annotation]:
    return [a for a in frame.annotations if annotation_passes(a, criteria)]


def ego_distance(ego: Sequence[float], position: Sequence[float]) -> float:
    return math.dist(ego, position)


# ---------------------------------------------------------------------------
# Pairs and samples
# ---------------------------------------------------------------------------


def build_pairs(scene: SceneRecord, mode: PairMode = KEYFRAMES) -> List[Tuple[int, int]]:
    """Frame index pairs ``(a, b)``.

    ``mode="keyframes"`` pairs each keyframe with the next one; an integer
    ``n`` pairs frame ``i`` with ``i + n`` for ``i = 0, n, 2n, ...``.
    """
    if mode == KEYFRAMES:
        keys = [i for i, f in enumerate(scene.frames) if f.is_keyframe]
        return list(zip(keys, keys[1:]))
    if isinstance(mode, bool) or not isinstance(mode, int) or mode < 1:
        raise ValueError(f"pair mode must be 'keyframes' or a positive integer, got {mode!r}")
    n = len(scene.frames)
    return [(i, i + mode) for i in range(0, n - mode, mode)]


class Split(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class SampleRecord:
    scene_id: str
    object_id: str
    pair: Tuple[int, int]  # frame timestamps (µs)
    roi_box: Box2D
    label: MotionLabel
    flow_path: Optional[str] = None
    image_path: Optional[str] = None
    split: Optional[Split] = None
    roi_path: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "object_id": self.object_id,
            "pair": list(self.pair),
            "roi_box": self.roi_box.to_list(),
            "label": self.label.value,
            "flow": self.flow_path,
            "image": self.image_path,
            "split": self.split.value if self.split else None,
            "roi": self.roi_path,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SampleRecord":
        return cls(
            scene_id=d["scene_id"],
            object_id=d["object_id"],
            pair=(int(d["pair"][0]), int(d["pair"][1])),
            roi_box=Box2D(*d["roi_box"]),
            label=MotionLabel(d["label"]),
            flow_path=d.get("flow"),
            image_path=d.get("image"),
            split=Split(d["split"]) if d.get("split") else None,
            roi_path=d.get("roi"),
        )


def build_samples(
    scene: SceneRecord,
    criteria: FilterCriteria,
    mode: PairMode = KEYFRAMES,
    threshold: float = SPEED_THRESHOLD,
) -> List[SampleRecord]:
    """One sample per (pair, eligible object).

    Keyframe heads use their own annotations and the forward-difference label.
    Non-keyframe heads get boxes interpolated between the bracketing keyframes
    and the label of the closest previous keyframe; eligibility is judged on
    that previous keyframe's annotation.
    """
    tracks = scene.tracks()
    samples: List[SampleRecord] = []
    for a, b in build_pairs(scene, mode):
        fa, fb = scene.frames[a], scene.frames[b]
        flow = str(scene.resolve(fa.flow_ref)) if fa.flow_ref else None
        image = str(scene.resolve(fa.image_ref))
        pair = (fa.timestamp, fb.timestamp)
        if fa.is_keyframe:
            for ann in filter_annotations(fa, criteria):
                track = tracks[ann.object_id]
                at = next(i for i, o in enumerate(track.observations) if o.timestamp == fa.timestamp)
                try:
                    label = label_object(track, at, threshold)
                except InsufficientTrackError:
                    continue
                samples.append(SampleRecord(scene.scene_id, ann.object_id, pair, ann.box, label, flow, image))
            continue
        for oid, track in tracks.items():
            bracket = bracketing_keyframes(track, fa.timestamp)
            if bracket is None:
                continue
            prev, nxt = bracket
            prev_ann = _annotation_at(scene, oid, prev.timestamp)
            if prev_ann is None or not annotation_passes(prev_ann, criteria):
                continue
            labels = keyframe_labels(track, threshold)
            if not labels or labels[0][0] > fa.timestamp:
                continue
            if prev.timestamp == nxt.timestamp:
                box = box_from_corners(prev.corners)
            else:
                box = interpolate_box(
                    box_from_corners(prev.corners), prev.timestamp,
                    box_from_corners(nxt.corners), nxt.timestamp, fa.timestamp,
                )
            label = propagate_label(labels, fa.timestamp)
            samples.append(SampleRecord(scene.scene_id, oid, pair, box, label, flow, image))
    return samples


def _annotation_at(scene: SceneRecord, object_id: str, timestamp: int) -> Optional[Annotation]:
    for frame in scene.frames:
        if frame.timestamp == timestamp:
            return next((x for x in frame.annotations if x.object_id == object_id), None)
    return None


def split_samples(samples: Sequence[SampleRecord], eval_fraction: float, rng_seed: int) -> List[SampleRecord]:
    """Assign whole scenes to Train or Eval, targeting ``eval_fraction`` of samples.

    Scenes are visited in a seeded random order; each joins Eval while doing so
    brings the Eval count closer to the target. Output preserves input order.
    """
    if not samples:
        raise ValueError("cannot split an empty sample list")
    if not 0 < eval_fraction < 1:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    counts: Dict[str, int] = {}
    for s in samples:
        counts[s.scene_id] = counts.get(s.scene_id, 0) + 1
    scene_ids = sorted(counts)
    order = np.random.default_rng(rng_seed).permutation(len(scene_ids))
    target = eval_fraction * len(samples)
    eval_scenes = set()
    n_eval = 0
    for i in order:
        sid = scene_ids[i]
        if len(eval_scenes) == len(scene_ids) - 1:
            break  # keep at least one training scene
        if abs(n_eval + counts[sid] - target) < abs(n_eval - target):
            eval_scenes.add(sid)
            n_eval += counts[sid]
    return [replace(s, split=Split.EVAL if s.scene_id in eval_scenes else Split.TRAIN) for s in samples]


def augment(
    roi: FlowField, label: MotionLabel, rng: np.random.Generator, p: float = 0.5
) -> Tuple[FlowField, MotionLabel]:
    """Random horizontal flip; the motion label is unaffected by mirroring."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"flip probability must be in [0, 1], got {p}")
    if rng.random() < p:
        return hflip(roi), label
    return roi, label


# ---------------------------------------------------------------------------
# Manifests (newline-delimited JSON)
# ---------------------------------------------------------------------------


def write_manifest(samples: Iterable[SampleRecord], path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_manifest(path: Union[str, Path]) -> List[SampleRecord]:
    with open(path) as fh:
        return [SampleRecord.from_json(json.loads(line)) for line in fh if line.strip()]
