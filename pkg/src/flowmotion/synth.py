"""Synthetic scenes with exact ground-truth flow, boxes, positions and labels.

Objects are textured rectangles translating at constant pixel velocity over
a textured background that translates with the ego motion. A pixel belongs to
an object in frame ``k`` when its integer coordinate lies in the half-open
rectangle ``[x, x + w) x [y, y + h)`` of that frame, so ground-truth flow is
piecewise constant and matches the rendering exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .bboxprep import Box2D
from .dataset import Annotation, FrameRecord, SceneRecord, save_scene
from .errors import ConfigurationError
from .flowcore import FlowField, bilinear_grid, save_flow
from .flowestim import GrayImage, save_gray
from .labeling import SPEED_THRESHOLD, MotionLabel, classify_motion

MICROS_PER_SECOND = 1_000_000


@dataclass(frozen=True)
class SynthObject:
    size: Tuple[float, float]  # (w, h) px
    position: Tuple[float, float]  # top-left at frame 0, px
    velocity: Tuple[float, float]  # px / frame
    contrast: float = 0.2
    category: str = "vehicle.car"
    object_id: Optional[str] = None

    def box_at(self, k: float) -> Box2D:
        x = self.position[0] + self.velocity[0] * k
        y = self.position[1] + self.velocity[1] * k
        return Box2D(x, x + self.size[0], y, y + self.size[1])


@dataclass(frozen=True)
class SynthSceneConfig:
    width: int = 128
    height: int = 128
    smoothness: float = 2.0
    objects: Tuple[SynthObject, ...] = ()
    ego_motion: Tuple[float, float] = (0.0, 0.0)
    seed: int = 0
    frames: int = 2
    meters_per_pixel: float = 0.5
    frame_interval: float = 0.5  # seconds
    keyframe_every: int = 1
    ego_depth: float = 50.0  # m, camera offset from the object plane
    background_contrast: float = 0.12
    scene_id: str = "synth"
    description: str = "synthetic daytime scene"
    start_timestamp: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def interval_us(self) -> int:
        return int(round(self.frame_interval * MICROS_PER_SECOND))

    def object_id(self, i: int) -> str:
        return self.objects[i].object_id or f"{self.scene_id}-obj{i}"

    def speed_mps(self, obj: SynthObject) -> float:
        return math.hypot(*obj.velocity) * self.meters_per_pixel / self.frame_interval

    def validate(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be positive")
        if self.frames < 1 or self.keyframe_every < 1:
            raise ConfigurationError("frames and keyframe_every must be >= 1")
        if not (self.meters_per_pixel > 0 and self.frame_interval > 0 and self.smoothness > 0):
            raise ConfigurationError("meters_per_pixel, frame_interval and smoothness must be positive")
        if (self.frames - 1) % self.keyframe_every:
            raise ConfigurationError("last frame must be a keyframe: frames - 1 must be a multiple of keyframe_every")
        for i, obj in enumerate(self.objects):
            if min(obj.size) <= 0:
                raise ConfigurationError(f"object {i} has non-positive size")
            for k in (0, self.frames - 1):
                b = obj.box_at(k)
                if b.xmin < 0 or b.ymin < 0 or b.xmax > self.width or b.ymax > self.height:
                    raise ConfigurationError(f"object {i} leaves the {self.width}x{self.height} frame at frame {k}: {b}")


@dataclass
class SynthScene:
    config: SynthSceneConfig
    scene: SceneRecord
    images: List[GrayImage]
    ground_truth: Dict[Tuple[int, int], FlowField]  # keyed by frame-index pair
    intended_labels: Dict[str, MotionLabel] = field(default_factory=dict)

    def tracks(self):
        return self.scene.tracks()


def _texture(rng: np.random.Generator, shape: Tuple[int, int], sigma: float) -> np.ndarray:
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (t - t.mean()) / (t.std() or 1.0)


def _object_mask(cfg: SynthSceneConfig, obj: SynthObject, k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    b = obj.box_at(k)
    xs = np.arange(cfg.width)
    ys = np.arange(cfg.height)
    mx = (xs >= b.xmin) & (xs < b.xmax)
    my = (ys >= b.ymin) & (ys < b.ymax)
    return my[:, None] & mx[None, :], xs - b.xmin, ys - b.ymin


def object_masks(cfg: SynthSceneConfig, k: int) -> List[np.ndarray]:
    return [_object_mask(cfg, obj, k)[0] for obj in cfg.objects]


def render_frames(cfg: SynthSceneConfig) -> List[GrayImage]:
    rng = np.random.default_rng(cfg.seed)
    ex, ey = cfg.ego_motion
    margin = int(math.ceil(max(abs(ex), abs(ey)) * (cfg.frames - 1))) + 2
    bg = 0.5 + cfg.background_contrast * _texture(
        rng, (cfg.height + 2 * margin, cfg.width + 2 * margin), cfg.smoothness
    )
    textures = []
    for obj in cfg.objects:
        th, tw = int(math.ceil(obj.size[1])) + 2, int(math.ceil(obj.size[0])) + 2
        offset = rng.uniform(-0.15, 0.15)
        textures.append(0.5 + offset + obj.contrast * _texture(rng, (th, tw), cfg.smoothness))
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    frames = []
    for k in range(cfg.frames):
        img = bilinear_grid(bg, xs - ex * k + margin, ys - ey * k + margin)
        for obj, tex in zip(cfg.objects, textures):
            mask, lx, ly = _object_mask(cfg, obj, k)
            gx, gy = np.meshgrid(lx, ly)
            img = np.where(mask, bilinear_grid(tex, gx, gy), img)
        frames.append(GrayImage(np.clip(img, 0.0, 1.0)))
    return frames


def ground_truth_flow(cfg: SynthSceneConfig, a: int, b: int) -> FlowField:
    """Exact displacement from frame ``a`` to frame ``b``."""
    n = b - a
    data = np.empty((cfg.height, cfg.width, 2), dtype=np.float64)
    data[..., 0] = cfg.ego_motion[0] * n
    data[..., 1] = cfg.ego_motion[1] * n
    for obj, mask in zip(cfg.objects, object_masks(cfg, a)):
        data[mask, 0] = obj.velocity[0] * n
        data[mask, 1] = obj.velocity[1] * n
    return FlowField(data)


def _corners(b: Box2D) -> Tuple[Tuple[float, float], ...]:
    # front and back faces of a flat box project onto the same rectangle
    quad = ((b.xmin, b.ymin), (b.xmax, b.ymin), (b.xmax, b.ymax), (b.xmin, b.ymax))
    return quad + quad


def _ego_position(cfg: SynthSceneConfig) -> Tuple[float, float, float]:
    m = cfg.meters_per_pixel
    return (cfg.width / 2 * m, cfg.height / 2 * m, -cfg.ego_depth)


def generate(cfg: SynthSceneConfig) -> SynthScene:
    """Render a scene and its metadata; flows are referenced as ``flow/<frame>.npy``."""
    cfg.validate()
    images = render_frames(cfg)
    m = cfg.meters_per_pixel
    ego = _ego_position(cfg)
    keys = list(range(0, cfg.frames, cfg.keyframe_every))
    heads = set(keys[:-1])
    frames = []
    for k in range(cfg.frames):
        t = cfg.start_timestamp + k * cfg.interval_us
        is_key = k % cfg.keyframe_every == 0
        anns = []
        if is_key:
            for i, obj in enumerate(cfg.objects):
                b = obj.box_at(k)
                cx, cy = b.center
                pos = (cx * m, cy * m, 0.0)
                anns.append(Annotation(
                    object_id=cfg.object_id(i),
                    category=obj.category,
                    corners=_corners(b),
                    distance=math.dist(ego, pos),
                    visibility=1.0,
                    position=pos,
                ))
        frames.append(FrameRecord(
            timestamp=t,
            is_keyframe=is_key,
            image_ref=f"frames/{k:06d}.png",
            flow_ref=f"flow/{k:06d}.npy" if k in heads else None,
            annotations=tuple(anns),
        ))
    ego_positions = tuple((f.timestamp,) + ego for f in frames)
    scene = SceneRecord(cfg.scene_id, cfg.description, tuple(frames), ego_positions)
    gt = {(a, b): ground_truth_flow(cfg, a, b) for a, b in zip(keys, keys[1:])}
    labels = {cfg.object_id(i): intended_label(cfg, obj) for i, obj in enumerate(cfg.objects)}
    return SynthScene(cfg, scene, images, gt, labels)


def intended_label(cfg: SynthSceneConfig, obj: SynthObject, threshold: float = SPEED_THRESHOLD) -> MotionLabel:
    """Label implied by the configured velocity, computed through the same µs arithmetic."""
    key_dt = cfg.keyframe_every * cfg.interval_us * 1e-6
    m = cfg.meters_per_pixel
    dx = obj.velocity[0] * cfg.keyframe_every * m
    dy = obj.velocity[1] * cfg.keyframe_every * m
    return classify_motion(math.hypot(dx / key_dt, dy / key_dt), threshold)


def write_scene(synth: SynthScene, root: Union[str, Path]) -> Path:
    """Write ``scene_<id>/{meta.json, frames/*.png, flow/*.npy}`` under ``root``."""
    out = Path(root) / f"scene_{synth.scene.scene_id}"
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    for frame, img in zip(synth.scene.frames, synth.images):
        save_gray(img, out / frame.image_ref)
    for (a, _), flow in synth.ground_truth.items():
        save_flow(flow, out / synth.scene.frames[a].flow_ref)
    save_scene(synth.scene, out)
    return out


# ---------------------------------------------------------------------------
# Scene suites
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    """Batch of two-object scenes with controlled speed distributions.

    Each entry of ``speeds`` (m/s) becomes one object; directions are uniform
    random angles. Objects are paired into scenes in a seeded shuffled order.
    """

    n_moving: int = 100
    n_still: int = 100
    moving_speed: Tuple[float, float] = (4.0, 6.0)
    still_speed: Tuple[float, float] = (0.0, 0.0)
    objects_per_scene: int = 2
    width: int = 96
    height: int = 96
    object_size: Tuple[float, float] = (16.0, 16.0)
    meters_per_pixel: float = 0.5
    frame_interval: float = 0.5
    frames: int = 2
    keyframe_every: int = 1
    ego_motion: Tuple[float, float] = (0.0, 0.0)
    contrast: float = 0.2
    seed: int = 0

    @classmethod
    def separable(cls, seed: int = 0) -> "SuiteConfig":
        return cls(seed=seed)

    @classmethod
    def threshold(cls, seed: int = 0) -> "SuiteConfig":
        """Speeds straddling the 2 m/s threshold (1.5 to 2.5 m/s)."""
        return cls(moving_speed=(2.0, 2.5), still_speed=(1.5, 2.0), seed=seed)


def make_suite(sc: SuiteConfig) -> List[SynthSceneConfig]:
    rng = np.random.default_rng(sc.seed)
    speeds = np.concatenate([
        rng.uniform(*sc.moving_speed, size=sc.n_moving),
        rng.uniform(*sc.still_speed, size=sc.n_still),
    ])
    speeds = speeds[rng.permutation(len(speeds))]
    per = sc.objects_per_scene
    w, h = sc.object_size
    px_per_mps = sc.frame_interval / sc.meters_per_pixel
    travel = (sc.frames - 1)
    slot_w = sc.width / per
    configs = []
    for s, start in enumerate(range(0, len(speeds), per)):
        objs = []
        for j, speed in enumerate(speeds[start:start + per]):
            angle = rng.uniform(0, 2 * np.pi)
            vx, vy = speed * px_per_mps * np.cos(angle), speed * px_per_mps * np.sin(angle)
            # keep the whole trajectory inside this object's vertical slot
            x_lo = j * slot_w + max(0.0, -vx * travel) + 1
            x_hi = (j + 1) * slot_w - w - max(0.0, vx * travel) - 1
            y_lo = max(0.0, -vy * travel) + 1
            y_hi = sc.height - h - max(0.0, vy * travel) - 1
            if x_hi < x_lo or y_hi < y_lo:
                raise ConfigurationError("object trajectory does not fit its slot; enlarge the image")
            pos = (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi)))
            objs.append(SynthObject((w, h), pos, (float(vx), float(vy)), contrast=sc.contrast))
        configs.append(SynthSceneConfig(
            width=sc.width, height=sc.height, objects=tuple(objs), ego_motion=sc.ego_motion,
            seed=int(rng.integers(2**31)), frames=sc.frames, meters_per_pixel=sc.meters_per_pixel,
            frame_interval=sc.frame_interval, keyframe_every=sc.keyframe_every,
            scene_id=f"{sc.seed:04d}-{s:04d}",
        ))
    return configs
