"""
Synthetic dynamic-scene LiDAR sequences

Scenes are a ground plane (world z = 0), static axis-aligned boxes and box
actors driving along polylines. Every frame casts the sensor's ring x azimuth
rays from the ego pose against the scene at that frame's actor positions, so
hit points, semantic labels and motion labels are exact.

Semantic ids follow SemanticKITTI: ground 40 (road), static boxes 50
(building), actors 10 (car) while stopped and 252 (moving-car) while moving.
Actor instance id is its index + 1.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateSpec, IndexOutOfRange
from .geometry import PoseSE3, relative_from_world
from .kitti_io import (
    LabelSet,
    MotionLabel,
    RawScan,
    SequenceLayout,
    write_labels,
    write_poses,
    write_scan,
    write_times,
)

logger = logging.getLogger(__name__)

SEMANTIC_GROUND = 40
SEMANTIC_BUILDING = 50
SEMANTIC_CAR = 10
SEMANTIC_MOVING_CAR = 252

INTENSITY_GROUND = 0.2
INTENSITY_BUILDING = 0.5
INTENSITY_ACTOR = 0.8

# Hit source codes: GROUND, then static boxes 1..B, then actors B+1..B+A
GROUND = 0

_MIN_HIT = 1e-9


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by its min and max world corners"""
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    @classmethod
    def on_ground(cls, x: float, y: float, length: float, width: float, height: float) -> "Box":
        return cls((x - length / 2, y - width / 2, 0.0), (x + length / 2, y + width / 2, height))


@dataclass(frozen=True)
class Trajectory:
    """
    Constant-speed motion along a 2D polyline

    Motion starts at start_time. An open polyline stops at its last waypoint;
    a closed one wraps around to the first waypoint and keeps going.
    """
    waypoints: tuple[tuple[float, float], ...]
    speed: float = 0.0
    start_time: float = 0.0
    closed: bool = False

    def _vertices(self) -> np.ndarray:
        pts = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        return np.vstack([pts, pts[:1]]) if self.closed and len(pts) > 1 else pts

    def _cumulative(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self._vertices(), axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self._cumulative()[-1])

    def distance_at(self, t: float) -> float:
        travelled = self.speed * max(0.0, t - self.start_time)
        length = self.length
        if length == 0.0:
            return 0.0
        return travelled % length if self.closed else min(travelled, length)

    def speed_at(self, t: float) -> float:
        """Instantaneous speed; 0 before start_time and after an open path ends"""
        if self.speed <= 0 or self.length == 0.0 or t < self.start_time:
            return 0.0
        if not self.closed and self.speed * (t - self.start_time) >= self.length:
            return 0.0
        return self.speed

    def pose_at(self, t: float) -> tuple[np.ndarray, float]:
        """(xy position, heading) at time t"""
        verts = self._vertices()
        if len(verts) == 1:
            return verts[0].copy(), 0.0
        cum = self._cumulative()
        s = self.distance_at(t)
        seg = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(verts) - 2))
        delta = verts[seg + 1] - verts[seg]
        seg_len = cum[seg + 1] - cum[seg]
        frac = (s - cum[seg]) / seg_len if seg_len > 0 else 0.0
        return verts[seg] + frac * delta, float(math.atan2(delta[1], delta[0]))


@dataclass(frozen=True)
class SynthActor:
    length: float
    width: float
    height: float
    trajectory: Trajectory

    def box_at(self, t: float) -> Box:
        (x, y), _ = self.trajectory.pose_at(t)
        return Box.on_ground(float(x), float(y), self.length, self.width, self.height)

    def is_moving(self, t: float) -> bool:
        return self.trajectory.speed_at(t) > 0.0


@dataclass(frozen=True)
class SensorModel:
    """Rotating LiDAR: rings spread over [fov_down, fov_up] degrees, azimuth_bins rays per ring"""
    rings: int = 16
    azimuth_bins: int = 360
    max_range: float = 40.0
    mount_height: float = 1.73
    fov_up: float = 2.0
    fov_down: float = -24.0
    range_jitter: float = 0.0

    def directions(self) -> np.ndarray:
        """(rings * azimuth_bins, 3) unit ray directions in the sensor frame, ring-major"""
        elevation = np.radians(np.linspace(self.fov_down, self.fov_up, self.rings))
        azimuth = -math.pi + 2.0 * math.pi * (np.arange(self.azimuth_bins) + 0.5) / self.azimuth_bins
        el, az = np.meshgrid(elevation, azimuth, indexing="ij")
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class SynthSceneSpec:
    boxes: tuple[Box, ...] = ()
    actors: tuple[SynthActor, ...] = ()
    ego: Trajectory = Trajectory(((0.0, 0.0),))
    sensor: SensorModel = field(default_factory=SensorModel)
    frame_rate: float = 10.0
    frames: int = 50
    seed: int = 0
    name: str = "scene"

    def __post_init__(self):
        if not (math.isfinite(self.frame_rate) and self.frame_rate > 0):
            raise DegenerateSpec(f"frame rate must be finite and > 0, got {self.frame_rate}")
        if self.frames < 1:
            raise DegenerateSpec(f"frames must be >= 1, got {self.frames}")
        trajectories = [self.ego] + [a.trajectory for a in self.actors]
        for traj in trajectories:
            if not (math.isfinite(traj.speed) and traj.speed >= 0):
                raise DegenerateSpec(f"speeds must be finite and >= 0, got {traj.speed}")
            if not traj.waypoints:
                raise DegenerateSpec("trajectory needs at least one waypoint")
            if not np.all(np.isfinite(np.asarray(traj.waypoints, dtype=np.float64))):
                raise DegenerateSpec("trajectory waypoints must be finite")
        s = self.sensor
        if s.rings < 1 or s.azimuth_bins < 1:
            raise DegenerateSpec(f"sensor needs >= 1 ring and azimuth bin, got {s.rings}x{s.azimuth_bins}")
        if not (s.max_range > 0 and s.mount_height > 0 and s.range_jitter >= 0):
            raise DegenerateSpec("max_range and mount_height must be > 0, range_jitter >= 0")
        if not s.fov_down < s.fov_up:
            raise DegenerateSpec(f"fov_down {s.fov_down} must be below fov_up {s.fov_up}")
        for box in self.boxes:
            if not np.all(np.asarray(box.hi) > np.asarray(box.lo)):
                raise DegenerateSpec(f"box with non-positive extent: {box}")
        for actor in self.actors:
            if min(actor.length, actor.width, actor.height) <= 0:
                raise DegenerateSpec("actor dimensions must be > 0")

    def time_of(self, frame: int) -> float:
        return frame / self.frame_rate

    def ego_pose(self, frame: int) -> PoseSE3:
        (x, y), heading = self.ego.pose_at(self.time_of(frame))
        return PoseSE3.rotation_z(heading, (float(x), float(y), self.sensor.mount_height))

    def actor_source(self, actor: int) -> int:
        return 1 + len(self.boxes) + actor


@dataclass(frozen=True)
class SynthFrame:
    scan: RawScan
    labels: LabelSet
    motion: np.ndarray     # (N,) uint8
    source: np.ndarray     # (N,) hit source code per point
    hit_world: np.ndarray  # (N, 3) exact world hit points (before jitter)
    pose: PoseSE3


@dataclass
class SynthSequence:
    """Generator output: scans with labels and exact poses"""
    spec: SynthSceneSpec
    frames: list[SynthFrame]

    @property
    def scans(self) -> list[RawScan]:
        return [f.scan for f in self.frames]

    @property
    def labels(self) -> list[LabelSet]:
        return [f.labels for f in self.frames]

    @property
    def motion(self) -> list[np.ndarray]:
        return [f.motion for f in self.frames]

    @property
    def world_poses(self) -> list[PoseSE3]:
        return [f.pose for f in self.frames]

    @property
    def rel_poses(self) -> list[PoseSE3]:
        return relative_from_world(self.world_poses)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.frames), dtype=np.float64) / self.spec.frame_rate

    def moving_counts(self) -> list[int]:
        """Per-frame number of points on actors moving at that frame"""
        counts = []
        for k, frame in enumerate(self.frames):
            t = self.spec.time_of(k)
            moving = [self.spec.actor_source(j) for j, a in enumerate(self.spec.actors) if a.is_moving(t)]
            counts.append(int(np.isin(frame.source, moving).sum()))
        return counts

    def __len__(self) -> int:
        return len(self.frames)


# === Ray casting ===

def _ray_box_hits(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box]) -> np.ndarray:
    """(M, B) entry distance of each ray into each box, inf where missed"""
    if not boxes:
        return np.full((dirs.shape[0], 0), np.inf)
    lo = np.array([b.lo for b in boxes])  # (B, 3)
    hi = np.array([b.hi for b in boxes])
    safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    inv = 1.0 / safe[:, None, :]  # (M, 1, 3)
    t1 = (lo[None] - origin) * inv
    t2 = (hi[None] - origin) * inv
    t_near = np.minimum(t1, t2).max(axis=2)
    t_far = np.maximum(t1, t2).min(axis=2)
    hit = (t_far >= t_near) & (t_near > _MIN_HIT)
    return np.where(hit, t_near, np.inf)


def _ray_ground_hits(origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    down = dirs[:, 2] < 0
    t = np.full(dirs.shape[0], np.inf)
    t[down] = -origin[2] / dirs[down, 2]
    return t


def _frame_labels(spec: SynthSceneSpec, source: np.ndarray, t: float) -> tuple[LabelSet, np.ndarray]:
    n_boxes = len(spec.boxes)
    semantic = np.full(source.shape, SEMANTIC_BUILDING, dtype=np.uint32)
    semantic[source == GROUND] = SEMANTIC_GROUND
    instance = np.zeros(source.shape, dtype=np.uint32)
    motion = np.full(source.shape, MotionLabel.STATIC, dtype=np.uint8)
    for j, actor in enumerate(spec.actors):
        on_actor = source == 1 + n_boxes + j
        instance[on_actor] = j + 1
        if actor.is_moving(t):
            semantic[on_actor] = SEMANTIC_MOVING_CAR
            motion[on_actor] = MotionLabel.MOVING
        else:
            semantic[on_actor] = SEMANTIC_CAR
    return LabelSet.from_parts(semantic, instance), motion


def cast_frame(spec: SynthSceneSpec, frame: int) -> SynthFrame:
    """
    Ray-cast one frame

    Rays that hit nothing within max_range produce no point. Range jitter,
    when enabled, is drawn from a generator seeded by (seed, frame).
    """
    if not 0 <= frame < spec.frames:
        raise IndexOutOfRange(f"frame {frame} outside [0, {spec.frames})")
    t = spec.time_of(frame)
    pose = spec.ego_pose(frame)
    dirs_sensor = spec.sensor.directions()
    dirs_world = dirs_sensor @ pose.rotation.T
    origin = pose.translation

    boxes = list(spec.boxes) + [a.box_at(t) for a in spec.actors]
    candidates = np.column_stack([_ray_ground_hits(origin, dirs_world), _ray_box_hits(origin, dirs_world, boxes)])
    nearest = candidates.argmin(axis=1)
    dist = candidates[np.arange(len(candidates)), nearest]
    keep = dist <= spec.sensor.max_range
    dist, source, dirs_sensor = dist[keep], nearest[keep].astype(np.int64), dirs_sensor[keep]

    hit_world = origin + dist[:, None] * dirs_world[keep]
    if spec.sensor.range_jitter > 0:
        rng = np.random.default_rng([spec.seed, frame])
        dist = dist + rng.normal(0.0, spec.sensor.range_jitter, dist.shape)

    intensity = np.where(source == GROUND, INTENSITY_GROUND,
                         np.where(source <= len(spec.boxes), INTENSITY_BUILDING, INTENSITY_ACTOR))
    points = np.column_stack([dist[:, None] * dirs_sensor, intensity])
    labels, motion = _frame_labels(spec, source, t)
    return SynthFrame(
        scan=RawScan(points=points, frame_index=frame),
        labels=labels,
        motion=motion,
        source=source,
        hit_world=hit_world,
        pose=pose,
    )


def generate_sequence(spec: SynthSceneSpec, num_frames: int | None = None, threads: int = 1) -> SynthSequence:
    """
    Generate frames 0..num_frames-1 (spec.frames by default)

    Frames are cast in parallel when threads > 1; output order is fixed.

    Raises:
        DegenerateSpec: num_frames < 1
    """
    if num_frames is not None:
        if num_frames < 1:
            raise DegenerateSpec(f"num_frames must be >= 1, got {num_frames}")
        spec = replace(spec, frames=num_frames)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            frames = list(pool.map(lambda k: cast_frame(spec, k), range(spec.frames)))
    else:
        frames = [cast_frame(spec, k) for k in range(spec.frames)]
    logger.debug("generated %s: %d frames", spec.name, len(frames))
    return SynthSequence(spec=spec, frames=frames)


def oracle_motion_labels(spec: SynthSceneSpec, frame: int) -> np.ndarray:
    """Exact motion labels of one frame from the primitive each ray hit"""
    return cast_frame(spec, frame).motion


def write_sequence(seq: SynthSequence, layout: SequenceLayout) -> None:
    """Write scans, semantic labels, world poses and timestamps in the KITTI layout"""
    for k, frame in enumerate(seq.frames):
        write_scan(layout.scan_path(k), frame.scan)
        write_labels(layout.label_path(k), frame.labels)
    write_poses(layout.pose_file, seq.world_poses)
    write_times(layout.times_file, seq.times)
    logger.info("wrote %d frames to %s", len(seq), layout.root)


# === Scenarios ===

def _street_buildings(x_min: float, x_max: float, offset: float, rng: np.random.Generator) -> list[Box]:
    boxes = []
    x = x_min
    while x < x_max:
        length = float(rng.uniform(6.0, 12.0))
        height = float(rng.uniform(4.0, 9.0))
        for side in (-1.0, 1.0):
            boxes.append(Box((x, side * offset - 1.5, 0.0), (x + length, side * offset + 1.5, height)))
        x += length + float(rng.uniform(2.0, 5.0))
    return boxes


def _car(x: float, y: float, speed: float = 0.0, to_x: float | None = None, start_time: float = 0.0) -> SynthActor:
    end = x if to_x is None else to_x
    return SynthActor(4.0, 1.8, 1.5, Trajectory(((x, y), (end, y)), speed=speed, start_time=start_time))


def street_scene(seed: int = 0, frames: int = 50) -> SynthSceneSpec:
    """Ego drives down a street lined with buildings past one moving and one parked car"""
    rng = np.random.default_rng(seed)
    return SynthSceneSpec(
        boxes=tuple(_street_buildings(-30.0, 90.0, 12.0, rng)),
        actors=(
            _car(float(rng.uniform(25.0, 35.0)), -3.5, float(rng.uniform(5.0, 9.0)), to_x=-40.0),
            _car(float(rng.uniform(8.0, 18.0)), 4.0),
        ),
        ego=Trajectory(((0.0, 0.0), (100.0, 0.0)), speed=float(rng.uniform(3.0, 6.0))),
        frames=frames,
        seed=seed,
        name="street",
    )


def stopped_car_scene(seed: int = 0, frames: int = 50) -> SynthSceneSpec:
    """A parked car and a car driving past it, seen from a slow ego"""
    rng = np.random.default_rng(seed)
    return SynthSceneSpec(
        boxes=tuple(_street_buildings(-30.0, 60.0, 11.0, rng)),
        actors=(
            _car(12.0, 4.0),
            _car(-10.0, -3.5, float(rng.uniform(6.0, 8.0)), to_x=60.0),
        ),
        ego=Trajectory(((0.0, 0.0), (50.0, 0.0)), speed=2.0),
        frames=frames,
        seed=seed,
        name="stopped_car",
    )


def traffic_scene(seed: int = 0, frames: int = 50) -> SynthSceneSpec:
    """Heavy traffic in both directions around the ego"""
    rng = np.random.default_rng(seed)
    actors = []
    for lane, direction in ((-3.5, -1.0), (3.5, 1.0), (-7.0, -1.0), (7.0, 1.0)):
        for _ in range(2):
            x = float(rng.uniform(-10.0, 40.0))
            actors.append(_car(x, lane, float(rng.uniform(4.0, 10.0)), to_x=x + direction * 200.0))
    return SynthSceneSpec(
        boxes=tuple(_street_buildings(-30.0, 90.0, 12.0, rng)),
        actors=tuple(actors),
        ego=Trajectory(((0.0, 0.0), (100.0, 0.0)), speed=4.0),
        frames=frames,
        seed=seed,
        name="traffic",
    )


LOOP_CIRCUIT_FRAMES = 200


def loop_scene(seed: int = 0, frames: int = 260, radius: float = 25.0) -> SynthSceneSpec:
    """
    Closed circuit driven once every LOOP_CIRCUIT_FRAMES frames

    Runs at 5 Hz so one circuit takes 40 s, longer than the default
    loop-closure time gap.
    """
    rng = np.random.default_rng(seed)
    angles = np.linspace(0.0, 2.0 * math.pi, 72, endpoint=False)
    circuit = tuple((radius * math.cos(a), radius * math.sin(a)) for a in angles)
    frame_rate = 5.0
    ego = Trajectory(circuit, closed=True)
    ego = replace(ego, speed=ego.length / (LOOP_CIRCUIT_FRAMES / frame_rate))

    boxes = []
    for a in np.linspace(0.0, 2.0 * math.pi, 18, endpoint=False):
        for ring_radius in (radius - 9.0, radius + 9.0):
            r = ring_radius + float(rng.uniform(-1.5, 1.5))
            size = rng.uniform(2.0, 5.0, size=2)
            height = float(rng.uniform(2.0, 10.0))
            boxes.append(Box.on_ground(r * math.cos(a), r * math.sin(a), float(size[0]), float(size[1]), height))
    actors = (
        _car(-60.0, 2.0, 6.0, to_x=60.0),
        _car(60.0, -4.0, 5.0, to_x=-60.0, start_time=10.0),
    )
    return SynthSceneSpec(
        boxes=tuple(boxes),
        actors=actors,
        ego=ego,
        frame_rate=frame_rate,
        frames=frames,
        seed=seed,
        name="loop",
    )


SCENARIOS: dict[str, Callable[..., SynthSceneSpec]] = {
    "street": street_scene,
    "stopped_car": stopped_car_scene,
    "traffic": traffic_scene,
    "loop": loop_scene,
}


def scenario(name: str, seed: int = 0, frames: int | None = None,
             sensor: SensorModel | None = None, frame_rate: float | None = None) -> SynthSceneSpec:
    """Built-in scene by name with optional overrides"""
    try:
        builder = SCENARIOS[name]
    except KeyError:
        raise DegenerateSpec(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    spec = builder(seed=seed) if frames is None else builder(seed=seed, frames=frames)
    if sensor is not None:
        spec = replace(spec, sensor=sensor)
    if frame_rate is not None and name != "loop":
        spec = replace(spec, frame_rate=frame_rate)
    return spec


def benchmark_specs(seed: int = 0, frames: int = 50) -> tuple[list[SynthSceneSpec], list[SynthSceneSpec]]:
    """Ten training and three held-out scenes with disjoint seeds"""
    kinds = ("street", "traffic", "stopped_car")
    train = [scenario(kinds[i % 3], seed=seed * 100 + i, frames=frames) for i in range(10)]
    held_out = [scenario(kinds[i], seed=seed * 100 + 50 + i, frames=frames) for i in range(3)]
    return train, held_out
