"""Synthetic multi-frame LiDAR world: parametric scenes with moving boxes,
ray-cast scans with hard occlusion, and ground-truth tracks/transforms.

Stands in for a driving dataset at desk scale. Geometry is deliberately
simple (ground plane, wall slabs, object cuboids and vertical cylinders);
that is enough to create occlusion shadows and sparse distant targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FRAME_DT = 0.1  # seconds between frames


class PlacementError(RuntimeError):
    """Raised when random object placement fails after bounded retries."""


@dataclass(frozen=True)
class RigidTransform:
    """3x3 rotation (orthonormal, det +1) plus translation, meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def rot_z(theta: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = math.cos(theta), math.sin(theta)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return RigidTransform(r, np.asarray(translation, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self ∘ other (apply `other` first)."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))

    def to_json(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)],
                "translation": [float(v) for v in self.translation]}

    @staticmethod
    def from_json(d: dict) -> "RigidTransform":
        return RigidTransform(np.asarray(d["rotation"]).reshape(3, 3),
                              np.asarray(d["translation"]))


@dataclass
class ObjectTrack:
    """One annotated object: per-frame sensor-from-object poses plus extent."""

    track_id: int
    extent: tuple              # (l, w, h) meters; cylinders use l == w == 2r
    poses: list                # RigidTransform per frame
    shape: str = "box"         # "box" | "cylinder"

    def __post_init__(self):
        if any(e <= 0 for e in self.extent):
            raise ValueError(f"extent must be positive, got {self.extent}")


@dataclass
class Frame:
    t: int
    ego_pose: RigidTransform   # frame-1-from-frame-t
    points: np.ndarray         # [n, 5]: x, y, z, intensity, timestamp
    fg_labels: np.ndarray      # [n] track id, -1 for background


@dataclass
class SceneSequence:
    frames: list
    tracks: list
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


# ---- scene specification and layout ----

@dataclass(frozen=True)
class SensorSpec:
    rings: int = 32
    elevation_deg: tuple = (-45.0, 8.0)
    azimuth_step_deg: float = 0.4
    max_range: float = 60.0
    height: float = 1.8

    def ray_directions(self) -> np.ndarray:
        elevs = np.radians(np.linspace(self.elevation_deg[0], self.elevation_deg[1],
                                       self.rings))
        n_az = int(round(360.0 / self.azimuth_step_deg))
        azims = np.radians(np.arange(n_az) * self.azimuth_step_deg)
        el, az = np.meshgrid(elevs, azims, indexing="ij")
        ce = np.cos(el)
        d = np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class SceneSpec:
    num_frames: int = 5
    n_boxes: int = 3
    n_cylinders: int = 1
    n_moving: int = 2
    speed_range: tuple = (0.5, 1.0)       # meters per frame, moving objects
    box_length: tuple = (0.8, 2.2)
    box_width: tuple = (0.5, 1.4)
    box_height: tuple = (0.8, 1.8)
    cylinder_radius: tuple = (0.15, 0.35)
    cylinder_height: tuple = (1.0, 2.2)
    world_half: float = 6.0               # placements within [-world_half, world_half]^2
    n_walls: int = 2
    ego_speed: float = 0.15               # meters per frame
    sensor: SensorSpec = SensorSpec()

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if min(self.n_boxes, self.n_cylinders, self.n_walls, self.n_moving) < 0:
            raise ValueError("counts must be non-negative")
        if self.n_moving > self.n_boxes + self.n_cylinders:
            raise ValueError("n_moving exceeds object count")


@dataclass
class SceneObject:
    track_id: int
    shape: str
    extent: tuple
    heading: float
    centers: np.ndarray        # [T, 3] world-frame center per frame
    speed: float


@dataclass
class SceneLayout:
    """Resolved scene: deterministic function of (seed, spec)."""

    spec: SceneSpec
    seed: int
    objects: list
    walls: list                # (center[3], half_extent[3]) axis-aligned slabs
    ego_positions: np.ndarray  # [T, 3] sensor origin per frame (world)
    ego_headings: np.ndarray   # [T]


def _place_disjoint(rng, existing, half, radius, retries=64):
    for _ in range(retries):
        xy = rng.uniform(-half * 0.85, half * 0.85, size=2)
        if math.hypot(xy[0], xy[1]) < 1.5:  # keep clear of the sensor
            continue
        if all(np.hypot(*(xy - e[0])) > radius + e[1] + 0.3 for e in existing):
            return xy
    raise PlacementError(f"could not place object after {retries} retries")


def generate_scene(seed: int, spec: SceneSpec) -> SceneLayout:
    """Deterministically resolve placements, motions, and ego trajectory."""
    rng = np.random.default_rng(seed)
    T = spec.num_frames
    half = spec.world_half

    walls = []
    for i in range(spec.n_walls):
        along_x = bool(rng.integers(0, 2))
        offset = rng.uniform(half * 0.55, half * 0.95) * (1 if rng.integers(0, 2) else -1)
        length = rng.uniform(half * 0.6, half * 1.6)
        height = rng.uniform(1.2, 2.4)
        center_along = rng.uniform(-half * 0.4, half * 0.4)
        if along_x:
            center = np.array([center_along, offset, height / 2])
            half_extent = np.array([length / 2, 0.1, height / 2])
        else:
            center = np.array([offset, center_along, height / 2])
            half_extent = np.array([0.1, length / 2, height / 2])
        walls.append((center, half_extent))

    n_objects = spec.n_boxes + spec.n_cylinders
    moving = set(range(min(spec.n_moving, n_objects)))
    objects = []
    placed = []
    for k in range(n_objects):
        is_box = k < spec.n_boxes
        if is_box:
            extent = (rng.uniform(*spec.box_length), rng.uniform(*spec.box_width),
                      rng.uniform(*spec.box_height))
            radius = math.hypot(extent[0], extent[1]) / 2
        else:
            r = rng.uniform(*spec.cylinder_radius)
            h = rng.uniform(*spec.cylinder_height)
            extent = (2 * r, 2 * r, h)
            radius = r
        xy = _place_disjoint(rng, placed, half, radius)
        placed.append((xy, radius))
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*spec.speed_range) if k in moving else 0.0
        direction = rng.uniform(-math.pi, math.pi)
        start = np.array([xy[0], xy[1], extent[2] / 2])
        if speed > 0.0:
            step = speed * np.array([math.cos(direction), math.sin(direction), 0.0])
            end = start + (T - 1) * step
            if np.any(np.abs(end[:2]) > half * 0.95):  # head inward instead of clipping
                step = -step
            centers = start[None, :] + np.arange(T)[:, None] * step
            centers[:, :2] = np.clip(centers[:, :2], -half * 0.95, half * 0.95)
        else:
            centers = np.repeat(start[None, :], T, axis=0)
        objects.append(SceneObject(k, "box" if is_box else "cylinder", extent,
                                   heading, centers, speed))

    ego_heading = rng.uniform(-math.pi, math.pi)
    step = spec.ego_speed * np.array([math.cos(ego_heading), math.sin(ego_heading), 0.0])
    ego_positions = np.zeros((T, 3))
    ego_positions[:, :] = np.arange(T)[:, None] * step
    ego_positions[:, 2] = spec.sensor.height
    return SceneLayout(spec, seed, objects, walls, ego_positions,
                       np.full(T, 0.0))


# ---- ray casting ----

def _ray_plane_z0(origin, dirs, bound):
    """Hits on the ground plane z=0 clipped to |x|,|y| <= bound."""
    t = np.full(len(dirs), np.inf)
    dz = dirs[:, 2]
    moving = dz < -1e-12
    tc = np.where(moving, -origin[2] / np.where(moving, dz, 1.0), np.inf)
    hit = origin[None, :] + tc[:, None] * dirs
    ok = moving & (tc > 1e-9) & (np.abs(hit[:, 0]) <= bound) & (np.abs(hit[:, 1]) <= bound)
    t[ok] = tc[ok]
    normals = np.tile(np.array([0.0, 0.0, 1.0]), (len(dirs), 1))
    return t, normals


def _ray_box(origin, dirs, center, half_extent, yaw):
    """Slab test against a z-yawed box; returns (t, outward normals)."""
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origin - center) @ rot          # into box frame (rot^T applied from right)
    d = dirs @ rot
    he = np.asarray(half_extent)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-he - o) * inv
        t2 = (he - o) * inv
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    # Degenerate axes (d==0): ray parallel to the slab; inside iff |o| <= he.
    parallel = np.abs(d) < 1e-15
    inside = np.abs(o) <= he
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_enter = near.max(axis=1)
    t_exit = far.min(axis=1)
    ok = (t_enter <= t_exit) & (t_exit > 1e-9) & (t_enter > 1e-9)
    t = np.where(ok, t_enter, np.inf)
    axis = np.argmax(near, axis=1)
    sign = -np.sign(np.take_along_axis(d, axis[:, None], axis=1))[:, 0]
    normals_local = np.zeros((len(dirs), 3))
    normals_local[np.arange(len(dirs)), axis] = np.where(sign == 0, 1.0, sign)
    normals = normals_local @ rot.T
    return t, normals


def _ray_cylinder(origin, dirs, center_xy, radius, z0, z1):
    """Side-surface hits of a vertical cylinder."""
    ox = origin[0] - center_xy[0]
    oy = origin[1] - center_xy[1]
    dx, dy = dirs[:, 0], dirs[:, 1]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    cc = ox * ox + oy * oy - radius * radius
    disc = b * b - 4.0 * a * cc
    t = np.full(len(dirs), np.inf)
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for root in ((-b - sq), (-b + sq)):
        tc = np.where(ok, root / (2.0 * a), np.inf)
        z = origin[2] + tc * dirs[:, 2]
        good = ok & (tc > 1e-9) & (z >= z0) & (z <= z1) & (tc < t)
        t = np.where(good, tc, t)
    n = np.zeros((len(dirs), 3))
    finite = np.isfinite(t)
    if np.any(finite):
        hit = origin[None, :] + t[finite, None] * dirs[finite]
        radial = hit[:, :2] - np.asarray(center_xy)[None, :]
        norm = np.linalg.norm(radial, axis=1, keepdims=True)
        n[finite, :2] = radial / np.where(norm > 0, norm, 1.0)
    return t, n


def simulate_lidar_frame(layout: SceneLayout, frame_t: int):
    """Cast one sweep: nearest surface per ray only (hard occlusion).

    Returns (points [n,5] in the frame's sensor coordinates, fg_labels [n]).
    Point features are x, y, z, Lambertian-cosine intensity, timestamp.
    """
    spec = layout.spec
    origin = layout.ego_positions[frame_t]
    if origin[2] <= 0:
        raise ValueError("sensor must sit above the ground plane")
    dirs = spec.sensor.ray_directions()
    heading = layout.ego_headings[frame_t]
    if heading != 0.0:
        rot = RigidTransform.rot_z(heading).rotation
        dirs = dirs @ rot.T
    best_t = np.full(len(dirs), np.inf)
    best_n = np.zeros((len(dirs), 3))
    best_label = np.full(len(dirs), -1, dtype=np.int64)

    def consider(t, n, label):
        closer = t < best_t
        best_t[closer] = t[closer]
        best_n[closer] = n[closer]
        best_label[closer] = label

    bound = spec.world_half * 1.05
    t, n = _ray_plane_z0(origin, dirs, bound)
    consider(t, n, -1)
    for center, half_extent in layout.walls:
        t, n = _ray_box(origin, dirs, center, half_extent, 0.0)
        consider(t, n, -1)
    for obj in layout.objects:
        center = obj.centers[frame_t]
        if obj.shape == "box":
            he = np.asarray(obj.extent) / 2.0
            t, n = _ray_box(origin, dirs, center, he, obj.heading)
        else:
            r = obj.extent[0] / 2.0
            t, n = _ray_cylinder(origin, dirs, center[:2], r,
                                 center[2] - obj.extent[2] / 2.0,
                                 center[2] + obj.extent[2] / 2.0)
        consider(t, n, obj.track_id)

    hit = best_t <= spec.sensor.max_range
    t = best_t[hit]
    d = dirs[hit]
    world = origin[None, :] + t[:, None] * d
    intensity = np.abs(np.sum(-d * best_n[hit], axis=1))
    intensity = np.clip(intensity, 0.0, 1.0)
    # into this frame's sensor coordinates
    local = world - origin
    if heading != 0.0:
        local = local @ RigidTransform.rot_z(heading).rotation
    ts = np.full(len(local), frame_t * FRAME_DT)
    points = np.concatenate([local, intensity[:, None], ts[:, None]], axis=1)
    return points, best_label[hit]


def _ego_pose(layout: SceneLayout, frame_t: int) -> RigidTransform:
    """tr_(t,1): frame-1 coordinates of a frame-t point."""
    e0 = RigidTransform.rot_z(layout.ego_headings[0], layout.ego_positions[0])
    et = RigidTransform.rot_z(layout.ego_headings[frame_t], layout.ego_positions[frame_t])
    return e0.inverse().compose(et)


def render_sequence(layout: SceneLayout) -> SceneSequence:
    """Ray-cast every frame and package ground truth tracks/poses."""
    T = layout.spec.num_frames
    frames = []
    for t in range(T):
        points, labels = simulate_lidar_frame(layout, t)
        frames.append(Frame(t, _ego_pose(layout, t), points, labels))
    tracks = []
    for obj in layout.objects:
        poses = []
        for t in range(T):
            world_from_obj = RigidTransform.rot_z(obj.heading, obj.centers[t])
            ego = RigidTransform.rot_z(layout.ego_headings[t], layout.ego_positions[t])
            poses.append(ego.inverse().compose(world_from_obj))
        tracks.append(ObjectTrack(obj.track_id, obj.extent, poses, obj.shape))
    meta = {"seed": layout.seed, "num_frames": T,
            "sensor": {"rings": layout.spec.sensor.rings,
                       "azimuth_step_deg": layout.spec.sensor.azimuth_step_deg,
                       "max_range": layout.spec.sensor.max_range}}
    return SceneSequence(frames, tracks, meta)


# ---- serialization ----

def sequence_to_json(seq: SceneSequence) -> dict:
    return {
        "meta": seq.meta,
        "frames": [
            {
                "t": f.t,
                "ego_pose": f.ego_pose.to_json(),
                "points": [[float(v) for v in row] for row in f.points],
                "fg_labels": [int(v) for v in f.fg_labels],
            }
            for f in seq.frames
        ],
        "tracks": [
            {
                "k": tr.track_id,
                "extent": [float(v) for v in tr.extent],
                "shape": tr.shape,
                "poses": [p.to_json() for p in tr.poses],
            }
            for tr in seq.tracks
        ],
    }


def sequence_from_json(d: dict) -> SceneSequence:
    frames = [
        Frame(int(f["t"]), RigidTransform.from_json(f["ego_pose"]),
              np.asarray(f["points"], dtype=np.float64).reshape(-1, 5),
              np.asarray(f["fg_labels"], dtype=np.int64))
        for f in d["frames"]
    ]
    tracks = [
        ObjectTrack(int(tr["k"]), tuple(tr["extent"]),
                    [RigidTransform.from_json(p) for p in tr["poses"]],
                    tr.get("shape", "box"))
        for tr in d["tracks"]
    ]
    return SceneSequence(frames, tracks, d.get("meta", {}))


def save_sequence(seq: SceneSequence, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(sequence_to_json(seq), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")
    except OSError as e:
        raise OSError(f"writing scene sequence to {path}: {e}") from e


def load_sequence(path) -> SceneSequence:
    try:
        with open(path) as fh:
            return sequence_from_json(json.load(fh))
    except OSError as e:
        raise OSError(f"reading scene sequence from {path}: {e}") from e
