"""Synthetic planar scenes, trajectories and noisy LiDAR / camera measurements.

Scenario files are YAML; traces are dumped one YAML flow mapping per line,
the first line holding the scenario itself so a trace replays on its own.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.spatial.transform import Rotation, Slerp

from lib import rng
from lib.errors import ConfigError, NoVisiblePlane, ScenarioLoadError
from lib.measurements import (
    MIN_DEPTH,
    LidarBatch,
    PointPlaneFactor,
    VisualBatch,
    VisualFactor,
    linearize_point_plane,
    linearize_visual_robust,
)
from lib.overrides import apply_overrides
from lib.records import float_list, flow_line
from lib.state import Pose, boxminus, boxplus
from lib.utils import open_output

logger = logging.getLogger(__name__)

RAY_PATTERNS = ("cone", "surface")
MIN_INCIDENCE_COS = 0.1
# declared noise of factors generated with zero sigma
NOISE_FLOOR = 1e-4

_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)


def _vec3(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be 3 finite numbers")
    return arr


@dataclass(frozen=True, eq=False)
class Plane:
    """Rectangle on the plane normal . x = offset, centred at `center`.

    half_size holds the half extents along u_axis and normal x u_axis; either
    may be infinite.
    """
    normal: np.ndarray
    center: np.ndarray
    u_axis: np.ndarray
    half_size: Tuple[float, float] = (math.inf, math.inf)
    tag: str = ""

    def __post_init__(self):
        normal = _vec3(self.normal, "plane normal")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
            raise ConfigError(f"Plane normal must be unit length, got {normal.tolist()}")
        normal = normal / np.linalg.norm(normal)
        u_axis = _vec3(self.u_axis, "plane u_axis")
        u_axis = u_axis - (u_axis @ normal) * normal
        if np.linalg.norm(u_axis) < 1e-9:
            raise ConfigError("Plane u_axis must not be parallel to the normal")
        half = tuple(float(h) for h in self.half_size)
        if len(half) != 2 or not all(h > 0 for h in half):
            raise ConfigError("Plane half_size must be two positive extents")
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "center", _vec3(self.center, "plane center"))
        object.__setattr__(self, "u_axis", u_axis / np.linalg.norm(u_axis))
        object.__setattr__(self, "half_size", half)
        object.__setattr__(self, "tag", str(self.tag or ""))

    @property
    def offset(self) -> float:
        return float(self.normal @ self.center)

    @property
    def v_axis(self) -> np.ndarray:
        return np.cross(self.normal, self.u_axis)

    @property
    def finite(self) -> bool:
        return all(math.isfinite(h) for h in self.half_size)

    @property
    def area(self) -> float:
        return 4.0 * self.half_size[0] * self.half_size[1]

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = np.asarray(points) - self.center
        return (np.abs(local @ self.u_axis) <= self.half_size[0]) & (np.abs(local @ self.v_axis) <= self.half_size[1])


@dataclass(frozen=True, eq=False)
class Scene:
    planes: Tuple[Plane, ...]
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        planes = tuple(self.planes)
        if not planes:
            raise ConfigError("Scene needs at least one plane")
        landmarks = np.array(self.landmarks, dtype=float).reshape(-1, 3)
        landmarks.flags.writeable = False
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "landmarks", landmarks)


@dataclass(frozen=True)
class Waypoint:
    timestamp: float
    pose: Pose


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    scene: Scene
    trajectory: Tuple[Waypoint, ...]
    name: str = "custom"
    lidar_rate: float = 10.0  # Hz
    cam_rate: float = 10.0  # Hz
    lidar_sigma: float = 0.02  # m
    pixel_sigma: float = 0.003  # normalized image units
    points_per_frame: int = 300
    seed: int = 0
    lidar_fov_deg: float = 70.0
    cam_fov_deg: float = 90.0
    lidar_max_range: float = 50.0  # m
    cam_max_range: float = 30.0  # m
    normal_sigma: float = 0.002  # rad
    ray_pattern: str = "cone"
    hidden_tags: Tuple[str, ...] = ()
    motion_sigma_rot: float = 0.001  # rad per frame
    motion_sigma_trans: float = 0.01  # m per frame
    odometry_scale_bias: float = 0.05
    visual_outlier_rate: float = 0.0
    visual_outlier_sigma: float = 0.05

    def __post_init__(self):
        trajectory = tuple(self.trajectory)
        if len(trajectory) < 2:
            raise ConfigError("Trajectory needs at least two waypoints")
        stamps = np.array([w.timestamp for w in trajectory], dtype=float)
        if np.any(np.diff(stamps) <= 0):
            raise ConfigError("Trajectory timestamps must be strictly increasing")
        if not (self.lidar_rate > 0 and self.cam_rate > 0):
            raise ConfigError("Sensor rates must be positive")
        for name in ("lidar_sigma", "pixel_sigma", "normal_sigma", "motion_sigma_rot", "motion_sigma_trans",
                     "visual_outlier_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.points_per_frame < 1:
            raise ConfigError("points_per_frame must be at least 1")
        if not 0.0 <= self.visual_outlier_rate <= 1.0:
            raise ConfigError("visual_outlier_rate must lie in [0, 1]")
        if not (0 < self.lidar_fov_deg < 180 and 0 < self.cam_fov_deg < 180):
            raise ConfigError("Fields of view must lie in (0, 180) degrees")
        if self.ray_pattern not in RAY_PATTERNS:
            raise ConfigError(f"ray_pattern must be one of {RAY_PATTERNS}")
        object.__setattr__(self, "trajectory", trajectory)
        object.__setattr__(self, "hidden_tags", tuple(str(t) for t in self.hidden_tags))
        object.__setattr__(self, "points_per_frame", int(self.points_per_frame))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def visible_planes(self) -> List[Plane]:
        return [p for p in self.scene.planes if p.tag not in self.hidden_tags]


@dataclass(frozen=True, eq=False)
class Frame:
    index: int
    timestamp: float
    truth: Pose
    lin_pose: Pose
    motion_delta: np.ndarray
    lidar_factors: Optional[Tuple[PointPlaneFactor, ...]]
    visual_factors: Optional[Tuple[VisualFactor, ...]]
    lidar: Optional[LidarBatch]
    visual: Optional[VisualBatch]


@dataclass(frozen=True, eq=False)
class ScenarioTrace:
    spec: ScenarioSpec
    frames: Tuple[Frame, ...]

    def __len__(self):
        return len(self.frames)


def frame_times(spec: ScenarioSpec) -> np.ndarray:
    start, end = spec.trajectory[0].timestamp, spec.trajectory[-1].timestamp
    count = int(math.floor((end - start) * spec.lidar_rate + 1e-9)) + 1
    return start + np.arange(count) / spec.lidar_rate


def interpolate_poses(spec: ScenarioSpec, times: np.ndarray) -> List[Pose]:
    stamps = np.array([w.timestamp for w in spec.trajectory])
    rotations = Rotation.from_matrix(np.stack([w.pose.rotation for w in spec.trajectory]))
    positions = np.stack([w.pose.translation for w in spec.trajectory])
    slerp = Slerp(stamps, rotations)
    clipped = np.clip(times, stamps[0], stamps[-1])
    matrices = slerp(clipped).as_matrix()
    translated = np.column_stack([np.interp(clipped, stamps, positions[:, i]) for i in range(3)])
    return [Pose(m, t) for m, t in zip(matrices, translated)]


def _has_camera(spec: ScenarioSpec, index: int) -> bool:
    if index == 0:
        return True
    ratio = spec.cam_rate / spec.lidar_rate
    return math.floor(index * ratio + 1e-9) != math.floor((index - 1) * ratio + 1e-9)


def _intersect(planes: Sequence[Plane], origin: np.ndarray, directions: np.ndarray,
               max_range: float) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest plane hit per ray: (range, plane index); range is inf on a miss."""
    normals = np.stack([p.normal for p in planes])
    offsets = np.array([p.offset for p in planes])
    denom = directions @ normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ranges = (offsets - normals @ origin) / denom
        valid = (np.abs(denom) > 1e-12) & (ranges > 1e-6) & (ranges <= max_range)
        hits = origin + ranges[..., None] * directions[:, None, :]
    for j, plane in enumerate(planes):
        if not plane.finite:
            continue
        valid[:, j] &= plane.contains(np.where(valid[:, j, None], hits[:, j], plane.center))
    ranges = np.where(valid, ranges, np.inf)
    index = np.argmin(ranges, axis=1)
    return ranges[np.arange(len(directions)), index], index


def _cone_rays(spec: ScenarioSpec, pose: Pose, gen: np.random.Generator):
    half = math.radians(spec.lidar_fov_deg / 2.0)
    n = spec.points_per_frame
    cos_t = gen.uniform(math.cos(half), 1.0, n)
    phi = gen.uniform(0.0, 2.0 * math.pi, n)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    body = np.column_stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t])
    planes = spec.visible_planes
    ranges, index = _intersect(planes, pose.translation, body @ pose.rotation.T, spec.lidar_max_range)
    return body, ranges, index


def _split_by_area(total: int, areas: np.ndarray) -> np.ndarray:
    share = total * areas / areas.sum()
    counts = np.floor(share).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(share - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def _surface_rays(spec: ScenarioSpec, pose: Pose, gen: np.random.Generator):
    planes = spec.visible_planes
    finite = [j for j, p in enumerate(planes) if p.finite]
    if not finite:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=int)
    counts = _split_by_area(spec.points_per_frame, np.array([planes[j].area for j in finite]))
    targets, owners = [], []
    for j, count in zip(finite, counts):
        plane = planes[j]
        s = gen.uniform(-1.0, 1.0, (count, 2)) * np.array(plane.half_size)
        targets.append(plane.center + s[:, :1] * plane.u_axis + s[:, 1:] * plane.v_axis)
        owners.append(np.full(count, j))
    targets = np.vstack(targets)
    owners = np.concatenate(owners)

    offsets = targets - pose.translation
    distance = np.linalg.norm(offsets, axis=1)
    world = offsets / distance[:, None]
    body = world @ pose.rotation
    ranges, index = _intersect(planes, pose.translation, world, spec.lidar_max_range)
    in_view = body[:, 2] >= math.cos(math.radians(spec.lidar_fov_deg / 2.0))
    # the sampled patch must be the first surface along its ray
    unoccluded = (index == owners) & np.isclose(ranges, distance, rtol=1e-9, atol=1e-9)
    ranges = np.where(in_view & unoccluded, ranges, np.inf)
    return body, ranges, owners


def lidar_factors(spec: ScenarioSpec, pose: Pose, frame: int) -> Tuple[PointPlaneFactor, ...]:
    """Point-to-plane factors seen from `pose`; raises NoVisiblePlane if nothing is hit."""
    if not spec.visible_planes:
        raise NoVisiblePlane(frame)
    gen = rng.stream(spec.seed, frame, rng.LIDAR)
    if spec.ray_pattern == "cone":
        body, ranges, index = _cone_rays(spec, pose, gen)
    else:
        body, ranges, index = _surface_rays(spec, pose, gen)
    planes = spec.visible_planes
    hit = np.isfinite(ranges)
    if not np.any(hit):
        raise NoVisiblePlane(frame)

    body, ranges, index = body[hit], ranges[hit], index[hit]
    normals = np.stack([planes[j].normal for j in index])
    world = body @ pose.rotation.T
    incidence = np.abs(np.einsum("ij,ij->i", world, normals))
    grazing = incidence < MIN_INCIDENCE_COS
    if np.all(grazing):
        raise NoVisiblePlane(frame)
    body, ranges, normals, incidence = body[~grazing], ranges[~grazing], normals[~grazing], incidence[~grazing]

    # range noise along the ray; sigma / cos keeps the point-to-plane residual at sigma
    measured = ranges + gen.normal(0.0, 1.0, len(ranges)) * spec.lidar_sigma / incidence
    points_body = body * measured[:, None]
    true_hits = pose.translation + (body * ranges[:, None]) @ pose.rotation.T

    tilt = rng.stream(spec.seed, frame, rng.NORMALS).normal(0.0, spec.normal_sigma, normals.shape)
    tilt -= np.einsum("ij,ij->i", tilt, normals)[:, None] * normals
    tilted = normals + tilt
    tilted /= np.linalg.norm(tilted, axis=1)[:, None]
    offsets = np.einsum("ij,ij->i", tilted, true_hits)

    sigma = max(spec.lidar_sigma, NOISE_FLOOR)
    return tuple(PointPlaneFactor(p, n, d, sigma) for p, n, d in zip(points_body, tilted, offsets))


def visual_factors(spec: ScenarioSpec, pose: Pose, frame: int) -> Tuple[VisualFactor, ...]:
    landmarks = spec.scene.landmarks
    if not len(landmarks):
        return ()
    cam = pose.to_body(landmarks)
    distance = np.linalg.norm(cam, axis=1)
    depth = cam[:, 2]
    visible = (depth > MIN_DEPTH) & (distance <= spec.cam_max_range)
    visible &= depth >= distance * math.cos(math.radians(spec.cam_fov_deg / 2.0))
    if not np.any(visible):
        return ()
    chosen = landmarks[visible]
    cam = cam[visible]
    pixels = cam[:, :2] / cam[:, 2:3]
    pixels = pixels + rng.stream(spec.seed, frame, rng.VISUAL).normal(0.0, spec.pixel_sigma, pixels.shape)
    if spec.visual_outlier_rate > 0:
        gen = rng.stream(spec.seed, frame, rng.OUTLIER)
        corrupt = gen.random(len(pixels)) < spec.visual_outlier_rate
        pixels[corrupt] += gen.normal(0.0, spec.visual_outlier_sigma, (int(corrupt.sum()), 2))
    sigma = max(spec.pixel_sigma, NOISE_FLOOR)
    return tuple(VisualFactor(lm, px, sigma) for lm, px in zip(chosen, pixels))


def _motion_delta(spec: ScenarioSpec, truth: Pose, previous: Optional[Pose], frame: int) -> np.ndarray:
    if previous is None:
        return np.zeros(6)
    delta = boxminus(truth, previous)
    gen = rng.stream(spec.seed, frame, rng.MOTION)
    delta[:3] += gen.normal(0.0, spec.motion_sigma_rot, 3)
    delta[3:] = delta[3:] * (1.0 + spec.odometry_scale_bias) + gen.normal(0.0, spec.motion_sigma_trans, 3)
    return delta


def _linearization_pose(spec: ScenarioSpec, truth: Pose, frame: int) -> Pose:
    gen = rng.stream(spec.seed, frame, rng.LINEARIZATION)
    noise = np.concatenate([
        gen.normal(0.0, spec.motion_sigma_rot, 3),
        gen.normal(0.0, spec.motion_sigma_trans, 3),
    ])
    return boxplus(truth, noise)


def build_frame(spec: ScenarioSpec, index: int, timestamp: float, truth: Pose, previous: Optional[Pose]) -> Frame:
    try:
        lidar = lidar_factors(spec, truth, index)
    except NoVisiblePlane as e:
        logger.warning("%s; LiDAR data absent for this frame", e)
        lidar = None
    visual = visual_factors(spec, truth, index) if _has_camera(spec, index) else None
    lin_pose = _linearization_pose(spec, truth, index)
    return make_frame(index, timestamp, truth, lin_pose, _motion_delta(spec, truth, previous, index), lidar, visual)


def make_frame(index, timestamp, truth, lin_pose, motion_delta, lidar, visual) -> Frame:
    return Frame(
        index=index,
        timestamp=float(timestamp),
        truth=truth,
        lin_pose=lin_pose,
        motion_delta=np.asarray(motion_delta, dtype=float),
        lidar_factors=lidar,
        visual_factors=visual,
        lidar=linearize_point_plane(lidar, lin_pose) if lidar else None,
        visual=linearize_visual_robust(visual, lin_pose) if visual is not None else None,
    )


def generate(spec: ScenarioSpec) -> ScenarioTrace:
    times = frame_times(spec)
    truths = interpolate_poses(spec, times)
    frames = []
    for k, (t, truth) in enumerate(zip(times, truths)):
        frames.append(build_frame(spec, k, t, truth, truths[k - 1] if k else None))
    logger.info("Generated %d frames for scenario %s", len(frames), spec.name)
    return ScenarioTrace(spec, tuple(frames))


# --- scenario files ---------------------------------------------------------

_SPEC_SCALARS = [f.name for f in fields(ScenarioSpec) if f.name not in ("scene", "trajectory")]


def _pose_to_dict(pose: Pose) -> dict:
    return {"rotation": float_list(pose.rotation), "position": float_list(pose.translation)}


def _pose_from_dict(data: dict) -> Pose:
    position = data["position"]
    if "look_at" in data:
        return Pose.look_at(position, data["look_at"], data.get("up", (0.0, 0.0, 1.0)))
    if "rotvec" in data:
        return Pose.from_rotvec(data["rotvec"], position)
    return Pose(np.array(data["rotation"], dtype=float).reshape(3, 3), position)


def spec_to_dict(spec: ScenarioSpec) -> dict:
    data = {
        "scene": {
            "planes": [
                {
                    "normal": float_list(p.normal),
                    "center": float_list(p.center),
                    "u_axis": float_list(p.u_axis),
                    "half_size": list(p.half_size),
                    "tag": p.tag,
                }
                for p in spec.scene.planes
            ],
            "landmarks": [float_list(lm) for lm in spec.scene.landmarks],
        },
        "trajectory": [dict(t=float(w.timestamp), **_pose_to_dict(w.pose)) for w in spec.trajectory],
    }
    for name in _SPEC_SCALARS:
        value = getattr(spec, name)
        data[name] = list(value) if isinstance(value, tuple) else value
    return data


def spec_from_dict(data: dict) -> ScenarioSpec:
    if not isinstance(data, dict):
        raise ScenarioLoadError("Scenario must be a mapping")
    unknown = set(data) - set(_SPEC_SCALARS) - {"scene", "trajectory"}
    if unknown:
        raise ScenarioLoadError(f"Unknown scenario field(s): {', '.join(sorted(unknown))}")
    try:
        scene_data = data["scene"]
        planes = [
            Plane(p["normal"], p["center"], p["u_axis"], tuple(p.get("half_size", (math.inf, math.inf))),
                  p.get("tag", ""))
            for p in scene_data["planes"]
        ]
        scene = Scene(tuple(planes), scene_data.get("landmarks") or np.zeros((0, 3)))
        trajectory = tuple(Waypoint(float(w["t"]), _pose_from_dict(w)) for w in data["trajectory"])
        scalars = {name: data[name] for name in _SPEC_SCALARS if name in data}
        if "hidden_tags" in scalars:
            scalars["hidden_tags"] = tuple(scalars["hidden_tags"] or ())
        return ScenarioSpec(scene=scene, trajectory=trajectory, **scalars)
    except ScenarioLoadError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioLoadError(f"Invalid scenario: {e}") from e


def load_scenario_file(path: str, overrides: Sequence[str] = ()) -> ScenarioSpec:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ScenarioLoadError(f"Failed to read scenario {path}: {e}") from e
    if overrides:
        data = apply_overrides(data, overrides)
    spec = spec_from_dict(data)
    if spec.name == "custom":
        spec = replace(spec, name=os.path.splitext(os.path.basename(path))[0])
    return spec


def dump_scenario_file(spec: ScenarioSpec, path: str) -> None:
    with open_output(path) as f:
        yaml.safe_dump(spec_to_dict(spec), f, sort_keys=False)


# --- trace dump -------------------------------------------------------------

def _frame_to_dict(frame: Frame) -> dict:
    lidar = None
    if frame.lidar_factors is not None:
        lidar = [
            float_list(f.point_body) + float_list(f.plane_normal) + [f.plane_offset, f.noise_sigma]
            for f in frame.lidar_factors
        ]
    visual = None
    if frame.visual_factors is not None:
        visual = [float_list(f.landmark_world) + float_list(f.pixel_obs) + [f.noise_sigma]
                  for f in frame.visual_factors]
    return {
        "frame": frame.index,
        "t": frame.timestamp,
        "truth": _pose_to_dict(frame.truth),
        "lin": _pose_to_dict(frame.lin_pose),
        "delta": float_list(frame.motion_delta),
        "lidar": lidar,
        "visual": visual,
    }


def _frame_from_dict(data: dict) -> Frame:
    lidar = data.get("lidar")
    visual = data.get("visual")
    if lidar is not None:
        lidar = tuple(PointPlaneFactor(r[0:3], r[3:6], r[6], r[7]) for r in lidar)
    if visual is not None:
        visual = tuple(VisualFactor(r[0:3], r[3:5], r[5]) for r in visual)
    return make_frame(
        int(data["frame"]), data["t"], _pose_from_dict(data["truth"]), _pose_from_dict(data["lin"]),
        data["delta"], lidar, visual,
    )


def dump_trace(trace: ScenarioTrace, path: str) -> None:
    with open_output(path) as f:
        f.write(flow_line({"scenario": spec_to_dict(trace.spec)}))
        for frame in trace.frames:
            f.write(flow_line(_frame_to_dict(frame)))


def load_trace(path: str) -> ScenarioTrace:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f if line.strip()]
    except OSError as e:
        raise ScenarioLoadError(f"Failed to read trace {path}: {e}") from e
    if not lines:
        raise ScenarioLoadError(f"Trace {path} is empty")
    try:
        header = yaml.load(lines[0], Loader=_Loader)
        spec = spec_from_dict(header["scenario"])
        frames = tuple(_frame_from_dict(yaml.load(line, Loader=_Loader)) for line in lines[1:])
    except ScenarioLoadError:
        raise
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as e:
        raise ScenarioLoadError(f"Invalid trace {path}: {e}") from e
    return ScenarioTrace(spec, frames)
