"""Canonical scenarios.

SingleWall, WallAndGround and Corridor leave the LiDAR unable to constrain at
least one direction; OpenRoom constrains everything; Fig3Coupled is a static
view of two small point clusters on one wall (cluster B tagged "B") for
comparing the coupled and block-wise verdicts. PatchRetreat, PillarRetreat and
LedgeRetreat back away from a single off-axis patch, the motion in which the
coupled verdict flags depth and the block-wise ones do not.
"""
from dataclasses import replace
from functools import partial

import numpy as np

from lib.errors import UnknownScenario
from lib.simulator import Plane, ScenarioSpec, Scene, Waypoint
from lib.state import Pose

X = (1.0, 0.0, 0.0)
Y = (0.0, 1.0, 0.0)
Z = (0.0, 0.0, 1.0)


def _grid(xs, ys, zs) -> np.ndarray:
    return np.array([(x, y, z) for x in xs for y in ys for z in zs], dtype=float)


def _straight(start, end, duration: float, view_offset) -> tuple:
    """Constant-orientation straight line looking along view_offset."""
    start, end = np.asarray(start, float), np.asarray(end, float)
    view_offset = np.asarray(view_offset, float)
    return (
        Waypoint(0.0, Pose.look_at(start, start + view_offset)),
        Waypoint(duration, Pose.look_at(end, end + view_offset)),
    )


def single_wall() -> ScenarioSpec:
    scene = Scene(
        planes=(Plane((0.0, -1.0, 0.0), (0.0, 6.0, 0.0), X, tag="wall"),),
        landmarks=_grid(range(-10, 31), [6.0], [-1.5, -0.5, 0.5, 1.5]),
    )
    return ScenarioSpec(
        scene=scene,
        trajectory=_straight((0.0, 0.0, 0.0), (10.0, 0.0, 0.0), 10.0, (0.0, 6.0, 0.0)),
        name="SingleWall",
    )


def wall_and_ground() -> ScenarioSpec:
    scene = Scene(
        planes=(
            Plane((0.0, -1.0, 0.0), (0.0, 4.0, 0.0), X, tag="wall"),
            Plane(Z, (0.0, 0.0, 0.0), X, tag="ground"),
        ),
        landmarks=np.vstack([
            _grid(range(-10, 31), [4.0], [0.5, 1.5, 2.5]),
            _grid(range(-10, 31, 2), [1.0, 2.0, 3.0], [0.0]),
        ]),
    )
    return ScenarioSpec(
        scene=scene,
        trajectory=_straight((0.0, 0.0, 1.5), (15.0, 0.0, 1.5), 15.0, (0.0, 4.0, -1.2)),
        name="WallAndGround",
    )


def corridor() -> ScenarioSpec:
    half_length, center_x = 50.0, 30.0
    scene = Scene(
        planes=(
            Plane((0.0, -1.0, 0.0), (center_x, 1.5, 1.5), X, (half_length, 1.5), tag="left"),
            Plane(Y, (center_x, -1.5, 1.5), X, (half_length, 1.5), tag="right"),
            Plane(Z, (center_x, 0.0, 0.0), X, (half_length, 1.5), tag="ground"),
        ),
        landmarks=_grid(range(-20, 81), [-1.5, 1.5], [0.8, 1.6, 2.4]),
    )
    return ScenarioSpec(
        scene=scene,
        trajectory=_straight((0.0, 0.0, 1.2), (20.0, 0.0, 1.2), 20.0, (10.0, 0.0, -1.2)),
        name="Corridor",
    )


def open_room() -> ScenarioSpec:
    walls = []
    for axis, sign in ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)):
        normal = np.zeros(3)
        normal[axis] = -sign
        center = np.array([0.0, 0.0, 1.5])
        center[axis] = 5.0 * sign
        u_axis = Y if axis == 0 else X
        walls.append(Plane(normal, center, u_axis, (5.0, 1.5), tag="wall"))
    ground = Plane(Z, (0.0, 0.0, 0.0), X, (5.0, 5.0), tag="ground")
    ring = np.arange(-4.5, 5.0, 1.0)
    heights = [0.6, 1.5, 2.4]
    landmarks = np.vstack([
        _grid([5.0], ring, heights), _grid([-5.0], ring, heights),
        _grid(ring, [5.0], heights), _grid(ring, [-5.0], heights),
    ])
    target = np.array([5.0, 5.0, 0.8])
    trajectory = []
    for second in range(61):
        angle = 2.0 * np.pi * second / 60.0
        position = np.array([0.5 * np.cos(angle), 0.5 * np.sin(angle), 1.5])
        trajectory.append(Waypoint(float(second), Pose.look_at(position, target)))
    return ScenarioSpec(
        scene=Scene(tuple(walls) + (ground,), landmarks),
        trajectory=tuple(trajectory),
        name="OpenRoom",
    )


def fig3_coupled() -> ScenarioSpec:
    half = (0.05, 0.05)
    scene = Scene(
        planes=(
            Plane((0.0, -1.0, 0.0), (3.0, 5.0, 0.0), X, half, tag="A"),
            Plane((0.0, -1.0, 0.0), (-3.0, 5.0, 0.0), X, half, tag="B"),
        ),
        landmarks=_grid(range(-4, 5), [5.0], [-2.0, -1.0, 0.0, 1.0, 2.0]),
    )
    return ScenarioSpec(
        scene=scene,
        trajectory=_straight((0.0, 0.0, 0.0), (0.0, 0.0, 0.2), 2.0, (0.0, 5.0, 0.0)),
        name="Fig3Coupled",
        ray_pattern="surface",
        lidar_sigma=0.03,
        lidar_fov_deg=80.0,
    )


def _coupled_retreat(name: str, center, half_size) -> ScenarioSpec:
    """One small patch well off the optical axis while backing away from it.

    Depth along the wall normal is only observable together with the rotation
    about the patch lever arm, so the translation block alone looks well
    constrained along y while its Schur complement does not.
    """
    scene = Scene(
        planes=(Plane((0.0, -1.0, 0.0), center, X, half_size, tag="patch"),),
        landmarks=_grid(range(-4, 5), [5.0], [-2.0, -1.0, 0.0, 1.0, 2.0]),
    )
    return ScenarioSpec(
        scene=scene,
        trajectory=_straight((0.0, 0.0, 0.0), (0.0, -3.0, 0.0), 10.0, (0.0, 5.0, 0.0)),
        name=name,
        ray_pattern="surface",
        lidar_sigma=0.03,
        lidar_fov_deg=80.0,
        motion_sigma_rot=0.0005,
        motion_sigma_trans=0.002,
        odometry_scale_bias=0.1,
    )


SCENARIOS = {
    "SingleWall": single_wall,
    "WallAndGround": wall_and_ground,
    "Corridor": corridor,
    "OpenRoom": open_room,
    "Fig3Coupled": fig3_coupled,
    "PatchRetreat": partial(_coupled_retreat, "PatchRetreat", (3.0, 5.0, 0.0), (0.05, 0.05)),
    "PillarRetreat": partial(_coupled_retreat, "PillarRetreat", (-3.0, 5.0, 0.0), (0.05, 1.0)),
    "LedgeRetreat": partial(_coupled_retreat, "LedgeRetreat", (0.0, 5.0, 3.0), (1.0, 0.05)),
}

COUPLED_SCENARIOS = ("PatchRetreat", "PillarRetreat", "LedgeRetreat")


def scenario_library(name: str, **overrides) -> ScenarioSpec:
    """Canonical spec by name; keyword overrides replace ScenarioSpec fields
    (e.g. seed=7, hidden_tags=("B",))."""
    builder = SCENARIOS.get(name)
    if builder is None:
        lowered = {k.lower(): v for k, v in SCENARIOS.items()}
        builder = lowered.get(str(name).lower())
    if builder is None:
        raise UnknownScenario(str(name), SCENARIOS)
    spec = builder()
    return replace(spec, **overrides) if overrides else spec
