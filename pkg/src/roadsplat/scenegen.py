"""Deterministic synthetic driving worlds with ground truth at any trajectory.

A world is a dense GaussianScene (road surface, lane markings, roadside
scenery, boxed agent vehicles) plus annotations (3D boxes, lane polylines, the
original ego trajectory). Everything derives from a WorldSpec and its seed, so
regenerating a world is bit-identical and ground truth exists at arbitrary
camera poses, including the novel trajectories real data lacks.

Lane markings are painted a reserved color and sized so the color-thresholding
lane detector in `metrics` sees them at the annotated half-width; keep
LANE_COLOR / MARKING_HALF_WIDTH and the detector defaults in sync.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .clips import Clip, Frame
from .gaussians import AgentModel, GaussianGroup, GaussianScene, logit
from .geometry import (
    Annotations,
    Box3D,
    CameraModel,
    LanePolyline,
    Pose,
    Trajectory,
    camera_from_ego,
    lane_change,
    lateral_shift,
)
from .rasterizer import render

LANE_COLOR = np.array([1.0, 0.82, 0.05])
ROAD_COLOR = np.array([0.30, 0.30, 0.33])
SKY_COLOR = np.array([0.62, 0.76, 0.92])
MARKING_HALF_WIDTH = 0.22  # meters; the lane detector is calibrated to this

_AGENT_PALETTE = [
    (0.78, 0.10, 0.12),
    (0.14, 0.26, 0.80),
    (0.10, 0.55, 0.55),
    (0.88, 0.88, 0.92),
    (0.18, 0.18, 0.22),
    (0.45, 0.12, 0.55),
    (0.10, 0.45, 0.18),
    (0.60, 0.30, 0.15),
]


@dataclass
class AgentSpec:
    lane: int
    start_x: float
    speed: float
    dims: tuple = (4.4, 1.9, 1.55)
    color: tuple | None = None  # defaults to a palette entry


@dataclass
class CameraSpec:
    width: int = 96
    height: int = 64
    fov_deg: float = 70.0
    rig_height: float = 1.6
    near: float = 0.5
    far: float = 250.0

    @property
    def fx(self) -> float:
        return (self.width / 2.0) / np.tan(np.deg2rad(self.fov_deg) / 2.0)

    @property
    def fy(self) -> float:
        return self.fx

    @property
    def cx(self) -> float:
        return (self.width - 1) / 2.0

    @property
    def cy(self) -> float:
        return (self.height - 1) / 2.0


@dataclass
class WorldSpec:
    name: str = "world"
    seed: int = 0
    n_frames: int = 40
    dt: float = 0.1
    road_length: float = 130.0
    lane_count: int = 3
    lane_width: float = 3.5
    shoulder: float = 1.5
    ego_lane: int = 1
    ego_speed: float = 12.0
    ego_start: float = 4.0
    agents: list = field(default_factory=list)  # list[AgentSpec]
    n_scenery_clusters: int = 26
    n_buildings: int = 7
    camera: CameraSpec = field(default_factory=CameraSpec)

    def __post_init__(self):
        if self.lane_count < 1 or self.n_frames < 1:
            raise ValueError("lane count and frame count must be >= 1")
        if min(self.road_length, self.lane_width, self.dt) <= 0:
            raise ValueError("world dimensions must be positive")
        self.agents = [a if isinstance(a, AgentSpec) else AgentSpec(**a) for a in self.agents]
        if isinstance(self.camera, dict):
            self.camera = CameraSpec(**self.camera)
        for a in self.agents:
            if not (0 <= a.lane < self.lane_count):
                raise ValueError(f"agent lane {a.lane} outside 0..{self.lane_count - 1}")

    def lane_center(self, lane: int) -> float:
        return (lane - (self.lane_count - 1) / 2.0) * self.lane_width

    def marking_y(self, boundary: int) -> float:
        return (boundary - self.lane_count / 2.0) * self.lane_width

    @property
    def road_half_width(self) -> float:
        return self.lane_count * self.lane_width / 2.0 + self.shoulder

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "WorldSpec":
        return WorldSpec(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "WorldSpec":
        return WorldSpec.from_json(Path(path).read_text())


@dataclass
class World:
    """Ground-truth scene plus annotations for one generated world."""

    spec: WorldSpec
    scene: GaussianScene
    annotations: Annotations

    @property
    def trajectory(self) -> Trajectory:
        return self.annotations.trajectory

    def camera_for(self, pose: Pose) -> CameraModel:
        c = self.spec.camera
        return camera_from_ego(
            pose, fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy,
            width=c.width, height=c.height, near=c.near, far=c.far,
        )


# ---------------------------------------------------------------------------
# Builders


class _SceneBuffer:
    def __init__(self):
        self.means, self.log_scales, self.quats, self.logits, self.colors = [], [], [], [], []

    def add(self, mean, sigma, color, opacity=0.99, quat=(1.0, 0.0, 0.0, 0.0)):
        self.means.append(np.asarray(mean, dtype=np.float64))
        self.log_scales.append(np.log(np.asarray(sigma, dtype=np.float64)))
        self.quats.append(np.asarray(quat, dtype=np.float64))
        self.logits.append(float(logit(opacity)))
        self.colors.append(np.clip(np.asarray(color, dtype=np.float64), 0.0, 1.0))

    def group(self) -> GaussianGroup:
        if not self.means:
            return GaussianGroup.empty()
        return GaussianGroup(
            np.stack(self.means), np.stack(self.log_scales), np.stack(self.quats),
            np.array(self.logits), np.stack(self.colors),
        )


def _build_ground(buf: _SceneBuffer, spec: WorldSpec, rng):
    xs = np.arange(-12.0, spec.road_length + 95.0, 4.5)
    ys = np.arange(-42.0, 42.0 + 1e-9, 4.5)
    for x in xs:
        for y in ys:
            jitter = rng.uniform(-0.05, 0.05, 3)
            pos = (x + rng.uniform(-1.0, 1.0), y + rng.uniform(-1.0, 1.0), -0.05)
            buf.add(pos, (3.4, 3.4, 0.02), np.array([0.33, 0.43, 0.26]) + jitter, opacity=0.99)


def _build_road(buf: _SceneBuffer, spec: WorldSpec, rng):
    half = spec.road_half_width
    xs = np.arange(0.0, spec.road_length + 1e-9, 1.3)
    ys = np.arange(-half, half + 1e-9, 1.3)
    for x in xs:
        for y in ys:
            jitter = rng.uniform(-0.05, 0.05)
            buf.add((x, y, 0.0), (0.95, 0.95, 0.012), ROAD_COLOR + jitter, opacity=0.995)


def _build_markings(buf: _SceneBuffer, spec: WorldSpec, rng, lanes: list):
    step = 0.5
    sigma_lat = MARKING_HALF_WIDTH / 1.35  # alpha ~ 0.5 at the annotated half-width
    for b in range(spec.lane_count + 1):
        y = spec.marking_y(b)
        xs = np.arange(0.0, spec.road_length + 1e-9, step)
        for x in xs:
            buf.add((x, y, 0.02), (0.42, sigma_lat, 0.008), LANE_COLOR, opacity=0.98)
        pts = [(x, y, 0.02) for x in np.arange(0.0, spec.road_length + 1e-9, 2.5)]
        lanes.append(LanePolyline(f"lane_{b}", np.array(pts)))


def _build_scenery(buf: _SceneBuffer, spec: WorldSpec, rng):
    half = spec.road_half_width
    greens = [(0.11, 0.42, 0.16), (0.18, 0.50, 0.20), (0.25, 0.45, 0.12)]
    for i in range(spec.n_scenery_clusters):
        side = -1 if (i % 2 == 0) else 1
        x = rng.uniform(-5.0, spec.road_length + 40.0)
        if side < 0:
            y = -rng.uniform(half + 2.0, half + 13.0)
        else:
            y = rng.uniform(half + 8.5, half + 20.0)  # keep the +6 m shift corridor clear
        kind = rng.integers(0, 3)
        if kind == 0:  # tree
            trunk_h = rng.uniform(1.4, 2.6)
            buf.add((x, y, trunk_h / 2), (0.16, 0.16, trunk_h / 2), (0.33, 0.22, 0.12), opacity=0.98)
            crown = rng.uniform(2.0, 3.6)
            for _ in range(rng.integers(5, 9)):
                off = rng.normal(0.0, 0.7, 3) * np.array([1.0, 1.0, 0.6])
                g = greens[int(rng.integers(0, len(greens)))]
                col = np.array(g) + rng.uniform(-0.04, 0.04, 3)
                buf.add((x + off[0], y + off[1], trunk_h + crown / 2 + off[2]),
                        rng.uniform(0.45, 0.95, 3), col, opacity=0.96)
        elif kind == 1:  # bush row
            for _ in range(rng.integers(3, 6)):
                off = rng.normal(0.0, 1.0, 2)
                g = greens[int(rng.integers(0, len(greens)))]
                buf.add((x + off[0], y + off[1], 0.45), rng.uniform(0.3, 0.7, 3),
                        np.array(g) * rng.uniform(0.7, 1.1), opacity=0.96)
        else:  # pole with a sign plate
            h = rng.uniform(2.4, 4.0)
            buf.add((x, y, h / 2), (0.07, 0.07, h / 2), (0.55, 0.57, 0.60), opacity=0.985)
            plate = [(0.85, 0.88, 0.95), (0.15, 0.3, 0.75), (0.7, 0.12, 0.12)][int(rng.integers(0, 3))]
            buf.add((x, y, h), (0.3, 0.3, 0.25), plate, opacity=0.985)


def _build_buildings(buf: _SceneBuffer, spec: WorldSpec, rng):
    for i in range(spec.n_buildings):
        side = -1 if (i % 2 == 0) else 1
        x = rng.uniform(0.0, spec.road_length + 40.0)
        y = side * rng.uniform(22.0, 34.0)
        w, d, h = rng.uniform(5, 9), rng.uniform(4, 7), rng.uniform(5, 11)
        base = np.array([0.52, 0.50, 0.55]) + rng.uniform(-0.08, 0.08, 3)
        for _ in range(5):
            off = rng.uniform(-0.5, 0.5, 3) * np.array([w, d, h]) * 0.4
            buf.add((x + off[0], y + off[1], h / 2 + off[2] * 0.5),
                    (w * 0.32, d * 0.32, h * 0.32), base + rng.uniform(-0.05, 0.05, 3),
                    opacity=0.985)


def _build_agent(spec_agent: AgentSpec, color, rng) -> GaussianGroup:
    l, w, h = spec_agent.dims
    dims = np.array([l, w, h])
    margin = 0.14 * dims
    sigma = np.array([0.30, 0.20, 0.16])
    body = _SceneBuffer()
    nx, ny, nz = 6, 3, 3
    base = np.asarray(color, dtype=np.float64)
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                frac = np.array([
                    (ix + 0.5) / nx, (iy + 0.5) / ny, (iz + 0.5) / nz,
                ])
                pos = (frac - 0.5) * (dims - 2 * margin)
                pos = pos + rng.uniform(-0.04, 0.04, 3)
                if iz == nz - 1:  # cabin / windows: darker
                    col = base * 0.42 + rng.uniform(-0.02, 0.02, 3)
                else:
                    col = base + rng.uniform(-0.04, 0.04, 3)
                body.add(pos, sigma, col, opacity=0.975)
    # wheels
    for sx in (-1, 1):
        for sy in (-1, 1):
            body.add((sx * (l / 2 - 0.55), sy * (w / 2 - 0.18), -h / 2 + 0.28),
                     (0.26, 0.10, 0.24), (0.06, 0.06, 0.07), opacity=0.97)
    return body.group()


def generate_world(spec: WorldSpec) -> World:
    """Build the ground-truth world deterministically from `spec.seed`."""
    rng = np.random.default_rng(spec.seed)
    buf = _SceneBuffer()
    lanes: list = []
    _build_ground(buf, spec, rng)
    _build_road(buf, spec, rng)
    _build_markings(buf, spec, rng, lanes)
    _build_scenery(buf, spec, rng)
    _build_buildings(buf, spec, rng)

    boxes = []
    agents = {}
    ego_y = spec.lane_center(spec.ego_lane)
    for i, aspec in enumerate(spec.agents):
        aid = f"agent_{i}"
        color = aspec.color if aspec.color is not None else _AGENT_PALETTE[i % len(_AGENT_PALETTE)]
        group = _build_agent(aspec, color, rng)
        yaw = 0.0 if aspec.speed >= 0 else np.pi
        track = {}
        for f in range(spec.n_frames):
            cx = aspec.start_x + aspec.speed * spec.dt * f
            center = np.array([cx, spec.lane_center(aspec.lane), aspec.dims[2] / 2.0])
            box = Box3D(aid, f, center, aspec.dims, yaw)
            track[f] = box
            boxes.append(box)
        agents[aid] = AgentModel(group, track)

    frames = []
    for f in range(spec.n_frames):
        x = spec.ego_start + spec.ego_speed * spec.dt * f
        frames.append((f, Pose(np.eye(3), np.array([x, ego_y, spec.camera.rig_height]))))
    traj = Trajectory(tuple(frames))

    scene = GaussianScene(buf.group(), agents, SKY_COLOR.copy())
    return World(spec, scene, Annotations(boxes=boxes, lanes=lanes, trajectory=traj))


def render_gt_clip(world: World, trajectory: Trajectory, *, with_depth: bool = True,
                   tag: str = "") -> Clip:
    """Render the GT world along a trajectory; depth marks pixels the scene covers."""
    frames = []
    for idx, pose in trajectory.frames:
        cam = world.camera_for(pose)
        out = render(world.scene, cam, idx)
        depth = out.depth if with_depth else None
        valid = (out.alpha >= 0.5) if with_depth else None
        frames.append(Frame(np.clip(out.color, 0.0, 1.0), cam, idx, depth, valid))
    return Clip(frames, tag)


def eval_trajectories(world: World, *, shifts=(0.0, 3.0, 6.0),
                      lane_change_target: float | None = None) -> dict:
    """The evaluation trajectory set: lateral shifts plus a lane change ramp."""
    traj = world.trajectory
    out = {}
    for s in shifts:
        tag = f"shift_{s:g}m"
        out[tag] = traj if s == 0.0 else lateral_shift(traj, s)
    target = lane_change_target if lane_change_target is not None else world.spec.lane_width
    n = len(traj)
    out["lane_change"] = lane_change(traj, target, max(0, n // 4), max(1, 3 * n // 4))
    return out


# ---------------------------------------------------------------------------
# Bundled presets (the role of the paper-scale scene list, at desk scale)


def preset_specs() -> dict:
    """Bundled world specs; `toy` is a miniature for fast tests."""
    presets = {}
    presets["meridian"] = WorldSpec(
        name="meridian", seed=101, lane_count=3, ego_lane=1,
        agents=[
            AgentSpec(lane=1, start_x=22.0, speed=12.6),
            AgentSpec(lane=2, start_x=18.0, speed=11.4),
            AgentSpec(lane=0, start_x=27.0, speed=12.2),
            AgentSpec(lane=2, start_x=30.0, speed=12.8),
            AgentSpec(lane=1, start_x=34.0, speed=11.8),
        ],
    )
    presets["parkway"] = WorldSpec(
        name="parkway", seed=202, lane_count=4, ego_lane=1, ego_speed=11.5,
        agents=[
            AgentSpec(lane=2, start_x=19.0, speed=11.9),
            AgentSpec(lane=1, start_x=25.0, speed=10.9),
            AgentSpec(lane=3, start_x=22.0, speed=11.0, dims=(5.2, 2.0, 1.9)),
            AgentSpec(lane=2, start_x=31.0, speed=12.1),
            AgentSpec(lane=3, start_x=33.0, speed=11.6),
            AgentSpec(lane=1, start_x=35.0, speed=11.2),
        ],
    )
    presets["boulevard"] = WorldSpec(
        name="boulevard", seed=303, lane_count=3, ego_lane=1, ego_speed=12.5,
        n_scenery_clusters=30,
        agents=[
            AgentSpec(lane=0, start_x=20.0, speed=13.0),
            AgentSpec(lane=1, start_x=26.0, speed=12.0),
            AgentSpec(lane=2, start_x=21.0, speed=12.4),
            AgentSpec(lane=2, start_x=29.0, speed=13.1),
            AgentSpec(lane=0, start_x=33.0, speed=12.1),
            AgentSpec(lane=1, start_x=36.0, speed=12.9),
        ],
    )
    presets["toy"] = WorldSpec(
        name="toy", seed=7, n_frames=12, road_length=70.0, lane_count=2, ego_lane=0,
        ego_speed=9.0, n_scenery_clusters=10, n_buildings=3,
        camera=CameraSpec(width=48, height=32),
        agents=[
            AgentSpec(lane=1, start_x=16.0, speed=9.5),
            AgentSpec(lane=0, start_x=22.0, speed=8.6),
        ],
    )
    return presets


def write_preset_files(directory) -> list:
    """Materialize the bundled presets as WorldSpec json files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, spec in preset_specs().items():
        p = directory / f"{name}.json"
        spec.save(p)
        paths.append(p)
    return paths
