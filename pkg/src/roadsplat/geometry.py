"""Poses, pinhole cameras, trajectories, and projection of scene annotations.

Conventions used throughout the package:

* World frame: x forward along the road, y left, z up. Trajectory poses are
  ego poses in this frame (the local y axis is the lateral axis).
* Camera frame: x right, y down, z forward (standard pinhole). CameraModel.pose
  is the camera-to-world transform.
* Pixel centers sit at integer coordinates; pixel (row r, col c) has center
  (u, v) = (c, r). The continuous image rectangle spans the pixel footprints,
  i.e. [-0.5, width-0.5] x [-0.5, height-0.5].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Pose",
    "CameraModel",
    "Trajectory",
    "Box3D",
    "LanePolyline",
    "Box2D",
    "Annotations",
    "lateral_shift",
    "lane_change",
    "project_point",
    "unproject_point",
    "project_box",
    "project_polyline",
    "rasterize_polylines",
    "camera_from_ego",
]

_ORTHO_TOL = 1e-9

# Camera axes expressed in the ego frame: right = -y, down = -z, forward = +x.
EGO_TO_CAMERA = np.array(
    [[0.0, 0.0, 1.0],
     [-1.0, 0.0, 0.0],
     [0.0, -1.0, 0.0]]
)


@dataclass(frozen=True)
class Pose:
    """Rigid transform (world <- local): p_world = rotation @ p_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-8):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-8:
            raise ValueError("pose rotation must have det +1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation) -> "Pose":
        """Pose rotated by `yaw` about the world up axis."""
        return Pose(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Map local-frame points (..., 3) into the world frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "Pose":
        return Pose(np.array(d["rotation"]), np.array(d["translation"]))


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; pose maps camera coordinates to world coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: Pose
    near: float = 0.1
    far: float = 200.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera-frame coordinates."""
        return self.pose.inverse_transform(points)

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return self.pose.transform(points)


@dataclass(frozen=True)
class Trajectory:
    """Ordered (frame_index, ego pose) sequence with strictly increasing indices."""

    frames: tuple

    def __post_init__(self):
        frames = tuple((int(i), p) for i, p in self.frames)
        object.__setattr__(self, "frames", frames)
        if len(frames) < 1:
            raise ValueError("trajectory must contain at least one frame")
        idx = [i for i, _ in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_indices(self) -> list:
        return [i for i, _ in self.frames]

    def to_dict(self) -> dict:
        return {"frames": [[i, p.to_dict()] for i, p in self.frames]}

    @staticmethod
    def from_dict(d: dict) -> "Trajectory":
        return Trajectory(tuple((i, Pose.from_dict(p)) for i, p in d["frames"]))


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: yaw about the world up axis, dims = (length, width, height)."""

    agent_id: str
    frame_index: int
    center: np.ndarray
    dims: tuple
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        dims = tuple(float(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if any(d <= 0 for d in dims):
            raise ValueError("box dims must be strictly positive")

    def corners(self) -> np.ndarray:
        """The 8 box corners in world coordinates, shape (8, 3)."""
        l, w, h = self.dims
        sx = np.array([-0.5, 0.5])
        xs, ys, zs = np.meshgrid(sx * l, sx * w, sx * h, indexing="ij")
        local = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
        return local @ rot_z(self.yaw).T + self.center

    def pose(self) -> Pose:
        return Pose.from_yaw(self.yaw, self.center)

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "frame_index": int(self.frame_index),
            "center": self.center.tolist(),
            "dims": list(self.dims),
            "yaw": float(self.yaw),
        }

    @staticmethod
    def from_dict(d: dict) -> "Box3D":
        return Box3D(d["agent_id"], d["frame_index"], np.array(d["center"]), tuple(d["dims"]), d["yaw"])


@dataclass(frozen=True)
class LanePolyline:
    lane_id: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if pts.shape[0] < 2:
            raise ValueError("lane polyline needs at least 2 points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise ValueError("consecutive polyline points must be distinct")

    def to_dict(self) -> dict:
        return {"lane_id": self.lane_id, "points": self.points.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "LanePolyline":
        return LanePolyline(d["lane_id"], np.array(d["points"]))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned box in continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("degenerate Box2D: min exceeds max")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


# ---------------------------------------------------------------------------
# Trajectory synthesis


def lateral_shift(traj: Trajectory, offset: float) -> Trajectory:
    """Translate every pose by `offset` along its own lateral (local y) axis.

    Positive offset moves left of the heading. Rotations and frame indices are
    unchanged.
    """
    shifted = []
    for idx, pose in traj.frames:
        t = pose.translation + offset * pose.rotation[:, 1]
        shifted.append((idx, Pose(pose.rotation, t)))
    return Trajectory(tuple(shifted))


def lane_change(traj: Trajectory, target_offset: float, start_frame: int, end_frame: int) -> Trajectory:
    """Lateral ramp: zero offset before `start_frame`, linear up to `target_offset`
    at `end_frame`, constant after. Frame bounds are positions in the trajectory,
    not frame indices."""
    if end_frame <= start_frame:
        raise ValueError("end_frame must exceed start_frame")
    shifted = []
    for pos, (idx, pose) in enumerate(traj.frames):
        if pos <= start_frame:
            a = 0.0
        elif pos >= end_frame:
            a = 1.0
        else:
            a = (pos - start_frame) / (end_frame - start_frame)
        t = pose.translation + a * target_offset * pose.rotation[:, 1]
        shifted.append((idx, Pose(pose.rotation, t)))
    return Trajectory(tuple(shifted))


def camera_from_ego(pose: Pose, *, fx: float, fy: float, cx: float, cy: float,
                    width: int, height: int, near: float, far: float) -> CameraModel:
    """Front-facing camera rigidly mounted at the ego pose origin."""
    return CameraModel(
        fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
        pose=Pose(pose.rotation @ EGO_TO_CAMERA, pose.translation),
        near=near, far=far,
    )


# ---------------------------------------------------------------------------
# Projection


def project_point(p: np.ndarray, cam: CameraModel):
    """Project a world point. Returns (u, v, depth) or None when the camera-frame
    depth is <= near."""
    m = cam.world_to_camera(np.asarray(p, dtype=np.float64))
    z = m[2]
    if z <= cam.near:
        return None
    u = cam.fx * m[0] / z + cam.cx
    v = cam.fy * m[1] / z + cam.cy
    return (float(u), float(v), float(z))


def unproject_point(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """Inverse of project_point for a given depth; returns the world point."""
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return cam.camera_to_world(np.array([x, y, depth]))


def project_box(box: Box3D, cam: CameraModel):
    """Axis-aligned hull of the projected box corners, clipped to the image.

    Corners behind the near plane are dropped; returns None when no corner is
    projectable or the clipped hull has zero area.
    """
    us, vs = [], []
    for corner in box.corners():
        proj = project_point(corner, cam)
        if proj is not None:
            us.append(proj[0])
            vs.append(proj[1])
    if not us:
        return None
    x_min = max(min(us), -0.5)
    x_max = min(max(us), cam.width - 0.5)
    y_min = max(min(vs), -0.5)
    y_max = min(max(vs), cam.height - 0.5)
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box2D(x_min, y_min, x_max, y_max)


def project_polyline(lane: LanePolyline, cam: CameraModel) -> list:
    """Project a polyline into the camera, clipping each segment at the near plane.

    Returns a list of ((u1, v1), (u2, v2)) pixel-space segments; points may fall
    outside the image bounds (rasterization clips later). Segments entirely
    behind the camera are dropped.
    """
    pts_cam = cam.world_to_camera(lane.points)
    segments = []
    for a, b in zip(pts_cam[:-1], pts_cam[1:]):
        za, zb = a[2], b[2]
        if za <= cam.near and zb <= cam.near:
            continue
        pa, pb = a, b
        if za <= cam.near:
            t = (cam.near - za) / (zb - za)
            pa = a + t * (b - a)
        elif zb <= cam.near:
            t = (cam.near - zb) / (za - zb)
            pb = b + t * (a - b)
        seg = []
        for p in (pa, pb):
            z = max(p[2], cam.near)
            seg.append((cam.fx * p[0] / z + cam.cx, cam.fy * p[1] / z + cam.cy))
        segments.append((tuple(seg[0]), tuple(seg[1])))
    return segments


def rasterize_polylines(segments, width: int, height: int, thickness_px: float) -> np.ndarray:
    """Binary mask: pixel is 1 iff its center lies within thickness_px/2 of any
    segment. Segments are ((u1, v1), (u2, v2)) in pixel coordinates."""
    if thickness_px < 1:
        raise ValueError("thickness_px must be >= 1")
    mask = np.zeros((height, width), dtype=np.uint8)
    half = thickness_px / 2.0
    for (u1, v1), (u2, v2) in segments:
        x0 = max(0, int(np.floor(min(u1, u2) - half)))
        x1 = min(width - 1, int(np.ceil(max(u1, u2) + half)))
        y0 = max(0, int(np.floor(min(v1, v2) - half)))
        y1 = min(height - 1, int(np.ceil(max(v1, v2) + half)))
        if x0 > x1 or y0 > y1:
            continue
        xs = np.arange(x0, x1 + 1, dtype=np.float64)
        ys = np.arange(y0, y1 + 1, dtype=np.float64)
        px, py = np.meshgrid(xs, ys)
        dx, dy = u2 - u1, v2 - v1
        len2 = dx * dx + dy * dy
        if len2 == 0.0:
            d2 = (px - u1) ** 2 + (py - v1) ** 2
        else:
            t = np.clip(((px - u1) * dx + (py - v1) * dy) / len2, 0.0, 1.0)
            d2 = (px - u1 - t * dx) ** 2 + (py - v1 - t * dy) ** 2
        mask[y0:y1 + 1, x0:x1 + 1] |= (d2 <= half * half).astype(np.uint8)
    return mask


# ---------------------------------------------------------------------------
# Scene annotation file


@dataclass
class Annotations:
    """Boxes, lane polylines, and the original trajectory for one scene."""

    boxes: list = field(default_factory=list)
    lanes: list = field(default_factory=list)
    trajectory: Trajectory | None = None

    def boxes_for_frame(self, frame_index: int) -> list:
        return [b for b in self.boxes if b.frame_index == frame_index]

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "lanes": [l.to_dict() for l in self.lanes],
            "trajectory": self.trajectory.to_dict() if self.trajectory else None,
        }

    @staticmethod
    def from_dict(d: dict) -> "Annotations":
        return Annotations(
            boxes=[Box3D.from_dict(b) for b in d["boxes"]],
            lanes=[LanePolyline.from_dict(l) for l in d["lanes"]],
            trajectory=Trajectory.from_dict(d["trajectory"]) if d.get("trajectory") else None,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @staticmethod
    def load(path) -> "Annotations":
        return Annotations.from_dict(json.loads(Path(path).read_text()))
