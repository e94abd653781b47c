"""Gaussian scene representation: static background plus boxed dynamic agents.

Parameters are stored unconstrained where optimization needs it: scales in log
domain, opacities as logits. Colors live directly in [0, 1]; quaternions are
kept unit-norm (w, x, y, z ordering).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box3D

CHECKPOINT_FORMAT_VERSION = 1


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Gaussian3D:
    """A single anisotropic Gaussian primitive."""

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    logit_opacity: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "log_scale", np.asarray(self.log_scale, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit norm")

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.logit_opacity))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scale)


class GaussianGroup:
    """Struct-of-arrays storage for a set of Gaussians."""

    __slots__ = ("means", "log_scales", "rotations", "logit_opacities", "colors")

    def __init__(self, means, log_scales, rotations, logit_opacities, colors):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.logit_opacities = np.asarray(logit_opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float64).reshape(n, 3)

    @staticmethod
    def empty() -> "GaussianGroup":
        return GaussianGroup(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3))
        )

    @staticmethod
    def from_gaussians(gaussians) -> "GaussianGroup":
        if not gaussians:
            return GaussianGroup.empty()
        return GaussianGroup(
            np.stack([g.mean for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.array([g.logit_opacity for g in gaussians]),
            np.stack([g.color for g in gaussians]),
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i], self.log_scales[i], self.rotations[i],
            float(self.logit_opacities[i]), self.colors[i],
        )

    def copy(self) -> "GaussianGroup":
        return GaussianGroup(
            self.means.copy(), self.log_scales.copy(), self.rotations.copy(),
            self.logit_opacities.copy(), self.colors.copy(),
        )

    def validate(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1)
        if len(self) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("quaternions must be unit norm")
        opac = sigmoid(self.logit_opacities)
        if len(self) and (np.any(opac <= 0.0) or np.any(opac >= 1.0)):
            raise ValueError("decoded opacity must lie in (0, 1)")
        if len(self) and np.any(np.exp(self.log_scales) <= 0.0):
            raise ValueError("decoded scales must be positive")


@dataclass
class AgentModel:
    """Local-frame Gaussians plus the per-frame box track that places them."""

    gaussians: GaussianGroup
    track: dict  # frame_index -> Box3D

    def box_at(self, frame_index: int) -> Box3D:
        if frame_index not in self.track:
            raise KeyError(f"agent track has no pose for frame {frame_index}")
        return self.track[frame_index]

    def copy(self) -> "AgentModel":
        return AgentModel(self.gaussians.copy(), dict(self.track))


@dataclass
class GaussianScene:
    """Learnable scene: static world-frame Gaussians + boxed agents."""

    static: GaussianGroup
    agents: dict = field(default_factory=dict)  # agent_id -> AgentModel
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64).reshape(3)

    @property
    def num_gaussians(self) -> int:
        return len(self.static) + sum(len(a.gaussians) for a in self.agents.values())

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            self.static.copy(),
            {k: v.copy() for k, v in self.agents.items()},
            self.background_color.copy(),
        )

    def validate(self) -> None:
        self.static.validate()
        for agent in self.agents.values():
            agent.gaussians.validate()


@dataclass
class GroupGradients:
    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    logit_opacities: np.ndarray
    colors: np.ndarray

    @staticmethod
    def zeros(n: int) -> "GroupGradients":
        return GroupGradients(
            np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3))
        )


@dataclass
class SceneGradients:
    static: GroupGradients
    agents: dict  # agent_id -> GroupGradients

    @staticmethod
    def zeros_like(scene: GaussianScene) -> "SceneGradients":
        return SceneGradients(
            GroupGradients.zeros(len(scene.static)),
            {k: GroupGradients.zeros(len(a.gaussians)) for k, a in scene.agents.items()},
        )


# ---------------------------------------------------------------------------
# Checkpoint serialization (lossless npz round trip)


def save_scene(scene: GaussianScene, path) -> None:
    arrays = {
        "format_version": np.array(CHECKPOINT_FORMAT_VERSION),
        "background_color": scene.background_color,
        "static/means": scene.static.means,
        "static/log_scales": scene.static.log_scales,
        "static/rotations": scene.static.rotations,
        "static/logit_opacities": scene.static.logit_opacities,
        "static/colors": scene.static.colors,
        "agent_ids": np.array(list(scene.agents.keys()), dtype=np.str_),
    }
    for aid, agent in scene.agents.items():
        g = agent.gaussians
        arrays[f"agent/{aid}/means"] = g.means
        arrays[f"agent/{aid}/log_scales"] = g.log_scales
        arrays[f"agent/{aid}/rotations"] = g.rotations
        arrays[f"agent/{aid}/logit_opacities"] = g.logit_opacities
        arrays[f"agent/{aid}/colors"] = g.colors
        frames = sorted(agent.track)
        arrays[f"agent/{aid}/track_frames"] = np.array(frames, dtype=np.int64)
        arrays[f"agent/{aid}/track_centers"] = np.stack([agent.track[f].center for f in frames])
        arrays[f"agent/{aid}/track_dims"] = np.array([agent.track[f].dims for f in frames])
        arrays[f"agent/{aid}/track_yaws"] = np.array([agent.track[f].yaw for f in frames])
    np.savez(path, **arrays)


def load_scene(path) -> GaussianScene:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        static = GaussianGroup(
            data["static/means"], data["static/log_scales"], data["static/rotations"],
            data["static/logit_opacities"], data["static/colors"],
        )
        agents = {}
        for aid in data["agent_ids"]:
            aid = str(aid)
            track = {}
            frames = data[f"agent/{aid}/track_frames"]
            centers = data[f"agent/{aid}/track_centers"]
            dims = data[f"agent/{aid}/track_dims"]
            yaws = data[f"agent/{aid}/track_yaws"]
            for i, f in enumerate(frames):
                track[int(f)] = Box3D(aid, int(f), centers[i], tuple(dims[i]), float(yaws[i]))
            agents[aid] = AgentModel(
                GaussianGroup(
                    data[f"agent/{aid}/means"], data[f"agent/{aid}/log_scales"],
                    data[f"agent/{aid}/rotations"], data[f"agent/{aid}/logit_opacities"],
                    data[f"agent/{aid}/colors"],
                ),
                track,
            )
        return GaussianScene(static, agents, data["background_color"])
