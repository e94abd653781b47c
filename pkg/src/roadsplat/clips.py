"""Frames, clips, and restoration pairs, plus their on-disk form.

Frames are float images in [0, 1] with optional depth. Clip directories hold
8-bit PNGs for eyeballing plus a float64 npz for lossless round trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraModel, Pose


@dataclass
class Frame:
    image: np.ndarray                 # (H, W, 3) in [0, 1]
    camera: CameraModel
    frame_index: int
    depth: np.ndarray | None = None   # (H, W) meters
    depth_valid: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.min() < -1e-9 or self.image.max() > 1 + 1e-9:
            raise ValueError("frame image values must lie in [0, 1]")


@dataclass
class Clip:
    """Ordered frame sequence; one camera pose per frame."""

    frames: list
    trajectory_tag: str = ""

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("clip frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def images(self) -> np.ndarray:
        return np.stack([f.image for f in self.frames])


@dataclass
class RestorationPair:
    """Degraded rendering of the original trajectory paired with ground truth."""

    degraded: Clip
    ground_truth: Clip
    stage: int

    def __post_init__(self):
        if len(self.degraded) != len(self.ground_truth):
            raise ValueError("restoration pair clips must have equal length")
        for d, g in zip(self.degraded.frames, self.ground_truth.frames):
            if d.frame_index != g.frame_index:
                raise ValueError("restoration pair frame indices must match")


# ---------------------------------------------------------------------------
# Image files


def save_png(image: np.ndarray, path) -> None:
    """8-bit PNG of a float image in [0, 1] (or a binary/uint8 mask)."""
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        data = arr
    else:
        data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_mask_png(mask: np.ndarray, path) -> None:
    save_png((mask > 0).astype(np.uint8) * 255, path)


def load_mask_png(path) -> np.ndarray:
    return (np.asarray(Image.open(path)) > 127).astype(np.uint8)


def save_clip(clip: Clip, out_dir, *, pngs: bool = True) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"frame_indices": np.array([f.frame_index for f in clip.frames], dtype=np.int64)}
    cams = []
    for i, f in enumerate(clip.frames):
        arrays[f"image_{i}"] = f.image
        if f.depth is not None:
            arrays[f"depth_{i}"] = f.depth
        if f.depth_valid is not None:
            arrays[f"depth_valid_{i}"] = f.depth_valid.astype(np.uint8)
        cams.append({
            "fx": f.camera.fx, "fy": f.camera.fy, "cx": f.camera.cx, "cy": f.camera.cy,
            "width": f.camera.width, "height": f.camera.height,
            "near": f.camera.near, "far": f.camera.far,
            "pose": f.camera.pose.to_dict(),
        })
        if pngs:
            save_png(f.image, out / f"frame_{f.frame_index:04d}.png")
    np.savez(out / "frames.npz", **arrays)
    meta = {"trajectory_tag": clip.trajectory_tag, "cameras": cams}
    (out / "clip.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_clip(clip_dir) -> Clip:
    p = Path(clip_dir)
    meta = json.loads((p / "clip.json").read_text())
    frames = []
    with np.load(p / "frames.npz") as data:
        indices = data["frame_indices"]
        for i, idx in enumerate(indices):
            c = meta["cameras"][i]
            cam = CameraModel(
                fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                width=c["width"], height=c["height"],
                pose=Pose.from_dict(c["pose"]), near=c["near"], far=c["far"],
            )
            depth = data[f"depth_{i}"] if f"depth_{i}" in data else None
            valid = data[f"depth_valid_{i}"].astype(bool) if f"depth_valid_{i}" in data else None
            frames.append(Frame(data[f"image_{i}"], cam, int(idx), depth, valid))
    return Clip(frames, meta["trajectory_tag"])
