"""Serial revolute chain kinematics and pinhole projection.

The chain is an abstract stand-in for an industrial arm: every link extends
along the local +x axis of its joint frame, and every joint rotates about a
fixed axis expressed in its parent frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * np.pi

_X = (1.0, 0.0, 0.0)
_Y = (0.0, 1.0, 0.0)
_Z = (0.0, 0.0, 1.0)


class BehindCameraError(ValueError):
    """Raised when a point to project lies on or behind the image plane."""

    def __init__(self, index: int, depth: float):
        super().__init__(f"point {index} is behind the camera (depth={depth:.6g})")
        self.index = index
        self.depth = depth


@dataclass(frozen=True)
class RobotModel:
    link_lengths: tuple[float, ...]
    joint_axes: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.link_lengths)
        axes = tuple(tuple(float(c) for c in a) for a in self.joint_axes)
        object.__setattr__(self, "link_lengths", lengths)
        object.__setattr__(self, "joint_axes", axes)
        if len(lengths) < 2:
            raise ValueError("a robot needs at least two joints")
        if len(axes) != len(lengths):
            raise ValueError(
                f"got {len(axes)} joint axes for {len(lengths)} links"
            )
        if any(not np.isfinite(v) or v <= 0 for v in lengths):
            raise ValueError("link lengths must be positive")
        for i, a in enumerate(axes):
            if len(a) != 3 or abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise ValueError(f"joint axis {i} is not a unit 3-vector")

    @property
    def joint_count(self) -> int:
        return len(self.link_lengths)


def default_robot() -> RobotModel:
    """Six-joint desk-scale chain with alternating z/y axes."""
    return RobotModel(
        link_lengths=(0.8, 1.0, 1.0, 0.5, 0.5, 0.3),
        joint_axes=(_Z, _Y, _Y, _Z, _Y, _Z),
    )


def axis_angle_matrix(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rotation matrix about a unit axis (Rodrigues formula)."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    t = 1.0 - c
    return np.array(
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    )


def forward_kinematics(
    model: RobotModel,
    q: Sequence[float],
    base_rotation: np.ndarray | None = None,
) -> np.ndarray:
    """World positions of the base origin followed by the end of every link.

    Returns a ``(J + 1, 3)`` float64 array. ``base_rotation`` optionally
    orients the whole chain in the world frame.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.joint_count,):
        raise ValueError(
            f"expected {model.joint_count} joint angles, got shape {q.shape}"
        )
    R = np.eye(3) if base_rotation is None else np.asarray(base_rotation, dtype=np.float64)
    positions = np.zeros((model.joint_count + 1, 3))
    for i, (length, axis) in enumerate(zip(model.link_lengths, model.joint_axes)):
        R = R @ axis_angle_matrix(axis, q[i])
        positions[i + 1] = positions[i] + R[:, 0] * length
    return positions


def keypoints(model: RobotModel, q: Sequence[float]) -> np.ndarray:
    """The J labelled joint locations: the distal end of every link."""
    return forward_kinematics(model, q)[1:]


def chain_centroid(model: RobotModel) -> np.ndarray:
    """Mean of all chain positions at the zero pose."""
    return forward_kinematics(model, np.zeros(model.joint_count)).mean(axis=0)



@dataclass(frozen=True)
class Camera:
    focal: float
    principal_point: tuple[float, float]
    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray = field(repr=False)
    image_size: tuple[int, int] = (64, 64)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if (
            np.abs(R @ R.T - np.eye(3)).max() > 1e-6
            or abs(np.linalg.det(R) - 1.0) > 1e-6
        ):
            raise ValueError("camera rotation is not a proper rotation")
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image size must be positive")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def look_at_camera(
    azimuth: float,
    elevation: float,
    distance: float,
    target: Sequence[float],
    focal: float,
    image_size: tuple[int, int],
) -> Camera:
    """Camera on a sphere around ``target`` looking at it, world +z up.

    Camera axes: +x right, +y down (image rows), +z forward.
    """
    target = np.asarray(target, dtype=np.float64)
    ce = np.cos(elevation)
    eye = target + distance * np.array(
        [ce * np.cos(azimuth), ce * np.sin(azimuth), np.sin(elevation)]
    )
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, (0.0, 0.0, 1.0))
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight down or up
        right = np.array([0.0, 1.0, 0.0]) if forward[2] < 0 else np.array([0.0, -1.0, 0.0])
    else:
        right /= n
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    w, h = image_size
    return Camera(
        focal=float(focal),
        principal_point=((w - 1) / 2.0, (h - 1) / 2.0),
        rotation=R,
        translation=-R @ eye,
        image_size=(int(w), int(h)),
    )


def project_unchecked(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project without the depth check; rows with depth <= 0 are garbage."""
    pc = camera.to_camera(np.atleast_2d(points))
    z = pc[:, 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    cx, cy = camera.principal_point
    uv = np.empty((len(pc), 2))
    uv[:, 0] = cx + camera.focal * pc[:, 0] / safe
    uv[:, 1] = cy + camera.focal * pc[:, 1] / safe
    return uv, z


def project(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection to pixel coordinates.

    Returns ``(uv, depth)`` with ``uv`` of shape ``(n, 2)``. Raises
    :class:`BehindCameraError` for the first point with depth <= 1e-6.
    """
    uv, z = project_unchecked(camera, points)
    bad = np.flatnonzero(z <= 1e-6)
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z[bad[0]]))
    return uv, z
