"""Pinhole camera math: pixel <-> camera <-> world for patch centers.

Conventions
-----------
* Pixel ``(u, v)``: ``u`` runs along image columns (width), ``v`` along rows.
  Pixel index ``k`` sits at continuous coordinate ``k``.
* Camera frame: +z forward, +x right, +y down.
* Extrinsics are camera-to-world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgument(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidArgument(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Extrinsics:
    camera_to_world: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.camera_to_world, dtype=np.float64)
        if T.shape != (4, 4):
            raise InvalidArgument(f"camera_to_world must be 4x4, got {T.shape}")
        if not np.all(np.isfinite(T)):
            raise InvalidArgument("camera_to_world has non-finite entries")
        if not np.allclose(T[3], [0.0, 0.0, 0.0, 1.0], atol=1e-6, rtol=0):
            raise InvalidArgument("last row of camera_to_world must be (0, 0, 0, 1)")
        R = T[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise InvalidArgument("rotation block is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise InvalidArgument("rotation block must have determinant +1")
        object.__setattr__(self, "camera_to_world", T)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def world_to_camera(self) -> np.ndarray:
        R, t = self.rotation, self.translation
        out = np.eye(4)
        out[:3, :3] = R.T
        out[:3, 3] = -R.T @ t
        return out

    @classmethod
    def identity(cls) -> "Extrinsics":
        return cls(np.eye(4))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Extrinsics":
        """Camera at ``eye`` whose optical axis points at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise InvalidArgument("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        T = np.eye(4)
        T[:3, 0], T[:3, 1], T[:3, 2], T[:3, 3] = right, down, forward, eye
        return cls(T)


@dataclass(frozen=True)
class CameraView:
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    depth: np.ndarray
    features: Optional[np.ndarray] = None
    patch: Optional[int] = None

    def __post_init__(self):
        depth = np.asarray(self.depth)
        H, W = self.intrinsics.height, self.intrinsics.width
        if depth.shape != (H, W):
            raise InvalidArgument(f"depth map shape {depth.shape} != ({H}, {W})")
        if np.any(depth < 0):
            raise InvalidArgument("depth values must be >= 0")
        if self.features is not None:
            if self.patch is None:
                raise InvalidArgument("a feature grid needs the patch size")
            w, h = patch_grid_dims(W, H, self.patch)
            if self.features.ndim != 3 or self.features.shape[:2] != (h, w):
                raise InvalidArgument(
                    f"feature grid shape {self.features.shape} does not match patch grid ({h}, {w}, d)"
                )


@dataclass(frozen=True)
class PositionField:
    positions: np.ndarray  # (n, 3)
    validity: np.ndarray  # (n,) bool


def patch_grid_dims(width: int, height: int, patch: int) -> tuple[int, int]:
    """Number of patch columns and rows, ``(floor(width/patch), floor(height/patch))``."""
    if patch < 1:
        raise InvalidArgument(f"patch size must be >= 1, got {patch}")
    if width < patch or height < patch:
        raise InvalidArgument(f"image {width}x{height} is smaller than one {patch}px patch")
    return width // patch, height // patch


def patch_centers(width: int, height: int, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates of every patch center, row-major by (row, col)."""
    w, h = patch_grid_dims(width, height, patch)
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ((ii.ravel() + 0.5) * patch, (jj.ravel() + 0.5) * patch)


def nearest_pixel(coord: np.ndarray, size: int) -> np.ndarray:
    """Nearest integer pixel to a continuous coordinate, ties toward the smaller index."""
    idx = np.ceil(np.asarray(coord, dtype=np.float64) - 0.5).astype(np.int64)
    return np.clip(idx, 0, size - 1)


def project(intr: Intrinsics, extr: Extrinsics, points: np.ndarray):
    """World points (n, 3) -> pixel coordinates ``u``, ``v`` and camera depth ``z``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    T = extr.world_to_camera()
    cam = pts @ T[:3, :3].T + T[:3, 3]
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    return u, v, z


def backproject(intr: Intrinsics, extr: Extrinsics, u, v, z) -> np.ndarray:
    """Pixel coordinates plus metric depth -> world points (n, 3), float64."""
    u, v, z = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, z)))
    cam = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=-1)
    return cam @ extr.rotation.T + extr.translation


def backproject_patch_centers(view: CameraView, patch: int) -> PositionField:
    """Lift every patch center of ``view`` to world space.

    Depth is read at the pixel nearest the patch center; the camera ray goes
    through the center itself. Tokens whose depth is 0 or non-finite are
    marked invalid and get a zero position. Output order is row-major
    ``(row j, col i)``.
    """
    intr = view.intrinsics
    u, v = patch_centers(intr.width, intr.height, patch)
    px = nearest_pixel(u, intr.width)
    py = nearest_pixel(v, intr.height)
    z = np.asarray(view.depth, dtype=np.float64)[py, px]
    valid = np.isfinite(z) & (z > 0)
    z = np.where(valid, z, 0.0)
    positions = backproject(intr, view.extrinsics, u, v, z)
    positions[~valid] = 0.0
    return PositionField(positions, valid)


def rigid_transform(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    return np.asarray(points, dtype=np.float64) @ T[:3, :3].T + T[:3, 3]


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly random proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rigid(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = random_rotation(rng)
    T[:3, 3] = rng.uniform(-scale, scale, size=3)
    return T


def focal_from_fov(size: int, fov_degrees: float) -> float:
    return 0.5 * size / math.tan(math.radians(fov_degrees) / 2.0)
