"""Value types shared across the geometry code.

Everything lives in the canonical object cube ``[-0.5, 0.5]^3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property

import numpy as np

EXTENT = 1.0
ORIGIN = -0.5


class Label(IntEnum):
    CURVE = 0
    SHEET = 1


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != pts.shape:
                raise GeometryError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            lens = np.linalg.norm(nrm, axis=1)
            if nrm.size and np.max(np.abs(lens - 1.0)) > 1e-6:
                raise GeometryError("normals must have unit length")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != pts.shape[0]:
                raise GeometryError(f"{lab.shape[0]} labels for {pts.shape[0]} points")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask_or_idx) -> PointSet:
        return PointSet(
            self.points[mask_or_idx],
            None if self.normals is None else self.normals[mask_or_idx],
            None if self.labels is None else self.labels[mask_or_idx],
        )

    def with_labels(self, labels) -> PointSet:
        return PointSet(self.points, self.normals, labels)

    def split(self) -> tuple[PointSet, PointSet]:
        """(curve points, sheet points) by label."""
        if self.labels is None:
            raise GeometryError("point set carries no labels")
        return self.subset(self.labels == Label.CURVE), self.subset(self.labels == Label.SHEET)

    @staticmethod
    def concat(sets) -> PointSet:
        sets = list(sets)
        pts = np.concatenate([s.points for s in sets]) if sets else np.zeros((0, 3))
        nrm = None
        if sets and all(s.normals is not None for s in sets):
            nrm = np.concatenate([s.normals for s in sets])
        lab = None
        if sets and all(s.labels is not None for s in sets):
            lab = np.concatenate([s.labels for s in sets])
        return PointSet(pts, nrm, lab)


@dataclass(frozen=True)
class VoxelGrid:
    """Cubic grid over ``[-0.5, 0.5]^3``; ``values[i, j, k]`` is indexed (x, y, z)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1:
            raise GeometryError(f"voxel grid must be cubic, got shape {v.shape}")
        if v.size and (v.min() < 0.0 or v.max() > 1.0 or not np.isfinite(v).all()):
            raise GeometryError("voxel values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def voxel_size(self) -> float:
        return EXTENT / self.resolution

    def center(self, idx) -> np.ndarray:
        """World coordinates of voxel centers for integer index triples."""
        return voxel_centers_from_index(np.asarray(idx), self.resolution)

    def index_of(self, points) -> np.ndarray:
        """Integer voxel index containing each world point (clipped into the grid)."""
        return world_to_index(points, self.resolution)

    def binary(self, thresh: float = 0.5) -> np.ndarray:
        return self.values >= thresh

    @staticmethod
    def zeros(resolution: int) -> VoxelGrid:
        return VoxelGrid(np.zeros((resolution,) * 3))


def voxel_centers_from_index(idx: np.ndarray, resolution: int) -> np.ndarray:
    return ORIGIN + (np.asarray(idx, dtype=np.float64) + 0.5) * (EXTENT / resolution)


def world_to_index(points, resolution: int) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    idx = np.floor((p - ORIGIN) / (EXTENT / resolution)).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def grid_centers(resolution: int) -> np.ndarray:
    """All voxel centers, shape (r, r, r, 3), matching ``VoxelGrid.values`` indexing."""
    c = voxel_centers_from_index(np.arange(resolution), resolution)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise GeometryError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise GeometryError("degenerate face with a repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def is_empty(self) -> bool:
        return self.num_faces == 0

    @cached_property
    def edges(self) -> np.ndarray:
        """Each undirected edge once, as sorted (u, v) rows."""
        if not self.faces.size:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_face_counts(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        return self.num_faces > 0 and bool(np.all(self.edge_face_counts == 2))

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(lens > 0, lens, 1.0)

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def with_vertices(self, vertices) -> TriangleMesh:
        return TriangleMesh(vertices, self.faces)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``x_cam = R @ x_world + t`` with +z looking forward.

    Pixel coordinates put pixel centers on integers: column ``u`` and row ``v``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-9:
            raise GeometryError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @staticmethod
    def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), size: int = 64, fov_deg: float = 40.0) -> Camera:
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise GeometryError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        f = 0.5 * size / np.tan(np.radians(fov_deg) / 2.0)
        c = (size - 1) / 2.0
        return Camera(f, f, c, c, size, size, rot, -rot @ eye)

    def translated(self, offset) -> Camera:
        """The same camera after moving its center by ``offset`` in world space."""
        off = np.asarray(offset, dtype=np.float64)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.rotation, self.translation - self.rotation @ off)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> Camera:
        return Camera(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), np.array(d["rotation"]), np.array(d["translation"]),
        )
