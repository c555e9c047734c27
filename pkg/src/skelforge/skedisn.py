"""Implicit surface recovery: a three-stream occupancy field.

Every stream sees the point embedding ``f_x`` plus one source of evidence:
the global image code, pixel features lifted at the point's projection, or
multi-scale crops of the skeletal volume around the point.  Each stream
emits two logits; the logits are summed and softmaxed into
``(p_outside, p_inside)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.nn import Dense, ParamStore, glorot, he
from .autodiff.conv import conv3d
from .autodiff.tensor import ShapeError, Tensor
from .geometry.camera import lift_features
from .geometry.marching import marching_cubes
from .geometry.mesh import points_inside, sample_surface
from .geometry.types import EXTENT, ORIGIN, GeometryError, TriangleMesh, VoxelGrid, grid_centers

CROP_SIZES = (4, 8, 16)


@dataclass(frozen=True)
class DisnConfig:
    embed: tuple[int, ...] = (64, 128, 512)
    head: tuple[int, ...] = (512, 256, 2)
    skeleton_channels: int = 16
    eps: float = 0.1
    batch: int = 512
    use_skeleton: bool = True


# -- training points ------------------------------------------------------------------
def sample_training_points(mesh: TriangleMesh, n: int, eps: float = 0.1, seed=0, sigmas=(0.01, 0.04)) -> tuple[np.ndarray, np.ndarray]:
    """``n`` points closer than ``eps`` to the surface, with inside labels.

    Surface samples are displaced by Gaussian jitter (half the points per
    ``sigmas`` entry) whose length is kept below ``eps``, so every point is
    within ``eps`` of its own surface sample.
    """
    if not mesh.is_watertight():
        raise GeometryError("training points need a watertight mesh")
    if n <= 0 or eps <= 0:
        raise GeometryError(f"invalid request n={n}, eps={eps}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = sample_surface(mesh, n, rng).points
    sig = np.asarray(sigmas, dtype=np.float64)[np.arange(n) % len(sigmas)]
    off = rng.normal(size=(n, 3)) * sig[:, None]
    length = np.linalg.norm(off, axis=1)
    too_far = length >= eps
    off[too_far] *= (rng.uniform(0.0, 0.999, too_far.sum()) * eps / length[too_far])[:, None]
    # clipping into the cube cannot move a point away from its (inside-cube) surface sample
    pts = np.clip(base + off, ORIGIN, ORIGIN + EXTENT)
    return pts, points_inside(mesh, pts)


# -- skeleton stream features --------------------------------------------------------
def crop_windows(volume, points, size: int) -> np.ndarray:
    """Zero-padded ``size``^3 crops of ``volume`` at native spacing centred on each point, ``(N, s, s, s)``.

    Samples sit at ``x + (j - (size-1)/2) h`` on each axis and are read
    trilinearly, so the crop keeps the point's sub-voxel position.
    """
    v = np.asarray(volume.values if isinstance(volume, VoxelGrid) else volume, dtype=np.float64)
    r = v.shape[0]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # continuous index with voxel centres at integers
    first = (pts - ORIGIN) / (EXTENT / r) - 0.5 - (size - 1) / 2.0
    base = np.floor(first)
    frac = first - base
    pad = size // 2 + 2
    b = np.clip(base.astype(np.int64) + pad, 0, r + 2 * pad - size - 1)
    windows = np.lib.stride_tricks.sliding_window_view(np.pad(v, pad), (size + 1,) * 3)
    w = windows[b[:, 0], b[:, 1], b[:, 2]]
    for axis in range(3):
        f = frac[:, axis].reshape(-1, 1, 1, 1)
        lo = w.take(np.arange(size), axis=axis + 1)
        hi = w.take(np.arange(1, size + 1), axis=axis + 1)
        w = lo + f * (hi - lo)
    return w


class CropEncoder:
    """Strided 3D convs reducing a ``size``^3 crop to a 4^3 map, then a 4^3 valid conv to a vector."""

    def __init__(self, store: ParamStore, name: str, size: int, channels: int, rng, bias: bool = True):
        if size % 4:
            raise ValueError(f"crop size {size} must be a multiple of 4")
        self.size = size
        self.stride = size // 4
        hidden = 8
        k1 = 3 if self.stride == 1 else self.stride
        self.pad1 = 1 if self.stride == 1 else 0
        self.w1 = store.add(f"{name}.c0.w", he(rng, k1**3, (k1, k1, k1, 1, hidden)))
        self.b1 = store.add(f"{name}.c0.b", np.zeros(hidden)) if bias else None
        self.w2 = store.add(f"{name}.c1.w", he(rng, 64 * hidden, (4, 4, 4, hidden, channels)))
        self.b2 = store.add(f"{name}.c1.b", np.zeros(channels)) if bias else None
        self.channels = channels

    def __call__(self, crops: np.ndarray) -> Tensor:
        n = len(crops)
        if self.stride == 1:
            x = Tensor(crops.reshape(n, self.size, self.size, self.size, 1))
            h = T.relu(conv3d(x, self.w1, self.b1, stride=1, padding=self.pad1))
        else:
            # kernel == stride: the convolution sees disjoint blocks, so it is one matmul
            k = self.stride
            blocks = crops.reshape(n, 4, k, 4, k, 4, k).transpose(0, 1, 3, 5, 2, 4, 6).reshape(n * 64, k**3)
            h = Tensor(blocks) @ self.w1.reshape(k**3, -1)
            if self.b1 is not None:
                h = h + self.b1
            h = T.relu(h).reshape(n, 4, 4, 4, -1)
        out = T.relu(conv3d(h, self.w2, self.b2, stride=1, padding=0))
        return out.reshape(n, self.channels)


class MultiscaleEncoder:
    def __init__(self, store: ParamStore, rng, channels: int = 16, sizes=CROP_SIZES, name: str = "ms", bias: bool = True):
        self.sizes = tuple(sizes)
        self.encoders = [CropEncoder(store, f"{name}.s{s}", s, channels, rng, bias) for s in self.sizes]

    @property
    def width(self) -> int:
        return sum(e.channels for e in self.encoders)

    def __call__(self, volume, points) -> Tensor:
        return T.concat([enc(crop_windows(volume, points, s)) for s, enc in zip(self.sizes, self.encoders)], axis=1)


def extract_multiscale(volume, points, encoder: MultiscaleEncoder) -> Tensor:
    """Concatenated features of the 4^3, 8^3 and 16^3 crops around each point."""
    return encoder(volume, points)


# -- field -----------------------------------------------------------------------------
class Head:
    """Three dense layers; the first is split into a point part and an evidence part."""

    def __init__(self, store: ParamStore, name: str, n_point: int, n_extra: int, widths: Sequence[int], rng):
        w0 = widths[0]
        fan = n_point + n_extra
        self.wp = store.add(f"{name}.fc0.wp", he(rng, fan, (n_point, w0)))
        self.we = store.add(f"{name}.fc0.we", he(rng, fan, (n_extra, w0)))
        self.b0 = store.add(f"{name}.fc0.b", np.zeros(w0))
        self.rest = []
        prev = w0
        for i, w in enumerate(widths[1:], start=1):
            last = i == len(widths) - 1
            init = glorot(rng, prev, w, (prev, w)) if last else he(rng, prev, (prev, w))
            self.rest.append((store.add(f"{name}.fc{i}.w", init), store.add(f"{name}.fc{i}.b", np.zeros(w))))
            prev = w
        self.n_extra = n_extra

    def __call__(self, fx: Tensor, extra) -> Tensor:
        e = T.as_tensor(extra)
        if e.shape[-1] != self.n_extra:
            raise ShapeError("field_head", e.shape, detail=f"expected {self.n_extra} evidence features")
        x = T.relu(fx @ self.wp + e @ self.we + self.b0)
        for i, (w, b) in enumerate(self.rest):
            x = x @ w + b
            if i < len(self.rest) - 1:
                x = T.relu(x)
        return x


@dataclass
class FieldInputs:
    """Per-shape evidence: global code, list of (encoder output, camera), skeletal volume."""

    code: Tensor
    views: list
    volume: VoxelGrid | None


class SkeDISN:
    def __init__(self, store: ParamStore, rng, code_dim: int, pixel_dim: int, cfg: DisnConfig | None = None, name: str = "disn"):
        self.cfg = cfg or DisnConfig()
        c = self.cfg
        dims = (3, *c.embed)
        self.embed = [Dense(store, f"{name}.emb{i}", dims[i], dims[i + 1], rng) for i in range(len(c.embed))]
        fx = c.embed[-1]
        self.omega_g = Head(store, f"{name}.wg", fx, code_dim, c.head, rng)
        self.omega_l = Head(store, f"{name}.wl", fx, pixel_dim, c.head, rng)
        self.ms = None
        self.omega_s = None
        if c.use_skeleton:
            self.ms = MultiscaleEncoder(store, rng, c.skeleton_channels, name=f"{name}.ms")
            self.omega_s = Head(store, f"{name}.ws", fx, self.ms.width, c.head, rng)
        self.prefix = name

    def point_embedding(self, points) -> Tensor:
        x = T.as_tensor(points)
        for d in self.embed:
            x = T.relu(d(x))
        return x

    def logits(self, points, inputs: FieldInputs) -> Tensor:
        pts = np.asarray(points.values if isinstance(points, Tensor) else points, dtype=np.float64).reshape(-1, 3)
        fx = self.point_embedding(pts)
        code = T.as_tensor(inputs.code).reshape(1, -1)
        total = self.omega_g(fx, code) + self.omega_l(fx, pixel_features(inputs.views, pts))
        if self.omega_s is not None:
            if inputs.volume is None:
                raise GeometryError("the skeleton stream needs a skeletal volume")
            total = total + self.omega_s(fx, extract_multiscale(inputs.volume, pts, self.ms))
        return total

    def __call__(self, points, inputs: FieldInputs) -> Tensor:
        """``(N, 2)`` probabilities ``(outside, inside)``."""
        return T.softmax(self.logits(points, inputs), axis=-1)


def pixel_features(views, points) -> Tensor:
    if not views:
        raise GeometryError("the local stream needs at least one view")
    lifted = [lift_features(enc, cam, points) for enc, cam in views]
    out = lifted[0]
    for extra in lifted[1:]:
        out = out + extra
    return out * (1.0 / len(lifted)) if len(lifted) > 1 else out


def field(points, inputs: FieldInputs, net: SkeDISN) -> Tensor:
    return net(points, inputs)


def skedisn_loss(probs, labels) -> Tensor:
    """Mean two-class cross-entropy; ``labels`` are inside indicators."""
    p = T.as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.ndim != 2 or p.shape != (len(y), 2):
        raise ShapeError("skedisn_loss", p.shape, y.shape)
    onehot = np.stack([1.0 - y, y], axis=1)
    return -(T.log(p) * onehot).sum() * (1.0 / len(y))


def accuracy(probs, labels) -> float:
    """Fraction classified correctly; ``probs`` is ``(N, 2)`` or the inside column alone."""
    p = probs.values if isinstance(probs, Tensor) else np.asarray(probs)
    inside = p[:, 1] if p.ndim == 2 else p
    return float(np.mean((inside > 0.5) == np.asarray(labels, dtype=bool)))


def evaluate_grid(fn: Callable[[np.ndarray], np.ndarray], r: int, batch: int = 4096) -> VoxelGrid:
    """Inside probability at every voxel centre of an ``r``^3 lattice."""
    centers = grid_centers(r).reshape(-1, 3)
    out = np.empty(len(centers))
    for s in range(0, len(centers), batch):
        out[s : s + batch] = np.asarray(fn(centers[s : s + batch]), dtype=np.float64).reshape(-1)
    return VoxelGrid(out.reshape(r, r, r))


def extract_isosurface(fn: Callable[[np.ndarray], np.ndarray], r: int = 64, iso: float = 0.5, batch: int = 4096) -> TriangleMesh:
    """Marching cubes on the field's inside probability sampled over the canonical cube."""
    grid = evaluate_grid(fn, r, batch)
    mesh = marching_cubes(grid, iso)
    if mesh.is_empty():
        raise GeometryError("the field has no iso-surface in the canonical cube")
    return mesh


def predict(net: SkeDISN, points, inputs: FieldInputs, batch: int = 2048) -> np.ndarray:
    """Inside probabilities in fixed-size batches (values only)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        out[s : s + batch] = net(pts[s : s + batch], inputs).values[:, 1]
    return out


def inside_probability(net: SkeDISN, inputs: FieldInputs, batch: int = 2048) -> Callable[[np.ndarray], np.ndarray]:
    def fn(points):
        return predict(net, points, inputs, batch)

    return fn
