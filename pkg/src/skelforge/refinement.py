"""Globally guided subvolume synthesis.

Resolution chain for output resolution ``r``::

    U_in   r' = r/2      soft volume from Point2Voxel
    U_in_d r'/2          2x max-pooled, refined by the global stream into U_out_d
    P_in   s' = r'/4 + 4 overlapping windows of U_in, super-resolved by the
    P_out  s  = 2 s'     local stream (guided by the matching U_out_d window)
    V      r             mean of the P_out windows where they overlap
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .autodiff import tensor as T
from .autodiff.conv import upsample_nearest3d
from .autodiff.nn import Conv3d, ConvTranspose3d, Dense, ParamStore
from .autodiff.tensor import ShapeError, Tensor, _node
from .geometry.types import GeometryError, VoxelGrid


@dataclass(frozen=True)
class RefinementConfig:
    r: int = 64
    stride: int | None = None
    global_down: tuple[int, ...] = (32, 64, 128, 128)
    global_up: tuple[int, ...] = (128, 64, 32, 2)
    local_down: tuple[int, ...] = (32, 64, 128, 128)
    local_up: tuple[int, ...] = (128, 64, 32, 16, 2)
    feature_channels: int = 8

    def __post_init__(self):
        if self.r % 8 or self.r < 16:
            raise GeometryError(f"output resolution must be a multiple of 8 and at least 16, got {self.r}")
        if self.window_stride < 1 or self.window_stride >= self.s_prime:
            raise GeometryError(f"stride {self.window_stride} leaves no overlap for windows of {self.s_prime}")

    @property
    def r_prime(self) -> int:
        return self.r // 2

    @property
    def down(self) -> int:
        return self.r_prime // 2

    @property
    def feature_res(self) -> int:
        return self.r_prime // 4

    @property
    def s_prime(self) -> int:
        return self.r_prime // 4 + 4

    @property
    def s(self) -> int:
        return 2 * self.s_prime

    @property
    def window_stride(self) -> int:
        return self.stride if self.stride is not None else self.r_prime // 4


@dataclass
class SubvolumeTiling:
    offsets: list[tuple[int, int, int]]  # input-window corners in U_in voxels
    s_prime: int
    s: int
    r: int
    coverage: np.ndarray = field(repr=False)

    @property
    def out_offsets(self) -> list[tuple[int, int, int]]:
        return [(2 * a, 2 * b, 2 * c) for a, b, c in self.offsets]

    def __len__(self) -> int:
        return len(self.offsets)


def _axis_starts(n: int, size: int, stride: int) -> list[int]:
    starts = []
    o = 0
    while True:
        starts.append(min(o, n - size))
        if o + size >= n:
            break
        o += stride
    return sorted(set(starts))


def plan_tiling(cfg: RefinementConfig) -> SubvolumeTiling:
    """Uniform lattice of input windows with stride ``cfg.window_stride``, clamped into the grid."""
    starts = _axis_starts(cfg.r_prime, cfg.s_prime, cfg.window_stride)
    offsets = list(itertools.product(starts, starts, starts))
    cov = np.zeros((cfg.r,) * 3, dtype=np.int64)
    for a, b, c in offsets:
        cov[2 * a : 2 * a + cfg.s, 2 * b : 2 * b + cfg.s, 2 * c : 2 * c + cfg.s] += 1
    return SubvolumeTiling(offsets, cfg.s_prime, cfg.s, cfg.r, cov)


# -- networks -----------------------------------------------------------------------
def _out_pad(n_in: int, target: int) -> int:
    op = target - (2 * n_in - 1)
    if op not in (0, 1):
        raise ShapeError("deconv", (n_in,), (target,), detail="cannot reach the skip size with stride 2")
    return op


def _down_sizes(n: int, levels: int) -> list[int]:
    sizes = [n]
    for _ in range(levels):
        sizes.append((sizes[-1] - 1) // 2 + 1)
    return sizes


def _probability(logits: Tensor) -> Tensor:
    """Occupied-class probability of a 2-channel softmax over the last axis."""
    return T.softmax(logits, axis=-1)[..., 1]


class GlobalStream:
    """3D U-Net on U_in_d; the image feature volume joins after the first downsampling."""

    def __init__(self, store: ParamStore, rng, cfg: RefinementConfig, name: str = "glob"):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.global_down
        u1, u2, u3, u4 = cfg.global_up
        fc = cfg.feature_channels
        self.enc = [
            Conv3d(store, f"{name}.enc0", 1, c1, rng, stride=2),
            Conv3d(store, f"{name}.enc1", c1 + fc, c2, rng, stride=2),
            Conv3d(store, f"{name}.enc2", c2, c3, rng, stride=2),
            Conv3d(store, f"{name}.enc3", c3, c4, rng, stride=2),
        ]
        self.dec = [
            ConvTranspose3d(store, f"{name}.dec0", c4, u1, rng),
            ConvTranspose3d(store, f"{name}.dec1", u1 + c3, u2, rng),
            ConvTranspose3d(store, f"{name}.dec2", u2 + c2, u3, rng),
            ConvTranspose3d(store, f"{name}.dec3", u3 + c1 + fc, u4, rng),
        ]

    def __call__(self, u_down, feature_volume) -> Tensor:
        u = T.as_tensor(u_down)
        fv = T.as_tensor(feature_volume)
        d = self.cfg.down
        if u.shape != (d, d, d):
            raise ShapeError("global_stream", u.shape, detail=f"expected U_in_d of {d}^3")
        f = self.cfg.feature_res
        if fv.shape != (f, f, f, self.cfg.feature_channels):
            raise ShapeError("global_stream", fv.shape, detail=f"expected a feature volume of {f}^3 x {self.cfg.feature_channels}")
        sizes = _down_sizes(d, 4)
        x = u.reshape(1, d, d, d, 1)
        e1 = T.concat([T.relu(self.enc[0](x)), fv.reshape(1, f, f, f, -1)], axis=-1)
        e2 = T.relu(self.enc[1](e1))
        e3 = T.relu(self.enc[2](e2))
        e4 = T.relu(self.enc[3](e3))
        y = T.relu(self.dec[0](e4, _out_pad(sizes[4], sizes[3])))
        y = T.relu(self.dec[1](T.concat([y, e3], -1), _out_pad(sizes[3], sizes[2])))
        y = T.relu(self.dec[2](T.concat([y, e2], -1), _out_pad(sizes[2], sizes[1])))
        y = self.dec[3](T.concat([y, e1], -1), _out_pad(sizes[1], sizes[0]))
        return _probability(y).reshape(d, d, d)


class LocalStream:
    """3D U-Net super-resolving a batch of ``s'``-windows (P_in plus guidance) to ``s``-windows."""

    def __init__(self, store: ParamStore, rng, cfg: RefinementConfig, name: str = "loc"):
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.local_down
        u1, u2, u3, u4, u5 = cfg.local_up
        self.enc = [
            Conv3d(store, f"{name}.enc0", 2, c1, rng, stride=2),
            Conv3d(store, f"{name}.enc1", c1, c2, rng, stride=2),
            Conv3d(store, f"{name}.enc2", c2, c3, rng, stride=2),
            Conv3d(store, f"{name}.enc3", c3, c4, rng, stride=2),
        ]
        self.dec = [
            ConvTranspose3d(store, f"{name}.dec0", c4, u1, rng),
            ConvTranspose3d(store, f"{name}.dec1", u1 + c3, u2, rng),
            ConvTranspose3d(store, f"{name}.dec2", u2 + c2, u3, rng),
            ConvTranspose3d(store, f"{name}.dec3", u3 + c1, u4, rng),
            ConvTranspose3d(store, f"{name}.dec4", u4 + 2, u5, rng),
        ]

    def __call__(self, p_in, guidance) -> Tensor:
        p, g = T.as_tensor(p_in), T.as_tensor(guidance)
        sp = self.cfg.s_prime
        if p.ndim != 4 or p.shape[1:] != (sp, sp, sp) or g.shape != p.shape:
            raise ShapeError("local_stream", p.shape, g.shape, detail=f"expected (n, {sp}, {sp}, {sp}) windows")
        n = p.shape[0]
        sizes = _down_sizes(sp, 4)
        x = T.stack([p, g], axis=-1)
        e1 = T.relu(self.enc[0](x))
        e2 = T.relu(self.enc[1](e1))
        e3 = T.relu(self.enc[2](e2))
        e4 = T.relu(self.enc[3](e3))
        y = T.relu(self.dec[0](e4, _out_pad(sizes[4], sizes[3])))
        y = T.relu(self.dec[1](T.concat([y, e3], -1), _out_pad(sizes[3], sizes[2])))
        y = T.relu(self.dec[2](T.concat([y, e2], -1), _out_pad(sizes[2], sizes[1])))
        y = T.relu(self.dec[3](T.concat([y, e1], -1), _out_pad(sizes[1], sizes[0])))
        y = self.dec[4](T.concat([y, x], -1), _out_pad(sizes[0], self.cfg.s))
        s = self.cfg.s
        return _probability(y).reshape(n, s, s, s)


class ImageFeatureVolume:
    """Dense map from the global code to a coarse feature volume, upsampled to ``r'/4``."""

    def __init__(self, store: ParamStore, rng, cfg: RefinementConfig, code_dim: int, name: str = "imgvol", base: int = 8):
        self.cfg = cfg
        self.base = min(base, cfg.feature_res)
        if cfg.feature_res % self.base:
            raise GeometryError(f"feature resolution {cfg.feature_res} not a multiple of {self.base}")
        c = cfg.feature_channels
        self.fc = Dense(store, f"{name}.fc", code_dim, self.base**3 * c, rng, init="glorot")

    def __call__(self, code) -> Tensor:
        b, c, f = self.base, self.cfg.feature_channels, self.cfg.feature_res
        vol = T.relu(self.fc(T.as_tensor(code).reshape(1, -1))).reshape(1, b, b, b, c)
        if f != b:
            vol = upsample_nearest3d(vol, f // b)
        return vol.reshape(f, f, f, c)


# -- windows, stitching, losses -----------------------------------------------------------
def crop_windows(volume, tiling: SubvolumeTiling, indices=None) -> Tensor:
    """Stack the ``s'``-windows of an ``(r', r', r')`` tensor, shape ``(n, s', s', s')``."""
    v = T.as_tensor(volume)
    sp = tiling.s_prime
    idx = range(len(tiling)) if indices is None else indices
    crops = [v[a : a + sp, b : b + sp, c : c + sp] for a, b, c in (tiling.offsets[i] for i in idx)]
    return T.stack(crops, axis=0)


def guidance_windows(u_out_down, tiling: SubvolumeTiling, indices=None) -> Tensor:
    """Matching windows of the refined coarse volume, nearest-upsampled to ``s'``."""
    u = T.as_tensor(u_out_down)
    d = u.shape[0]
    up = upsample_nearest3d(u.reshape(1, d, d, d, 1), 2).reshape(2 * d, 2 * d, 2 * d)
    return crop_windows(up, tiling, indices)


def stitch(tiling: SubvolumeTiling, windows) -> Tensor:
    """Per-voxel mean of the output windows over their coverage."""
    if isinstance(windows, (list, tuple)):
        if len(windows) != len(tiling):
            raise GeometryError(f"{len(windows)} windows for a tiling of {len(tiling)}")
        if any(w is None for w in windows):
            raise GeometryError("missing window")
        windows = T.stack([T.as_tensor(w) for w in windows], axis=0)
    w = T.as_tensor(windows)
    s = tiling.s
    if w.shape != (len(tiling), s, s, s):
        raise ShapeError("stitch", w.shape, detail=f"expected ({len(tiling)}, {s}, {s}, {s})")
    r = tiling.r
    offs = tiling.out_offsets
    # canonical offset order plus extended-precision accumulation: the result does not
    # depend on how windows were listed, and k equal values average back to that value
    order = sorted(range(len(offs)), key=lambda k: offs[k])
    acc = np.zeros((r, r, r), dtype=np.longdouble)
    for k in order:
        a, b, c = offs[k]
        acc[a : a + s, b : b + s, c : c + s] += w.values[k]
    cov = tiling.coverage.astype(np.float64)
    out = (acc / cov).astype(np.float64)

    def back(g):
        gs = g / cov
        return (np.stack([gs[a : a + s, b : b + s, c : c + s] for a, b, c in offs]),)

    return _node(out, (w,), back, "stitch")


def refine_loss(v, v_star) -> Tensor:
    """Mean per-voxel binary cross-entropy of prediction ``v`` against target ``v_star``."""
    pred = T.as_tensor(v.values if isinstance(v, VoxelGrid) else v)
    target = np.asarray(v_star.values if isinstance(v_star, VoxelGrid) else v_star, dtype=np.float64)
    if pred.shape != target.shape:
        raise GeometryError(f"refine_loss of shapes {pred.shape} and {target.shape}")
    ll = T.log(pred) * target + T.log(1.0 - pred) * (1.0 - target)
    return -ll.mean()


def skeletonnet_loss(l_phi, l_psi, l_refine, beta: float = 1.0) -> Tensor:
    total = T.as_tensor(l_phi) + l_psi
    if beta == 0.0:
        return total
    return total + T.as_tensor(l_refine) * beta


class VolumeRefiner:
    """Image feature volume, global stream and local stream for one output resolution."""

    def __init__(self, store: ParamStore, rng, cfg: RefinementConfig, code_dim: int, name: str = "ref"):
        self.cfg = cfg
        self.tiling = plan_tiling(cfg)
        self.imgvol = ImageFeatureVolume(store, rng, cfg, code_dim, name=f"{name}.imgvol")
        self.glob = GlobalStream(store, rng, cfg, name=f"{name}.glob")
        self.loc = LocalStream(store, rng, cfg, name=f"{name}.loc")
        self.prefix = name

    def coarse(self, u_in, code) -> Tensor:
        from .point2voxel import downsample

        return self.glob(downsample(T.as_tensor(u_in)), self.imgvol(code))

    def windows(self, u_in, u_out_down, indices=None, batch: int = 16) -> Tensor:
        idx = list(range(len(self.tiling))) if indices is None else list(indices)
        outs = []
        for s in range(0, len(idx), batch):
            part = idx[s : s + batch]
            outs.append(self.loc(crop_windows(u_in, self.tiling, part), guidance_windows(u_out_down, self.tiling, part)))
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=0)

    def __call__(self, u_in, code) -> tuple[Tensor, Tensor]:
        """``(V, U_out_d)`` for a full ``(r', r', r')`` input volume."""
        u_out_down = self.coarse(u_in, code)
        return stitch(self.tiling, self.windows(u_in, u_out_down)), u_out_down


def target_windows(v_star, tiling: SubvolumeTiling, indices) -> np.ndarray:
    vs = np.asarray(v_star.values if isinstance(v_star, VoxelGrid) else v_star)
    s = tiling.s
    return np.stack([vs[a : a + s, b : b + s, c : c + s] for a, b, c in (tiling.out_offsets[i] for i in indices)])
