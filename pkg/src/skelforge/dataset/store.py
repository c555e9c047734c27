"""On-disk dataset layout.

Each split has ``<root>/<split>.jsonl`` with one record per sample and a
directory per sample holding::

    mesh.obj  skeleton.ply  volume.skv  surface.ply
    view_<k>.npy (float32 H x W x 3)  cameras.json  meta.json
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..geometry.io import read_obj, read_ply, read_volume, write_obj, write_ply, write_volume
from ..geometry.types import Camera
from .shapes import KINDS, ShapeSample, generate_shape, random_params


class MissingArtifactError(FileNotFoundError):
    pass


def save_sample(sample: ShapeSample, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_obj(d / "mesh.obj", sample.mesh)
    write_ply(d / "skeleton.ply", points=sample.gt_skeleton)
    write_ply(d / "surface.ply", points=sample.gt_surface)
    write_volume(d / "volume.skv", sample.gt_volume)
    for k, (img, _) in enumerate(sample.views):
        np.save(d / f"view_{k}.npy", img.astype(np.float32))
    (d / "cameras.json").write_text(json.dumps([c.to_dict() for _, c in sample.views], indent=1))
    (d / "meta.json").write_text(json.dumps({"kind": sample.kind, "params": sample.params, "name": sample.name}, indent=1))
    return d


def load_sample(directory) -> ShapeSample:
    d = Path(directory)
    needed = ["mesh.obj", "skeleton.ply", "surface.ply", "volume.skv", "cameras.json", "meta.json"]
    for name in needed:
        if not (d / name).exists():
            raise MissingArtifactError(f"{d / name} not found")
    meta = json.loads((d / "meta.json").read_text())
    cams = [Camera.from_dict(c) for c in json.loads((d / "cameras.json").read_text())]
    views = []
    for k, cam in enumerate(cams):
        path = d / f"view_{k}.npy"
        if not path.exists():
            raise MissingArtifactError(f"{path} not found")
        views.append((np.load(path).astype(np.float64), cam))
    return ShapeSample(
        kind=meta["kind"],
        params=meta["params"],
        mesh=read_obj(d / "mesh.obj"),
        views=views,
        gt_skeleton=read_ply(d / "skeleton.ply"),
        gt_volume=read_volume(d / "volume.skv"),
        gt_surface=read_ply(d / "surface.ply"),
        name=meta.get("name", d.name),
    )


def write_split(root, split: str, samples: list[ShapeSample]) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        save_sample(s, root / split / s.name)
        lines.append(json.dumps({"dir": f"{split}/{s.name}", "kind": s.kind, "params": s.params}))
    manifest = root / f"{split}.jsonl"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_split(root, split: str) -> list[ShapeSample]:
    manifest = Path(root) / f"{split}.jsonl"
    if not manifest.exists():
        raise MissingArtifactError(f"{manifest} not found")
    out = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            out.append(load_sample(Path(root) / json.loads(line)["dir"]))
    return out


def generate_dataset(
    kinds=KINDS, per_kind: int = 2, seed: int = 0, randomize: bool = True, **shape_kwargs
) -> list[ShapeSample]:
    """``per_kind`` samples of each kind; the first of each kind uses default parameters."""
    rng = np.random.default_rng(seed)
    samples = []
    for kind in kinds:
        for i in range(per_kind):
            params = random_params(kind, rng) if (randomize and i > 0) else None
            s = generate_shape(kind, params, seed=int(rng.integers(2**31)), **shape_kwargs)
            s.name = f"{s.kind}_{i:03d}"
            samples.append(s)
    return samples
