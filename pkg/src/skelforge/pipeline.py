"""End-to-end stages: skeleton decoding, volume refinement, explicit and implicit recovery, evaluation."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import load_store, save_store
from .autodiff.nn import EncoderOutput, ImageEncoder, ParamStore, encode_views, optimizer_step
from .autodiff.tensor import Tensor
from .config import RunConfig
from .dataset.shapes import ShapeSample
from .dataset.store import MissingArtifactError, generate_dataset, read_split, write_split
from .decoders import SkeletonDecoders, assemble_skeleton, loss_phi, loss_psi, to_pointset
from .geometry.chamfer import chamfer, curvature_weights
from .geometry.io import read_obj, read_volume, write_obj, write_ply, write_volume
from .geometry.marching import marching_cubes
from .geometry.mesh import sample_surface, voxelize_mesh
from .geometry.morphology import iou
from .geometry.types import TriangleMesh, VoxelGrid
from .point2voxel import P2VConfig, downsample, point2voxel
from .refinement import RefinementConfig, VolumeRefiner, refine_loss, skeletonnet_loss, target_windows
from .skedisn import DisnConfig, FieldInputs, SkeDISN, evaluate_grid, inside_probability, sample_training_points, skedisn_loss
from .skegcnn import SkeGCNN, deform, extract_initial_mesh, skegcnn_loss

SPLIT = "train"
METHODS = ("explicit", "implicit")


# -- model -----------------------------------------------------------------------------
class Model:
    """Every learnable component in one parameter store, built in a fixed order from the config."""

    def __init__(self, cfg: RunConfig):
        m = cfg.model
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.store = ParamStore()
        self.encoder = ImageEncoder(self.store, rng, name="enc", code_dim=m.code_dim)
        self.decoders = SkeletonDecoders(
            self.store, rng, m.code_dim, m.n_curves, m.curve_samples, m.n_sheets, m.sheet_side, widths=m.decoder_widths, name="ske"
        )
        self.ref_cfg = RefinementConfig(
            r=m.r,
            global_down=tuple(m.global_down),
            global_up=tuple(m.global_up),
            local_down=tuple(m.local_down),
            local_up=tuple(m.local_up),
            feature_channels=m.feature_channels,
        )
        self.refiner = VolumeRefiner(self.store, rng, self.ref_cfg, m.code_dim, name="ref")
        self.p2v = P2VConfig(resolution=self.ref_cfg.r_prime, M=m.M, tol=m.p2v_tol)
        # mesh recovery networks each own an image encoder, trained with them
        self.gcn_encoder = ImageEncoder(self.store, rng, name="genc", code_dim=m.code_dim)
        self.gcn = SkeGCNN(self.store, rng, self.gcn_encoder.feature_width + 3, m.gcn_hidden, m.gcn_layers, name="gcn")
        self.disn_encoder = ImageEncoder(self.store, rng, name="denc", code_dim=m.code_dim)
        dcfg = DisnConfig(
            embed=tuple(m.disn_embed), head=tuple(m.disn_head), skeleton_channels=m.skeleton_channels, eps=cfg.train.eps, use_skeleton=m.use_skeleton
        )
        self.disn = SkeDISN(self.store, rng, m.code_dim, self.disn_encoder.feature_width, dcfg, name="disn")

    def encode(self, sample: ShapeSample, encoder: ImageEncoder | None = None) -> tuple[Tensor, list[tuple[EncoderOutput, object]]]:
        code, outs = encode_views(encoder or self.encoder, [img for img, _ in sample.views])
        return code, [(o, cam) for o, (_, cam) in zip(outs, sample.views)]

    def encode_frozen(self, sample: ShapeSample, encoder: ImageEncoder | None = None) -> tuple[Tensor, list]:
        """Encoder outputs as constants, for stages that do not train the encoder."""
        code, views = self.encode(sample, encoder)
        frozen = [(EncoderOutput(o.global_code.detach(), [(fm.detach(), f) for fm, f in o.feature_maps]), cam) for o, cam in views]
        return code.detach(), frozen

    def skeleton(self, code) -> tuple[Tensor, Tensor]:
        return self.decoders(code)

    def skeleton_volume(self, code) -> Tensor:
        curves, sheets = self.skeleton(code)
        pts, _ = assemble_skeleton(curves, sheets)
        return point2voxel(pts, self.p2v)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_store(path, self.store)

    def load(self, path) -> None:
        if not Path(path).exists():
            raise MissingArtifactError(f"checkpoint {path} not found; run the earlier pipeline stage first")
        load_store(path, self.store)


# -- run directory ------------------------------------------------------------------------
@dataclass
class Run:
    cfg: RunConfig

    @property
    def root(self) -> Path:
        return Path(self.cfg.run_dir)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def checkpoint(self, stage: str) -> Path:
        return self.root / "checkpoints" / f"{stage}.skf"

    def log(self, record: dict) -> None:
        with open(self.path("log.jsonl"), "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write_csv(self, name: str, rows: list[dict]) -> Path:
        p = self.path("metrics", name)
        if not rows:
            p.write_text("")
            return p
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        return p


def require(path: Path, hint: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(f"{path} not found; {hint}")
    return Path(path)


def load_samples(cfg: RunConfig) -> list[ShapeSample]:
    return read_split(cfg.data_dir, SPLIT)


# -- stages ------------------------------------------------------------------------------
def gen_data(cfg: RunConfig) -> list[ShapeSample]:
    d = cfg.data
    samples = generate_dataset(
        d.kinds, per_kind=d.per_kind, seed=cfg.seed, randomize=d.randomize, n_views=d.n_views, image_size=d.image_size, resolution=d.resolution, n_surface=d.n_surface
    )
    write_split(cfg.data_dir, SPLIT, samples)
    return samples


def skeleton_losses(model: Model, sample: ShapeSample, alpha: float, code=None):
    if code is None:
        code, _ = model.encode(sample)
    curves, sheets = model.skeleton(code)
    gt_cur, gt_sur = sample.gt_skeleton.split()
    l_phi = loss_phi(curves, gt_cur, model.decoders.lines, alpha)
    l_psi = loss_psi(sheets, gt_sur, model.decoders.squares, alpha)
    return l_phi, l_psi, curves, sheets, code


def window_refine_loss(model: Model, u_in, code, v_star, indices) -> Tensor:
    """refine_loss over a subset of output windows (the full V costs all 64 windows per step)."""
    u_out_down = model.refiner.coarse(u_in, code)
    pred = model.refiner.windows(u_in, u_out_down, indices)
    return refine_loss(pred, target_windows(v_star, model.refiner.tiling, indices))


def scheduled_lr(base: float, step: int, steps: int, factor: float, every: int, epochs: int) -> float:
    """Step decay by ``factor`` every ``every`` epochs, with ``epochs`` spread over ``steps``."""
    if factor == 1.0 or steps <= 0:
        return base
    return base * factor ** ((step * epochs) // (every * steps))


def train_skeleton(cfg: RunConfig, model: Model, samples: list[ShapeSample], run: Run | None = None) -> list[dict]:
    t = cfg.train
    rows = []
    for step in range(t.skeleton_steps):
        sample = samples[step % len(samples)]
        l_phi, l_psi, _, _, _ = skeleton_losses(model, sample, t.alpha)
        total = l_phi + l_psi
        total.backward()
        optimizer_step(model.store, t.lr, only=["enc.", "ske."])
        model.store.zero_grad()
        row = {"step": step, "shape": sample.name, "loss": total.item(), "l_phi": l_phi.item(), "l_psi": l_psi.item()}
        rows.append(row)
        if run and (step % t.log_every == 0 or step == t.skeleton_steps - 1):
            run.log({"cmd": "train-skeleton", **row})
    return rows


def end_to_end_losses(model: Model, sample: ShapeSample, cfg: RunConfig, indices) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Decoder losses plus refine_loss on the given windows, connected through Point2Voxel."""
    l_phi, l_psi, curves, sheets, code = skeleton_losses(model, sample, cfg.train.alpha)
    pts, _ = assemble_skeleton(curves, sheets)
    l_ref = window_refine_loss(model, point2voxel(pts, model.p2v), code, sample.gt_volume, indices)
    return skeletonnet_loss(l_phi, l_psi, l_ref, cfg.train.beta), l_phi, l_psi, l_ref


def finetune(cfg: RunConfig, model: Model, samples: list[ShapeSample], run: Run | None = None) -> list[dict]:
    t = cfg.train
    rng = np.random.default_rng(cfg.seed + 4)
    n = len(model.refiner.tiling)
    rows = []
    for step in range(t.finetune_steps):
        sample = samples[step % len(samples)]
        idx = rng.choice(n, min(t.refine_windows, n), replace=False)
        total, l_phi, l_psi, l_ref = end_to_end_losses(model, sample, cfg, idx)
        total.backward()
        optimizer_step(model.store, t.finetune_lr, only=["enc.", "ske.", "ref."], allow_missing=True)
        model.store.zero_grad()
        row = {"step": step, "shape": sample.name, "loss": total.item(), "l_phi": l_phi.item(), "l_psi": l_psi.item(), "l_refine": l_ref.item()}
        rows.append(row)
        if run and (step % t.log_every == 0 or step == t.finetune_steps - 1):
            run.log({"cmd": "refine", "phase": "end-to-end", **row})
    return rows


def refine_schedule(steps: int) -> list[str]:
    """Global stream first, then the local stream, then both."""
    a = steps // 3
    b = (steps - a) // 2
    return ["global"] * a + ["local"] * b + ["joint"] * (steps - a - b)


def train_refine(cfg: RunConfig, model: Model, samples: list[ShapeSample], run: Run | None = None) -> list[dict]:
    t = cfg.train
    rng = np.random.default_rng(cfg.seed + 2)
    inputs = []
    for s in samples:
        code, _ = model.encode_frozen(s)
        inputs.append((model.skeleton_volume(code).detach(), code))
    tiling = model.refiner.tiling
    rows = []
    for step, phase in enumerate(refine_schedule(t.refine_steps)):
        k = step % len(samples)
        sample, (u_in, code) = samples[k], inputs[k]
        if phase == "global":
            coarse = model.refiner.coarse(u_in, code)
            target = downsample(downsample(VoxelGrid(sample.gt_volume.values))).values
            loss = refine_loss(coarse, target)
            only = ["ref.imgvol.", "ref.glob."]
        else:
            idx = rng.choice(len(tiling), min(t.refine_windows, len(tiling)), replace=False)
            coarse = model.refiner.coarse(u_in, code)
            if phase == "local":
                coarse = coarse.detach()
            pred = model.refiner.windows(u_in, coarse, idx)
            loss = refine_loss(pred, target_windows(sample.gt_volume, tiling, idx))
            only = ["ref.loc."] if phase == "local" else ["ref."]
        loss.backward()
        optimizer_step(model.store, t.refine_lr, only=only, allow_missing=True)
        model.store.zero_grad()
        row = {"step": step, "phase": phase, "shape": sample.name, "refine_loss": loss.item()}
        rows.append(row)
        if run and (step % t.log_every == 0 or step == t.refine_steps - 1):
            run.log({"cmd": "refine", **row})
    return rows


def refine_volume(model: Model, sample: ShapeSample) -> VoxelGrid:
    code, _ = model.encode_frozen(sample)
    v, _ = model.refiner(model.skeleton_volume(code).detach(), code)
    return VoxelGrid(v.values)


def adaptive_iso(volume: VoxelGrid) -> float:
    """0.5 when the volume crosses it, else the midpoint of its range (undertrained models)."""
    lo, hi = float(volume.values.min()), float(volume.values.max())
    return 0.5 if lo < 0.5 < hi else 0.5 * (lo + hi)


def initial_mesh(volume: VoxelGrid, max_vertices: int) -> TriangleMesh:
    return extract_initial_mesh(volume, adaptive_iso(volume), max_vertices)


def implicit_mesh(model: Model, sample: ShapeSample, volume: VoxelGrid, r: int) -> TriangleMesh:
    """Marching cubes on the SkeDISN inside probability; empty when the field is constant."""
    grid = evaluate_grid(inside_probability(model.disn, disn_inputs(model, sample, volume)), r)
    return marching_cubes(grid, adaptive_iso(grid))


def train_gcn(cfg: RunConfig, model: Model, samples, volumes, run: Run | None = None) -> tuple[list[dict], list[TriangleMesh]]:
    t = cfg.train
    rng = np.random.default_rng(cfg.seed + 3)
    prepared = []
    for s, v in zip(samples, volumes):
        mesh0 = initial_mesh(v, cfg.model.max_vertices)
        gt = sample_surface(s.mesh, 10_000, cfg.seed)
        kappa = curvature_weights(gt, t.kappa_k, t.kappa_angle, t.kappa_weight)
        prepared.append((mesh0, gt, kappa))
    rows = []
    for step in range(t.gcn_steps):
        k = step % len(samples)
        mesh0, gt, kappa = prepared[k]
        _, views = model.encode(samples[k], model.gcn_encoder)
        _, verts = deform(mesh0, views, model.gcn)
        loss = skegcnn_loss(verts, mesh0, gt, t.lambda1, t.lambda2, t.gcn_samples, rng, kappa)
        loss.backward()
        lr = scheduled_lr(t.gcn_lr, step, t.gcn_steps, t.gcn_lr_decay, t.gcn_decay_epochs, t.schedule_epochs)
        optimizer_step(model.store, lr, only=["genc.", "gcn."], allow_missing=True)
        model.store.zero_grad()
        row = {"step": step, "shape": samples[k].name, "loss": loss.item()}
        rows.append(row)
        if run and (step % t.log_every == 0 or step == t.gcn_steps - 1):
            run.log({"cmd": "recon-explicit", **row})
    meshes = [deform(m0, model.encode_frozen(smp, model.gcn_encoder)[1], model.gcn)[0] for smp, (m0, _, _) in zip(samples, prepared)]
    return rows, meshes


def disn_inputs(model: Model, sample: ShapeSample, volume: VoxelGrid, frozen: bool = True) -> FieldInputs:
    encode = model.encode_frozen if frozen else model.encode
    code, views = encode(sample, model.disn_encoder)
    return FieldInputs(code, views, volume)


def train_disn(cfg: RunConfig, model: Model, samples, volumes, run: Run | None = None) -> list[dict]:
    t = cfg.train
    per_epoch = max(t.disn_points // t.disn_batch, 1)
    pools: dict[int, tuple] = {}
    rows = []
    for step in range(t.disn_steps):
        k = step % len(samples)
        local = step // len(samples)
        epoch, part = divmod(local, per_epoch)
        if part == 0 or k not in pools:
            seed = [cfg.seed, k, epoch]
            pools[k] = sample_training_points(samples[k].mesh, t.disn_points, t.eps, np.random.default_rng(seed))
        pts, labels = pools[k]
        sl = slice(part * t.disn_batch, (part + 1) * t.disn_batch)
        loss = skedisn_loss(model.disn(pts[sl], disn_inputs(model, samples[k], volumes[k], frozen=False)), labels[sl])
        loss.backward()
        lr = scheduled_lr(t.disn_lr, step, t.disn_steps, t.disn_lr_decay, t.disn_decay_epochs, t.schedule_epochs)
        optimizer_step(model.store, lr, only=["denc.", "disn."], allow_missing=True)
        model.store.zero_grad()
        row = {"step": step, "shape": samples[k].name, "loss": loss.item()}
        rows.append(row)
        if run and (step % t.log_every == 0 or step == t.disn_steps - 1):
            run.log({"cmd": "recon-implicit", **row})
    return rows


# -- evaluation ----------------------------------------------------------------------------
def chamfer_metric(pred: TriangleMesh, gt: TriangleMesh, n: int = 10_000, seed: int = 0) -> float:
    """Mean squared nearest distance per direction, summed, x1000; both meshes sampled with one seed."""
    a = sample_surface(pred, n, seed).points
    b = sample_surface(gt, n, seed).points
    return 1000.0 * chamfer(a, b, "mean").item()


def iou_metric(pred: TriangleMesh, gt: TriangleMesh, resolution: int = 64) -> float:
    return iou(voxelize_mesh(pred, resolution), voxelize_mesh(gt, resolution))


def evaluate(cfg: RunConfig, samples, method: str, meshes) -> list[dict]:
    rows = []
    for s, m in zip(samples, meshes):
        rows.append(
            {"method": method, "shape": s.name, "cd_x1000": chamfer_metric(m, s.mesh, cfg.eval.n_points, cfg.seed), "iou": iou_metric(m, s.mesh, cfg.eval.iou_resolution)}
        )
    if rows:
        rows.append({"method": method, "shape": "mean", "cd_x1000": float(np.mean([r["cd_x1000"] for r in rows])), "iou": float(np.mean([r["iou"] for r in rows]))})
    return rows


def interpolate_codes(a, b, weights) -> list[np.ndarray]:
    a = np.asarray(a.values if isinstance(a, Tensor) else a)
    b = np.asarray(b.values if isinstance(b, Tensor) else b)
    return [(1.0 - w) * a + w * b for w in weights]


# -- commands -----------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig) -> dict:
    samples = gen_data(cfg)
    Run(cfg).log({"cmd": "gen-data", "samples": [s.name for s in samples]})
    return {"samples": len(samples), "data_dir": cfg.data_dir}


def cmd_train_skeleton(cfg: RunConfig) -> dict:
    """Decoder training; with ``train.end_to_end`` the refiner is trained and everything fine-tuned jointly."""
    run = Run(cfg)
    samples = load_samples(cfg)
    model = Model(cfg)
    t0 = time.time()
    rows = train_skeleton(cfg, model, samples, run)
    run.write_csv("train_skeleton.csv", rows)
    result = {"final_loss": rows[-1]["loss"] if rows else None}
    if cfg.train.end_to_end:
        run.write_csv("refine.csv", train_refine(cfg, model, samples, run))
        ft = finetune(cfg, model, samples, run)
        run.write_csv("finetune.csv", ft)
        result["final_end_to_end_loss"] = ft[-1]["loss"] if ft else None
    model.save(run.checkpoint("skeleton"))
    run.path("checkpoints", "skeleton.json").write_text(json.dumps({"end_to_end": cfg.train.end_to_end}))
    for s in samples:
        code, _ = model.encode_frozen(s)
        curves, sheets = model.skeleton(code)
        pts, labels = assemble_skeleton(curves, sheets)
        write_ply(run.path("skeletons", f"{s.name}.ply"), points=to_pointset(pts, labels))
    result["seconds"] = time.time() - t0
    return result


def cmd_refine(cfg: RunConfig) -> dict:
    run = Run(cfg)
    samples = load_samples(cfg)
    model = Model(cfg)
    model.load(require(run.checkpoint("skeleton"), "run train-skeleton first"))
    meta = run.root / "checkpoints" / "skeleton.json"
    trained = meta.exists() and json.loads(meta.read_text()).get("end_to_end", False)
    if not trained:
        run.write_csv("refine.csv", train_refine(cfg, model, samples, run))
    model.save(run.checkpoint("refine"))
    out = []
    for s in samples:
        v = refine_volume(model, s)
        write_volume(run.path("volumes", f"{s.name}.skv"), v)
        out.append(refine_loss(v, s.gt_volume).item())
    return {"mean_refine_loss": float(np.mean(out)), "trained_end_to_end": bool(trained)}


def _volumes(run: Run, samples) -> list[VoxelGrid]:
    return [read_volume(require(run.root / "volumes" / f"{s.name}.skv", "run refine first")) for s in samples]


def cmd_recon_explicit(cfg: RunConfig) -> dict:
    run = Run(cfg)
    samples = load_samples(cfg)
    model = Model(cfg)
    model.load(require(run.checkpoint("refine"), "run refine first"))
    rows, meshes = train_gcn(cfg, model, samples, _volumes(run, samples), run)
    model.save(run.checkpoint("explicit"))
    run.write_csv("recon_explicit.csv", rows)
    for s, m in zip(samples, meshes):
        write_obj(run.path("meshes", "explicit", f"{s.name}.obj"), m)
    return {"meshes": len(meshes)}


def cmd_recon_implicit(cfg: RunConfig) -> dict:
    run = Run(cfg)
    samples = load_samples(cfg)
    model = Model(cfg)
    model.load(require(run.checkpoint("refine"), "run refine first"))
    volumes = _volumes(run, samples)
    rows = train_disn(cfg, model, samples, volumes, run)
    model.save(run.checkpoint("implicit"))
    run.write_csv("recon_implicit.csv", rows)
    failed = []
    for s, v in zip(samples, volumes):
        mesh = implicit_mesh(model, s, v, cfg.train.extract_resolution)
        if mesh.is_empty():
            failed.append(s.name)
        write_obj(run.path("meshes", "implicit", f"{s.name}.obj"), mesh)
    return {"meshes": len(samples), "empty": failed}


def cmd_eval(cfg: RunConfig) -> dict:
    run = Run(cfg)
    samples = load_samples(cfg)
    rows = []
    found = False
    for method in METHODS:
        d = run.root / "meshes" / method
        if not d.exists():
            continue
        found = True
        meshes = [read_obj(require(d / f"{s.name}.obj", f"rerun recon-{method}")) for s in samples]
        ok = [(s, m) for s, m in zip(samples, meshes) if not m.is_empty()]
        rows += evaluate(cfg, [s for s, _ in ok], method, [m for _, m in ok])
    if not found:
        raise MissingArtifactError(f"no meshes under {run.root / 'meshes'}; run recon-explicit or recon-implicit first")
    run.write_csv("eval.csv", rows)
    run.log({"cmd": "eval", "rows": rows})
    return {"rows": rows}


def cmd_interp(cfg: RunConfig) -> dict:
    run = Run(cfg)
    samples = {s.name: s for s in load_samples(cfg)}
    names = list(samples)
    a = cfg.interp.a or names[0]
    b = cfg.interp.b or names[min(1, len(names) - 1)]
    for n in (a, b):
        if n not in samples:
            raise MissingArtifactError(f"shape {n!r} not in {cfg.data_dir}")
    model = Model(cfg)
    model.load(require(run.checkpoint("skeleton"), "run train-skeleton first"))
    ca, _ = model.encode_frozen(samples[a])
    cb, _ = model.encode_frozen(samples[b])
    files = []
    for w, code in zip(cfg.interp.weights, interpolate_codes(ca, cb, cfg.interp.weights)):
        curves, sheets = model.skeleton(Tensor(code))
        pts, labels = assemble_skeleton(curves, sheets)
        p = run.path("interp", f"{a}__{b}", f"w_{w:.2f}.ply")
        write_ply(p, points=to_pointset(pts, labels))
        files.append(str(p))
    return {"files": files}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-skeleton": cmd_train_skeleton,
    "refine": cmd_refine,
    "recon-explicit": cmd_recon_explicit,
    "recon-implicit": cmd_recon_implicit,
    "eval": cmd_eval,
    "interp": cmd_interp,
}
