import csv
import json

import numpy as np
import pytest

import oracles
from skelforge import pipeline
from skelforge.cli import EXIT_CONFIG, EXIT_MISSING, main
from skelforge.config import RunConfig
from skelforge.dataset.shapes import icosphere, torus_mesh
from skelforge.dataset.store import MissingArtifactError
from skelforge.geometry import VoxelGrid, read_obj, sample_surface
from skelforge.geometry.io import read_volume

TINY = {
    "seed": 0,
    "data": {"n_views": 1, "image_size": 32, "resolution": 16, "n_surface": 1000},
    "model": {
        "code_dim": 32,
        "n_curves": 4,
        "curve_samples": 16,
        "n_sheets": 4,
        "sheet_side": 4,
        "decoder_widths": [32, 16, 3],
        "r": 16,
        "global_down": [4, 4, 4, 4],
        "global_up": [4, 4, 4, 2],
        "local_down": [4, 4, 4, 4],
        "local_up": [4, 4, 4, 4, 2],
        "feature_channels": 2,
        "gcn_hidden": 16,
        "gcn_layers": 2,
        "disn_embed": [16, 32],
        "disn_head": [32, 2],
        "skeleton_channels": 4,
    },
    "train": {
        "skeleton_steps": 2,
        "refine_steps": 3,
        "finetune_steps": 2,
        "gcn_steps": 1,
        "gcn_samples": 256,
        "disn_steps": 2,
        "disn_points": 256,
        "disn_batch": 128,
        "extract_resolution": 16,
        "log_every": 1,
    },
    "eval": {"n_points": 500, "iou_resolution": 16},
}


def tiny_config(tmp_path, **top) -> RunConfig:
    d = json.loads(json.dumps(TINY))
    d.update(run_dir=str(tmp_path / "run"), data_dir=str(tmp_path / "data"), **top)
    return RunConfig.from_dict(d)


# -- metrics -------------------------------------------------------------------------------
def test_identical_meshes_score_perfectly():
    m = torus_mesh(0.3, 0.1)
    assert pipeline.chamfer_metric(m, m, 2000) == 0.0
    assert pipeline.iou_metric(m, m, 32) == 1.0


def test_chamfer_metric_matches_all_pairs_oracle():
    a, b = icosphere(0.3, 2), torus_mesh(0.3, 0.12)
    n = 256
    pa = sample_surface(a, n, 5).points
    pb = sample_surface(b, n, 5).points
    expected = 1000.0 * oracles.chamfer_mean(pa, pb)
    assert abs(pipeline.chamfer_metric(a, b, n, seed=5) - expected) <= 1e-10 * max(1.0, expected)


def test_chamfer_metric_scale_convention():
    # concentric spheres 0.1 apart: mean squared distance about 0.01 per direction, summed, x1000
    a, b = icosphere(0.3, 2), icosphere(0.4, 2)
    cd = pipeline.chamfer_metric(a, b, 2000)
    assert 2 * 1000 * 0.1**2 * 0.9 < cd < 2 * 1000 * 0.1**2 * 1.01


def test_evaluate_appends_aggregate_row():
    cfg = RunConfig()
    cfg.eval.n_points, cfg.eval.iou_resolution = 500, 16

    class S:
        def __init__(self, name, mesh):
            self.name, self.mesh = name, mesh

    a, b = icosphere(0.3, 2), torus_mesh(0.3, 0.1)
    rows = pipeline.evaluate(cfg, [S("a", a), S("b", b)], "explicit", [a, a])
    assert [r["shape"] for r in rows] == ["a", "b", "mean"]
    assert rows[0]["cd_x1000"] == 0.0 and rows[0]["iou"] == 1.0
    assert rows[2]["iou"] == pytest.approx((rows[0]["iou"] + rows[1]["iou"]) / 2)


# -- interpolation ---------------------------------------------------------------------------
def test_interpolation_endpoints_exact():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=64), rng.normal(size=64)
    out = pipeline.interpolate_codes(a, b, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert np.array_equal(out[0], a)
    assert np.array_equal(out[-1], b)
    assert np.allclose(out[2], (a + b) / 2)


# -- small pieces --------------------------------------------------------------------------
def test_refine_schedule_order():
    s = pipeline.refine_schedule(10)
    assert len(s) == 10
    assert s == sorted(s, key=["global", "local", "joint"].index)
    assert set(s) == {"global", "local", "joint"}


def test_scheduled_lr():
    # 60 epochs over 600 steps: one epoch per 10 steps, decay every 2 epochs
    assert pipeline.scheduled_lr(1e-4, 0, 600, 0.9, 2, 60) == 1e-4
    assert pipeline.scheduled_lr(1e-4, 19, 600, 0.9, 2, 60) == 1e-4
    assert pipeline.scheduled_lr(1e-4, 20, 600, 0.9, 2, 60) == pytest.approx(0.9e-4)
    assert pipeline.scheduled_lr(1e-4, 599, 600, 0.9, 2, 60) == pytest.approx(1e-4 * 0.9**29)
    assert pipeline.scheduled_lr(1e-4, 400, 600, 0.1, 20, 60) == pytest.approx(1e-6)
    assert pipeline.scheduled_lr(1e-4, 400, 600, 1.0, 20, 60) == 1e-4


def test_adaptive_iso():
    assert pipeline.adaptive_iso(VoxelGrid(np.linspace(0, 1, 64).reshape(4, 4, 4))) == 0.5
    assert pipeline.adaptive_iso(VoxelGrid(np.linspace(0.1, 0.3, 64).reshape(4, 4, 4))) == pytest.approx(0.2)


# -- CLI -------------------------------------------------------------------------------------
def test_cli_config_errors(tmp_path, capsys):
    assert main(["show-config", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG
    assert main(["show-config", "--set", "train.nope=1"]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"lr": "fast"}}')
    assert main(["show-config", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["show-config", "--set", "train.lr=0.5"]) == 0
    assert json.loads(capsys.readouterr().out)["train"]["lr"] == 0.5


def test_cli_missing_artifacts(tmp_path, caplog):
    common = ["--run-dir", str(tmp_path / "run"), "--data-dir", str(tmp_path / "data")]
    for cmd in ("train-skeleton", "refine", "recon-explicit", "recon-implicit", "eval", "interp"):
        assert main([cmd, *common]) == EXIT_MISSING
    assert "train.jsonl" in caplog.text


def test_missing_checkpoint_names_file(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.data.kinds, cfg.data.per_kind = ["sphere"], 1
    pipeline.cmd_gen_data(cfg)
    with pytest.raises(MissingArtifactError, match="skeleton.skf"):
        pipeline.cmd_refine(cfg)
    with pytest.raises(MissingArtifactError, match="refine.skf"):
        pipeline.cmd_recon_explicit(cfg)


# -- integration ------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    cfg = tiny_config(tmp)
    path = tmp / "cfg.json"
    cfg.save(path)
    codes = {}
    for cmd in ("gen-data", "train-skeleton", "refine", "recon-explicit", "recon-implicit", "eval", "interp"):
        codes[cmd] = main([cmd, "--config", str(path)])
    return cfg, codes


def test_full_pipeline_on_smoke_dataset(smoke_run):
    cfg, codes = smoke_run
    assert all(c == 0 for c in codes.values()), codes
    root = pipeline.Path(cfg.run_dir)
    names = [json.loads(line)["dir"].split("/")[-1] for line in (pipeline.Path(cfg.data_dir) / "train.jsonl").read_text().splitlines()]
    assert len(names) == 8
    for method in pipeline.METHODS:
        objs = sorted(p.stem for p in (root / "meshes" / method).glob("*.obj"))
        assert objs == sorted(names)
    for n in names:
        assert not read_obj(root / "meshes" / "explicit" / f"{n}.obj").is_empty()
        assert read_volume(root / "volumes" / f"{n}.skv").resolution == 16
        assert (root / "skeletons" / f"{n}.ply").exists()
    assert len(list((root / "interp").rglob("*.ply"))) == 5


def test_eval_csv_and_logs(smoke_run):
    cfg, _ = smoke_run
    root = pipeline.Path(cfg.run_dir)
    with open(root / "metrics" / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    explicit = [r for r in rows if r["method"] == "explicit"]
    assert len(explicit) == 9 and explicit[-1]["shape"] == "mean"
    for r in explicit:
        assert float(r["cd_x1000"]) >= 0 and 0 <= float(r["iou"]) <= 1
    cmds = {json.loads(line)["cmd"] for line in (root / "log.jsonl").read_text().splitlines()}
    assert {"gen-data", "train-skeleton", "refine", "recon-explicit", "recon-implicit", "eval"} <= cmds


def test_interp_endpoints_reproduce_skeletons(smoke_run):
    cfg, _ = smoke_run
    from skelforge.decoders import assemble_skeleton
    from skelforge.geometry.io import read_ply

    root = pipeline.Path(cfg.run_dir)
    samples = pipeline.load_samples(cfg)
    model = pipeline.Model(cfg)
    model.load(root / "checkpoints" / "skeleton.skf")
    d = root / "interp" / f"{samples[0].name}__{samples[1].name}"
    for w, s in ((0.0, samples[0]), (1.0, samples[1])):
        code, _ = model.encode_frozen(s)
        pts, _ = assemble_skeleton(*model.skeleton(code))
        stored = read_ply(d / f"w_{w:.2f}.ply")
        assert np.array_equal(np.asarray(stored.points), pts.values)


def test_end_to_end_training_feeds_refine(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.data.kinds, cfg.data.per_kind = ["table"], 1
    cfg.train.end_to_end = True
    pipeline.cmd_gen_data(cfg)
    out = pipeline.cmd_train_skeleton(cfg)
    assert np.isfinite(out["final_end_to_end_loss"])
    root = pipeline.Path(cfg.run_dir)
    rows = list(csv.DictReader(open(root / "metrics" / "finetune.csv")))
    assert len(rows) == 2 and all(float(r["l_refine"]) > 0 for r in rows)
    ref = pipeline.cmd_refine(cfg)
    assert ref["trained_end_to_end"] is True
    # the refine stage reuses the jointly trained weights unchanged
    assert (root / "checkpoints" / "skeleton.skf").read_bytes() == (root / "checkpoints" / "refine.skf").read_bytes()


def test_training_is_bit_reproducible(tmp_path):
    cfg = tiny_config(tmp_path)
    cfg.data.kinds = ["torus"]
    cfg.data.per_kind = 1
    pipeline.cmd_gen_data(cfg)
    blobs = []
    for _ in range(2):
        pipeline.cmd_train_skeleton(cfg)
        blobs.append((pipeline.Path(cfg.run_dir) / "checkpoints" / "skeleton.skf").read_bytes())
    assert blobs[0] == blobs[1]
