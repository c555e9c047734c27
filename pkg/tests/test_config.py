import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skelforge.config import ConfigError, RunConfig


def test_defaults_carry_reference_hyperparameters():
    cfg = RunConfig()
    assert cfg.train.alpha == 0.2
    assert cfg.train.beta == 1.0
    assert cfg.model.M == 10.0
    assert cfg.train.lambda1 == 0.7
    assert cfg.train.lambda2 == 3e-4
    assert cfg.train.eps == 0.1
    assert (cfg.train.kappa_k, cfg.train.kappa_angle, cfg.train.kappa_weight) == (16, 60.0, 5.0)
    assert cfg.model.n_curves == 20 and cfg.model.n_sheets == 20
    assert cfg.model.disn_embed == [64, 128, 512]
    assert cfg.model.disn_head == [512, 256, 2]
    assert cfg.model.gcn_layers == 6 and cfg.model.gcn_hidden == 192
    assert cfg.interp.weights == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert cfg.eval.n_points == 10_000 and cfg.eval.iou_resolution == 64


def test_json_round_trip(tmp_path):
    cfg = RunConfig().with_overrides(["train.lr=3e-4", "seed=7", "data.kinds=[\"torus\"]"])
    p = tmp_path / "cfg.json"
    cfg.save(p)
    back = RunConfig.load(p)
    assert back == cfg
    assert back.to_json() == cfg.to_json()


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    lr=st.floats(1e-8, 1.0, allow_nan=False),
    steps=st.integers(0, 10_000),
    use_skeleton=st.booleans(),
    run_dir=st.text(min_size=1, max_size=12),
)
def test_round_trip_is_lossless(seed, lr, steps, use_skeleton, run_dir):
    cfg = RunConfig(seed=seed, run_dir=run_dir)
    cfg.train.lr = lr
    cfg.train.disn_steps = steps
    cfg.model.use_skeleton = use_skeleton
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg


def test_unknown_keys_rejected():
    d = RunConfig().to_dict()
    d["train"]["learning_rate"] = 1.0
    with pytest.raises(ConfigError, match="train.learning_rate"):
        RunConfig.from_dict(d)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"bogus": 1})


def test_type_errors_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": "zero"})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"end_to_end": 1}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"disn_embed": [64, "x"]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": []})


def test_integers_accepted_for_float_fields():
    cfg = RunConfig.from_dict({"train": {"lr": 1}})
    assert isinstance(cfg.train.lr, float) and cfg.train.lr == 1.0


def test_overrides():
    cfg = RunConfig().with_overrides(["train.beta=0", "run_dir=out/x", "model.use_skeleton=false"])
    assert cfg.train.beta == 0.0
    assert cfg.run_dir == "out/x"
    assert cfg.model.use_skeleton is False
    for bad in (["train.nope=1"], ["nope.lr=1"], ["train.lr"], ["train.lr.x=1"]):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(bad)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        RunConfig.load(tmp_path / "missing.json")
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        RunConfig.load(p)
