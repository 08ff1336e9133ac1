import dataclasses
import json

import numpy as np
import pytest

from voxelsl.config import (
    CameraSpec,
    ConfigError,
    ProjectorSpec,
    TrainSpec,
    load_run_config,
    parse_run_config,
    projector_from_json,
)
from voxelsl.geometry import default_camera, default_projector
from voxelsl.trainer import TrainConfig


def test_train_spec_defaults_match_train_config():
    built = TrainSpec().build()
    assert dataclasses.asdict(built) == dataclasses.asdict(TrainConfig())
    assert set(TrainSpec.model_fields) == {f.name for f in dataclasses.fields(TrainConfig)}


def test_empty_config_uses_defaults():
    cfg = parse_run_config({}, environ={})
    assert cfg.workers == 1
    assert cfg.camera_model().to_dict() == default_camera().to_dict()
    np.testing.assert_allclose(cfg.projector_model().pose, default_projector().pose)


@pytest.mark.parametrize(
    "data",
    [
        {"unknown": 1},
        {"train": {"learning_rat": 1.0}},
        {"radiometry": {"quantize_bits": 16}},
        {"camera": {"fx": 1, "fy": 1, "cx": 1, "cy": 1, "width": 4, "height": 4, "pose": [1, 0, 0]}},
        {"workers": 0},
    ],
)
def test_strict_schema(data):
    with pytest.raises(ConfigError):
        parse_run_config(data, environ={})


def test_environment_overrides():
    cfg = parse_run_config({"workers": 2, "train": {"seed": 5}}, environ={"VOXELSL_WORKERS": "4", "VOXELSL_SEED": "9"})
    assert cfg.workers == 4 and cfg.train.seed == 9
    with pytest.raises(ConfigError):
        parse_run_config({}, environ={"VOXELSL_WORKERS": "many"})


def test_camera_and_projector_specs_round_trip(tmp_path):
    cam = default_camera()
    assert CameraSpec.from_model(cam).build().to_dict() == cam.to_dict()
    proj = default_projector()
    back = ProjectorSpec.from_model(proj).build()
    np.testing.assert_allclose(back.pose, proj.pose)
    assert back.baseline == pytest.approx(proj.baseline)
    (tmp_path / "p.json").write_text(json.dumps(ProjectorSpec.from_model(proj).model_dump()))
    np.testing.assert_allclose(projector_from_json(tmp_path / "p.json").pose, proj.pose)


def test_load_run_config_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json", environ={})
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / "missing.json", environ={})
    (tmp_path / "ok.json").write_text(json.dumps({"train": {"grid_dims": [8, 8, 8]}}))
    assert load_run_config(tmp_path / "ok.json", environ={}).train.build().grid_dims == (8, 8, 8)
