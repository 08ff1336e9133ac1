import json

import pytest

from voxelsl.config import CameraSpec, ProjectorSpec
from voxelsl.geometry import CameraModel, default_camera, default_projector, rig_projector


def tiny_rig_config(grid=16, iters=(20, 20)) -> dict:
    """A 64x51 camera and 140x151 projector: the desk rig shrunk tenfold."""
    cam = default_camera()
    proj = default_projector()
    small_cam = CameraModel(cam.fx / 10, cam.fy / 10, 32.0, 25.6, 64, 51)
    pi = proj.intrinsics
    small_pi = CameraModel(pi.fx / 10, pi.fy / 10, pi.cx / 10, pi.cy / 10, 140, 151)
    small_proj = rig_projector(small_pi, proj.baseline, 1000.0)
    return {
        "camera": CameraSpec.from_model(small_cam).model_dump(),
        "projector": ProjectorSpec.from_model(small_proj).model_dump(),
        "train": {
            "grid_dims": [grid] * 3,
            "rays_per_iter": 256,
            "phase1_iters": iters[0],
            "phase2_iters": iters[1],
            "learning_rate": 1.0,
            "lr_final": 0.1,
            "log_every": 10,
        },
    }


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_rig_config()))
    return path


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
