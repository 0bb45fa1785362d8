"""
Tests for the near command line: JSON envelope and exit codes
"""

import json
import os

import numpy as np
import pytest

from near import main as entry
from near.core.errors import GeometryError
from near.core.response import create_success_response, error_response_from
from near.infra.hdr_io import encode_radiance_hdr
from near.lighting.envmap import make_environment
from tests.conftest import tiny_config


def _run(capsys, *argv):
    code = entry.main(list(argv))
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith("{")]
    assert lines, "no JSON payload on stdout"
    return code, json.loads(lines[-1])


@pytest.fixture
def config_file(tmp_path):
    path = str(tmp_path / "tiny.env")
    tiny_config().dump(path)
    return path


class TestEnvelope:
    """응답 포맷과 exit code"""

    def test_numpy_values_are_serialized(self):
        payload = create_success_response({"psnr": np.float64(31.5), "shape": (4, 8), "map": np.eye(2)})
        assert payload == {"success": True, "data": {"psnr": 31.5, "shape": [4, 8], "map": [[1.0, 0.0], [0.0, 1.0]]}}
        assert isinstance(payload["data"]["psnr"], float)
        json.dumps(payload)

    def test_error_from_exception(self):
        payload = error_response_from(GeometryError("camera is behind all voxels"))
        assert payload == {
            "success": False,
            "error": {"code": "GEOMETRY_ERROR", "message": "camera is behind all voxels"},
        }

    def test_usage_error(self, capsys):
        code, payload = _run(capsys, "render")
        assert code == 1
        assert payload["success"] is False
        assert payload["error"]["code"] == "CONFIG_ERROR"
        assert "--ckpt" in payload["error"]["message"]

    def test_unknown_command(self, capsys):
        code, payload = _run(capsys, "paint")
        assert code == 1
        assert payload["error"]["code"] == "CONFIG_ERROR"

    def test_missing_dataset(self, capsys, tmp_path, config_file):
        code, payload = _run(capsys, "eval", "--config", config_file, "--data", str(tmp_path / "none"))
        assert code == 1
        assert payload["error"]["code"] == "TRAINING_ERROR"

    def test_missing_config_file(self, capsys, tmp_path):
        code, payload = _run(capsys, "gen", "--config", str(tmp_path / "nope.env"), "--out", str(tmp_path / "o"))
        assert code == 1
        assert payload["error"]["code"] == "CONFIG_ERROR"

    def test_internal_error(self, capsys, monkeypatch, config_file):
        """NearError 가 아닌 예외는 exit 2"""

        def explode(args):
            raise RuntimeError("boom")

        monkeypatch.setitem(entry.COMMANDS, "gen", explode)
        code, payload = _run(capsys, "gen", "--config", config_file)
        assert code == 2
        assert payload["error"] == {"code": "INTERNAL_ERROR", "message": "boom"}


class TestCommands:
    """명령 실행"""

    def test_gen_then_eval(self, capsys, tmp_path, config_file):
        data = str(tmp_path / "data")
        code, payload = _run(capsys, "gen", "--config", config_file, "--out", data)
        assert code == 0
        assert payload["success"] is True
        assert payload["data"]["scenes"] == 1
        assert os.path.exists(os.path.join(data, "manifest.json"))

        report = str(tmp_path / "report.tsv")
        code, payload = _run(capsys, "eval", "--data", data, "--split", "test", "--out", report)
        assert code == 0
        assert payload["data"]["rows"] == 2
        assert payload["data"]["mean_psnr"] == 99.0
        assert os.path.exists(report)

    def test_seed_override(self, capsys, tmp_path, config_file):
        data = str(tmp_path / "data")
        code, _ = _run(capsys, "gen", "--config", config_file, "--seed", "3", "--out", data)
        assert code == 0
        with open(os.path.join(data, "run_config.env"), encoding="utf-8") as f:
            assert "NEAR_SEED=3" in f.read().splitlines()

    def test_train_flow_needs_data(self, capsys, config_file):
        code, payload = _run(capsys, "train-flow", "--config", config_file)
        assert code == 1
        assert "--toy" in payload["error"]["message"]

    def test_toy_flow(self, capsys, config_file):
        code, payload = _run(capsys, "train-flow", "--config", config_file, "--toy")
        assert code == 0
        assert len(payload["data"]["sample_mean"]) == 2
        assert payload["data"]["train_points"] == 64

    def test_envtok(self, capsys, tmp_path, config_file):
        path = str(tmp_path / "sky.hdr")
        with open(path, "wb") as f:
            f.write(encode_radiance_hdr(make_environment(0, "sky", height=8).radiance))
        code, payload = _run(capsys, "envtok", "--config", config_file, "--in", path)
        assert code == 0
        assert payload["data"]["tokens"] == [4, 8]

    def test_envtok_bad_suffix(self, capsys, tmp_path, config_file):
        code, payload = _run(capsys, "envtok", "--config", config_file, "--in", str(tmp_path / "sky.exr"))
        assert code == 1
        assert payload["error"]["code"] == "FORMAT_ERROR"

    @pytest.mark.slow
    def test_train_decoder_and_render(self, capsys, tmp_path, config_file):
        data = str(tmp_path / "data")
        out = str(tmp_path / "run")
        assert _run(capsys, "gen", "--config", config_file, "--out", data)[0] == 0
        code, payload = _run(capsys, "train-decoder", "--data", data, "--out", out)
        assert code == 0
        assert payload["data"]["steps"] == 2

        env = str(tmp_path / "studio.hdr")
        with open(env, "wb") as f:
            f.write(encode_radiance_hdr(make_environment(1, "studio", height=8).radiance))
        prefix = str(tmp_path / "img" / "relit")
        code, payload = _run(
            capsys, "render", "--ckpt", out, "--data", data, "--mode", "gbuffer", "--env", env, "--out", prefix
        )
        assert code == 0
        assert os.path.exists(payload["data"]["files"]["png"])

        code, payload = _run(capsys, "render", "--ckpt", out, "--data", data, "--mode", "relight", "--out", prefix)
        assert code == 1
        assert payload["error"]["code"] == "CONFIG_ERROR"
