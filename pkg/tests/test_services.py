"""
End-to-end tests for dataset generation, training, evaluation, rendering and env tokens

모든 테스트는 conftest.tiny_config 의 작은 설정으로 몇 초 안에 끝납니다.
"""

import os
import shutil

import numpy as np
import pytest

from near.core.errors import ConfigError, FormatError, GeometryError, TrainingError
from near.infra.artifacts import LOCK_NAME, read_manifest, verify_manifest
from near.infra.hdr_io import encode_radiance_hdr, read_pfm
from near.infra.scene_file import write_scene_file
from near.lighting.envmap import make_environment
from near.oracle.scene import describe_scene
from near.render.camera import Camera
from near.services.dataset import CONFIG_DUMP, GBUFFER_MAPS, Dataset, DatasetService
from near.services.decoder import DECODER_CHECKPOINT, LOSS_CURVE, DecoderTrainingService, load_decoder
from near.services.eval import EvalService, split_envs
from near.services.flow import FLOW_CHECKPOINT, FlowTrainingService
from near.services.lighting import EnvTokenService, read_env
from near.services.render import RenderService, SceneInputs
from tests.conftest import tiny_config


def _curve_rows(path):
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()


def _write_env(path, seed=5, kind="sky", height=8):
    env = make_environment(seed, kind, height=height)
    with open(path, "wb") as f:
        f.write(encode_radiance_hdr(env.radiance))
    return path


@pytest.fixture
def trained_dir(tmp_path, config, dataset_dir):
    """2 step 학습한 decoder 출력 디렉터리"""
    out = str(tmp_path / "decoder")
    DecoderTrainingService(config, out).train(Dataset(dataset_dir))
    return out


class TestDatasetService:
    """데이터셋 생성"""

    def test_layout_and_manifest(self, dataset_dir, config):
        paths = read_manifest(dataset_dir).paths()
        for expected in (
            CONFIG_DUMP,
            "scene_000/scene.txt",
            "scene_000/slat_lh.slat",
            "scene_000/slat_shaded.slat",
            "scene_000/condition.ckpt",
            "scene_000/input_env.hdr",
            "scene_000/input_00.pfm",
            "scene_000/envs/e01.hdr",
            "scene_000/views/v01/gbuffer.ckpt",
            "scene_000/views/v01/homogenized.pfm",
            "scene_000/views/v01/e01.pfm",
            "scene_000/views/v01/e01_shadow.pfm",
        ):
            assert expected in paths
        assert verify_manifest(dataset_dir) == {}
        assert not os.path.exists(os.path.join(dataset_dir, LOCK_NAME))

    def test_latents_share_coordinates(self, dataset_dir, config):
        scene = Dataset(dataset_dir).scene(0)
        assert scene.slat_lh.same_coords(scene.slat_shaded)
        assert scene.slat_lh.feature_dim == config.feature_dim
        assert scene.slat_lh.basecolor_dim == config.basecolor_dim
        assert scene.condition.shape == (config.feature_dim,)

    def test_targets(self, dataset_dir, config):
        scene = Dataset(dataset_dir).scene(0)
        target = scene.target(1, 0)
        size = config.image_size
        assert set(target) == set(GBUFFER_MAPS) | {"hdr", "shadow"}
        assert target["hdr"].shape == (size, size, 3)
        assert target["shadow"].shape == (size, size)
        assert np.all(target["hdr"] >= 0.0)
        assert np.any(target["alpha"] > 0.5)
        assert scene.env(1).height == config.env_height
        assert scene.homogenized(0).shape == (size, size, 3)

    def test_deterministic(self, tmp_path, config, dataset_dir):
        """같은 seed 는 같은 바이트"""
        again = str(tmp_path / "again")
        DatasetService(config, again).generate()
        first = {e.path: e.sha256 for e in read_manifest(dataset_dir).entries}
        second = {e.path: e.sha256 for e in read_manifest(again).entries}
        assert first == second

    def test_locked_output(self, tmp_path, config):
        root = tmp_path / "busy"
        root.mkdir()
        (root / LOCK_NAME).write_text("1")
        with pytest.raises(TrainingError, match="locked"):
            DatasetService(config, str(root)).generate()

    def test_dataset_errors(self, tmp_path, dataset_dir):
        with pytest.raises(TrainingError, match="not found"):
            Dataset(str(tmp_path / "nowhere"))
        (tmp_path / "empty").mkdir()
        with pytest.raises(TrainingError, match=CONFIG_DUMP):
            Dataset(str(tmp_path / "empty"))
        with pytest.raises(TrainingError, match="outside"):
            Dataset(dataset_dir).scene(3)

    def test_corrupt_scene(self, dataset_dir):
        with open(os.path.join(dataset_dir, "scene_000", "slat_lh.slat"), "r+b") as f:
            f.write(b"JUNKJUNK")
        with pytest.raises(TrainingError, match="corrupt"):
            Dataset(dataset_dir).scene(0)


class TestDecoderTraining:
    """decoder 학습과 체크포인트"""

    def test_outputs(self, trained_dir, config):
        assert os.path.exists(os.path.join(trained_dir, DECODER_CHECKPOINT))
        assert os.path.exists(os.path.join(trained_dir, CONFIG_DUMP))
        rows = _curve_rows(os.path.join(trained_dir, LOSS_CURVE))
        assert rows[0].split("\t") == ["step", "lr", "total", "recon", "pbr", "shadow", "vol", "alpha"]
        assert len(rows) == 1 + config.decoder_iterations
        assert all(np.isfinite(float(cell)) for cell in rows[1].split("\t"))

    def test_checkpoint_loads(self, trained_dir, config):
        decoder = load_decoder(os.path.join(trained_dir, DECODER_CHECKPOINT), config)
        assert decoder.heads.intrinsic.weight.shape[0] == config.decoder_dim

    def test_missing_checkpoint(self, tmp_path, config):
        with pytest.raises(TrainingError, match="not found"):
            load_decoder(str(tmp_path / DECODER_CHECKPOINT), config)

    def test_resume_continues_curve(self, trained_dir, dataset_dir, config):
        """이어서 학습하면 앞선 loss 행은 그대로 두고 뒤에 추가"""
        before = _curve_rows(os.path.join(trained_dir, LOSS_CURVE))
        longer = tiny_config(decoder_iterations=3)
        result = DecoderTrainingService(longer, trained_dir).train(Dataset(dataset_dir), resume=True)
        after = _curve_rows(os.path.join(trained_dir, LOSS_CURVE))
        assert after[:3] == before
        assert len(after) == 4
        assert after[3].startswith("2\t")
        assert result["steps"] == 3

    def test_resume_when_finished(self, trained_dir, dataset_dir, config):
        path = os.path.join(trained_dir, DECODER_CHECKPOINT)
        with open(path, "rb") as f:
            checkpoint = f.read()
        before = _curve_rows(os.path.join(trained_dir, LOSS_CURVE))
        DecoderTrainingService(config, trained_dir).train(Dataset(dataset_dir), resume=True)
        with open(path, "rb") as f:
            assert f.read() == checkpoint
        assert _curve_rows(os.path.join(trained_dir, LOSS_CURVE)) == before

    def test_no_samples(self, tmp_path, config, dataset_dir):
        with pytest.raises(TrainingError, match="no"):
            DecoderTrainingService(config, str(tmp_path / "x")).train(Dataset(dataset_dir), scenes=[])


class TestEvalService:
    """split 평가"""

    def test_ground_truth_self_eval(self, dataset_dir, config):
        """GT 대 GT: PSNR 99, SSIM 1"""
        rows = EvalService(config, Dataset(dataset_dir)).evaluate("test")
        assert len(rows) == config.scene_count * config.supervision_views * config.heldout_envs
        assert all(row.psnr == 99.0 for row in rows)
        assert all(row.ssim == pytest.approx(1.0, abs=1e-6) for row in rows)
        assert {row.env for row in rows} == set(config.test_env_indices())

    def test_decoder_rows(self, trained_dir, dataset_dir, config, tmp_path):
        decoder = load_decoder(os.path.join(trained_dir, DECODER_CHECKPOINT), config)
        service = EvalService(config, Dataset(dataset_dir), decoder)
        rows = service.evaluate("all")
        assert len(rows) == config.scene_count * config.supervision_views * config.supervision_envs
        assert all(np.isfinite([row.psnr, row.ssim, row.recon, row.vol]).all() for row in rows)
        report = str(tmp_path / "report.tsv")
        service.write_report(report, rows)
        with open(report, encoding="utf-8") as f:
            assert len(f.read().splitlines()) == 2 + len(rows)

    def test_splits(self, config):
        assert split_envs(config, "train") == [0]
        assert split_envs(config, "test") == [1]
        assert split_envs(config, "all") == [0, 1]
        with pytest.raises(ConfigError, match="Unknown split"):
            split_envs(config, "val")

    def test_empty_selection(self, dataset_dir, config):
        with pytest.raises(TrainingError, match="empty"):
            EvalService(config, Dataset(dataset_dir)).evaluate("test", scenes=[])


class TestRenderService:
    """학습된 decoder 렌더"""

    def test_gbuffer_mode_writes_maps(self, trained_dir, dataset_dir, config, tmp_path):
        service = RenderService(config, trained_dir)
        inputs = SceneInputs.from_dataset(Dataset(dataset_dir), 0)
        env = make_environment(9, "studio", height=config.env_height)
        written = service.render_to_files("gbuffer", inputs, str(tmp_path / "img" / "view"), env=env)
        for key in ("png", "hdr", "basecolor", "roughness", "metallic", "shadow", "alpha", "depth"):
            assert os.path.exists(written[key])
        hdr = read_pfm(written["hdr"])
        assert hdr.shape == (config.image_size, config.image_size, 3)
        assert np.all(hdr >= 0.0)

    def test_mode_requirements(self, trained_dir, dataset_dir, config):
        service = RenderService(config, trained_dir)
        inputs = SceneInputs.from_dataset(Dataset(dataset_dir), 0)
        with pytest.raises(ConfigError, match="Unknown render mode"):
            service.render("sketch", inputs)
        with pytest.raises(ConfigError, match="--env"):
            service.render("relight", inputs)
        with pytest.raises(ConfigError, match="--camera"):
            service.render("novel-view", inputs)
        with pytest.raises(ConfigError, match="--env"):
            service.render("gbuffer", inputs)

    def test_reconstruct_needs_flow(self, trained_dir, dataset_dir, config):
        service = RenderService(config, trained_dir)
        inputs = SceneInputs.from_dataset(Dataset(dataset_dir), 0)
        with pytest.raises(TrainingError, match="Flow checkpoint not found"):
            service.render("reconstruct", inputs)

    def test_gbuffer_from_scene_file(self, trained_dir, config, tmp_path):
        path = str(tmp_path / "scene.txt")
        write_scene_file(path, describe_scene(2, "box", config.surfel_budget))
        inputs = SceneInputs.from_geometry(path, config)
        env = make_environment(1, "sky", height=config.env_height)
        maps = RenderService(config, trained_dir).render("gbuffer", inputs, env=env)
        assert maps["alpha"].shape == (config.image_size, config.image_size)


@pytest.mark.slow
class TestFlowTraining:
    """rectified flow + LoRA 학습"""

    def test_train_and_render_with_flow(self, trained_dir, dataset_dir, config, tmp_path):
        result = FlowTrainingService(config, trained_dir).train(Dataset(dataset_dir))
        assert result["checkpoint"] == os.path.join(trained_dir, FLOW_CHECKPOINT)
        assert os.path.exists(result["checkpoint"])
        for key in ("base_loss", "adapter_loss", "homogenization_mse", "identity_mse"):
            assert np.isfinite(result[key])

        service = RenderService(config, trained_dir)
        inputs = SceneInputs.from_dataset(Dataset(dataset_dir), 0)
        reconstructed = service.render("reconstruct", inputs)
        camera = Camera.orbit(120.0, 15.0, config.camera_radius, config.fov_deg, 8, 8)
        novel = service.render("novel-view", inputs, camera=camera)
        assert reconstructed["hdr"].shape == (config.image_size, config.image_size, 3)
        # novel-view 도 설정의 해상도로 렌더
        assert novel["hdr"].shape == (config.image_size, config.image_size, 3)

    def test_flow_source_eval(self, trained_dir, dataset_dir, config):
        from near.services.flow import load_flow

        FlowTrainingService(config, trained_dir).train(Dataset(dataset_dir))
        decoder = load_decoder(os.path.join(trained_dir, DECODER_CHECKPOINT), config)
        flow = load_flow(os.path.join(trained_dir, FLOW_CHECKPOINT), config)
        rows = EvalService(config, Dataset(dataset_dir), decoder, flow).evaluate("test")
        assert len(rows) == config.supervision_views


class TestEnvTokens:
    """환경맵 → light token"""

    def test_run(self, config, tmp_path):
        path = _write_env(str(tmp_path / "studio.hdr"), kind="studio", height=config.env_height)
        result = EnvTokenService(config).run(path, dump_prefix=str(tmp_path / "dump" / "env"))
        assert result["tokens"] == [config.light_tokens, config.token_dim]
        assert result["e_max"] > 0.0
        for name in ("ldr", "log", "dir"):
            assert os.path.exists(result["triplet"][name])
        e_dir = read_pfm(result["triplet"]["dir"])
        np.testing.assert_allclose(np.linalg.norm(e_dir, axis=-1), 1.0, atol=1e-5)

    def test_uses_decoder_tokenizer(self, trained_dir, config, tmp_path):
        path = _write_env(str(tmp_path / "sky.hdr"), height=config.env_height)
        fresh = EnvTokenService(tiny_config(seed=9)).run(path)
        trained = EnvTokenService(config, os.path.join(trained_dir, DECODER_CHECKPOINT)).run(path)
        assert fresh["token_norm"] != trained["token_norm"]

    def test_read_env_pools_larger_maps(self, config, tmp_path):
        path = _write_env(str(tmp_path / "big.hdr"), height=16)
        env = read_env(path, 8)
        assert (env.height, env.width) == (8, 16)

    def test_read_env_errors(self, tmp_path):
        with pytest.raises(FormatError, match="must be one of"):
            read_env(str(tmp_path / "env.exr"))
        with pytest.raises(FormatError, match="not found"):
            read_env(str(tmp_path / "env.hdr"))
        small = _write_env(str(tmp_path / "small.hdr"), height=4)
        with pytest.raises(GeometryError, match="rows"):
            read_env(small, 8)

    def test_copied_dataset_is_still_valid(self, dataset_dir, tmp_path):
        copy = str(tmp_path / "copy")
        shutil.copytree(dataset_dir, copy)
        assert verify_manifest(copy) == {}
        assert len(Dataset(copy)) == 1
