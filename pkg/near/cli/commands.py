"""
CLI 명령 구현. 각 함수는 argparse Namespace 를 받아 JSON 으로 직렬화할 dict 를 반환합니다.
"""

import logging
import os
from typing import Dict, Optional

import numpy as np

from near.config import settings
from near.core.errors import ConfigError
from near.models.flow import make_two_moons
from near.render.camera import parse_camera_spec
from near.schemas.report import summarize
from near.schemas.run_config import RunConfig
from near.services.dataset import CONFIG_DUMP, Dataset, DatasetService
from near.services.decoder import DECODER_CHECKPOINT, DecoderTrainingService, load_decoder
from near.services.eval import EvalService
from near.services.flow import FLOW_CHECKPOINT, FlowTrainingService, load_flow, toy_moments, train_toy_flow
from near.services.lighting import EnvTokenService, read_env
from near.services.render import RenderService, SceneInputs, resolve_checkpoint

logger = logging.getLogger(__name__)

DEFAULT_OUT = "near_out"


def output_path(args, default: str = DEFAULT_OUT) -> str:
    return args.out or settings.output_root or default


def load_run_config(args, fallback_dir: Optional[str] = None) -> RunConfig:
    """
    --config 파일, 없으면 fallback_dir 의 run_config.env, 그것도 없으면 기본값.
    --seed / --threads 가 파일 값을 덮어씁니다.
    """
    path = args.config
    if path is None and fallback_dir is not None:
        directory = fallback_dir if os.path.isdir(fallback_dir) else os.path.dirname(fallback_dir)
        dump = os.path.join(directory, CONFIG_DUMP)
        if os.path.exists(dump):
            path = dump
    return RunConfig.from_file(path, seed=args.seed, threads=args.threads)


def cmd_gen(args) -> Dict[str, object]:
    config = load_run_config(args)
    return DatasetService(config, output_path(args)).generate()


def cmd_train_flow(args) -> Dict[str, object]:
    if args.toy:
        return _train_toy(args)
    if args.data is None:
        raise ConfigError("train-flow needs --data (or --toy)")
    config = load_run_config(args, args.data)
    dataset = Dataset(args.data, config)
    out = output_path(args)
    os.makedirs(out, exist_ok=True)
    return FlowTrainingService(config, out).train(dataset)


def _train_toy(args) -> Dict[str, object]:
    config = load_run_config(args)
    net, data = train_toy_flow(config.toy_flow_iterations, config.toy_samples, seed=config.seed)
    mean, cov = toy_moments(net, config.toy_samples, config.sampler_steps, seed=config.seed + 1)
    reference = make_two_moons(config.toy_samples, seed=config.seed + 2)
    return {
        "sample_mean": mean.tolist(),
        "sample_cov": cov.tolist(),
        "data_mean": reference.mean(axis=0).tolist(),
        "data_cov": np.cov(reference, rowvar=False).tolist(),
        "train_points": int(data.shape[0]),
    }


def cmd_train_decoder(args) -> Dict[str, object]:
    config = load_run_config(args, args.data)
    dataset = Dataset(args.data, config)
    out = output_path(args)
    os.makedirs(out, exist_ok=True)
    service = DecoderTrainingService(config, out)
    return service.train(dataset, resume=args.resume, scenes=args.scene or None)


def _scene_inputs(args, config: RunConfig) -> SceneInputs:
    if args.scene_file is not None:
        if args.mode == "gbuffer":
            return SceneInputs.from_geometry(args.scene_file, config)
        return SceneInputs.from_scene_file(args.scene_file, config)
    if args.data is None:
        raise ConfigError("render needs --data with --scene, or --scene-file")
    return SceneInputs.from_dataset(Dataset(args.data, config), args.scene)


def cmd_render(args) -> Dict[str, object]:
    config = load_run_config(args, args.ckpt)
    service = RenderService(config, args.ckpt, args.flow_ckpt)
    inputs = _scene_inputs(args, config)
    env = read_env(args.env, config.env_height) if args.env else None
    camera = None
    if args.camera:
        camera = parse_camera_spec(args.camera, config.fov_deg, config.image_size, config.image_size)
    written = service.render_to_files(args.mode, inputs, output_path(args, "render"), env=env, camera=camera)
    return {"mode": args.mode, "files": written}


def cmd_eval(args) -> Dict[str, object]:
    config = load_run_config(args, args.ckpt or args.data)
    dataset = Dataset(args.data, config)
    decoder, flow = None, None
    if args.ckpt is not None:
        decoder = load_decoder(resolve_checkpoint(args.ckpt, DECODER_CHECKPOINT), config)
        if args.source == "flow":
            flow_path = args.flow_ckpt or resolve_checkpoint(args.ckpt, FLOW_CHECKPOINT)
            flow = load_flow(flow_path, config)
    service = EvalService(config, dataset, decoder, flow)
    rows = service.evaluate(args.split, scenes=args.scene or None)
    report = output_path(args, "report.tsv")
    service.write_report(report, rows)
    return {"report": report, **summarize(rows).model_dump()}


def cmd_envtok(args) -> Dict[str, object]:
    config = load_run_config(args, args.ckpt)
    checkpoint = resolve_checkpoint(args.ckpt, DECODER_CHECKPOINT) if args.ckpt else None
    return EnvTokenService(config, checkpoint).run(args.input, args.dump_triplet)

