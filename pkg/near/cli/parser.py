import argparse

from near.core.errors import ConfigError
from near.services.eval import SPLITS
from near.services.render import RENDER_MODES


class NearArgumentParser(argparse.ArgumentParser):
    """사용법 오류를 ConfigError 로 바꿔 exit code 1 로 처리"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value 실험 설정 파일 (NEAR_* 키)")
    parser.add_argument("--seed", type=int, help="설정의 seed 를 덮어씀")
    parser.add_argument("--threads", type=int, help="설정의 threads 를 덮어씀")
    parser.add_argument("--out", help="출력 디렉터리 또는 파일 prefix")


def build_parser() -> argparse.ArgumentParser:
    parser = NearArgumentParser(prog="near", description="NeAR desk-scale training and rendering")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=NearArgumentParser)

    gen = sub.add_parser("gen", help="데이터셋 생성 (GT 렌더, 균일 조명 렌더, SLAT)")
    _common(gen)

    flow = sub.add_parser("train-flow", help="rectified flow base + LoRA adapter 학습")
    _common(flow)
    flow.add_argument("--data", help="near gen 출력 디렉터리")
    flow.add_argument("--toy", action="store_true", help="2D two-moons sanity flow 만 학습")

    decoder = sub.add_parser("train-decoder", help="tokenizer + IAD + LAD end-to-end 학습")
    _common(decoder)
    decoder.add_argument("--data", required=True, help="near gen 출력 디렉터리")
    decoder.add_argument("--resume", action="store_true", help="--out 의 체크포인트에서 이어서 학습")
    decoder.add_argument("--scene", type=int, action="append", help="학습할 장면 번호 (반복 가능)")

    render = sub.add_parser("render", help="학습된 decoder 로 렌더")
    _common(render)
    render.add_argument("--ckpt", required=True, help="decoder.ckpt 또는 학습 출력 디렉터리")
    render.add_argument("--flow-ckpt", help="flow.ckpt (기본: --ckpt 디렉터리)")
    render.add_argument("--mode", choices=RENDER_MODES, default="relight")
    render.add_argument("--data", help="near gen 출력 디렉터리")
    render.add_argument("--scene", type=int, default=0, help="--data 의 장면 번호")
    render.add_argument("--scene-file", help="장면 설명 파일 (--data 대신)")
    render.add_argument("--env", help="환경맵 (.hdr 또는 .pfm)")
    render.add_argument("--camera", help="yaw,pitch,radius (degrees)")

    evaluate = sub.add_parser("eval", help="split 평가 리포트 작성")
    _common(evaluate)
    evaluate.add_argument("--data", required=True, help="near gen 출력 디렉터리")
    evaluate.add_argument("--ckpt", help="decoder 체크포인트 (없으면 GT 대 GT 평가)")
    evaluate.add_argument("--flow-ckpt", help="--source flow 에서 사용할 flow.ckpt")
    evaluate.add_argument("--split", choices=SPLITS, default="test")
    evaluate.add_argument("--source", choices=("oracle", "flow"), default="oracle",
                          help="decoder 입력 Z_lh: oracle 또는 flow 로 homogenize 한 Z_s")
    evaluate.add_argument("--scene", type=int, action="append", help="평가할 장면 번호 (반복 가능)")

    envtok = sub.add_parser("envtok", help="환경맵을 light token 으로 변환")
    _common(envtok)
    envtok.add_argument("--in", dest="input", required=True, help="환경맵 (.hdr 또는 .pfm)")
    envtok.add_argument("--dump-triplet", help="E_ldr/E_log/E_dir 를 <prefix>_*.pfm 으로 저장")
    envtok.add_argument("--ckpt", help="decoder 체크포인트 (tokenizer 가중치)")
    return parser
