#!/usr/bin/env python3
"""
near CLI 엔트리포인트

결과는 공통 응답 포맷(JSON)으로 stdout 에 출력합니다.
exit code: 0 성공, 1 사용자 오류 (NearError), 2 내부 오류
"""

import json
import logging
import sys
from typing import List, Optional

from near.cli.commands import (
    cmd_envtok,
    cmd_eval,
    cmd_gen,
    cmd_render,
    cmd_train_decoder,
    cmd_train_flow,
)
from near.cli.parser import build_parser
from near.config import settings
from near.core.errors import NearError
from near.core.response import create_error_response, create_success_response, error_response_from

COMMANDS = {
    "gen": cmd_gen,
    "train-flow": cmd_train_flow,
    "train-decoder": cmd_train_decoder,
    "render": cmd_render,
    "eval": cmd_eval,
    "envtok": cmd_envtok,
}

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


def setup_logging():
    """로깅 설정"""
    log_level = getattr(settings, "log_level", "INFO")
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(sys.stdout),
        ],
    )


def _emit(payload) -> None:
    print(json.dumps(payload, default=str, sort_keys=True))


def main(argv: Optional[List[str]] = None) -> int:
    """메인 엔트리포인트"""
    setup_logging()
    logger = logging.getLogger(__name__)

    try:
        args = build_parser().parse_args(argv)
        logger.info(f"Running near {args.command}")
        data = COMMANDS[args.command](args)
    except NearError as e:
        logger.error(f"{type(e).__name__}: {e}")
        _emit(error_response_from(e))
        return EXIT_USER_ERROR
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        _emit(create_error_response("INTERNAL_ERROR", str(e)))
        return EXIT_INTERNAL_ERROR

    _emit(create_success_response(data))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
