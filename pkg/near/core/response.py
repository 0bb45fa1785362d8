from typing import Any, Dict, Optional

import numpy as np

from near.core.errors import NearError


def to_jsonable(value: Any) -> Any:
    """numpy 스칼라/배열과 tuple 을 JSON 으로 직렬화 가능한 값으로 변환"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def create_success_response(data: Optional[Any] = None) -> Dict[str, Any]:
    """CLI 명령 결과를 공통 응답 포맷으로 감싼다"""
    response = {"success": True}
    if data is not None:
        response["data"] = to_jsonable(data)
    return response


def create_error_response(
    code: str, message: str, details: Optional[Any] = None
) -> Dict[str, Any]:
    error = {"code": code, "message": message}
    if details is not None:
        error["details"] = to_jsonable(details)

    return {"success": False, "error": error}


def error_response_from(exc: NearError) -> Dict[str, Any]:
    """NearError → 오류 응답 (code 는 예외 클래스의 code)"""
    return create_error_response(exc.code, str(exc))
