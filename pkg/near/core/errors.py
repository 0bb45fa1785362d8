"""
near 패키지 전체에서 사용하는 예외 계층

CLI 는 NearError 계열을 사용자 오류(exit code 1)로, 그 밖의 예외를
내부 오류(exit code 2)로 처리합니다.
"""


class NearError(Exception):
    """모든 도메인 예외의 기반 클래스"""

    code = "NEAR_ERROR"


class TensorError(NearError, ValueError):
    """shape 불일치, scalar 가 아닌 loss 등 tensor 연산 오류"""

    code = "TENSOR_ERROR"


class NonFiniteError(TensorError):
    """데이터, logits, sampler 상태에서 NaN/Inf 가 검출된 경우"""

    code = "NON_FINITE"


class FormatError(NearError, ValueError):
    """파일 포맷 오류 (magic, truncation, header)"""

    code = "FORMAT_ERROR"


class SlatError(FormatError):
    """SLAT 좌표/feature 검증 실패"""

    code = "SLAT_ERROR"


class GeometryError(NearError, ValueError):
    """카메라, 회전 행렬, 점 집합 등 기하 입력 오류"""

    code = "GEOMETRY_ERROR"


class ConfigError(NearError, ValueError):
    """RunConfig 또는 파라미터 조합 오류"""

    code = "CONFIG_ERROR"


class RasterizerError(NearError):
    """Gaussian rasterizer 오류"""

    code = "RASTERIZER_ERROR"


class TrainingError(NearError):
    """학습/평가 워크플로우 오류 (발산, 체크포인트 누락 등)"""

    code = "TRAINING_ERROR"
