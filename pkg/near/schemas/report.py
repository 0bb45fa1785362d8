"""
평가 리포트 (탭 구분 텍스트 표)

    # recon loss excludes perceptual term
    scene	view	env	psnr	ssim	recon	pbr	shadow	vol	alpha
    0	0	12	27.314159	0.934211	0.041233	...

숫자는 소수점 6자리로 고정되어 같은 입력은 같은 바이트를 만듭니다.
"""

from typing import List

from pydantic import BaseModel

from near.core.errors import FormatError

REPORT_NOTE = "# recon loss excludes perceptual term"
REPORT_COLUMNS = ("scene", "view", "env", "psnr", "ssim", "recon", "pbr", "shadow", "vol", "alpha")


class MetricsRow(BaseModel):
    scene: int
    view: int
    env: int
    psnr: float
    ssim: float
    recon: float = 0.0
    pbr: float = 0.0
    shadow: float = 0.0
    vol: float = 0.0
    alpha: float = 0.0

    def to_line(self) -> str:
        values = self.model_dump()
        cells = []
        for name in REPORT_COLUMNS:
            value = values[name]
            cells.append(str(value) if isinstance(value, int) else f"{value:.6f}")
        return "\t".join(cells)


class MetricsSummary(BaseModel):
    rows: int
    mean_psnr: float
    mean_ssim: float


def format_report(rows: List[MetricsRow]) -> str:
    lines = [REPORT_NOTE, "\t".join(REPORT_COLUMNS)]
    lines.extend(row.to_line() for row in rows)
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> List[MetricsRow]:
    """
    Raises:
        FormatError: 헤더나 열 개수가 맞지 않는 경우
    """
    lines = [line for line in text.splitlines() if line and not line.startswith("#")]
    if not lines or tuple(lines[0].split("\t")) != REPORT_COLUMNS:
        raise FormatError("metrics report has no valid header")
    rows = []
    for line in lines[1:]:
        cells = line.split("\t")
        if len(cells) != len(REPORT_COLUMNS):
            raise FormatError(f"metrics row has {len(cells)} cells, expected {len(REPORT_COLUMNS)}")
        rows.append(MetricsRow(**dict(zip(REPORT_COLUMNS, cells))))
    return rows


def summarize(rows: List[MetricsRow]) -> MetricsSummary:
    count = len(rows)
    if count == 0:
        return MetricsSummary(rows=0, mean_psnr=0.0, mean_ssim=0.0)
    return MetricsSummary(
        rows=count,
        mean_psnr=sum(r.psnr for r in rows) / count,
        mean_ssim=sum(r.ssim for r in rows) / count,
    )
