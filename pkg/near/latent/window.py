import logging
from typing import List

import numpy as np

from near.core.errors import ConfigError

logger = logging.getLogger(__name__)


class WindowGrouping:
    """
    Attributes:
        window_size: w
        shift: 0 또는 w // 2
        cells: (K,) 토큰별 window cell id
        groups: cell id 오름차순, 각 그룹 내 토큰 인덱스 오름차순
    """

    def __init__(self, window_size: int, shift: int, cells: np.ndarray, groups: List[np.ndarray]):
        self.window_size = window_size
        self.shift = shift
        self.cells = cells
        self.groups = groups

    def __len__(self) -> int:
        return len(self.groups)

    def sizes(self) -> List[int]:
        return [len(g) for g in self.groups]


def window_partition(
    coords: np.ndarray, grid_resolution: int, window_size: int, shifted: bool = False
) -> WindowGrouping:
    """
    cell = floor(((coord + shift) mod N) / w) 로 토큰을 분할

    Args:
        coords: (K, 3) voxel 좌표 (Slat.coords)
        grid_resolution: N
        window_size: w (N 을 나누어야 함)
        shifted: True 면 shift = w // 2

    Raises:
        ConfigError: w 가 N 을 나누지 않는 경우
    """
    n = grid_resolution
    if window_size < 1 or n % window_size:
        raise ConfigError(f"window size {window_size} does not divide grid resolution {n}")
    shift = window_size // 2 if shifted else 0
    per_axis = n // window_size
    cell3 = ((np.asarray(coords, dtype=np.int64) + shift) % n) // window_size
    cells = (cell3[:, 0] * per_axis + cell3[:, 1]) * per_axis + cell3[:, 2]

    order = np.argsort(cells, kind="stable")
    boundaries = np.nonzero(np.diff(cells[order]))[0] + 1
    groups = [np.asarray(g, dtype=np.int64) for g in np.split(order, boundaries)]
    return WindowGrouping(window_size, shift, cells, groups)
