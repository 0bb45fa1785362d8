"""
Tile 기반 미분 가능 Gaussian 래스터라이저

픽셀마다 view depth 오름차순(동률은 primitive index 순)으로 정렬된 Gaussian 을
front-to-back 으로 합성합니다:

    C = Σ_i c_i · a_i · T_i,   a_i = opacity_i · G_i(pixel),   T_{i+1} = min(T_i·(1 − a_i), 1)

signed opacity 를 허용하므로 투과율은 매 단계 1 이하로 clamp 됩니다. log 영역에서
이 clamp 는 누적합 S 와 그 누적 최댓값 M 으로 T = exp(S − M) 이 됩니다.
T 가 한 번이라도 TRANSMIT_MIN 아래로 내려간 픽셀은 그 뒤 primitive 를 합성하지 않습니다.

- forward/backward 모두 16×16 tile 단위로 병렬 처리하고, tile 순서를 고정해
  gradient 를 누적합니다.
- forward 는 Gaussian 을 BLEND_CHUNK 개씩 처리하며 포화된 픽셀을 제외합니다.
- rasterize_reference 는 tile 없이 픽셀마다 전역 정렬 목록을 순서대로 합성하는 검증용 구현입니다.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from near.config import settings
from near.core.errors import RasterizerError
from near.core.tensor import (
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    cast,
    concat,
    custom_op,
    default_dtype,
    no_grad,
    precision,
    reshape,
    tsum,
)
from near.render.camera import Camera
from near.render.gaussians import GaussianSet, Projection, project

logger = logging.getLogger(__name__)

TRANSMIT_FLOOR = 1e-12
TRANSMIT_MIN = 1e-4
POWER_CUTOFF = -4.5
BLEND_CHUNK = 64
NUM_FEATURES = 10
CHANNELS = {
    "radiance": slice(0, 3),
    "basecolor": slice(3, 6),
    "roughness": 6,
    "metallic": 7,
    "shadow": 8,
    "depth": 9,
}
FRAME_MAPS = ("hdr", "alpha", "basecolor", "roughness", "metallic", "shadow", "depth")


class RenderedFrame:
    """
    래스터화 결과. 모든 map 은 Tensor 이며 같은 blend weight 를 공유합니다.

    Attributes:
        hdr: (H, W, 3), alpha: (H, W), basecolor: (H, W, 3),
        roughness / metallic / shadow / depth: (H, W)
        tape: backward 에 사용할 forward 기록 (없으면 rasterize_grad 불가)
    """

    def __init__(self, maps: Dict[str, Tensor], gaussians: GaussianSet, tape: Optional[Tape]):
        for name in FRAME_MAPS:
            setattr(self, name, maps[name])
        self.gaussians = gaussians
        self.tape = tape

    @property
    def height(self) -> int:
        return self.alpha.shape[0]

    @property
    def width(self) -> int:
        return self.alpha.shape[1]

    def maps(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in FRAME_MAPS}

    def numpy(self) -> Dict[str, np.ndarray]:
        return {name: np.array(getattr(self, name).data) for name in FRAME_MAPS}


# ----------------------------------------------------------------------
# Blend kernel (numpy, float64)
# ----------------------------------------------------------------------
class _Blend:
    """한 픽셀 묶음 × 정렬된 Gaussian 목록에 대한 forward 중간값 (backward 용)"""

    def __init__(self, px, py, mean2d, conic, opacity):
        dx = px[:, None] - mean2d[None, :, 0]
        dy = py[:, None] - mean2d[None, :, 1]
        ca, cb, cc = conic[:, 0], conic[:, 1], conic[:, 2]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        mask = power >= POWER_CUTOFF
        gval = np.where(mask, np.exp(np.minimum(power, 0.0)), 0.0)
        a = opacity[None, :] * gval
        one_minus = 1.0 - a
        log_step = np.log(np.maximum(one_minus, TRANSMIT_FLOOR))
        S = np.zeros_like(log_step)
        if log_step.shape[1] > 1:
            S[:, 1:] = np.cumsum(log_step[:, :-1], axis=1)
        M = np.maximum.accumulate(S, axis=1)
        T = np.exp(S - M)
        live = np.minimum.accumulate(T, axis=1) >= TRANSMIT_MIN

        self.dx, self.dy = dx, dy
        self.conic = conic
        self.opacity = opacity
        self.gval = gval
        self.a = a
        self.one_minus = one_minus
        self.S, self.M, self.T = S, M, T
        self.live_T = T * live
        self.w = a * self.live_T

    def backward(self, feats: np.ndarray, g_out: np.ndarray, g_alpha: np.ndarray):
        """
        Returns:
            (g_mean2d (g, 2), g_conic (g, 3), g_opacity (g,), g_feats (g, C))
        """
        P, G = self.w.shape
        gw = g_out @ feats.T + g_alpha[:, None]
        g_feats = self.w.T @ g_out

        # T = exp(S − M): M_k = S_{argM(k)} 이므로 그 위치로 gradient 를 되돌린다
        g_log_t = gw * self.w
        idx = np.broadcast_to(np.arange(G), (P, G))
        arg_max = np.maximum.accumulate(np.where(self.S >= self.M, idx, 0), axis=1)
        rows = np.arange(P)[:, None] * G
        dS = g_log_t - np.bincount(
            (rows + arg_max).ravel(), weights=g_log_t.ravel(), minlength=P * G
        ).reshape(P, G)
        # S_k = Σ_{j<k} log_step_j
        suffix = np.cumsum(dS[:, ::-1], axis=1)[:, ::-1]
        d_log = suffix - dS
        valid = self.one_minus > TRANSMIT_FLOOR
        ga = gw * self.live_T - np.where(valid, d_log / np.where(valid, self.one_minus, 1.0), 0.0)

        g_opacity = (ga * self.gval).sum(axis=0)
        g_power = ga * self.opacity[None, :] * self.gval
        dx, dy = self.dx, self.dy
        ca, cb, cc = self.conic[:, 0], self.conic[:, 1], self.conic[:, 2]
        g_conic = np.stack(
            [
                (g_power * (-0.5 * dx * dx)).sum(axis=0),
                (g_power * (-dx * dy)).sum(axis=0),
                (g_power * (-0.5 * dy * dy)).sum(axis=0),
            ],
            axis=1,
        )
        g_mean = np.stack(
            [
                (g_power * (ca * dx + cb * dy)).sum(axis=0),
                (g_power * (cb * dx + cc * dy)).sum(axis=0),
            ],
            axis=1,
        )
        return g_mean, g_conic, g_opacity, g_feats


def _composite(px, py, mean2d, conic, opacity, radius, feats, chunk: int = BLEND_CHUNK):
    """
    _Blend 와 같은 weight 로 forward 합성만 수행

    Gaussian 을 chunk 개씩 front-to-back 으로 처리하고, 포화된 픽셀은 다음 chunk 에서
    제외합니다. 남은 픽셀의 bbox 와 3σ 반경이 겹치지 않는 Gaussian 은 a = 0 이므로 건너뜁니다.

    Returns:
        (color (P, C), alpha (P,))
    """
    count = mean2d.shape[0]
    color = np.zeros((px.size, feats.shape[1]))
    alpha = np.zeros(px.size)
    S_run = np.zeros(px.size)
    M_run = np.zeros(px.size)
    active = np.arange(px.size)
    for start in range(0, count, chunk):
        if active.size == 0:
            break
        ax, ay = px[active], py[active]
        sel = np.arange(start, min(start + chunk, count))
        mx, my, r = mean2d[sel, 0], mean2d[sel, 1], radius[sel]
        sel = sel[
            (mx + r >= ax.min()) & (mx - r <= ax.max()) & (my + r >= ay.min()) & (my - r <= ay.max())
        ]
        if sel.size == 0:
            continue

        dx = ax[:, None] - mean2d[sel, 0]
        dy = ay[:, None] - mean2d[sel, 1]
        power = -0.5 * (conic[sel, 0] * dx * dx + conic[sel, 2] * dy * dy) - conic[sel, 1] * dx * dy
        a = np.where(power >= POWER_CUTOFF, opacity[sel] * np.exp(np.minimum(power, 0.0)), 0.0)
        log_step = np.log(np.maximum(1.0 - a, TRANSMIT_FLOOR))
        S = np.cumsum(log_step, axis=1) - log_step + S_run[active, None]
        M = np.maximum(np.maximum.accumulate(S, axis=1), M_run[active, None])
        T = np.exp(S - M)
        live = np.minimum.accumulate(T, axis=1) >= TRANSMIT_MIN
        w = a * T * live
        color[active] += w @ feats[sel]
        alpha[active] += w.sum(axis=1)

        S_end = S[:, -1] + log_step[:, -1]
        M_end = np.maximum(M[:, -1], S_end)
        S_run[active] = S_end
        M_run[active] = M_end
        active = active[live[:, -1] & (np.exp(S_end - M_end) >= TRANSMIT_MIN)]
    return color, alpha


# ----------------------------------------------------------------------
# Tile scheduling
# ----------------------------------------------------------------------
class _TilePlan:
    def __init__(self, width: int, height: int, tile_size: int):
        self.width = width
        self.height = height
        self.tile_size = tile_size
        self.tiles_x = -(-width // tile_size)
        self.tiles_y = -(-height // tile_size)
        self.lists: Dict[int, np.ndarray] = {}

    def bounds(self, tile: int) -> Tuple[int, int, int, int]:
        ty, tx = divmod(tile, self.tiles_x)
        x0 = tx * self.tile_size
        y0 = ty * self.tile_size
        return x0, min(x0 + self.tile_size, self.width), y0, min(y0 + self.tile_size, self.height)

    def pixels(self, tile: int) -> Tuple[np.ndarray, np.ndarray]:
        x0, x1, y0, y1 = self.bounds(tile)
        yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
        return xx.ravel() + 0.5, yy.ravel() + 0.5


def _plan_tiles(
    mean2d: np.ndarray,
    radius: np.ndarray,
    depth: np.ndarray,
    culled: np.ndarray,
    width: int,
    height: int,
    tile_size: int,
) -> _TilePlan:
    plan = _TilePlan(width, height, tile_size)
    mx, my = mean2d[:, 0], mean2d[:, 1]
    keep = (
        ~culled
        & (mx + radius >= 0)
        & (mx - radius <= width)
        & (my + radius >= 0)
        & (my - radius <= height)
    )
    ids = np.nonzero(keep)[0]
    if ids.size == 0:
        return plan
    tx0 = np.clip(np.floor((mx[ids] - radius[ids]) / tile_size), 0, plan.tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((mx[ids] + radius[ids]) / tile_size), 0, plan.tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((my[ids] - radius[ids]) / tile_size), 0, plan.tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((my[ids] + radius[ids]) / tile_size), 0, plan.tiles_y - 1).astype(np.int64)
    span_x = tx1 - tx0 + 1
    counts = span_x * (ty1 - ty0 + 1)
    total = int(counts.sum())
    starts = np.cumsum(counts) - counts
    gauss = np.repeat(ids, counts)
    local = np.arange(total) - np.repeat(starts, counts)
    sx = np.repeat(span_x, counts)
    tiles = (np.repeat(ty0, counts) + local // sx) * plan.tiles_x + np.repeat(tx0, counts) + local % sx

    order = np.lexsort((gauss, depth[gauss], tiles))
    tiles, gauss = tiles[order], gauss[order]
    cuts = np.nonzero(np.diff(tiles))[0] + 1
    for tile_ids, gauss_ids in zip(np.split(tiles, cuts), np.split(gauss, cuts)):
        plan.lists[int(tile_ids[0])] = gauss_ids
    return plan


def _run_tiles(fn, tiles: List[int], threads: int) -> list:
    if threads <= 1 or len(tiles) <= 1:
        return [fn(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tiles))


def _raster_forward(plan: _TilePlan, mean2d, conic, opacity, radius, feats, threads: int) -> np.ndarray:
    image = np.zeros((plan.height, plan.width, feats.shape[1] + 1))
    tiles = sorted(plan.lists)

    def work(tile: int):
        ids = plan.lists[tile]
        px, py = plan.pixels(tile)
        return _composite(px, py, mean2d[ids], conic[ids], opacity[ids], radius[ids], feats[ids])

    for tile, (color, alpha) in zip(tiles, _run_tiles(work, tiles, threads)):
        x0, x1, y0, y1 = plan.bounds(tile)
        block = np.concatenate([color, alpha[:, None]], axis=1)
        image[y0:y1, x0:x1] = block.reshape(y1 - y0, x1 - x0, -1)
    return image


def _raster_backward(plan: _TilePlan, mean2d, conic, opacity, feats, grad: np.ndarray, threads: int):
    g_mean = np.zeros_like(mean2d)
    g_conic = np.zeros_like(conic)
    g_opacity = np.zeros_like(opacity)
    g_feats = np.zeros_like(feats)
    tiles = sorted(plan.lists)

    def work(tile: int):
        ids = plan.lists[tile]
        x0, x1, y0, y1 = plan.bounds(tile)
        g_tile = grad[y0:y1, x0:x1].reshape(-1, grad.shape[-1])
        if not np.any(g_tile):
            return None
        px, py = plan.pixels(tile)
        blend = _Blend(px, py, mean2d[ids], conic[ids], opacity[ids])
        return blend.backward(feats[ids], g_tile[:, :-1], g_tile[:, -1])

    for tile, result in zip(tiles, _run_tiles(work, tiles, threads)):
        if result is None:
            continue
        ids = plan.lists[tile]
        gm, gc, go, gf = result
        np.add.at(g_mean, ids, gm)
        np.add.at(g_conic, ids, gc)
        np.add.at(g_opacity, ids, go)
        np.add.at(g_feats, ids, gf)
    return g_mean, g_conic, g_opacity, g_feats


# ----------------------------------------------------------------------
# Public API
# ----------------------------------------------------------------------
def _feature_tensor(gaussians: GaussianSet, depth: Tensor) -> Tensor:
    cols = [
        cast(gaussians.radiance, np.float64),
        cast(gaussians.basecolor, np.float64),
        reshape(cast(gaussians.roughness, np.float64), (-1, 1)),
        reshape(cast(gaussians.metallic, np.float64), (-1, 1)),
        reshape(cast(gaussians.shadow, np.float64), (-1, 1)),
        reshape(depth, (-1, 1)),
    ]
    return concat(cols, axis=1)


def _empty_frame(gaussians: GaussianSet, camera: Camera, background) -> RenderedFrame:
    h, w = camera.height, camera.width
    hdr = np.zeros((h, w, 3)) + (0.0 if background is None else np.asarray(background))
    maps = {
        "hdr": hdr,
        "alpha": np.zeros((h, w)),
        "basecolor": np.zeros((h, w, 3)),
        "roughness": np.zeros((h, w)),
        "metallic": np.zeros((h, w)),
        "shadow": np.zeros((h, w)),
        "depth": np.zeros((h, w)),
    }
    return RenderedFrame({k: as_tensor(v) for k, v in maps.items()}, gaussians, None)


def _rasterize(
    gaussians: GaussianSet,
    camera: Camera,
    background: Optional[Sequence[float]],
    tile_size: int,
    threads: int,
) -> Dict[str, Tensor]:
    out_dtype = default_dtype()
    with precision("float64"):
        proj: Projection = project(gaussians, camera)
        feats = _feature_tensor(gaussians, proj.depth)
        opacity = cast(gaussians.opacity, np.float64)

        plan = _plan_tiles(
            proj.mean2d.data,
            proj.radius,
            proj.depth.data,
            proj.culled,
            camera.width,
            camera.height,
            tile_size,
        )
        m2, cn, op, ft = proj.mean2d.data, proj.conic.data, opacity.data, feats.data
        image = _raster_forward(plan, m2, cn, op, proj.radius, ft, threads)

        def backward_fn(g: np.ndarray):
            return _raster_backward(plan, m2, cn, op, ft, g, threads)

        raster = custom_op("rasterize", image, (proj.mean2d, proj.conic, opacity, feats), backward_fn)
        alpha = raster[..., NUM_FEATURES]
        hdr = raster[..., CHANNELS["radiance"]]
        if background is not None:
            bg = np.asarray(background, dtype=np.float64).reshape(1, 1, 3)
            hdr = hdr + reshape(1.0 - alpha, alpha.shape + (1,)) * bg
        maps = {
            "hdr": hdr,
            "alpha": alpha,
            "basecolor": raster[..., CHANNELS["basecolor"]],
            "roughness": raster[..., CHANNELS["roughness"]],
            "metallic": raster[..., CHANNELS["metallic"]],
            "shadow": raster[..., CHANNELS["shadow"]],
            "depth": raster[..., CHANNELS["depth"]],
        }
    logger.debug(
        f"Rasterized {len(gaussians)} Gaussians into {len(plan.lists)} tiles at "
        f"{camera.width}x{camera.height}"
    )
    return {name: cast(t, out_dtype) for name, t in maps.items()}


def rasterize(
    gaussians: GaussianSet,
    camera: Camera,
    background: Optional[Sequence[float]] = None,
    tile_size: Optional[int] = None,
    threads: Optional[int] = None,
    retain_graph: bool = False,
) -> RenderedFrame:
    """
    Gaussian 집합을 HDR + 보조 채널 프레임으로 래스터화

    Args:
        gaussians: 렌더링할 primitive
        camera: 카메라
        background: 배경 RGB (None 이면 검정, hdr 에만 합성)
        tile_size: tile 한 변 픽셀 수 (기본 settings.tile_size)
        threads: tile 병렬 처리 스레드 수 (기본 settings.threads)
        retain_graph: 활성 tape 가 없을 때 전용 tape 에 기록해 rasterize_grad 를 허용

    Returns:
        RenderedFrame

    Raises:
        RasterizerError: 파라미터에 NaN/Inf 가 있는 경우
    """
    tile_size = tile_size or settings.tile_size
    threads = threads or settings.threads
    gaussians.check_finite()
    if len(gaussians) == 0:
        return _empty_frame(gaussians, camera, background)

    tape = active_tape()
    if tape is not None:
        maps = _rasterize(gaussians, camera, background, tile_size, threads)
        return RenderedFrame(maps, gaussians, tape)
    if retain_graph:
        with Tape() as own:
            maps = _rasterize(gaussians, camera, background, tile_size, threads)
        return RenderedFrame(maps, gaussians, own)
    maps = _rasterize(gaussians, camera, background, tile_size, threads)
    return RenderedFrame(maps, gaussians, None)


def render_aux(gaussians: GaussianSet, camera: Camera, **kwargs) -> Dict[str, np.ndarray]:
    """basecolor / roughness / metallic / shadow / depth map (rasterize 와 같은 weight)"""
    frame = rasterize(gaussians, camera, **kwargs)
    data = frame.numpy()
    return {name: data[name] for name in ("basecolor", "roughness", "metallic", "shadow", "depth")}


def rasterize_grad(frame: RenderedFrame, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    frame map 에 대한 gradient 를 primitive 필드 gradient 로 역전파

    Args:
        frame: retain_graph=True 또는 활성 tape 아래에서 렌더링된 프레임
        grads: map 이름 → 같은 shape 의 gradient

    Returns:
        필드 이름 → gradient (requires_grad 가 아닌 필드는 0)

    Raises:
        RasterizerError: forward 기록이 없는 경우
    """
    if frame.tape is None:
        raise RasterizerError("missing forward cache: render with retain_graph=True")
    fields = frame.gaussians.fields()
    for tensor in fields.values():
        tensor.zero_grad()

    with frame.tape:
        terms = []
        for name, grad in grads.items():
            if name not in FRAME_MAPS:
                raise RasterizerError(f"Unknown frame map '{name}'")
            terms.append(tsum(getattr(frame, name) * np.asarray(grad)))
        loss = terms[0]
        for term in terms[1:]:
            loss = loss + term
    if not loss.requires_grad:
        return {name: np.zeros(t.shape) for name, t in fields.items()}
    frame.tape.backward(loss)
    return {
        name: (np.array(t.grad) if t.grad is not None else np.zeros(t.shape))
        for name, t in fields.items()
    }


def rasterize_reference(
    gaussians: GaussianSet,
    camera: Camera,
    background: Optional[Sequence[float]] = None,
) -> Dict[str, np.ndarray]:
    """
    tile 없이 픽셀마다 전역 depth 정렬 목록을 하나씩 합성하는 검증용 래스터라이저

    투과율을 곱셈으로 직접 갱신합니다: T ← min(T·(1 − a), 1), T < TRANSMIT_MIN 이면 종료.
    """
    h, w = camera.height, camera.width
    with no_grad(), precision("float64"):
        if len(gaussians) == 0:
            return _empty_frame(gaussians, camera, background).numpy()
        proj = project(gaussians, camera)
        feats = _feature_tensor(gaussians, proj.depth).data
        opacity = np.asarray(gaussians.opacity.data, dtype=np.float64)
    ids = np.nonzero(~proj.culled)[0]
    depth = proj.depth.data
    ids = ids[np.lexsort((ids, depth[ids]))]
    mean2d, conic = proj.mean2d.data[ids], proj.conic.data[ids]
    opacity, feats = opacity[ids], feats[ids]

    color = np.zeros((h, w, NUM_FEATURES))
    alpha = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            dx = x + 0.5 - mean2d[:, 0]
            dy = y + 0.5 - mean2d[:, 1]
            power = -0.5 * (conic[:, 0] * dx * dx + conic[:, 2] * dy * dy) - conic[:, 1] * dx * dy
            a = np.where(power >= POWER_CUTOFF, opacity * np.exp(np.minimum(power, 0.0)), 0.0)
            T = 1.0
            for i in np.nonzero(a)[0]:
                if T < TRANSMIT_MIN:
                    break
                color[y, x] += a[i] * T * feats[i]
                alpha[y, x] += a[i] * T
                T = min(T * max(1.0 - a[i], TRANSMIT_FLOOR), 1.0)

    hdr = color[..., 0:3]
    if background is not None:
        hdr = hdr + (1.0 - alpha)[..., None] * np.asarray(background, dtype=np.float64)
    return {
        "hdr": hdr,
        "alpha": alpha,
        "basecolor": color[..., 3:6],
        "roughness": color[..., 6],
        "metallic": color[..., 7],
        "shadow": color[..., 8],
        "depth": color[..., 9],
    }
