"""
ShareTrace-Lite 空间网格几何（客户端明文计算）

功能:
1. 坐标平移到服务区域 [0, W]
2. 各层网格ID计算（行优先）
3. 自顶向下的格子路径
4. 边界副本：距离相邻最底层格子不超过 D/2 的停留点额外放入该格子
5. 网格配置文件加载（dotenv键值格式）
6. 规划器输出 → 对齐网格

网格ID公式采用行优先形式 ⌊x/w⌋ + ⌊y/w⌋·(W/w)。
文献中的 ⌊x/w⌋ + ⌊(y/w − 1)·(W/w)⌋ 在同一行内不恒定且底行为负，不予采用。
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import dotenv_values

from app.errors import ConfigError, GridError, OutsideServiceAreaError
from app.logger import get_logger

logger = get_logger(__name__)


# ==================
# 领域类型
# ==================

@dataclass(frozen=True)
class GridConfig:
    """
    分层网格配置（单位：厘米）

    widths[0] 为最底层（第1层）格宽，widths[-1] 为最顶层。
    """
    origin_x: int
    origin_y: int
    side: int
    widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)

        if len(widths) < 2:
            raise GridError(f"网格层数至少为2，当前值: {len(widths)}")
        if self.side <= 0 or any(w <= 0 for w in widths):
            raise GridError(f"边长与格宽必须为正: side={self.side}, widths={widths}")
        for lower, upper in zip(widths, widths[1:]):
            if upper % lower != 0:
                raise GridError(f"格宽未对齐: {upper} 不能被 {lower} 整除")
        if self.side % widths[-1] != 0:
            raise GridError(f"服务区域边长 {self.side} 不能被顶层格宽 {widths[-1]} 整除")

    @property
    def levels(self) -> int:
        return len(self.widths)

    def width(self, level: int) -> int:
        if not 1 <= level <= self.levels:
            raise GridError(f"层级超出范围: {level}（共{self.levels}层）")
        return self.widths[level - 1]

    def cells_per_side(self, level: int) -> int:
        return self.side // self.width(level)

    def cell_count(self, level: int) -> int:
        return self.cells_per_side(level) ** 2

    def check_distance(self, distance_cm: int):
        """最底层格宽必须至少为 2D"""
        if self.widths[0] < 2 * distance_cm:
            raise GridError(
                f"最底层格宽{self.widths[0]}小于两倍传染距离{2 * distance_cm}"
            )

    def flattened(self) -> "GridConfig":
        """无分区基线：只保留最底层，顶层为覆盖全区域的单一格子"""
        return GridConfig(self.origin_x, self.origin_y, self.side, (self.widths[0], self.side))


@dataclass(frozen=True)
class PlanarPoint:
    """服务区域内的非负定点坐标"""
    x: int
    y: int


@dataclass(frozen=True)
class CellPath:
    """每层一个网格ID，gids[0] 为第1层"""
    gids: Tuple[int, ...]

    def level(self, level: int) -> int:
        return self.gids[level - 1]

    @property
    def leaf(self) -> int:
        return self.gids[0]

    def top_down(self) -> Tuple[int, ...]:
        return tuple(reversed(self.gids))


# ==================
# 坐标与网格ID
# ==================

def offset_coords(raw_x: int, raw_y: int, config: GridConfig) -> PlanarPoint:
    """
    平移原始坐标到 [0, W]

    Raises:
        OutsideServiceAreaError: 点不在服务区域内
    """
    x = raw_x - config.origin_x
    y = raw_y - config.origin_y
    if not (0 <= x <= config.side and 0 <= y <= config.side):
        raise OutsideServiceAreaError(
            f"坐标({raw_x}, {raw_y})超出服务区域，原点({config.origin_x}, {config.origin_y})，边长{config.side}"
        )
    return PlanarPoint(x, y)


def restore_coords(p: PlanarPoint, config: GridConfig) -> Tuple[int, int]:
    """offset_coords 的逆变换"""
    return p.x + config.origin_x, p.y + config.origin_y


def _cell_index(value: int, width: int, per_side: int) -> int:
    # 右/上边界 x = W 归入最后一格
    return min(value // width, per_side - 1)


def gid(p: PlanarPoint, level: int, config: GridConfig) -> int:
    """行优先网格ID：⌊x/w⌋ + ⌊y/w⌋·(W/w)"""
    w = config.width(level)
    per_side = config.side // w
    return _cell_index(p.x, w, per_side) + _cell_index(p.y, w, per_side) * per_side


def cell_rect(level: int, cell_id: int, config: GridConfig) -> Tuple[int, int, int, int]:
    """格子的闭矩形 (x0, y0, x1, y1)"""
    w = config.width(level)
    per_side = config.side // w
    cx, cy = cell_id % per_side, cell_id // per_side
    return cx * w, cy * w, (cx + 1) * w, (cy + 1) * w


def cell_path(p: PlanarPoint, config: GridConfig) -> CellPath:
    return CellPath(tuple(gid(p, level, config) for level in range(1, config.levels + 1)))


def _path_of_leaf_cell(cx: int, cy: int, config: GridConfig) -> CellPath:
    w1 = config.widths[0]
    return cell_path(PlanarPoint(cx * w1, cy * w1), config)


def border_replicas(p: PlanarPoint, config: GridConfig, distance_cm: int) -> List[CellPath]:
    """
    边界副本格子路径

    对8个相邻的最底层格子，若点到其闭矩形的距离 ≤ D/2，返回该格子的完整路径。
    边上最多1个，角上3个；区域外的格子跳过。
    """
    w1 = config.widths[0]
    per_side = config.side // w1
    cx = _cell_index(p.x, w1, per_side)
    cy = _cell_index(p.y, w1, per_side)

    replicas: List[CellPath] = []
    for ny in (cy - 1, cy, cy + 1):
        for nx in (cx - 1, cx, cx + 1):
            if (nx, ny) == (cx, cy):
                continue
            if not (0 <= nx < per_side and 0 <= ny < per_side):
                continue
            dx = max(nx * w1 - p.x, 0, p.x - (nx + 1) * w1)
            dy = max(ny * w1 - p.y, 0, p.y - (ny + 1) * w1)
            # dist ≤ D/2 ⟺ 4(dx² + dy²) ≤ D²
            if 4 * (dx * dx + dy * dy) <= distance_cm * distance_cm:
                replicas.append(_path_of_leaf_cell(nx, ny, config))
    return replicas


# ==================
# 配置加载
# ==================

DEFAULT_GRID = GridConfig(origin_x=0, origin_y=0, side=96000, widths=(1200, 9600))


def load_grid_config(path: str) -> GridConfig:
    """
    从键值配置文件加载网格

    键：origin_x_cm, origin_y_cm, side_cm, levels, cell_widths_cm（逗号分隔）

    Raises:
        ConfigError: 文件缺失、键缺失或数值非法
    """
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError(f"网格配置文件不存在: {path}")

    values = dotenv_values(file_path)
    required = ["origin_x_cm", "origin_y_cm", "side_cm", "levels", "cell_widths_cm"]
    missing = [key for key in required if not values.get(key)]
    if missing:
        raise ConfigError(f"网格配置缺少键: {', '.join(missing)}")

    try:
        widths = tuple(int(w.strip()) for w in values["cell_widths_cm"].split(",") if w.strip())
        levels = int(values["levels"])
        config = GridConfig(
            origin_x=int(values["origin_x_cm"]),
            origin_y=int(values["origin_y_cm"]),
            side=int(values["side_cm"]),
            widths=widths,
        )
    except ValueError as e:
        raise ConfigError(f"网格配置数值非法: {e}")

    if levels != config.levels:
        raise ConfigError(f"levels={levels} 与 cell_widths_cm 的层数 {config.levels} 不一致")

    logger.info("网格配置加载完成", path=str(path), levels=config.levels, side_cm=config.side)
    return config


def resolve_grid_config(path: Optional[str] = None) -> GridConfig:
    """配置了文件就加载，否则使用内置默认网格"""
    if path:
        return load_grid_config(path)
    return DEFAULT_GRID


def grid_config_for_partition(
    n_regions: int,
    n_grids: int,
    leaf_width_cm: int,
    origin: Tuple[int, int] = (0, 0)
) -> GridConfig:
    """
    把规划器输出 (N_r, N_g) 转为两层对齐正方形网格

    顶层每边 round(√N_r) 个区域，每个区域每边 round(√N_g) 个最底层格子。
    """
    regions_per_side = max(1, round(math.sqrt(n_regions)))
    grids_per_side = max(1, round(math.sqrt(n_grids)))
    region_width = leaf_width_cm * grids_per_side
    return GridConfig(
        origin_x=origin[0],
        origin_y=origin[1],
        side=region_width * regions_per_side,
        widths=(leaf_width_cm, region_width),
    )
