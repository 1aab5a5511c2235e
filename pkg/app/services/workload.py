"""
ShareTrace-Lite 负载生成与明文预言机

功能:
1. 合成轨迹：热点 + 均匀背景的停留区域，每个停留段驻留 ≥ τ
2. 可选的预置接触链（A→B→C）
3. 明文暴力预言机（几何模式 / 消息模式的广度优先多代追踪）
4. GeoLife .plt 轨迹导入（等距圆柱投影到平面厘米）
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import InvalidInputError
from app.logger import get_logger
from app.services.client_agent import FIX_COLUMNS, RawFix, StayPoint
from app.services.orchestration import QueryParams
from app.services.spatial_grid import DEFAULT_GRID, GridConfig, PlanarPoint, restore_coords

logger = get_logger(__name__)

SECONDS_PER_DAY = 86_400
FIX_INTERVAL_S = 300
MAX_TRAVEL_FIXES = 5

UserDay = Tuple[int, int]


# ==================
# 负载规格
# ==================

class PlantedChain(BaseModel):
    """预置接触链：相邻用户在指定日于同一地点同时停留"""
    users: List[int] = Field(..., min_length=2)
    day: int = Field(0, ge=0)


class WorkloadSpec(BaseModel):
    """合成负载规格"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    users: int = Field(100, ge=1)
    days: int = Field(7, ge=1)
    max_locs_per_day: int = Field(10, ge=1)
    seed: int = 0
    grid: GridConfig = DEFAULT_GRID
    params: QueryParams = Field(default_factory=QueryParams)
    stay_radius_cm: int = Field(500, ge=1)
    pool_size: int = Field(64, ge=1)
    hotspots: int = Field(12, ge=1)
    hotspot_share: float = Field(0.7, ge=0.0, le=1.0)
    hotspot_sigma_cm: int = Field(1500, ge=0)
    planted_chains: List[PlantedChain] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_bounds(self):
        if self.max_locs_per_day > self.pool_size:
            raise ValueError("每日最大停留点数不能超过假名池大小")
        for chain in self.planted_chains:
            if any(not 0 <= u < self.users for u in chain.users) or chain.day >= self.days:
                raise ValueError(f"预置接触链超出范围: {chain.users}@{chain.day}")
        return self


@dataclass
class Workload:
    """每个用户日的原始定位与真实停留点"""
    spec: WorkloadSpec
    fixes: Dict[UserDay, List[RawFix]] = field(default_factory=dict)
    stays: Dict[UserDay, List[StayPoint]] = field(default_factory=dict)

    def real_id(self, user: int) -> str:
        return real_id_of(user)

    def stay_count(self) -> int:
        return sum(len(s) for s in self.stays.values())

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for (user, day), fixes in sorted(self.fixes.items()):
            for fix in fixes:
                x, y = restore_coords(fix.point, self.spec.grid)
                rows.append((self.real_id(user), day, fix.t, x, y))
        return pd.DataFrame(rows, columns=FIX_COLUMNS)

    def write_csv(self, path: str) -> int:
        frame = self.to_frame()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return len(frame)


def real_id_of(user: int) -> str:
    return f"user-{user:05d}"


# ==================
# 负载生成
# ==================

class _DayPlanner:
    """单个用户日的停留段排布"""

    def __init__(self, spec: WorkloadSpec, rng: np.random.Generator, centers: np.ndarray):
        self.spec = spec
        self.rng = rng
        self.centers = centers
        self.side = spec.grid.side
        self.min_gap = 2 * spec.stay_radius_cm

    def sample_point(self) -> PlanarPoint:
        if self.rng.random() < self.spec.hotspot_share:
            center = self.centers[self.rng.integers(len(self.centers))]
            xy = center + self.rng.normal(0.0, self.spec.hotspot_sigma_cm, size=2)
        else:
            xy = self.rng.uniform(0, self.side, size=2)
        x, y = np.clip(np.rint(xy), 0, self.side).astype(np.int64).tolist()
        return PlanarPoint(int(x), int(y))

    def far_point(self, previous: Optional[PlanarPoint]) -> PlanarPoint:
        for _ in range(32):
            point = self.sample_point()
            if previous is None or _distance(point, previous) >= self.min_gap:
                return point
        # 热点过密时退回均匀采样
        while True:
            xy = self.rng.integers(0, self.side + 1, size=2).tolist()
            point = PlanarPoint(int(xy[0]), int(xy[1]))
            if previous is None or _distance(point, previous) >= self.min_gap:
                return point


def _distance(a: PlanarPoint, b: PlanarPoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def _dwell_fixes(point: PlanarPoint, start: int, end: int) -> List[RawFix]:
    times = list(range(start, end, FIX_INTERVAL_S))
    if not times or times[-1] != end:
        times.append(end)
    return [RawFix(t, point) for t in times]


def _travel_fixes(a: PlanarPoint, b: PlanarPoint, start: int, end: int, min_gap: int) -> List[RawFix]:
    """路途定位：彼此之间以及与两端停留点的距离都 ≥ 2·半径"""
    count = min(MAX_TRAVEL_FIXES, int(_distance(a, b) // min_gap) - 1, end - start - 1)
    if count <= 0:
        return []
    fixes = []
    for k in range(1, count + 1):
        frac = k / (count + 1)
        x = int(round(a.x + (b.x - a.x) * frac))
        y = int(round(a.y + (b.y - a.y) * frac))
        t = start + int(round((end - start) * frac))
        fixes.append(RawFix(t, PlanarPoint(x, y)))
    # 取整后仍需满足间距
    points = [a] + [f.point for f in fixes] + [b]
    if any(_distance(p, q) < min_gap for p, q in zip(points, points[1:])):
        return []
    return fixes


def generate_workload(spec: WorkloadSpec) -> Workload:
    """
    生成合成负载

    同种子完全可复现；每个用户日 1..max 个停留段，每段驻留 τ..1.5τ 秒，
    位置来自热点混合分布，相邻停留点间距 ≥ 2·停留半径。
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x10AD]))
    side = spec.grid.side
    centers = rng.uniform(0.1 * side, 0.9 * side, size=(spec.hotspots, 2))
    tau = spec.params.tau
    planner = _DayPlanner(spec, rng, centers)

    # 预置链：第 k 段 (u_k, u_{k+1}) 在第 k 个时间槽相遇
    planted: Dict[UserDay, List[Tuple[int, PlanarPoint]]] = {}
    for chain in spec.planted_chains:
        point: Optional[PlanarPoint] = None
        for k, (u, v) in enumerate(zip(chain.users, chain.users[1:])):
            point = planner.far_point(point)
            start = k * (2 * tau + 3 * FIX_INTERVAL_S)
            planted.setdefault((u, chain.day), []).append((start, point))
            planted.setdefault((v, chain.day), []).append((start, point))

    workload = Workload(spec=spec)
    for user in range(spec.users):
        for day in range(spec.days):
            fixes: List[RawFix] = []
            stays: List[StayPoint] = []
            previous: Optional[PlanarPoint] = None
            clock = int(rng.integers(0, FIX_INTERVAL_S * 4))

            slots = sorted(planted.get((user, day), []), key=lambda s: s[0])
            for start, point in slots:
                if stays and (start <= clock or _distance(point, previous) < planner.min_gap):
                    continue
                if stays:
                    fixes.extend(_travel_fixes(previous, point, clock, start, planner.min_gap))
                fixes.extend(_dwell_fixes(point, start, start + tau))
                stays.append(StayPoint(start, point))
                previous, clock = point, start + tau

            target = int(rng.integers(1, spec.max_locs_per_day + 1))
            while len(stays) < target:
                dwell = tau + int(rng.integers(0, tau // 2 + 1))
                travel = int(rng.integers(FIX_INTERVAL_S, 4 * FIX_INTERVAL_S))
                start = clock + (travel if stays else 0)
                if start + dwell >= SECONDS_PER_DAY:
                    break
                point = planner.far_point(previous)
                if stays:
                    fixes.extend(_travel_fixes(previous, point, clock, start, planner.min_gap))
                fixes.extend(_dwell_fixes(point, start, start + dwell))
                stays.append(StayPoint(start, point))
                previous, clock = point, start + dwell

            workload.fixes[(user, day)] = fixes
            workload.stays[(user, day)] = stays

    logger.info("负载生成完成", users=spec.users, days=spec.days, stays=workload.stay_count())
    return workload


# ==================
# 明文预言机
# ==================

@dataclass(frozen=True)
class PlainMessage:
    """明文消息（仅验证使用）：假名、所属用户、天、时间、坐标、最底层格子"""
    token: str
    real_id: str
    day: int
    t: int
    x: int
    y: int
    leaf: int


def in_contact(patient_t: int, patient_xy: Tuple[int, int], t: int, xy: Tuple[int, int], params: QueryParams) -> bool:
    """接触谓词：距离 ≤ D 且时间窗口满足"""
    dt = t - patient_t
    if dt > params.tau or (params.symmetric and dt < -params.tau):
        return False
    dx, dy = xy[0] - patient_xy[0], xy[1] - patient_xy[1]
    return dx * dx + dy * dy <= params.distance_cm * params.distance_cm


def _window(today: int, params: QueryParams) -> range:
    return range(today - params.incubation_days + 1, today + 1)


def _geometric_trace(
    stays: Dict[UserDay, List[StayPoint]],
    patient: str,
    params: QueryParams,
    today: int
) -> Dict[str, int]:
    owners_by_day: Dict[int, List[str]] = {}
    rows_by_day: Dict[int, List[Tuple[int, int, int]]] = {}
    for (user, day), points in stays.items():
        for stay in points:
            owners_by_day.setdefault(day, []).append(real_id_of(user))
            rows_by_day.setdefault(day, []).append((stay.t, stay.point.x, stay.point.y))
    tables = {
        day: (np.array(owners_by_day[day]), np.array(rows_by_day[day], dtype=np.int64).reshape(-1, 3))
        for day in owners_by_day
    }
    d2 = params.distance_cm * params.distance_cm

    def contacts_of(real_id: str, days: Iterable[int]) -> Dict[str, int]:
        found: Dict[str, int] = {}
        for day in days:
            if day not in tables:
                continue
            owners, rows = tables[day]
            mine = rows[owners == real_id]
            for t, x, y in mine:
                dt = rows[:, 0] - t
                ok = dt <= params.tau
                if params.symmetric:
                    ok &= dt >= -params.tau
                ok &= (rows[:, 1] - x) ** 2 + (rows[:, 2] - y) ** 2 <= d2
                for owner in np.unique(owners[ok]).tolist():
                    if owner != real_id:
                        found.setdefault(owner, day)
        return found

    window = list(_window(today, params))
    result: Dict[str, int] = {}
    seen = {patient}
    frontier: Dict[str, List[int]] = {patient: window}
    generation = 0
    while frontier and (params.max_generations is None or generation < params.max_generations):
        generation += 1
        fresh: Dict[str, int] = {}
        for real_id in sorted(frontier):
            for owner, day in contacts_of(real_id, frontier[real_id]).items():
                if owner not in seen:
                    fresh[owner] = min(day, fresh.get(owner, day))
        for owner in fresh:
            result[owner] = generation
        seen.update(fresh)
        if params.generation_window == "per_contact":
            frontier = {o: list(range(d, d + params.incubation_days)) for o, d in fresh.items()}
        else:
            frontier = {o: window for o in fresh}
    return result


def _message_trace(
    messages: Sequence[PlainMessage],
    patient: str,
    params: QueryParams,
    today: int
) -> Dict[str, int]:
    leaves: Dict[Tuple[int, int], List[PlainMessage]] = {}
    by_owner: Dict[str, List[PlainMessage]] = {}
    for msg in messages:
        leaves.setdefault((msg.day, msg.leaf), []).append(msg)
        by_owner.setdefault(msg.real_id, []).append(msg)

    window = set(_window(today, params))
    seen = {patient}
    frontier = {patient: window}
    result: Dict[str, int] = {}
    generation = 0
    while frontier and (params.max_generations is None or generation < params.max_generations):
        generation += 1
        fresh: Dict[str, int] = {}
        for owner in sorted(frontier):
            days = frontier[owner]
            for query in by_owner.get(owner, []):
                if query.day not in days:
                    continue
                for other in leaves[(query.day, query.leaf)]:
                    if other.real_id in seen:
                        continue
                    if in_contact(query.t, (query.x, query.y), other.t, (other.x, other.y), params):
                        fresh[other.real_id] = min(other.day, fresh.get(other.real_id, other.day))
        for owner in fresh:
            result[owner] = generation
        seen.update(fresh)
        if params.generation_window == "per_contact":
            frontier = {o: set(range(d, d + params.incubation_days)) for o, d in fresh.items()}
        else:
            frontier = {o: window for o in fresh}
    return result


def oracle_trace(
    stays: Dict[UserDay, List[StayPoint]],
    patient: str,
    params: QueryParams,
    today: Optional[int] = None,
    mode: str = "geometric",
    messages: Optional[Sequence[PlainMessage]] = None
) -> Dict[str, int]:
    """
    明文暴力多代追踪

    geometric：以用户为单位，全部停留点两两比较（同一天、距离 ≤ D、时间窗口），作为参照；
    message：诊断用，同样以用户为单位扩展，但只在同一最底层格子的明文消息之间比较。
    边界副本保证两种模式结果相同，不一致说明副本生成有误。

    Returns:
        {real_id: 代数}，不含病人本人
    """
    if today is None:
        today = max((day for _, day in stays), default=0)
    if mode == "geometric":
        return _geometric_trace(stays, patient, params, today)
    if mode == "message":
        if messages is None:
            raise InvalidInputError("消息模式需要明文消息清单")
        return _message_trace(messages, patient, params, today)
    raise InvalidInputError(f"未知的预言机模式: {mode}")


# ==================
# GeoLife 导入
# ==================

EARTH_RADIUS_CM = 637_100_000
PLT_COLUMNS = ["lat", "lon", "zero", "altitude", "days", "date", "time"]


def load_geolife_plt(
    path: str,
    grid: GridConfig,
    reference: Optional[Tuple[float, float]] = None
) -> Dict[int, List[RawFix]]:
    """
    读取 GeoLife .plt 轨迹（6行表头）

    以参考点（默认首个定位）为服务区域中心做等距圆柱投影；
    区域外的定位被丢弃。

    Returns:
        {相对天序号: 按时间排序的定位}
    """
    frame = pd.read_csv(path, skiprows=6, header=None, names=PLT_COLUMNS)
    if frame.empty:
        return {}

    lat0, lon0 = reference if reference is not None else (float(frame["lat"].iloc[0]), float(frame["lon"].iloc[0]))
    lat = np.radians(frame["lat"].to_numpy(dtype=np.float64))
    lon = np.radians(frame["lon"].to_numpy(dtype=np.float64))
    half = grid.side // 2
    xs = np.rint(EARTH_RADIUS_CM * (lon - math.radians(lon0)) * math.cos(math.radians(lat0))) + half
    ys = np.rint(EARTH_RADIUS_CM * (lat - math.radians(lat0))) + half

    stamps = pd.to_datetime(frame["date"] + " " + frame["time"])
    first_day = stamps.dt.normalize().iloc[0]
    day_index = ((stamps.dt.normalize() - first_day).dt.days).to_numpy()
    seconds = (stamps - stamps.dt.normalize()).dt.total_seconds().astype(np.int64).to_numpy()

    inside = (xs >= 0) & (xs <= grid.side) & (ys >= 0) & (ys <= grid.side)
    dropped = int((~inside).sum())
    if dropped:
        logger.warning("GeoLife定位超出服务区域已丢弃", dropped=dropped, path=str(path))

    fixes: Dict[int, List[RawFix]] = {}
    for day, t, x, y in zip(day_index[inside], seconds[inside], xs[inside], ys[inside]):
        fixes.setdefault(int(day), []).append(RawFix(int(t), PlanarPoint(int(x), int(y))))
    for day in fixes:
        fixes[day].sort(key=lambda fix: fix.t)
    return fixes
