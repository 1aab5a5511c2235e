"""
ShareTrace-Lite 客户端代理（模拟手机应用）

功能:
1. 停留点提取（锚点 + 半径 + 最短停留时长）
2. 每日假名池消耗
3. 按服务器拆分的位置报告（时间、坐标、各层网格ID的加法分享）
4. 边界副本：每个副本使用新的分享和新的假名
5. 日终批量投递（模拟传输：批内乱序、不可关联的消息句柄、失败重试）
6. CSV 定位读取 / JSON-lines 报告读写
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.errors import (
    InvalidSequenceError,
    OutOfPseudoIdsError,
    RetryExhaustedError,
)
from app.logger import get_logger
from app.services.field_mpc import FieldRng, share_vector
from app.services.spatial_grid import (
    CellPath,
    GridConfig,
    PlanarPoint,
    border_replicas,
    cell_path,
    offset_coords,
)

logger = get_logger(__name__)


# ==================
# 领域类型
# ==================

@dataclass(frozen=True)
class RawFix:
    """一次定位：当日秒数 + 平面坐标"""
    t: int
    point: PlanarPoint


@dataclass(frozen=True)
class StayPoint:
    """停留点：到达时间 + 停留质心"""
    t: int
    point: PlanarPoint


@dataclass
class PseudoIdPool:
    """订阅方签发的一组假名（128位，十六进制）"""
    ids: List[str]
    issued_by: str
    day: Optional[int] = None
    _cursor: int = field(default=0, repr=False)

    @property
    def remaining(self) -> int:
        return len(self.ids) - self._cursor

    def draw(self) -> str:
        if self._cursor >= len(self.ids):
            raise OutOfPseudoIdsError(f"假名池已耗尽（共{len(self.ids)}个）")
        token = self.ids[self._cursor]
        self._cursor += 1
        return token


@dataclass(frozen=True)
class LocationReport:
    """发往单台服务器的一条位置消息；gid_shares[0] 为第1层"""
    pseudo_id: str
    server_index: int
    day: int
    t_share: int
    x_share: int
    y_share: int
    gid_shares: Tuple[int, ...]

    def to_json(self) -> str:
        payload = asdict(self)
        payload["gid_shares"] = list(self.gid_shares)
        return json.dumps(payload)

    @classmethod
    def from_json(cls, line: str) -> "LocationReport":
        payload = json.loads(line)
        payload["gid_shares"] = tuple(int(v) for v in payload["gid_shares"])
        return cls(**payload)


@dataclass(frozen=True)
class MessageManifest:
    """客户端本地留存的明文清单（不离开客户端，只供验证）"""
    pseudo_id: str
    day: int
    t: int
    point: PlanarPoint
    path: CellPath
    replica: bool


@dataclass
class DayReports:
    """一天的投递内容：每台服务器一批（已打乱），以及本地清单"""
    batches: List[List[LocationReport]]
    manifest: List[MessageManifest]

    @property
    def message_sets(self) -> int:
        return len(self.manifest)


# ==================
# 停留点提取
# ==================

def detect_stay_points(fixes: Sequence[RawFix], tau: int, radius: int) -> List[StayPoint]:
    """
    提取停留点

    以第 i 个定位为锚点向后扩展，直到距离超过半径；
    若该段时长 ≥ τ，取质心与到达时间作为停留点并从段尾继续，否则锚点后移一位。

    Raises:
        InvalidSequenceError: 定位未按时间排序
    """
    for prev, cur in zip(fixes, fixes[1:]):
        if cur.t < prev.t:
            raise InvalidSequenceError(f"定位序列未按时间排序: {prev.t} > {cur.t}")

    stays: List[StayPoint] = []
    r2 = radius * radius
    i, n = 0, len(fixes)
    while i < n:
        anchor = fixes[i].point
        j = i + 1
        while j < n:
            dx = fixes[j].point.x - anchor.x
            dy = fixes[j].point.y - anchor.y
            if dx * dx + dy * dy > r2:
                break
            j += 1

        if fixes[j - 1].t - fixes[i].t >= tau:
            coords = np.array([(f.point.x, f.point.y) for f in fixes[i:j]], dtype=np.float64)
            cx, cy = np.rint(coords.mean(axis=0)).astype(np.int64).tolist()
            stays.append(StayPoint(t=fixes[i].t, point=PlanarPoint(int(cx), int(cy))))
            i = j
        else:
            i += 1
    return stays


# ==================
# 报告生成
# ==================

def _message_paths(stay: StayPoint, config: GridConfig, distance_cm: int) -> List[Tuple[CellPath, bool]]:
    primary = [(cell_path(stay.point, config), False)]
    return primary + [(path, True) for path in border_replicas(stay.point, config, distance_cm)]


def build_day_reports(
    stays: Sequence[StayPoint],
    pool: PseudoIdPool,
    config: GridConfig,
    distance_cm: int,
    n_servers: int,
    rng: FieldRng,
    day: int = 0
) -> DayReports:
    """
    生成一天的位置报告

    每个停留点一个主消息集合，每个边界副本一个附加集合；
    每个集合消耗一个独立假名、使用全新分享；各服务器批次独立打乱。

    Raises:
        OutOfPseudoIdsError: 假名不够（检查发生在消耗之前）
    """
    planned = [(stay, _message_paths(stay, config, distance_cm)) for stay in stays]
    needed = sum(len(paths) for _, paths in planned)
    if needed > pool.remaining:
        logger.warning("假名池不足", needed=needed, remaining=pool.remaining, day=day)
        raise OutOfPseudoIdsError(f"需要{needed}个假名，剩余{pool.remaining}个")

    batches: List[List[LocationReport]] = [[] for _ in range(n_servers)]
    manifest: List[MessageManifest] = []

    for stay, paths in planned:
        for path, is_replica in paths:
            token = pool.draw()
            t_vec = share_vector(stay.t, n_servers, rng)
            x_vec = share_vector(stay.point.x, n_servers, rng)
            y_vec = share_vector(stay.point.y, n_servers, rng)
            gid_vecs = [share_vector(g, n_servers, rng) for g in path.gids]

            for server in range(n_servers):
                batches[server].append(LocationReport(
                    pseudo_id=token,
                    server_index=server + 1,
                    day=day,
                    t_share=t_vec.values[server],
                    x_share=x_vec.values[server],
                    y_share=y_vec.values[server],
                    gid_shares=tuple(vec.values[server] for vec in gid_vecs),
                ))
            manifest.append(MessageManifest(token, day, stay.t, stay.point, path, is_replica))

    # 到达顺序不携带访问顺序
    for server in range(n_servers):
        order = rng.generator.permutation(len(batches[server]))
        batches[server] = [batches[server][k] for k in order]

    return DayReports(batches=batches, manifest=manifest)


# ==================
# 模拟传输
# ==================

@dataclass(frozen=True)
class Envelope:
    handle: str
    report: LocationReport


@dataclass(frozen=True)
class DeliveryReceipt:
    handle: str
    server_index: int
    attempts: int


class SimulatedTransport:
    """
    内存消息总线

    批内顺序按种子置换；每条消息分配一次性随机句柄，消息之间不可关联；
    可按失败率注入投递失败并重试。
    """

    def __init__(
        self,
        n_servers: int,
        seed: int = 0,
        failure_rate: float = 0.0,
        max_retries: int = 3
    ):
        self.n_servers = n_servers
        self.failure_rate = failure_rate
        self.max_retries = max_retries
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A5]))
        self.inboxes: List[List[Envelope]] = [[] for _ in range(n_servers)]

    def _handle(self) -> str:
        return self._rng.bytes(8).hex()

    def _deliver(self, server: int, report: LocationReport, staged: List[List[Envelope]]) -> DeliveryReceipt:
        for attempt in range(1, self.max_retries + 2):
            if self.failure_rate > 0 and self._rng.random() < self.failure_rate:
                logger.debug("投递失败，重试", server_index=server + 1, attempt=attempt)
                continue
            envelope = Envelope(handle=self._handle(), report=report)
            staged[server].append(envelope)
            return DeliveryReceipt(envelope.handle, server + 1, attempt)
        raise RetryExhaustedError(f"发往服务器{server + 1}的消息重试{self.max_retries}次后仍失败")

    def submit(self, batches: Sequence[Sequence[LocationReport]]) -> List[DeliveryReceipt]:
        """
        投递一次日终批次，全部送达后才写入收件箱

        Raises:
            RetryExhaustedError: 任一消息重试耗尽，此时各收件箱保持不变
        """
        staged: List[List[Envelope]] = [[] for _ in range(self.n_servers)]
        receipts: List[DeliveryReceipt] = []
        for server, batch in enumerate(batches):
            order = self._rng.permutation(len(batch))
            for k in order:
                receipts.append(self._deliver(server, batch[k], staged))
        for inbox, envelopes in zip(self.inboxes, staged):
            inbox.extend(envelopes)
        return receipts

    def drain(self, server_index: int) -> List[LocationReport]:
        """取出并清空某台服务器（1..N）的收件箱"""
        envelopes = self.inboxes[server_index - 1]
        self.inboxes[server_index - 1] = []
        return [e.report for e in envelopes]

    def peek(self, server_index: int) -> List[LocationReport]:
        return [e.report for e in self.inboxes[server_index - 1]]


def flush(batches: Sequence[Sequence[LocationReport]], transport: SimulatedTransport) -> List[DeliveryReceipt]:
    """
    日终投递

    Raises:
        RetryExhaustedError: 传输重试耗尽
    """
    receipts = transport.submit(batches)
    logger.info("日终批量投递完成", messages=len(receipts))
    return receipts


# ==================
# 客户端代理
# ==================

class ClientAgent:
    """
    单个模拟用户

    每个代理拥有独立随机流，种子由（全局种子, 用户序号）派生。
    """

    def __init__(
        self,
        user_index: int,
        config: GridConfig,
        n_servers: int,
        distance_cm: int,
        tau: int,
        radius: int,
        global_seed: int = 0
    ):
        self.user_index = user_index
        self.config = config
        self.n_servers = n_servers
        self.distance_cm = distance_cm
        self.tau = tau
        self.radius = radius
        self.rng = FieldRng(np.random.SeedSequence([global_seed, user_index]))

    def collect(self, fixes: Sequence[RawFix]) -> List[StayPoint]:
        return detect_stay_points(fixes, self.tau, self.radius)

    def report_day(self, day: int, stays: Sequence[StayPoint], pool: PseudoIdPool) -> DayReports:
        return build_day_reports(
            stays, pool, self.config, self.distance_cm, self.n_servers, self.rng, day
        )


# ==================
# 文件格式
# ==================

FIX_COLUMNS = ["user_id", "day", "t_seconds", "x_cm", "y_cm"]


def load_fixes_csv(path: str, config: GridConfig) -> Dict[Tuple[str, int], List[RawFix]]:
    """
    读取原始定位 CSV（user_id, day, t_seconds, x_cm, y_cm）

    Returns:
        {(user_id, day): 按 t_seconds 升序的定位列表}
    """
    frame = pd.read_csv(path, dtype={"user_id": str})
    missing = [c for c in FIX_COLUMNS if c not in frame.columns]
    if missing:
        raise InvalidSequenceError(f"定位文件缺少列: {', '.join(missing)}")

    fixes: Dict[Tuple[str, int], List[RawFix]] = {}
    for (user_id, day), group in frame.groupby(["user_id", "day"], sort=True):
        fixes[(str(user_id), int(day))] = [
            RawFix(int(row.t_seconds), offset_coords(int(row.x_cm), int(row.y_cm), config))
            for row in group.sort_values("t_seconds", kind="stable").itertuples(index=False)
        ]
    return fixes


def write_reports_jsonl(reports: Iterable[LocationReport], path: str) -> int:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with target.open("w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(report.to_json() + "\n")
            count += 1
    return count


def read_reports_jsonl(path: str) -> List[LocationReport]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [LocationReport.from_json(line) for line in fh if line.strip()]
