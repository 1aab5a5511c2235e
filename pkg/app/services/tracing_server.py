"""
ShareTrace-Lite 追踪服务器（单个逻辑参与方）

功能:
1. 按天存储：假名索引 + 秘密分享的空间分区树
2. 插入协议的服务器侧（逐层与代表分享做掩码零值检测）
3. 假名重用检测
4. 病人记录检索（叶组）
5. 记录的安全比较（时间窗口 + 距离）
6. 过期天数清理
7. 二进制快照 / 索引CSV导出

服务器只看到假名、均匀分布的域元素与树形状，从不接触明文网格ID或坐标。
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Generator, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd

from app.errors import ProtocolError, PseudoIdReuseError, SnapshotError
from app.logger import get_logger
from app.services.client_agent import LocationReport
from app.services.field_mpc import MpcEngine, Q, SharedValue

logger = get_logger(__name__)


# ==================
# 存储结构
# ==================

@dataclass
class RecordEntry:
    """叶组中的一条记录（本服务器持有的分享）"""
    pseudo_id: str
    t_share: int
    x_share: int
    y_share: int


@dataclass
class LeafGroup:
    """同一最底层格子（含边界副本）的记录集合"""
    day: int
    leaf_id: int
    records: List[RecordEntry] = field(default_factory=list)


@dataclass
class TreeEntry:
    """树节点的一个条目：首个到访者的网格ID分享作为代表"""
    rep_share: int
    child: Union["TreeNode", LeafGroup]


@dataclass
class TreeNode:
    level: int
    entries: List[TreeEntry] = field(default_factory=list)


@dataclass(frozen=True)
class RecordRef:
    day: int
    leaf_id: int
    position: int


@dataclass
class DayStore:
    """单日存储：假名索引 + 分区树 + 叶组表（按创建顺序编号）"""
    day: int
    root: TreeNode
    index: Dict[str, RecordRef] = field(default_factory=dict)
    leaves: List[LeafGroup] = field(default_factory=list)

    def record(self, ref: RecordRef) -> RecordEntry:
        return self.leaves[ref.leaf_id].records[ref.position]


InsertSteps = Generator[int, bool, RecordRef]


def tree_shape(node: Union[TreeNode, LeafGroup]) -> tuple:
    """树形状（条目顺序 + 子结构 + 叶组大小），与分享值无关"""
    if isinstance(node, LeafGroup):
        return ("leaf", len(node.records))
    return tuple(tree_shape(entry.child) for entry in node.entries)


# ==================
# 追踪服务器
# ==================

class TracingServer:
    """
    一台逻辑服务器

    状态只由编排模块的同步轮次修改。
    """

    def __init__(self, server_index: int, levels: int):
        self.server_index = server_index
        self.levels = levels
        self.stores: Dict[int, DayStore] = {}

    # ---------- 存储 ----------

    def day_store(self, day: int, create: bool = False) -> Optional[DayStore]:
        store = self.stores.get(day)
        if store is None and create:
            store = DayStore(day=day, root=TreeNode(level=self.levels))
            self.stores[day] = store
        return store

    def has_pseudo_id(self, day: int, pseudo_id: str) -> bool:
        store = self.stores.get(day)
        return store is not None and pseudo_id in store.index

    def check_report(self, report: LocationReport):
        """
        Raises:
            ProtocolError: 服务器编号或网格ID分享数量不符
            PseudoIdReuseError: 假名已存在
        """
        if report.server_index != self.server_index:
            raise ProtocolError(
                f"报告发往服务器{report.server_index}，当前服务器为{self.server_index}"
            )
        if len(report.gid_shares) != self.levels:
            raise ProtocolError(
                f"网格ID分享数量{len(report.gid_shares)}与层数{self.levels}不符"
            )
        if self.has_pseudo_id(report.day, report.pseudo_id):
            raise PseudoIdReuseError(f"假名重复使用: {report.pseudo_id}")

    # ---------- 插入协议（服务器侧） ----------

    def insert(self, report: LocationReport) -> InsertSteps:
        """
        插入协议的服务器侧步骤

        生成器：自顶向下，每与一个已有条目比较时产出差值分享 G_ui − G_i，
        接收该差值是否为零的公开结果；无匹配时追加条目并建出到叶组的子树。
        返回新记录的 RecordRef。
        """
        self.check_report(report)
        store = self.day_store(report.day, create=True)

        node = store.root
        leaf: Optional[LeafGroup] = None
        for level in range(self.levels, 0, -1):
            share = report.gid_shares[level - 1]
            matched: Optional[TreeEntry] = None
            for entry in node.entries:
                is_zero = yield (share - entry.rep_share) % Q
                if is_zero:
                    matched = entry
                    break

            if matched is None:
                if level == 1:
                    child: Union[TreeNode, LeafGroup] = LeafGroup(day=report.day, leaf_id=len(store.leaves))
                    store.leaves.append(child)
                else:
                    child = TreeNode(level=level - 1)
                matched = TreeEntry(rep_share=share, child=child)
                node.entries.append(matched)

            if level == 1:
                leaf = matched.child  # type: ignore[assignment]
            else:
                node = matched.child  # type: ignore[assignment]

        assert leaf is not None
        leaf.records.append(RecordEntry(report.pseudo_id, report.t_share, report.x_share, report.y_share))
        ref = RecordRef(day=report.day, leaf_id=leaf.leaf_id, position=len(leaf.records) - 1)
        store.index[report.pseudo_id] = ref
        return ref

    # ---------- 检索 ----------

    def lookup_patient(
        self,
        pseudo_id: str,
        days: Optional[Sequence[int]] = None
    ) -> List[Tuple[RecordEntry, LeafGroup]]:
        """某假名在保留天数内的全部记录及其叶组；未知假名返回空列表"""
        results: List[Tuple[RecordEntry, LeafGroup]] = []
        wanted = None if days is None else set(days)
        for day in sorted(self.stores):
            if wanted is not None and day not in wanted:
                continue
            store = self.stores[day]
            ref = store.index.get(pseudo_id)
            if ref is not None:
                leaf = store.leaves[ref.leaf_id]
                results.append((leaf.records[ref.position], leaf))
        return results

    def leaf(self, day: int, leaf_id: int) -> LeafGroup:
        return self.stores[day].leaves[leaf_id]

    # ---------- 保留期 ----------

    def retire_old_days(self, today: int, incubation_days: int) -> List[int]:
        """删除早于 today − T + 1 的日存储（只保留最近 T 天）"""
        cutoff = today - incubation_days
        purged = sorted(day for day in self.stores if day <= cutoff)
        for day in purged:
            del self.stores[day]
        if purged:
            logger.info("清理过期日存储", server_index=self.server_index, purged=purged)
        return purged

    # ---------- 统计 / 审计 ----------

    def shape(self, day: int) -> tuple:
        return tree_shape(self.stores[day].root)

    def record_count(self) -> int:
        return sum(len(store.index) for store in self.stores.values())

    def stored_values(self) -> Iterator[int]:
        """本服务器状态中的全部域元素（代表分享与记录分享）"""
        for store in self.stores.values():
            stack: List[Union[TreeNode, LeafGroup]] = [store.root]
            while stack:
                node = stack.pop()
                if isinstance(node, LeafGroup):
                    for rec in node.records:
                        yield rec.t_share
                        yield rec.x_share
                        yield rec.y_share
                else:
                    for entry in node.entries:
                        yield entry.rep_share
                        stack.append(entry.child)

    def index_frame(self) -> pd.DataFrame:
        rows = [
            {"day": day, "pseudo_id": pid, "leaf_id": ref.leaf_id, "position": ref.position}
            for day, store in sorted(self.stores.items())
            for pid, ref in store.index.items()
        ]
        return pd.DataFrame(rows, columns=["day", "pseudo_id", "leaf_id", "position"])

    def dump_index_csv(self, path: str) -> int:
        frame = self.index_frame()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return len(frame)

    # ---------- 快照 ----------

    def snapshot(self, path: str):
        """写入二进制快照：版本头 + 按天长度前缀的记录块"""
        chunks = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.server_index, self.levels, len(self.stores))]
        for day in sorted(self.stores):
            body = _encode_node(self.stores[day].root)
            chunks.append(_DAY.pack(day, len(body)))
            chunks.append(body)
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(b"".join(chunks))
        logger.info("快照已写入", server_index=self.server_index, days=len(self.stores), path=str(path))

    @classmethod
    def restore(cls, path: str) -> "TracingServer":
        """
        Raises:
            SnapshotError: 文件损坏或版本不符
        """
        try:
            buf = Path(path).read_bytes()
        except OSError as e:
            raise SnapshotError(f"快照读取失败: {e}")
        try:
            magic, version, server_index, levels, day_count = _HEADER.unpack_from(buf, 0)
        except struct.error:
            raise SnapshotError("快照文件头损坏")
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotError(f"快照魔数不符: {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"快照版本不支持: {version}")

        server = cls(server_index, levels)
        offset = _HEADER.size
        try:
            for _ in range(day_count):
                day, length = _DAY.unpack_from(buf, offset)
                offset += _DAY.size
                if offset + length > len(buf):
                    raise SnapshotError(f"第{day}天的记录块被截断")
                store = DayStore(day=day, root=TreeNode(level=levels))
                _decode_node(memoryview(buf)[offset:offset + length], 0, store, store.root)
                store.leaves.sort(key=lambda leaf: leaf.leaf_id)
                if [leaf.leaf_id for leaf in store.leaves] != list(range(len(store.leaves))):
                    raise SnapshotError(f"第{day}天的叶组编号不连续")
                server.stores[day] = store
                offset += length
        except struct.error as e:
            raise SnapshotError(f"快照内容损坏: {e}")
        return server


# ==================
# 快照编码
# ==================

SNAPSHOT_MAGIC = b"STRC"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIHI")
_DAY = struct.Struct("<qQ")
_COUNT = struct.Struct("<I")
_LEAF = struct.Struct("<II")
_SHARE = struct.Struct("<Q")
_RECORD = struct.Struct("<16sQQQ")


def _encode_node(node: TreeNode) -> bytes:
    parts = [_COUNT.pack(len(node.entries))]
    for entry in node.entries:
        parts.append(_SHARE.pack(entry.rep_share))
        if isinstance(entry.child, LeafGroup):
            parts.append(_LEAF.pack(entry.child.leaf_id, len(entry.child.records)))
            for rec in entry.child.records:
                parts.append(_RECORD.pack(bytes.fromhex(rec.pseudo_id), rec.t_share, rec.x_share, rec.y_share))
        else:
            parts.append(_encode_node(entry.child))
    return b"".join(parts)


def _decode_node(buf: memoryview, offset: int, store: DayStore, node: TreeNode) -> int:
    (count,) = _COUNT.unpack_from(buf, offset)
    offset += _COUNT.size
    for _ in range(count):
        (rep_share,) = _SHARE.unpack_from(buf, offset)
        offset += _SHARE.size
        if node.level == 1:
            leaf_id, records = _LEAF.unpack_from(buf, offset)
            offset += _LEAF.size
            leaf = LeafGroup(day=store.day, leaf_id=leaf_id)
            store.leaves.append(leaf)
            for position in range(records):
                raw_id, t_share, x_share, y_share = _RECORD.unpack_from(buf, offset)
                offset += _RECORD.size
                pid = raw_id.hex()
                leaf.records.append(RecordEntry(pid, t_share, x_share, y_share))
                store.index[pid] = RecordRef(store.day, leaf.leaf_id, position)
            node.entries.append(TreeEntry(rep_share, leaf))
        else:
            child = TreeNode(level=node.level - 1)
            offset = _decode_node(buf, offset, store, child)
            node.entries.append(TreeEntry(rep_share, child))
    return offset


# ==================
# 安全比较
# ==================

def compare_records(
    patient: Sequence[RecordEntry],
    candidate: Sequence[RecordEntry],
    distance_cm: int,
    tau: int,
    engine: MpcEngine,
    symmetric: bool = True
) -> bool:
    """
    病人记录与候选记录的安全比较（每个参数为各服务器持有的对应记录）

    时间条件先判定，不满足时不再比较距离：
      symmetric: −τ ≤ Δt ≤ τ；one_sided: Δt ≤ τ（Δt = t_候选 − t_病人）
    距离条件：Δx² + Δy² ≤ D²，即 less_than(d, D² + 1)。
    只打开比较结果位与掩码值。

    Raises:
        ProtocolError: 各方记录数量或假名不一致
    """
    if len(patient) != engine.n or len(candidate) != engine.n:
        raise ProtocolError(f"参与比较的服务器数量不一致: {len(patient)}, {len(candidate)}, {engine.n}")
    if len({rec.pseudo_id for rec in candidate}) != 1:
        raise ProtocolError("候选记录在各服务器上的假名不一致")

    dt = SharedValue([(c.t_share - p.t_share) % Q for p, c in zip(patient, candidate)])
    if not engine.less_than(dt, tau + 1):
        return False
    if symmetric and engine.less_than(dt, -tau):
        return False

    dx = SharedValue([(c.x_share - p.x_share) % Q for p, c in zip(patient, candidate)])
    dy = SharedValue([(c.y_share - p.y_share) % Q for p, c in zip(patient, candidate)])
    squared = engine.mul(dx, dx) + engine.mul(dy, dy)
    return engine.less_than(squared, distance_cm * distance_cm + 1)
