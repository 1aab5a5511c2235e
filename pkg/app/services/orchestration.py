"""
ShareTrace-Lite 协议编排

功能:
1. 参与方集合（N台服务器 + 经销商 + 传输）
2. 锁步插入：各服务器的插入步骤同轮推进，每轮一次掩码零值检测
3. 单代接触查询（病人记录所在叶组内逐条安全比较）
4. 多代查询（广度优先不动点，可限制代数）
5. 结果广播与通知计数

编排器是唯一时钟：协议轮次顺序执行，各服务器在同一轮内做本地计算。
"""

import uuid
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import pandas as pd
from pydantic import BaseModel, Field, field_validator

from app.config import GENERATION_WINDOWS, TIME_WINDOW_MODES, Config
from app.errors import ProtocolError, PseudoIdReuseError
from app.logger import clear_context, get_logger, log_privacy_event, log_trace_event, set_trace_context
from app.services.client_agent import (
    DayReports,
    DeliveryReceipt,
    LocationReport,
    SimulatedTransport,
    flush,
)
from app.services.field_mpc import Dealer, MpcEngine, SharedValue
from app.services.spatial_grid import GridConfig
from app.services.tracing_server import (
    InsertSteps,
    RecordEntry,
    RecordRef,
    TracingServer,
    compare_records,
)

logger = get_logger(__name__)


# ==================
# 参数与结果
# ==================

class QueryParams(BaseModel):
    """接触追踪查询参数"""
    distance_cm: int = Field(200, gt=0, description="传染距离 D（厘米）")
    tau: int = Field(3600, gt=0, description="传染时间窗口 τ（秒）")
    incubation_days: int = Field(14, ge=1, description="潜伏期 T（天）")
    max_generations: Optional[int] = Field(None, ge=1)
    time_window_mode: str = "symmetric"
    generation_window: str = "first_patient"

    @field_validator("time_window_mode")
    @classmethod
    def _check_time_mode(cls, value: str) -> str:
        if value not in TIME_WINDOW_MODES:
            raise ValueError(f"时间窗口模式必须是symmetric或one_sided，当前值: {value}")
        return value

    @field_validator("generation_window")
    @classmethod
    def _check_generation_window(cls, value: str) -> str:
        if value not in GENERATION_WINDOWS:
            raise ValueError(f"代际窗口必须是first_patient或per_contact，当前值: {value}")
        return value

    @property
    def symmetric(self) -> bool:
        return self.time_window_mode == "symmetric"

    @classmethod
    def from_config(cls, config: Config) -> "QueryParams":
        return cls(
            distance_cm=config.INFECTIOUS_DISTANCE_CM,
            tau=config.INFECTIOUS_WINDOW_S,
            incubation_days=config.INCUBATION_DAYS,
            max_generations=config.MAX_GENERATIONS,
            time_window_mode=config.TIME_WINDOW_MODE,
            generation_window=config.GENERATION_WINDOW,
        )


@dataclass
class TraceResult:
    """去重后的高风险假名及其代数（保留最小代数，不含种子假名）"""
    generations: Dict[str, int] = field(default_factory=dict)

    def add(self, pseudo_id: str, generation: int):
        current = self.generations.get(pseudo_id)
        if current is None or generation < current:
            self.generations[pseudo_id] = generation

    def tokens(self) -> List[str]:
        return sorted(self.generations)

    def items(self) -> List[Tuple[str, int]]:
        return sorted(self.generations.items(), key=lambda kv: (kv[1], kv[0]))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.items(), columns=["pseudo_id", "generation"])

    def __len__(self) -> int:
        return len(self.generations)

    def __contains__(self, pseudo_id: str) -> bool:
        return pseudo_id in self.generations


@dataclass
class ProtocolStats:
    """编排层计数"""
    inserted_messages: int = 0
    insert_comparisons: int = 0
    query_comparisons: int = 0
    queries: int = 0


def _person_groups(
    fresh: Dict[str, int],
    subscribers: Optional[Sequence]
) -> List[Tuple[List[str], int]]:
    """
    把本代命中的假名按用户分组

    Returns:
        [(该用户的全部假名, 该用户本代最早的接触日)]；订阅方不认识的假名单独成组
    """
    groups: Dict[str, Tuple[List[str], int]] = {}
    claimed: Set[str] = set()
    for subscriber in subscribers or []:
        for tokens in subscriber.contact_groups(fresh):
            hits = [fresh[pid] for pid in tokens if pid in fresh]
            groups[tokens[0]] = (tokens, min(hits))
            claimed.update(pid for pid in tokens if pid in fresh)
    for pid, day in fresh.items():
        if pid not in claimed:
            groups[pid] = ([pid], day)
    return [groups[key] for key in sorted(groups)]


def _step(steps: InsertSteps, value: Optional[bool]) -> Tuple[bool, object]:
    try:
        return False, steps.send(value)
    except StopIteration as stop:
        return True, stop.value


# ==================
# 参与方集合
# ==================

class PartySet:
    """
    N台追踪服务器 + 经销商 + 传输

    所有服务器共享同一网格配置与日历。
    """

    def __init__(
        self,
        grid: GridConfig,
        n_servers: int = 3,
        seed: int = 0,
        record_transcript: bool = False,
        failure_rate: float = 0.0,
        max_retries: int = 3,
        dealer: Optional[Dealer] = None
    ):
        self.grid = grid
        self.n = n_servers
        self.seed = seed
        self.dealer = dealer if dealer is not None else Dealer(n_servers, seed)
        self.engine = MpcEngine(n_servers, self.dealer, record_transcript=record_transcript)
        self.servers = [TracingServer(i + 1, grid.levels) for i in range(n_servers)]
        self.transport = SimulatedTransport(n_servers, seed, failure_rate, max_retries)
        self.stats = ProtocolStats()

    @classmethod
    def from_config(cls, grid: GridConfig, config: Config) -> "PartySet":
        return cls(
            grid,
            n_servers=config.PARTY_COUNT,
            seed=config.GLOBAL_SEED,
            record_transcript=config.RECORD_TRANSCRIPT,
            failure_rate=config.TRANSPORT_FAILURE_RATE,
            max_retries=config.TRANSPORT_MAX_RETRIES,
        )

    @classmethod
    def from_servers(cls, grid: GridConfig, servers: Sequence[TracingServer], seed: int = 0) -> "PartySet":
        """由快照恢复的服务器组装参与方集合"""
        parties = cls(grid, n_servers=len(servers), seed=seed)
        levels = {server.levels for server in servers}
        if levels != {grid.levels}:
            raise ProtocolError(f"服务器层数{sorted(levels)}与网格层数{grid.levels}不符")
        parties.servers = sorted(servers, key=lambda s: s.server_index)
        if [s.server_index for s in parties.servers] != list(range(1, len(servers) + 1)):
            raise ProtocolError("快照中的服务器编号必须恰好覆盖 1..N")
        return parties

    # ---------- 插入 ----------

    def run_insert(self, reports: Sequence[LocationReport]) -> List[RecordRef]:
        """
        一个消息集合（每台服务器一条报告）的锁步插入

        先在全部服务器上预检，任何一台拒绝则整体拒绝、状态不变。

        Raises:
            ProtocolError: 报告数量、编号、假名或天数不一致，或轮次不同步
            PseudoIdReuseError: 假名重复使用
        """
        if len(reports) != self.n:
            raise ProtocolError(f"需要{self.n}条报告，实际{len(reports)}条")
        ordered = sorted(reports, key=lambda r: r.server_index)
        if [r.server_index for r in ordered] != list(range(1, self.n + 1)):
            raise ProtocolError("报告的服务器编号必须恰好覆盖 1..N")
        if len({(r.pseudo_id, r.day) for r in ordered}) != 1:
            raise ProtocolError("同一消息集合的假名或天数不一致")

        try:
            for server, report in zip(self.servers, ordered):
                server.check_report(report)
        except PseudoIdReuseError:
            log_privacy_event("pseudo_id_reuse", "medium", day=ordered[0].day, pseudo_id=ordered[0].pseudo_id)
            raise

        steps = [server.insert(report) for server, report in zip(self.servers, ordered)]
        state = [_step(s, None) for s in steps]
        while True:
            done = {finished for finished, _ in state}
            if done == {True}:
                break
            if len(done) > 1:
                raise ProtocolError("插入轮次不同步：服务器树形状不一致")
            diff = SharedValue([value for _, value in state])
            is_zero = self.engine.eq_zero(diff)
            self.stats.insert_comparisons += 1
            state = [_step(s, is_zero) for s in steps]

        self.stats.inserted_messages += 1
        return [ref for _, ref in state]  # type: ignore[misc]

    def ingest(self) -> int:
        """
        把各服务器收件箱中的报告按假名对齐后逐个插入

        插入顺序取服务器1的到达顺序。

        Raises:
            ProtocolError: 某假名在部分服务器上缺失
        """
        inboxes = [self.transport.drain(server.server_index) for server in self.servers]
        keyed: List[Dict[Tuple[int, str], LocationReport]] = [
            {(r.day, r.pseudo_id): r for r in inbox} for inbox in inboxes
        ]
        for inbox, table in zip(inboxes, keyed):
            if len(table) != len(inbox) or set(table) != set(keyed[0]):
                raise ProtocolError("各服务器收到的消息集合无法对齐")

        count = 0
        for report in inboxes[0]:
            key = (report.day, report.pseudo_id)
            self.run_insert([table[key] for table in keyed])
            count += 1
        logger.info("消息入库完成", messages=count)
        return count

    def submit_day(self, reports: DayReports) -> List[DeliveryReceipt]:
        """投递一天的报告并立即入库"""
        receipts = flush(reports.batches, self.transport)
        self.ingest()
        return receipts

    # ---------- 查询 ----------

    def latest_day(self) -> Optional[int]:
        days = [day for server in self.servers for day in server.stores]
        return max(days) if days else None

    def window(self, today: int, incubation_days: int) -> List[int]:
        return list(range(today - incubation_days + 1, today + 1))

    def _contacts(
        self,
        token_windows: Dict[str, Optional[Sequence[int]]],
        params: QueryParams
    ) -> Dict[str, int]:
        """返回 {接触者假名: 所在天}；比较次数 = Σ(叶组大小 − 1)"""
        found: Dict[str, int] = {}
        for token in sorted(token_windows):
            views = [server.lookup_patient(token, token_windows[token]) for server in self.servers]
            if len({len(v) for v in views}) != 1:
                raise ProtocolError(f"各服务器上假名记录数不一致: {token}")

            for matches in zip(*views):
                patients: List[RecordEntry] = [entry for entry, _ in matches]
                leaves = [leaf for _, leaf in matches]
                size = len(leaves[0].records)
                if any(len(leaf.records) != size for leaf in leaves):
                    raise ProtocolError("各服务器叶组大小不一致")

                for position in range(size):
                    candidates = [leaf.records[position] for leaf in leaves]
                    if candidates[0].pseudo_id == token:
                        continue
                    self.stats.query_comparisons += 1
                    if compare_records(
                        patients, candidates, params.distance_cm, params.tau,
                        self.engine, symmetric=params.symmetric,
                    ):
                        found.setdefault(candidates[0].pseudo_id, leaves[0].day)
        for token in token_windows:
            found.pop(token, None)
        return found

    def contact_query(
        self,
        pseudo_ids: Sequence[str],
        params: QueryParams,
        days: Optional[Sequence[int]] = None
    ) -> Set[str]:
        """单代接触查询；未知假名不贡献结果，病人假名不出现在结果中"""
        self.grid.check_distance(params.distance_cm)
        self.stats.queries += 1
        return set(self._contacts({pid: days for pid in pseudo_ids}, params))

    def multi_generation_query(
        self,
        seed_ids: Sequence[str],
        params: QueryParams,
        today: Optional[int] = None,
        subscribers: Optional[Sequence] = None
    ) -> TraceResult:
        """
        多代查询：第 g 代识别出的接触者作为第 g+1 代的病人，直到没有新接触者或达到代数上限

        每代命中的假名交给订阅方，换成该用户的全部假名（含边界副本）作为下一代种子。
        未提供订阅方时只用命中的假名继续，命中边界副本时会漏掉接触者自身格子里的人。

        first_patient：所有代都限制在首个病人的 T 天窗口内；
        per_contact：接触者从被识别当天起的 T 天窗口。
        """
        self.grid.check_distance(params.distance_cm)
        result = TraceResult()
        if today is None:
            today = self.latest_day()
        if today is None or not seed_ids:
            return result
        if not subscribers:
            logger.warning("未提供订阅方，多代查询只沿命中的假名扩展")

        set_trace_context(query_id=uuid.uuid4().hex[:8], today=today)
        try:
            patient_window = self.window(today, params.incubation_days)
            seen: Set[str] = set(seed_ids)
            frontier: Dict[str, Optional[Sequence[int]]] = {pid: patient_window for pid in seed_ids}
            generation = 0

            while frontier and (params.max_generations is None or generation < params.max_generations):
                generation += 1
                self.stats.queries += 1
                contacts = self._contacts(frontier, params)
                fresh = {pid: day for pid, day in contacts.items() if pid not in seen}
                for pid in fresh:
                    result.add(pid, generation)
                seen.update(fresh)

                frontier = {}
                for tokens, day in _person_groups(fresh, subscribers):
                    seen.update(tokens)
                    days = (
                        list(range(day, day + params.incubation_days))
                        if params.generation_window == "per_contact" else patient_window
                    )
                    frontier.update({pid: days for pid in tokens})
                log_trace_event("generation", generation=generation, found=len(fresh), seeds=len(frontier))
        finally:
            clear_context()

        log_trace_event("query", seeds=len(seed_ids), contacts=len(result))
        return result

    def broadcast_results(self, result: TraceResult, subscribers: Sequence) -> int:
        """向全部订阅方广播完整假名列表，返回实际匹配的通知数"""
        tokens = result.tokens()
        matched = sum(len(subscriber.match_notifications(tokens)) for subscriber in subscribers)
        log_trace_event("broadcast", tokens=len(tokens), subscribers=len(subscribers), matched=matched)
        return matched

    # ---------- 维护 ----------

    def retire_old_days(self, today: int, incubation_days: int) -> List[int]:
        purged: List[int] = []
        for server in self.servers:
            purged = server.retire_old_days(today, incubation_days)
        return purged

    def shapes_congruent(self) -> bool:
        """全部服务器每天的树形状一致"""
        days = set(self.servers[0].stores)
        if any(set(server.stores) != days for server in self.servers):
            return False
        return all(
            len({server.shape(day) for server in self.servers}) == 1
            for day in days
        )
