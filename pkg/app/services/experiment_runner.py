"""
ShareTrace-Lite 实验运行器

功能:
1. 端到端部署：负载 → 客户端报告 → 日终投递 → 锁步入库
2. 追踪结果映射到真实身份并与明文预言机比对
3. 四个实验轴（轨迹数 / 格子大小 / 传染距离 / 潜伏期）与无分区基线
4. 视图均匀性报告（卡方检验）与服务器状态明文审计

比较次数是与硬件无关的主指标，耗时仅作参考。
"""

import time
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from app.errors import InvalidInputError
from app.logger import get_logger, log_execution_time
from app.services.analytics import plan_partition
from app.services.client_agent import ClientAgent
from app.services.field_mpc import FieldRng, Q, share_vector
from app.services.orchestration import PartySet, QueryParams
from app.services.spatial_grid import DEFAULT_GRID, GridConfig, grid_config_for_partition
from app.services.subscriber_registry import SubscriberRegistry, TokenLedger
from app.services.tracing_server import TracingServer
from app.services.workload import (
    PlainMessage,
    Workload,
    WorkloadSpec,
    generate_workload,
    oracle_trace,
    real_id_of,
)

logger = get_logger(__name__)

AXES = ["trajectories", "cell-size", "distance", "incubation"]
UNIFORMITY_BUCKETS = 16
UNIFORMITY_ALPHA = 0.001


# ==================
# 端到端部署
# ==================

@dataclass
class Simulation:
    """一次完整部署：服务器、订阅方与客户端留存的明文消息清单"""
    workload: Workload
    parties: PartySet
    registries: List[SubscriberRegistry]
    messages: List[PlainMessage] = field(default_factory=list)
    insert_seconds: float = 0.0

    def registry_of(self, real_id: str) -> SubscriberRegistry:
        for registry in self.registries:
            if real_id in registry.registrations:
                return registry
        raise InvalidInputError(f"用户不在任何订阅方: {real_id}")

    def owner_of(self, token: str) -> Optional[str]:
        for registry in self.registries:
            real_id = registry.real_id_of(token)
            if real_id is not None:
                return real_id
        return None

    @property
    def last_day(self) -> int:
        return self.workload.spec.days - 1

    def trace(self, real_id: str, params: QueryParams, today: Optional[int] = None) -> Dict[str, int]:
        """系统多代追踪，结果按真实身份去重（保留最小代数）"""
        today = self.last_day if today is None else today
        result = self.registry_of(real_id).initiate_trace(
            real_id, self.parties, params, today=today, peers=self.registries,
        )
        mapped: Dict[str, int] = {}
        for token, generation in result.items():
            owner = self.owner_of(token)
            if owner is not None and (owner not in mapped or generation < mapped[owner]):
                mapped[owner] = generation
        return mapped

    def oracle(self, real_id: str, params: QueryParams, mode: str = "geometric", today: Optional[int] = None) -> Dict[str, int]:
        today = self.last_day if today is None else today
        return oracle_trace(self.workload.stays, real_id, params, today=today, mode=mode, messages=self.messages)

    def first_generation_comparisons(self, real_id: str, params: QueryParams, today: Optional[int] = None) -> int:
        """单代查询的安全比较次数"""
        today = self.last_day if today is None else today
        before = self.parties.stats.query_comparisons
        tokens = self.registry_of(real_id).tokens_of(real_id)
        self.parties.contact_query(tokens, params, days=self.parties.window(today, params.incubation_days))
        return self.parties.stats.query_comparisons - before


def simulate(
    workload: Workload,
    n_servers: int = 3,
    subscribers: int = 2,
    grid: Optional[GridConfig] = None,
    record_transcript: bool = False,
    retain_days: Optional[int] = None
) -> Simulation:
    """
    部署并灌入负载

    用户 u 在订阅方 u mod k 注册；每天每个用户领取当天的假名池，
    全部用户的报告合并为一次日终投递后锁步入库。
    """
    spec = workload.spec
    grid = grid or spec.grid
    params = spec.params
    grid.check_distance(params.distance_cm)

    ledger = TokenLedger()
    registries = [
        SubscriberRegistry(f"subscriber-{k}", ledger, seed=spec.seed, pool_size=spec.pool_size)
        for k in range(subscribers)
    ]
    parties = PartySet(grid, n_servers=n_servers, seed=spec.seed, record_transcript=record_transcript)
    agents = [
        ClientAgent(u, grid, n_servers, params.distance_cm, params.tau, spec.stay_radius_cm, spec.seed)
        for u in range(spec.users)
    ]
    simulation = Simulation(workload=workload, parties=parties, registries=registries)
    retain = retain_days or params.incubation_days

    for day in range(spec.days):
        day_batches: List[list] = [[] for _ in range(n_servers)]
        for user, agent in enumerate(agents):
            real_id = real_id_of(user)
            registry = registries[user % subscribers]
            if real_id not in registry.registrations:
                registry.register_user(real_id, day=day)
            pool = registry.issue_pool(real_id, day)

            stays = agent.collect(workload.fixes.get((user, day), []))
            reports = agent.report_day(day, stays, pool)
            for server, batch in enumerate(reports.batches):
                day_batches[server].extend(batch)
            simulation.messages.extend(
                PlainMessage(m.pseudo_id, real_id, day, m.t, m.point.x, m.point.y, m.path.leaf)
                for m in reports.manifest
            )

        start = time.perf_counter()
        parties.transport.submit(day_batches)
        parties.ingest()
        simulation.insert_seconds += time.perf_counter() - start
        parties.retire_old_days(day, retain)

    logger.info(
        "部署完成",
        users=spec.users,
        days=spec.days,
        messages=parties.stats.inserted_messages,
        insert_comparisons=parties.stats.insert_comparisons,
    )
    return simulation


# ==================
# 实验记录
# ==================

@dataclass
class ExperimentRecord:
    """一个实验水平的结果（每行携带负载种子以便重放）"""
    axis: str
    x_value: object
    seed: int
    users: int
    days: int
    stay_points: int
    inserted_messages: int
    insert_comparisons_per_message: float
    mean_insert_ms: float
    mean_query_comparisons: float
    mean_query_ms: float
    mean_plaintext_query_ms: float
    queries: int
    oracle_agreement: bool


def planned_grid(n_users: int, side_cm: int = DEFAULT_GRID.side, min_leaf_cm: int = 400) -> GridConfig:
    """
    规划器给出的分区 (N_r, N_g) 落到边长约为 side_cm 的服务区域上

    叶格宽 = side_cm // 每边叶格数，不小于 min_leaf_cm。
    """
    n_regions, n_grids = plan_partition(n_users)
    shape = grid_config_for_partition(n_regions, n_grids, 1)
    leaf = max(min_leaf_cm, side_cm // shape.side)
    grid = grid_config_for_partition(n_regions, n_grids, leaf)
    logger.debug("规划分区", n_users=n_users, n_regions=n_regions, n_grids=n_grids, leaf_cm=leaf, side_cm=grid.side)
    return grid


def _grid_for_leaf_width(base: GridConfig, width: int) -> GridConfig:
    """给定最底层格宽，取能整除边长、且最接近每边10个区域的顶层格宽"""
    if base.side % width != 0:
        raise InvalidInputError(f"格宽{width}不能整除服务区域边长{base.side}")
    target = base.side / 10
    multiples = [width * j for j in range(1, base.side // width + 1) if base.side % (width * j) == 0]
    top = min(multiples, key=lambda w: (abs(w - target), w))
    return GridConfig(base.origin_x, base.origin_y, base.side, (width, top))


def _level_setup(axis: str, level, spec: WorkloadSpec) -> Tuple[WorkloadSpec, GridConfig, QueryParams]:
    params = spec.params
    grid = spec.grid
    if axis == "trajectories":
        spec = spec.model_copy(update={"users": int(level)})
    elif axis == "cell-size":
        grid = grid.flattened() if level == "flat" else _grid_for_leaf_width(grid, int(level))
    elif axis == "distance":
        params = params.model_copy(update={"distance_cm": int(level)})
    elif axis == "incubation":
        params = params.model_copy(update={"incubation_days": int(level)})
    else:
        raise InvalidInputError(f"未知的实验轴: {axis}，可选: {', '.join(AXES)}")
    spec = spec.model_copy(update={"grid": grid, "params": params})
    return spec, grid, params


@log_execution_time
def run_experiment(
    axis: str,
    levels: Sequence,
    spec: WorkloadSpec,
    queries: int = 100,
    n_servers: int = 3,
    verify_oracle: bool = True
) -> pd.DataFrame:
    """
    按实验轴逐个水平部署并查询

    每个水平随机选取 queries 个病人：记录单代查询的安全比较次数与耗时、
    明文同叶查询耗时，并核对多代追踪与几何预言机的一致性。
    """
    records: List[ExperimentRecord] = []
    for level in levels:
        level_spec, grid, params = _level_setup(axis, level, spec)
        workload = generate_workload(level_spec)
        retain = max(level_spec.days, params.incubation_days)
        simulation = simulate(workload, n_servers=n_servers, grid=grid, retain_days=retain)
        parties = simulation.parties

        rng = np.random.default_rng(np.random.SeedSequence([level_spec.seed, 0xE1]))
        patients = [real_id_of(int(u)) for u in rng.choice(level_spec.users, size=min(queries, level_spec.users), replace=False)]

        comparisons: List[int] = []
        query_seconds: List[float] = []
        plain_seconds: List[float] = []
        agreement = True
        for patient in patients:
            start = time.perf_counter()
            comparisons.append(simulation.first_generation_comparisons(patient, params))
            query_seconds.append(time.perf_counter() - start)

            start = time.perf_counter()
            oracle_trace(
                workload.stays, patient, params.model_copy(update={"max_generations": 1}),
                mode="message", messages=simulation.messages,
            )
            plain_seconds.append(time.perf_counter() - start)

            if verify_oracle and simulation.trace(patient, params) != simulation.oracle(patient, params):
                agreement = False
                logger.error("系统结果与预言机不一致", axis=axis, level=str(level), patient=patient)

        inserted = max(parties.stats.inserted_messages, 1)
        records.append(ExperimentRecord(
            axis=axis,
            x_value=level,
            seed=level_spec.seed,
            users=level_spec.users,
            days=level_spec.days,
            stay_points=workload.stay_count(),
            inserted_messages=parties.stats.inserted_messages,
            insert_comparisons_per_message=parties.stats.insert_comparisons / inserted,
            mean_insert_ms=1000 * simulation.insert_seconds / inserted,
            mean_query_comparisons=float(np.mean(comparisons)) if comparisons else 0.0,
            mean_query_ms=1000 * float(np.mean(query_seconds)) if query_seconds else 0.0,
            mean_plaintext_query_ms=1000 * float(np.mean(plain_seconds)) if plain_seconds else 0.0,
            queries=len(patients),
            oracle_agreement=agreement,
        ))
        logger.info("实验水平完成", axis=axis, level=str(level), agreement=agreement)

    return pd.DataFrame([asdict(r) for r in records])


# ==================
# 视图均匀性与审计
# ==================

def uniformity_report(streams: Dict[str, Sequence[int]], buckets: int = UNIFORMITY_BUCKETS) -> pd.DataFrame:
    """
    对每个值流做等宽分桶卡方检验（[0, Q) 分为 buckets 段）

    Returns:
        列：stream, samples, chi2, p_value, uniform
    """
    columns = ["stream", "samples", "chi2", "p_value", "uniform"]
    rows = []
    for name, values in streams.items():
        if len(values) == 0:
            continue
        # v·buckets 会超出 int64，用 Python 整数分桶
        indices = np.array([v * buckets // Q for v in values], dtype=np.int64)
        counts = np.bincount(indices, minlength=buckets)
        chi2, p_value = stats.chisquare(counts)
        rows.append((name, len(values), float(chi2), float(p_value), bool(p_value > UNIFORMITY_ALPHA)))
    return pd.DataFrame(rows, columns=columns)


def received_share_streams(value: int, n_servers: int, samples: int, seed: int = 0) -> Dict[str, List[int]]:
    """把同一个秘密重复分享 samples 次，返回每台服务器收到的分享序列"""
    rng = FieldRng(np.random.SeedSequence([seed, 0x5EED]))
    streams: Dict[str, List[int]] = {f"server-{i + 1}": [] for i in range(n_servers)}
    for _ in range(samples):
        vector = share_vector(value, n_servers, rng)
        for i, share in enumerate(vector.values):
            streams[f"server-{i + 1}"].append(share)
    return streams


def transcript_streams(parties: PartySet) -> Dict[str, List[int]]:
    """每台服务器在协议运行中收到的全部值（需开启转录）"""
    trace = parties.engine.trace
    if trace is None:
        return {}
    return {f"server-{s.server_index}": trace.received_by(s.server_index - 1) for s in parties.servers}


def audit_plaintext_hits(server: TracingServer, plaintexts: Iterable[int]) -> int:
    """服务器存储状态中与明文坐标/时间相等的值个数"""
    targets: Set[int] = set(plaintexts)
    return sum(1 for value in server.stored_values() if value in targets)
