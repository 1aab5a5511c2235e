"""
ShareTrace-Lite 命令行

子命令:
  plan        分区规划与查询成本
  analyze     成本模型 + 隐私上界
  gen         生成合成负载（CSV 定位）
  ingest      CSV 定位 → 各服务器快照 + 注册表
  query       以假名文件为种子做多代查询
  snapshot    从快照导出假名索引 CSV
  restore     恢复快照并检查树形状一致性
  oracle      系统结果与明文预言机比对（不一致时退出码非零）
  bench       实验轴复现
  uniformity  分享流均匀性卡方报告

输出为 key=value 行或带表头的 CSV。
"""

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.config import get_config
from app.errors import ShareTraceError
from app.logger import get_logger, setup_logger
from app.services.analytics import (
    CostModelInput,
    PrivacyBoundInput,
    evaluate_cost_model,
    evaluate_privacy,
)
from app.services.client_agent import ClientAgent, load_fixes_csv
from app.services.experiment_runner import (
    AXES,
    received_share_streams,
    run_experiment,
    simulate,
    uniformity_report,
)
from app.services.orchestration import PartySet, QueryParams
from app.services.spatial_grid import resolve_grid_config
from app.services.subscriber_registry import SubscriberRegistry, TokenLedger
from app.services.tracing_server import TracingServer
from app.services.workload import WorkloadSpec, generate_workload, real_id_of

logger = get_logger(__name__)


# ==================
# 输出
# ==================

def _format(value) -> str:
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else f"{float(value):.6g}"
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _emit_pairs(pairs: Dict[str, object], csv_path: Optional[str] = None):
    for key, value in pairs.items():
        print(f"{key}={_format(value)}")
    if csv_path:
        pd.DataFrame([{k: _format(v) for k, v in pairs.items()}]).to_csv(csv_path, index=False)


def _emit_frame(frame: pd.DataFrame, out: Optional[str] = None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out, index=False)
    else:
        frame.to_csv(sys.stdout, index=False)


def _snapshot_path(directory: str, server_index: int) -> Path:
    return Path(directory) / f"server-{server_index}.bin"


def _load_spec(args: argparse.Namespace) -> WorkloadSpec:
    config = get_config()
    params = QueryParams.from_config(config)
    if getattr(args, "spec", None):
        payload = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        payload.setdefault("params", params.model_dump())
        payload.setdefault("grid", resolve_grid_config(config.GRID_CONFIG_FILE))
        return WorkloadSpec(**payload)
    return WorkloadSpec(
        users=args.users,
        days=args.days,
        max_locs_per_day=args.max_locs,
        seed=args.seed if args.seed is not None else config.GLOBAL_SEED,
        grid=resolve_grid_config(config.GRID_CONFIG_FILE),
        params=params,
        stay_radius_cm=config.STAY_RADIUS_CM,
        pool_size=config.PSEUDO_POOL_SIZE,
    )


# ==================
# 子命令
# ==================

def cmd_plan(args: argparse.Namespace) -> int:
    result = evaluate_cost_model(CostModelInput(n_users=args.users, query_locations=args.query_locations))
    _emit_pairs({
        "n_users": args.users,
        "n_regions": result["n_regions"],
        "n_grids": result["n_grids"],
        "query_cost_tree": result["query_cost_tree"],
        "brute_force": result["brute_force"],
        "speedup": result["speedup"],
    }, args.csv)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    cost = evaluate_cost_model(CostModelInput(
        n_users=args.users,
        locations_per_user=args.locations_per_user,
        trajectory_length_cm=args.trajectory_length,
        query_locations=args.query_locations,
        side_cm=args.side,
        leaf_width_cm=args.leaf_width,
    ))
    privacy = evaluate_privacy(PrivacyBoundInput(
        pseudo_domain_size=args.pseudo_domain,
        real_domain_size=args.real_domain,
        leaf_cell_count=args.leaf_cells,
        intercepted_cells=args.intercepted_cells,
        reported_locations=args.reported,
        ordered=not args.unordered,
    ))
    _emit_pairs({**cost, **privacy}, args.csv)
    return 0


def cmd_gen(args: argparse.Namespace) -> int:
    workload = generate_workload(_load_spec(args))
    rows = workload.write_csv(args.out)
    print(f"fixes={rows}")
    print(f"stay_points={workload.stay_count()}")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    config = get_config()
    grid = resolve_grid_config(config.GRID_CONFIG_FILE)
    params = QueryParams.from_config(config)
    parties = PartySet.from_config(grid, config)

    fixes = load_fixes_csv(args.fixes, grid)
    users = sorted({user for user, _ in fixes})
    registry = SubscriberRegistry(args.subscriber, TokenLedger(), seed=config.GLOBAL_SEED, pool_size=config.PSEUDO_POOL_SIZE)
    agents = {
        user: ClientAgent(index, grid, parties.n, params.distance_cm, params.tau, config.STAY_RADIUS_CM, config.GLOBAL_SEED)
        for index, user in enumerate(users)
    }

    days = sorted({day for _, day in fixes})
    for day in days:
        batches: List[list] = [[] for _ in range(parties.n)]
        for user in users:
            if (user, day) not in fixes:
                continue
            if user not in registry.registrations:
                registry.register_user(user, day=day)
            pool = registry.issue_pool(user, day)
            agent = agents[user]
            reports = agent.report_day(day, agent.collect(fixes[(user, day)]), pool)
            for server, batch in enumerate(reports.batches):
                batches[server].extend(batch)
        parties.transport.submit(batches)
        parties.ingest()
    if days:
        parties.retire_old_days(days[-1], params.incubation_days)

    Path(args.snapshot_dir).mkdir(parents=True, exist_ok=True)
    for server in parties.servers:
        server.snapshot(str(_snapshot_path(args.snapshot_dir, server.server_index)))
    registry.export_csv(args.registry)

    print(f"users={len(users)}")
    print(f"messages={parties.stats.inserted_messages}")
    print(f"insert_comparisons={parties.stats.insert_comparisons}")
    return 0


def _restore_parties(directory: str) -> PartySet:
    config = get_config()
    grid = resolve_grid_config(config.GRID_CONFIG_FILE)
    paths = sorted(Path(directory).glob("server-*.bin"))
    if not paths:
        raise ShareTraceError(f"目录中没有快照: {directory}")
    servers = [TracingServer.restore(str(path)) for path in paths]
    return PartySet.from_servers(grid, servers, seed=config.GLOBAL_SEED)


def cmd_query(args: argparse.Namespace) -> int:
    params = QueryParams.from_config(get_config())
    parties = _restore_parties(args.snapshot_dir)
    tokens = [line.strip() for line in Path(args.patient).read_text(encoding="utf-8").splitlines() if line.strip()]
    subscribers = SubscriberRegistry.import_csv(args.registry) if args.registry else None
    result = parties.multi_generation_query(tokens, params, today=args.today, subscribers=subscribers)
    _emit_frame(result.to_frame(), args.out)
    return 0


def cmd_snapshot(args: argparse.Namespace) -> int:
    parties = _restore_parties(args.snapshot_dir)
    frames = []
    for server in parties.servers:
        frame = server.index_frame()
        frame.insert(0, "server_index", server.server_index)
        frames.append(frame)
    _emit_frame(pd.concat(frames, ignore_index=True), args.out)
    return 0


def cmd_restore(args: argparse.Namespace) -> int:
    parties = _restore_parties(args.snapshot_dir)
    congruent = parties.shapes_congruent()
    print(f"servers={parties.n}")
    print(f"days={len(parties.servers[0].stores)}")
    print(f"records={parties.servers[0].record_count()}")
    print(f"shapes_congruent={congruent}")
    return 0 if congruent else 1


def cmd_oracle(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    simulation = simulate(generate_workload(spec), n_servers=get_config().PARTY_COUNT)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x0AC1]))
    patients = [real_id_of(int(u)) for u in rng.choice(spec.users, size=min(args.patients, spec.users), replace=False)]

    rows = []
    for patient in patients:
        system = simulation.trace(patient, spec.params)
        oracle = simulation.oracle(patient, spec.params, mode=args.mode)
        rows.append({
            "patient": patient,
            "system_contacts": len(system),
            "oracle_contacts": len(oracle),
            "missing": len(set(oracle) - set(system)),
            "extra": len(set(system) - set(oracle)),
            "agreement": system == oracle,
        })
    frame = pd.DataFrame(rows)
    _emit_frame(frame, args.out)
    return 0 if frame.empty or bool(frame["agreement"].all()) else 1


def cmd_bench(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    levels: Sequence = [lv.strip() for lv in args.levels.split(",") if lv.strip()]
    frame = run_experiment(args.axis, levels, spec, queries=args.queries, n_servers=get_config().PARTY_COUNT)
    _emit_frame(frame, args.out)
    return 0 if bool(frame["oracle_agreement"].all()) else 1


def cmd_uniformity(args: argparse.Namespace) -> int:
    streams = received_share_streams(args.value, args.servers, args.samples, seed=args.seed)
    frame = uniformity_report(streams)
    _emit_frame(frame, args.out)
    return 0 if frame.empty or bool(frame["uniform"].all()) else 1


# ==================
# 参数解析
# ==================

def _add_workload_args(parser: argparse.ArgumentParser):
    parser.add_argument("--spec", help="WorkloadSpec JSON 文件")
    parser.add_argument("--users", type=int, default=200)
    parser.add_argument("--days", type=int, default=7)
    parser.add_argument("--max-locs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharetrace", description="ShareTrace-Lite 秘密分享接触追踪")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="分区规划")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--query-locations", type=int, default=10)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("analyze", help="成本模型与隐私上界")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--locations-per-user", type=int, default=1)
    p.add_argument("--trajectory-length", type=int, default=1)
    p.add_argument("--query-locations", type=int, default=10)
    p.add_argument("--side", type=int, default=1)
    p.add_argument("--leaf-width", type=int, default=1)
    p.add_argument("--pseudo-domain", type=int, default=1)
    p.add_argument("--real-domain", type=int, default=1)
    p.add_argument("--leaf-cells", type=int, default=1)
    p.add_argument("--intercepted-cells", type=int, default=1)
    p.add_argument("--reported", type=int, default=0)
    p.add_argument("--unordered", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen", help="生成合成负载")
    _add_workload_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="CSV 定位入库并写快照")
    p.add_argument("--fixes", required=True)
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--subscriber", default="subscriber-0")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("query", help="多代接触查询")
    p.add_argument("--patient", required=True, help="每行一个假名的文件")
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--registry", help="ingest 导出的注册表，用于按用户扩展下一代种子")
    p.add_argument("--today", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("snapshot", help="导出假名索引 CSV")
    p.add_argument("--snapshot-dir", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("restore", help="恢复快照并检查")
    p.add_argument("--snapshot-dir", required=True)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("oracle", help="与明文预言机比对")
    _add_workload_args(p)
    p.add_argument("--patients", type=int, default=10)
    p.add_argument("--mode", choices=["geometric", "message"], default="geometric")
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("bench", help="实验轴复现")
    _add_workload_args(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--levels", required=True, help="逗号分隔的水平值")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("uniformity", help="分享流均匀性")
    p.add_argument("--value", type=int, default=12345)
    p.add_argument("--servers", type=int, default=3)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_uniformity)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = get_config()
    setup_logger(level=config.LOG_LEVEL, log_file=config.LOG_FILE or None)
    try:
        return args.func(args)
    except ShareTraceError as e:
        logger.error("命令执行失败", command=args.command, error=str(e))
        print(f"错误: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"参数错误: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
