"""
协议性能测试脚本
测量安全原语、插入与查询的单次耗时

运行方式：
  python scripts/protocol_benchmark.py [--users 200] [--repeat 200]
"""

import argparse
import os
import sys
import time
from datetime import datetime

import pandas as pd

# 添加项目路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.services.experiment_runner import simulate  # noqa: E402
from app.services.field_mpc import Dealer, FieldRng, MpcEngine, share_vector  # noqa: E402
from app.services.workload import WorkloadSpec, generate_workload, real_id_of  # noqa: E402


class ProtocolBenchmark:
    """协议性能测试工具"""

    def __init__(self, n_servers: int = 3, seed: int = 20240101):
        self.n_servers = n_servers
        self.seed = seed
        self.results = []

    def measure_time(self, func, *args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        return result, time.perf_counter() - start_time

    def record_result(self, test_name, count, elapsed_time):
        self.results.append({
            "test_name": test_name,
            "count": count,
            "total_s": elapsed_time,
            "per_op_ms": 1000 * elapsed_time / max(count, 1),
            "timestamp": datetime.now(),
        })

    def print_results(self):
        df = pd.DataFrame(self.results)

        print("\n" + "=" * 80)
        print("协议性能测试结果")
        print("=" * 80)
        for _, row in df.iterrows():
            print(f"\n{row['test_name']}")
            print(f"   次数: {row['count']}")
            print(f"   总耗时: {row['total_s']:.3f}秒")
            print(f"   单次: {row['per_op_ms']:.3f}毫秒")

    def test_eq_zero(self, repeat: int):
        engine = MpcEngine(self.n_servers, Dealer(self.n_servers, self.seed))
        rng = FieldRng(self.seed)
        values = [share_vector(v % 2, self.n_servers, rng) for v in range(repeat)]

        def run():
            return [engine.eq_zero(v) for v in values]

        _, elapsed = self.measure_time(run)
        self.record_result("掩码零值检测 eq_zero", repeat, elapsed)

    def test_less_than(self, repeat: int):
        engine = MpcEngine(self.n_servers, Dealer(self.n_servers, self.seed))
        rng = FieldRng(self.seed)
        values = [share_vector(v, self.n_servers, rng) for v in range(repeat)]

        def run():
            return [engine.less_than(v, repeat // 2) for v in values]

        _, elapsed = self.measure_time(run)
        self.record_result("有界比较 less_than", repeat, elapsed)

    def test_insert_and_query(self, users: int, queries: int):
        spec = WorkloadSpec(users=users, days=1, max_locs_per_day=6, seed=self.seed)
        simulation, _ = self.measure_time(simulate, generate_workload(spec), self.n_servers)
        stats = simulation.parties.stats
        self.record_result("插入（每条消息）", stats.inserted_messages, simulation.insert_seconds)

        def run():
            return [
                simulation.first_generation_comparisons(real_id_of(u), spec.params)
                for u in range(min(queries, users))
            ]

        comparisons, elapsed = self.measure_time(run)
        self.record_result("单代查询（每次）", len(comparisons), elapsed)
        print(f"平均查询比较次数: {sum(comparisons) / max(len(comparisons), 1):.1f}")

    def run_all_tests(self, users: int, repeat: int, queries: int, out: str):
        print("\n" + "=" * 80)
        print("ShareTrace-Lite 协议性能测试")
        print("=" * 80)
        print(f"开始时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        print(f"Python版本: {sys.version}")
        print(f"服务器数: {self.n_servers}")

        self.test_eq_zero(repeat)
        self.test_less_than(repeat)
        self.test_insert_and_query(users, queries)

        self.print_results()

        pd.DataFrame(self.results).to_csv(out, index=False)
        print(f"\n结果已保存到: {out}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="ShareTrace-Lite 协议性能测试")
    parser.add_argument("--servers", type=int, default=3)
    parser.add_argument("--users", type=int, default=200)
    parser.add_argument("--repeat", type=int, default=200)
    parser.add_argument("--queries", type=int, default=10)
    parser.add_argument("--out", default="benchmark_results.csv")
    args = parser.parse_args()

    ProtocolBenchmark(n_servers=args.servers).run_all_tests(args.users, args.repeat, args.queries, args.out)
