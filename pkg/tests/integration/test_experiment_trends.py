"""
实验趋势集成测试

缩小规模复现四条实验轴上的成本趋势：
1. 轨迹数：网格饱和后每条消息的插入比较次数基本不变
2. 格子大小：大格子插入更省、查询更贵
3. 潜伏期：查询比较次数随窗口单调不减
4. 感染距离：大格子下 2m 与 4m 的查询成本相差很小

完整规模（10^4 级用户、100 次查询）标记为 slow。
"""

import pytest


def _uniform_spec(grid, params, users, days=1, max_locs=6, seed=31):
    from app.services.workload import WorkloadSpec

    return WorkloadSpec(
        users=users,
        days=days,
        max_locs_per_day=max_locs,
        seed=seed,
        grid=grid,
        params=params,
        pool_size=32,
        hotspot_share=0.0,
    )


def _query_cost(simulation, patient, params):
    """单代查询比较次数 = 病人窗口内每条记录所在叶组大小 − 1（只读服务器状态，不跑协议）"""
    server = simulation.parties.servers[0]
    days = simulation.parties.window(simulation.last_day, params.incubation_days)
    tokens = simulation.registry_of(patient).tokens_of(patient)
    return sum(
        len(leaf.records) - 1
        for token in tokens
        for _, leaf in server.lookup_patient(token, days=days)
    )


@pytest.mark.integration
class TestTrends:
    """缩小规模"""

    def test_insert_cost_flat_once_saturated(self, small_grid, params):
        """8×8 叶格饱和后，用户数翻倍每条消息插入比较次数变化不超过25%"""
        from app.services.experiment_runner import run_experiment

        spec = _uniform_spec(small_grid, params, users=150)
        frame = run_experiment("trajectories", [150, 300], spec, queries=5, verify_oracle=False)
        small, large = frame["insert_comparisons_per_message"].tolist()
        assert small > 0
        assert abs(large - small) / small <= 0.25
        assert frame["inserted_messages"].iloc[1] > frame["inserted_messages"].iloc[0]

    def test_cell_size(self, params):
        """12m 与 120m 叶格"""
        from app.services.experiment_runner import run_experiment
        from app.services.spatial_grid import GridConfig

        grid = GridConfig(origin_x=0, origin_y=0, side=48000, widths=(1200, 4800))
        spec = _uniform_spec(grid, params, users=200, max_locs=4)
        frame = run_experiment("cell-size", [1200, 12000], spec, queries=10, verify_oracle=False)
        fine, coarse = frame.to_dict("records")
        assert coarse["insert_comparisons_per_message"] < fine["insert_comparisons_per_message"]
        assert fine["inserted_messages"] > coarse["inserted_messages"]
        assert coarse["mean_query_comparisons"] > fine["mean_query_comparisons"]

    def test_incubation_non_decreasing(self, small_grid, params):
        """天数不少于最大潜伏期时，查询比较次数随潜伏期单调不减"""
        from app.services.experiment_runner import run_experiment

        spec = _uniform_spec(small_grid, params, users=40, days=5, max_locs=4)
        frame = run_experiment("incubation", [1, 3, 5], spec, queries=10, verify_oracle=False)
        costs = frame["mean_query_comparisons"].tolist()
        assert costs == sorted(costs)
        assert costs[-1] > 0

    def test_distance_insensitive_on_large_cells(self, params):
        """160m 叶格下感染距离 2m 与 4m 的查询比较次数相差不到10%（全体用户平均）"""
        from app.services.experiment_runner import simulate
        from app.services.spatial_grid import GridConfig
        from app.services.workload import generate_workload, real_id_of

        grid = GridConfig(origin_x=0, origin_y=0, side=48000, widths=(16000, 48000))
        costs = []
        for distance in (200, 400):
            level = params.model_copy(update={"distance_cm": distance})
            spec = _uniform_spec(grid, level, users=300, max_locs=6)
            simulation = simulate(generate_workload(spec))
            for patient in (real_id_of(0), real_id_of(1)):
                assert simulation.first_generation_comparisons(patient, level) == _query_cost(simulation, patient, level)
            total = sum(_query_cost(simulation, real_id_of(u), level) for u in range(spec.users))
            costs.append(total / spec.users)
        near, far = costs
        assert near > 0
        assert far >= near
        assert (far - near) / near < 0.10

    def test_oracle_agreement_recorded(self, small_grid, params):
        from app.services.experiment_runner import run_experiment

        spec = _uniform_spec(small_grid, params, users=20, days=2, max_locs=3)
        frame = run_experiment("trajectories", [10, 20], spec, queries=5)
        assert frame["oracle_agreement"].all()
        assert (frame["queries"] == 5).all()


@pytest.mark.slow
@pytest.mark.integration
class TestTrendsFullScale:
    """完整规模"""

    def test_trajectories(self, params):
        from scipy.stats import spearmanr

        from app.services.experiment_runner import run_experiment
        from app.services.workload import WorkloadSpec

        spec = WorkloadSpec(users=5000, days=3, seed=1, params=params)
        frame = run_experiment("trajectories", [5000, 10000, 15000, 20000, 25000], spec, queries=20)
        assert frame["oracle_agreement"].all()
        per_message = frame["insert_comparisons_per_message"]
        assert per_message.max() <= 1.25 * per_message.min()
        rho, _ = spearmanr(frame["x_value"], frame["mean_query_comparisons"])
        assert rho > 0.9

    def test_cell_size(self, params):
        from app.services.experiment_runner import run_experiment
        from app.services.workload import WorkloadSpec

        spec = WorkloadSpec(users=4000, days=3, seed=2, params=params)
        frame = run_experiment("cell-size", [1200, 12000], spec, queries=100)
        fine, coarse = frame.to_dict("records")
        assert fine["inserted_messages"] > coarse["inserted_messages"]
        assert coarse["insert_comparisons_per_message"] < fine["insert_comparisons_per_message"]
        assert coarse["mean_query_comparisons"] > fine["mean_query_comparisons"]

    def test_incubation(self, params):
        from app.services.experiment_runner import run_experiment
        from app.services.workload import WorkloadSpec

        spec = WorkloadSpec(users=2000, days=14, seed=3, params=params)
        frame = run_experiment("incubation", [3, 7, 14], spec, queries=100)
        costs = frame["mean_query_comparisons"].tolist()
        assert costs == sorted(costs)

    def test_distance(self, params):
        """120m 叶格下 2m 与 4m 的平均查询比较次数相差不到10%"""
        from app.services.experiment_runner import run_experiment
        from app.services.spatial_grid import GridConfig
        from app.services.workload import WorkloadSpec

        grid = GridConfig(origin_x=0, origin_y=0, side=96000, widths=(12000, 48000))
        spec = WorkloadSpec(users=2000, days=1, seed=4, grid=grid, params=params, hotspot_share=0.0)
        frame = run_experiment("distance", [200, 400], spec, queries=60, verify_oracle=False)
        near, far = frame["mean_query_comparisons"].tolist()
        assert near > 0
        assert abs(far - near) / near < 0.10
