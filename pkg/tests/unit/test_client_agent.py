"""
客户端代理测试

测试范围:
1. 停留点提取
2. 假名池
3. 位置报告生成（分享、副本、打乱）
4. 模拟传输（句柄、失败重试）
5. CSV / JSON-lines 文件格式
"""

import pytest


def _fixes(points):
    from app.services.client_agent import RawFix
    from app.services.spatial_grid import PlanarPoint

    return [RawFix(t, PlanarPoint(x, y)) for t, x, y in points]


def _pool(n, day=0):
    from app.services.client_agent import PseudoIdPool

    return PseudoIdPool(ids=[f"{k:032x}" for k in range(1, n + 1)], issued_by="subscriber-0", day=day)


class TestStayPoints:
    """停留点提取"""

    def test_single_stay(self):
        """半径内停留满 τ"""
        from app.services.client_agent import detect_stay_points

        fixes = _fixes([(0, 1000, 1000), (1800, 1010, 990), (3600, 1000, 1010)])
        stays = detect_stay_points(fixes, tau=3600, radius=500)
        assert len(stays) == 1
        assert stays[0].t == 0
        assert (stays[0].point.x, stays[0].point.y) == (1003, 1000)

    def test_short_dwell_dropped(self):
        from app.services.client_agent import detect_stay_points

        fixes = _fixes([(0, 1000, 1000), (1000, 1000, 1000)])
        assert detect_stay_points(fixes, tau=3600, radius=500) == []

    def test_two_stays_with_travel(self):
        """途中定位不形成停留点"""
        from app.services.client_agent import detect_stay_points

        fixes = _fixes([
            (0, 1000, 1000), (3600, 1000, 1000),
            (4000, 3000, 1000),
            (4500, 6000, 1000), (8200, 6000, 1000),
        ])
        stays = detect_stay_points(fixes, tau=3600, radius=500)
        assert [(s.t, s.point.x) for s in stays] == [(0, 1000), (4500, 6000)]

    def test_empty(self):
        from app.services.client_agent import detect_stay_points

        assert detect_stay_points([], tau=3600, radius=500) == []

    def test_unsorted_rejected(self):
        from app.errors import InvalidSequenceError
        from app.services.client_agent import detect_stay_points

        with pytest.raises(InvalidSequenceError):
            detect_stay_points(_fixes([(100, 0, 0), (50, 0, 0)]), tau=10, radius=5)


class TestPseudoIdPool:
    """假名池"""

    def test_draw_in_order(self):
        pool = _pool(2)
        assert pool.draw() == f"{1:032x}"
        assert pool.remaining == 1

    def test_exhausted(self):
        from app.errors import OutOfPseudoIdsError

        pool = _pool(1)
        pool.draw()
        with pytest.raises(OutOfPseudoIdsError):
            pool.draw()


class TestDayReports:
    """位置报告"""

    def test_interior_stay(self, small_grid, rng):
        """内部停留点：一个消息集合，每台服务器一条"""
        from app.services.client_agent import StayPoint, build_day_reports
        from app.services.field_mpc import reconstruct, SharedValue
        from app.services.spatial_grid import PlanarPoint

        stay = StayPoint(t=7200, point=PlanarPoint(600, 600))
        reports = build_day_reports([stay], _pool(4), small_grid, 200, 3, rng, day=2)

        assert reports.message_sets == 1
        assert [len(batch) for batch in reports.batches] == [1, 1, 1]
        messages = [batch[0] for batch in reports.batches]
        assert {m.pseudo_id for m in messages} == {f"{1:032x}"}
        assert [m.server_index for m in messages] == [1, 2, 3]
        assert all(m.day == 2 for m in messages)
        assert reconstruct(SharedValue([m.t_share for m in messages])) == 7200
        assert reconstruct(SharedValue([m.x_share for m in messages])) == 600
        assert reconstruct(SharedValue([m.gid_shares[0] for m in messages])) == 0
        assert reconstruct(SharedValue([m.gid_shares[1] for m in messages])) == 0

    def test_corner_stay_uses_four_pseudo_ids(self, small_grid, rng):
        """角上停留点：主集合 + 3个副本，各用新假名"""
        from app.services.client_agent import StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        pool = _pool(8)
        stay = StayPoint(t=0, point=PlanarPoint(1150, 1150))
        reports = build_day_reports([stay], pool, small_grid, 200, 3, rng)

        assert reports.message_sets == 4
        assert sum(m.replica for m in reports.manifest) == 3
        assert len({m.pseudo_id for m in reports.manifest}) == 4
        assert pool.remaining == 4

    def test_replica_shares_are_fresh(self, small_grid, rng):
        """副本的坐标分享与主集合不同"""
        from app.services.client_agent import StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        stay = StayPoint(t=0, point=PlanarPoint(1150, 600))
        reports = build_day_reports([stay], _pool(4), small_grid, 200, 3, rng)
        x_shares = {m.x_share for m in reports.batches[0]}
        assert len(x_shares) == 2

    def test_pool_checked_before_consuming(self, small_grid, rng):
        """假名不足时不消耗任何假名"""
        from app.errors import OutOfPseudoIdsError
        from app.services.client_agent import StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        pool = _pool(3)
        stay = StayPoint(t=0, point=PlanarPoint(1150, 1150))
        with pytest.raises(OutOfPseudoIdsError):
            build_day_reports([stay], pool, small_grid, 200, 3, rng)
        assert pool.remaining == 3

    def test_report_json_line(self, small_grid, rng):
        from app.services.client_agent import LocationReport, StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        reports = build_day_reports([StayPoint(0, PlanarPoint(600, 600))], _pool(1), small_grid, 200, 3, rng)
        message = reports.batches[1][0]
        assert LocationReport.from_json(message.to_json()) == message

    def test_agent_is_deterministic(self, small_grid):
        """同一（全局种子, 用户）得到相同报告"""
        from app.services.client_agent import ClientAgent, StayPoint
        from app.services.spatial_grid import PlanarPoint

        stays = [StayPoint(0, PlanarPoint(600, 600)), StayPoint(5000, PlanarPoint(3000, 3000))]
        first = ClientAgent(4, small_grid, 3, 200, 3600, 500, global_seed=9).report_day(0, stays, _pool(8))
        second = ClientAgent(4, small_grid, 3, 200, 3600, 500, global_seed=9).report_day(0, stays, _pool(8))
        other = ClientAgent(5, small_grid, 3, 200, 3600, 500, global_seed=9).report_day(0, stays, _pool(8))
        assert first.batches == second.batches
        assert first.batches != other.batches


class TestTransport:
    """模拟传输"""

    def test_submit_and_drain(self, small_grid, rng):
        from app.services.client_agent import SimulatedTransport, StayPoint, build_day_reports, flush
        from app.services.spatial_grid import PlanarPoint

        stays = [StayPoint(0, PlanarPoint(600, 600)), StayPoint(4000, PlanarPoint(3000, 3000))]
        reports = build_day_reports(stays, _pool(4), small_grid, 200, 3, rng)
        transport = SimulatedTransport(3, seed=1)
        receipts = flush(reports.batches, transport)

        assert len(receipts) == 6
        assert len({r.handle for r in receipts}) == 6
        assert len(transport.peek(2)) == 2
        assert sorted(r.pseudo_id for r in transport.drain(2)) == sorted(m.pseudo_id for m in reports.batches[1])
        assert transport.drain(2) == []

    def test_retry_on_failure(self, small_grid, rng):
        """注入失败后重试成功"""
        from app.services.client_agent import SimulatedTransport, StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        stays = [StayPoint(t, PlanarPoint(600 + 1200 * k, 600)) for k, t in enumerate(range(0, 20_000, 4000))]
        reports = build_day_reports(stays, _pool(5), small_grid, 200, 3, rng)
        transport = SimulatedTransport(3, seed=2, failure_rate=0.5, max_retries=50)
        receipts = transport.submit(reports.batches)
        assert len(receipts) == 15
        assert any(r.attempts > 1 for r in receipts)

    def test_retry_exhausted(self, small_grid, rng):
        from app.errors import RetryExhaustedError
        from app.services.client_agent import SimulatedTransport, StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        reports = build_day_reports([StayPoint(0, PlanarPoint(600, 600))], _pool(1), small_grid, 200, 3, rng)
        transport = SimulatedTransport(3, seed=2, failure_rate=0.999999, max_retries=0)
        with pytest.raises(RetryExhaustedError):
            transport.submit(reports.batches)

    def test_failed_batch_leaves_inboxes_unchanged(self, small_grid, rng, mocker):
        """前两台服务器已送达、第三台重试耗尽：整批不写入"""
        from app.errors import RetryExhaustedError
        from app.services.client_agent import SimulatedTransport, StayPoint, build_day_reports
        from app.services.spatial_grid import PlanarPoint

        transport = SimulatedTransport(3, seed=2)
        first = build_day_reports([StayPoint(0, PlanarPoint(600, 600))], _pool(1), small_grid, 200, 3, rng)
        transport.submit(first.batches)
        before = [transport.peek(k) for k in (1, 2, 3)]

        second = build_day_reports([StayPoint(100, PlanarPoint(3000, 3000))], _pool(1), small_grid, 200, 3, rng)
        transport.failure_rate, transport.max_retries = 0.5, 0
        transport._rng = mocker.Mock(wraps=transport._rng)
        transport._rng.random.side_effect = [0.9, 0.9, 0.0]
        with pytest.raises(RetryExhaustedError):
            transport.submit(second.batches)
        assert [transport.peek(k) for k in (1, 2, 3)] == before


class TestFiles:
    """文件格式"""

    def test_load_fixes_csv(self, tmp_path, small_grid):
        import pandas as pd

        from app.services.client_agent import FIX_COLUMNS, load_fixes_csv

        path = tmp_path / "fixes.csv"
        pd.DataFrame(
            [("alice", 0, 0, 100, 100), ("alice", 0, 300, 110, 100), ("bob", 1, 60, 5000, 5000)],
            columns=FIX_COLUMNS,
        ).to_csv(path, index=False)

        fixes = load_fixes_csv(str(path), small_grid)
        assert set(fixes) == {("alice", 0), ("bob", 1)}
        assert [f.t for f in fixes[("alice", 0)]] == [0, 300]

    def test_load_fixes_csv_sorts_by_time(self, tmp_path, small_grid):
        import pandas as pd

        from app.services.client_agent import FIX_COLUMNS, load_fixes_csv

        path = tmp_path / "fixes.csv"
        pd.DataFrame(
            [("alice", 0, 600, 120, 100), ("alice", 0, 0, 100, 100), ("alice", 0, 300, 110, 100)],
            columns=FIX_COLUMNS,
        ).to_csv(path, index=False)

        fixes = load_fixes_csv(str(path), small_grid)
        assert [(f.t, f.point.x) for f in fixes[("alice", 0)]] == [(0, 100), (300, 110), (600, 120)]

    def test_fixes_csv_missing_column(self, tmp_path, small_grid):
        import pandas as pd

        from app.errors import InvalidSequenceError
        from app.services.client_agent import load_fixes_csv

        path = tmp_path / "fixes.csv"
        pd.DataFrame([("alice", 0, 0)], columns=["user_id", "day", "t_seconds"]).to_csv(path, index=False)
        with pytest.raises(InvalidSequenceError):
            load_fixes_csv(str(path), small_grid)

    def test_reports_jsonl(self, tmp_path, small_grid, rng):
        from app.services.client_agent import StayPoint, build_day_reports, read_reports_jsonl, write_reports_jsonl
        from app.services.spatial_grid import PlanarPoint

        reports = build_day_reports([StayPoint(0, PlanarPoint(1150, 600))], _pool(2), small_grid, 200, 3, rng)
        path = tmp_path / "server-1.jsonl"
        assert write_reports_jsonl(reports.batches[0], str(path)) == 2
        assert read_reports_jsonl(str(path)) == reports.batches[0]
