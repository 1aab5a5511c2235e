"""
空间网格几何测试

测试范围:
1. 网格配置校验
2. 坐标平移
3. 行优先网格ID与格子路径
4. 边界副本与边界完整性
5. 配置文件加载与规划器对齐
"""

import numpy as np
import pytest


@pytest.fixture
def meter_grid():
    """100m 见方，10m 叶格"""
    from app.services.spatial_grid import GridConfig
    return GridConfig(origin_x=0, origin_y=0, side=10_000, widths=(1000, 10_000))


def _leaf_set(point, grid, distance):
    from app.services.spatial_grid import border_replicas, cell_path

    paths = [cell_path(point, grid)] + border_replicas(point, grid, distance)
    return {path.leaf for path in paths}


class TestGridConfig:
    """配置校验"""

    def test_levels_and_counts(self, small_grid):
        assert small_grid.levels == 2
        assert small_grid.cells_per_side(1) == 8
        assert small_grid.cell_count(2) == 4

    def test_single_level_rejected(self):
        from app.errors import GridError
        from app.services.spatial_grid import GridConfig

        with pytest.raises(GridError):
            GridConfig(0, 0, 9600, (1200,))

    def test_unaligned_widths(self):
        """上层格宽必须是下层的整数倍"""
        from app.errors import GridError
        from app.services.spatial_grid import GridConfig

        with pytest.raises(GridError):
            GridConfig(0, 0, 9600, (1200, 2000))

    def test_side_not_divisible(self):
        from app.errors import GridError
        from app.services.spatial_grid import GridConfig

        with pytest.raises(GridError):
            GridConfig(0, 0, 10_000, (1200, 4800))

    def test_level_out_of_range(self, small_grid):
        from app.errors import GridError

        with pytest.raises(GridError):
            small_grid.width(3)

    def test_check_distance(self, small_grid):
        """最底层格宽至少为 2D"""
        from app.errors import GridError

        small_grid.check_distance(600)
        with pytest.raises(GridError):
            small_grid.check_distance(601)

    def test_flattened(self, three_level_grid):
        """无分区基线：叶格不变，顶层覆盖全区域"""
        flat = three_level_grid.flattened()
        assert flat.widths == (1200, 19_200)
        assert flat.cell_count(2) == 1


class TestCoordinates:
    """坐标平移"""

    def test_offset_and_restore(self):
        from app.services.spatial_grid import GridConfig, offset_coords, restore_coords

        grid = GridConfig(1000, 2000, 9600, (1200, 4800))
        point = offset_coords(1000, 2000, grid)
        assert (point.x, point.y) == (0, 0)
        far = offset_coords(10_600, 11_600, grid)
        assert (far.x, far.y) == (9600, 9600)
        assert restore_coords(far, grid) == (10_600, 11_600)

    def test_outside_service_area(self):
        from app.errors import OutsideServiceAreaError
        from app.services.spatial_grid import GridConfig, offset_coords

        grid = GridConfig(1000, 2000, 9600, (1200, 4800))
        with pytest.raises(OutsideServiceAreaError):
            offset_coords(999, 2000, grid)
        with pytest.raises(OutsideServiceAreaError):
            offset_coords(1000, 11_601, grid)


class TestGid:
    """网格ID"""

    @pytest.mark.parametrize("x,y,expected", [
        (0, 0, 0),
        (9500, 9500, 99),
        (2300, 4100, 42),
    ])
    def test_row_major_examples(self, meter_grid, x, y, expected):
        from app.services.spatial_grid import PlanarPoint, gid

        assert gid(PlanarPoint(x, y), 1, meter_grid) == expected

    def test_far_edge_clamped(self, meter_grid):
        """x = W 归入最后一列"""
        from app.services.spatial_grid import PlanarPoint, gid

        assert gid(PlanarPoint(10_000, 0), 1, meter_grid) == 9
        assert gid(PlanarPoint(10_000, 10_000), 1, meter_grid) == 99

    def test_constant_within_row(self, meter_grid):
        """同一行内不同 y 的格子编号只随 x 变化"""
        from app.services.spatial_grid import PlanarPoint, gid

        assert gid(PlanarPoint(500, 1000), 1, meter_grid) == gid(PlanarPoint(500, 1999), 1, meter_grid)

    def test_cell_path_top_down(self, three_level_grid):
        from app.services.spatial_grid import PlanarPoint, cell_path

        path = cell_path(PlanarPoint(13_000, 5000), three_level_grid)
        assert path.gids == (10 + 4 * 16, 2 + 1 * 4, 1)
        assert path.top_down() == (1, 6, 74)
        assert path.leaf == 74
        assert path.level(2) == 6

    def test_cell_rect(self, small_grid):
        from app.services.spatial_grid import cell_rect

        assert cell_rect(1, 9, small_grid) == (1200, 1200, 2400, 2400)


class TestBorderReplicas:
    """边界副本"""

    def test_interior_point(self, small_grid):
        from app.services.spatial_grid import PlanarPoint, border_replicas

        assert border_replicas(PlanarPoint(600, 600), small_grid, 200) == []

    def test_edge_point(self, small_grid):
        """靠近右边界：一个副本"""
        from app.services.spatial_grid import PlanarPoint, border_replicas

        replicas = border_replicas(PlanarPoint(1150, 600), small_grid, 200)
        assert [r.leaf for r in replicas] == [1]

    def test_corner_point(self, small_grid):
        """靠近角：三个副本"""
        from app.services.spatial_grid import PlanarPoint, border_replicas

        replicas = border_replicas(PlanarPoint(1150, 1150), small_grid, 200)
        assert sorted(r.leaf for r in replicas) == [1, 8, 9]

    def test_half_distance_boundary(self, small_grid):
        """恰好 D/2 时包含，超出1厘米时不包含"""
        from app.services.spatial_grid import PlanarPoint, border_replicas

        assert len(border_replicas(PlanarPoint(1100, 600), small_grid, 200)) == 1
        assert border_replicas(PlanarPoint(1099, 600), small_grid, 200) == []

    def test_service_area_edge(self, small_grid):
        """区域外没有邻居"""
        from app.services.spatial_grid import PlanarPoint, border_replicas

        assert border_replicas(PlanarPoint(10, 600), small_grid, 200) == []

    def test_replica_paths_are_full(self, small_grid):
        """副本携带完整的自顶向下路径"""
        from app.services.spatial_grid import PlanarPoint, border_replicas

        replica = border_replicas(PlanarPoint(4750, 600), small_grid, 200)[0]
        assert replica.gids == (4, 1)

    def test_border_completeness(self, small_grid):
        """距离 ≤ D 的跨边界点对至少共享一个叶组"""
        from app.services.spatial_grid import PlanarPoint

        distance = 200
        gen = np.random.default_rng(17)
        checked = 0
        for _ in range(5000):
            px, py = gen.integers(0, small_grid.side + 1, size=2)
            angle = gen.uniform(0, 2 * np.pi)
            radius = gen.uniform(0, distance)
            qx = int(round(px + radius * np.cos(angle)))
            qy = int(round(py + radius * np.sin(angle)))
            if not (0 <= qx <= small_grid.side and 0 <= qy <= small_grid.side):
                continue
            if (qx - px) ** 2 + (qy - py) ** 2 > distance ** 2:
                continue
            p, q = PlanarPoint(int(px), int(py)), PlanarPoint(qx, qy)
            assert _leaf_set(p, small_grid, distance) & _leaf_set(q, small_grid, distance)
            checked += 1
        assert checked > 4000


def _straddling_pairs(grid, distance, count, seed):
    """在叶格边线或角点附近取点对：距离 ≤ D 且落在不同的最底层格子"""
    from app.services.spatial_grid import PlanarPoint, cell_path

    w1 = grid.widths[0]
    per_side = grid.side // w1
    gen = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < count:
        kind = gen.integers(0, 3)
        k, m = gen.integers(1, per_side, size=2)
        bx = k * w1 if kind != 1 else gen.uniform(0, grid.side)
        by = m * w1 if kind != 0 else gen.uniform(0, grid.side)
        angle, radius = gen.uniform(0, 2 * np.pi), distance * np.sqrt(gen.uniform())
        px, py = int(round(bx + radius * np.cos(angle))), int(round(by + radius * np.sin(angle)))
        angle, radius = gen.uniform(0, 2 * np.pi), distance * np.sqrt(gen.uniform())
        qx, qy = int(round(px + radius * np.cos(angle))), int(round(py + radius * np.sin(angle)))
        if not all(0 <= v <= grid.side for v in (px, py, qx, qy)):
            continue
        if (qx - px) ** 2 + (qy - py) ** 2 > distance ** 2:
            continue
        p, q = PlanarPoint(px, py), PlanarPoint(qx, qy)
        if cell_path(p, grid).leaf == cell_path(q, grid).leaf:
            continue
        pairs.append((p, q))
    return pairs


class TestBorderCompleteness:
    """跨叶格边界的点对"""

    def test_straddling_pairs(self, small_grid):
        distance = 200
        pairs = _straddling_pairs(small_grid, distance, 2000, seed=23)
        misses = [(p, q) for p, q in pairs if not _leaf_set(p, small_grid, distance) & _leaf_set(q, small_grid, distance)]
        assert misses == []

    def test_pair_at_exact_distance_across_corner(self, small_grid):
        """隔角对角线上恰好相距 D"""
        from app.services.spatial_grid import PlanarPoint

        p, q = PlanarPoint(1200 - 70, 1200 - 70), PlanarPoint(1200 + 70, 1200 + 70)
        assert (q.x - p.x) ** 2 + (q.y - p.y) ** 2 <= 200 ** 2
        assert _leaf_set(p, small_grid, 200) & _leaf_set(q, small_grid, 200)

    @pytest.mark.slow
    @pytest.mark.parametrize("distance", [200, 400])
    def test_hundred_thousand_pairs(self, small_grid, distance):
        pairs = _straddling_pairs(small_grid, distance, 100_000, seed=distance)
        misses = sum(
            1 for p, q in pairs
            if not _leaf_set(p, small_grid, distance) & _leaf_set(q, small_grid, distance)
        )
        assert misses == 0


class TestGridConfigFile:
    """配置文件加载"""

    def test_load(self, tmp_path):
        from app.services.spatial_grid import load_grid_config

        path = tmp_path / "grid.env"
        path.write_text(
            "origin_x_cm=100\norigin_y_cm=200\nside_cm=9600\nlevels=2\ncell_widths_cm=1200,4800\n",
            encoding="utf-8",
        )
        grid = load_grid_config(str(path))
        assert grid.origin_x == 100
        assert grid.widths == (1200, 4800)

    def test_missing_file(self, tmp_path):
        from app.errors import ConfigError
        from app.services.spatial_grid import load_grid_config

        with pytest.raises(ConfigError):
            load_grid_config(str(tmp_path / "missing.env"))

    def test_missing_key(self, tmp_path):
        from app.errors import ConfigError
        from app.services.spatial_grid import load_grid_config

        path = tmp_path / "grid.env"
        path.write_text("origin_x_cm=0\norigin_y_cm=0\nside_cm=9600\nlevels=2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_grid_config(str(path))

    def test_levels_mismatch(self, tmp_path):
        from app.errors import ConfigError
        from app.services.spatial_grid import load_grid_config

        path = tmp_path / "grid.env"
        path.write_text(
            "origin_x_cm=0\norigin_y_cm=0\nside_cm=9600\nlevels=3\ncell_widths_cm=1200,4800\n",
            encoding="utf-8",
        )
        with pytest.raises(ConfigError):
            load_grid_config(str(path))

    def test_resolve_default(self):
        from app.services.spatial_grid import DEFAULT_GRID, resolve_grid_config

        assert resolve_grid_config("") is DEFAULT_GRID
        assert resolve_grid_config(None) is DEFAULT_GRID

    def test_partition_to_grid(self):
        """规划器输出 → 对齐网格"""
        from app.services.spatial_grid import grid_config_for_partition

        grid = grid_config_for_partition(4, 9, 1200)
        assert grid.widths == (1200, 3600)
        assert grid.side == 7200
        assert grid.cell_count(2) == 4
        assert grid.cell_count(1) == 36
