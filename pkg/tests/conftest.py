# ShareTrace-Lite pytest全局配置和Fixtures
# 固定种子的网格、参数、计算引擎与小规模负载

import os

import pytest


# ==================
# 慢速测试开关
# ==================

def pytest_collection_modifyitems(config, items):
    """未设置 RUN_SLOW=1 时跳过 slow 标记的完整规模实验"""
    if os.getenv("RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="完整规模实验，设置 RUN_SLOW=1 运行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ==================
# 配置隔离
# ==================

@pytest.fixture
def clean_config(monkeypatch):
    """清空相关环境变量并重置配置单例"""
    import app.config as config_module
    from app.config import Config

    for key in [
        "PARTY_COUNT", "GLOBAL_SEED", "RECORD_TRANSCRIPT",
        "INFECTIOUS_DISTANCE_CM", "INFECTIOUS_WINDOW_S", "INCUBATION_DAYS",
        "TIME_WINDOW_MODE", "GENERATION_WINDOW", "MAX_GENERATIONS",
        "STAY_RADIUS_CM", "PSEUDO_POOL_SIZE", "GRID_CONFIG_FILE",
        "TRANSPORT_MAX_RETRIES", "TRANSPORT_FAILURE_RATE", "LOG_LEVEL", "LOG_FILE",
    ]:
        monkeypatch.delenv(key, raising=False)

    Config._instance = None
    config_module._global_config = None
    yield
    Config._instance = None
    config_module._global_config = None


# ==================
# 领域对象
# ==================

@pytest.fixture
def seed():
    return 20240101


@pytest.fixture
def small_grid():
    """96m 见方，12m 叶格，48m 区域"""
    from app.services.spatial_grid import GridConfig
    return GridConfig(origin_x=0, origin_y=0, side=9600, widths=(1200, 4800))


@pytest.fixture
def three_level_grid():
    from app.services.spatial_grid import GridConfig
    return GridConfig(origin_x=0, origin_y=0, side=19200, widths=(1200, 4800, 9600))


@pytest.fixture
def params():
    from app.services.orchestration import QueryParams
    return QueryParams(distance_cm=200, tau=3600, incubation_days=14)


@pytest.fixture
def rng(seed):
    from app.services.field_mpc import FieldRng
    return FieldRng(seed)


@pytest.fixture
def dealer(seed):
    from app.services.field_mpc import Dealer
    return Dealer(3, seed)


@pytest.fixture
def engine(dealer):
    from app.services.field_mpc import MpcEngine
    return MpcEngine(3, dealer)


@pytest.fixture
def parties(small_grid, seed):
    from app.services.orchestration import PartySet
    return PartySet(small_grid, n_servers=3, seed=seed)


@pytest.fixture
def small_workload_spec(small_grid, params):
    """6个用户、3天、一条三人传播链"""
    from app.services.workload import PlantedChain, WorkloadSpec
    return WorkloadSpec(
        users=6,
        days=3,
        max_locs_per_day=4,
        seed=7,
        grid=small_grid,
        params=params,
        pool_size=16,
        hotspots=3,
        planted_chains=[PlantedChain(users=[0, 1, 2], day=0)],
    )
