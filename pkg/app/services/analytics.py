"""
ShareTrace-Lite 分析计算器

功能:
1. 查询成本模型（无分区 / 分区树）
2. 最优分区规划（区域数 = 每区域格子数 ≈ N_u^(1/3)）
3. 分区加速比
4. 隐私概率上界（身份猜测、最小格子猜测、轨迹映射）

所有计算器为纯函数，结果以精确有理数（Fraction）返回。
"""

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Tuple, Union

from pydantic import BaseModel, Field, model_validator

from app.errors import InvalidInputError

Number = Union[int, Fraction]

# 精确有理数的乘积长度上限，超过后只给出对数形式
EXACT_PRODUCT_LIMIT = 10_000


# ==================
# 输入模型
# ==================

class CostModelInput(BaseModel):
    """查询成本模型输入"""
    n_users: int = Field(..., ge=1, description="用户数 N_u")
    locations_per_user: int = Field(1, ge=0, description="每用户平均位置数 κ")
    trajectory_length_cm: int = Field(1, ge=0, description="平均轨迹长度 l_u")
    query_locations: int = Field(10, ge=0, description="查询轨迹位置数 λ")
    n_regions: Optional[int] = Field(None, ge=1, description="区域数 N_r（空则由规划器给出）")
    n_grids: Optional[int] = Field(None, ge=1, description="每区域格子数 N_g")
    side_cm: int = Field(1, gt=0, description="服务区域边长 W")
    leaf_width_cm: int = Field(1, gt=0, description="最底层格宽 w_1")


class PrivacyBoundInput(BaseModel):
    """隐私上界输入"""
    pseudo_domain_size: int = Field(1, ge=1, description="假名域大小 |D_p|")
    real_domain_size: int = Field(1, ge=1, description="真实身份域大小 |D_r|")
    leaf_cell_count: int = Field(1, ge=1, description="最底层格子总数")
    intercepted_cells: int = Field(1, ge=1, description="轨迹经过的格子数 N_v")
    reported_locations: int = Field(0, ge=0, description="上报位置数 q")
    ordered: bool = True

    @model_validator(mode="after")
    def _check_mapping(self):
        if self.reported_locations > 4 * self.intercepted_cells ** 2:
            raise ValueError("上报位置数不能超过 4·N_v²")
        return self


@dataclass(frozen=True)
class PrivacyProbability:
    """概率的精确形式与对数形式"""
    exact: Optional[Fraction]
    log10: float

    @property
    def value(self) -> float:
        if self.exact is not None:
            return float(self.exact)
        return 10.0 ** self.log10


# ==================
# 成本模型
# ==================

def query_cost_flat(
    n_users: Number,
    locations_per_user: Number,
    trajectory_length: Number,
    leaf_width: Number,
    side: Number
) -> Fraction:
    """
    无分区期望比较次数：N_u·κ·l_u·w_1 / W²

    Raises:
        InvalidInputError: W 或 w_1 非正
    """
    if side <= 0 or leaf_width <= 0:
        raise InvalidInputError(f"区域边长与格宽必须为正: W={side}, w1={leaf_width}")
    return Fraction(n_users) * locations_per_user * trajectory_length * leaf_width / (Fraction(side) ** 2)


def query_cost_tree(
    query_locations: Number,
    n_regions: int,
    n_grids: int,
    n_users: Number,
    exact_occupancy: bool = False
) -> Fraction:
    """
    分区树查询比较次数：λ·(N_r + N_g + N_u/(N_r·N_g))

    每格占用数默认取最近整数（10^8 用户在 464×464 时为 464），
    exact_occupancy=True 时保留精确有理数。
    """
    if n_regions < 1 or n_grids < 1:
        raise InvalidInputError(f"区域数与格子数至少为1: N_r={n_regions}, N_g={n_grids}")
    occupancy = Fraction(n_users) / (n_regions * n_grids)
    if not exact_occupancy:
        occupancy = Fraction(round(occupancy))
    return Fraction(query_locations) * (n_regions + n_grids + occupancy)


def integer_cube_root(n: int) -> int:
    """⌊n^(1/3)⌋，整数精确"""
    if n < 0:
        raise InvalidInputError(f"立方根输入不能为负: {n}")
    root = int(round(n ** (1.0 / 3.0)))
    while root ** 3 > n:
        root -= 1
    while (root + 1) ** 3 <= n:
        root += 1
    return root


def plan_partition(n_users: int) -> Tuple[int, int]:
    """
    最优分区：N_r = N_g ≈ N_u^(1/3)

    在 ⌊∛N_u⌋ 与 ⌈∛N_u⌉ 中取精确成本更小者（相等取较小值）。
    """
    if n_users < 1:
        raise InvalidInputError(f"用户数至少为1，当前值: {n_users}")
    low = max(1, integer_cube_root(n_users))
    candidates = [low] if low ** 3 == n_users else [low, low + 1]
    best = min(
        candidates,
        key=lambda k: (query_cost_tree(1, k, k, n_users, exact_occupancy=True), k)
    )
    return best, best


def partition_speedup(n_users: int, query_locations: int = 10) -> Fraction:
    """蛮力 λ·N_u 与分区树成本之比"""
    n_r, n_g = plan_partition(n_users)
    return Fraction(query_locations * n_users) / query_cost_tree(query_locations, n_r, n_g, n_users)


# ==================
# 隐私上界
# ==================

def identity_guess_bound(pseudo_domain_size: int, real_domain_size: int) -> Fraction:
    """由假名猜中真实身份的概率：1/(|D_p|·|D_r|)"""
    if pseudo_domain_size < 1 or real_domain_size < 1:
        raise InvalidInputError("身份域大小必须为正")
    return Fraction(1, pseudo_domain_size * real_domain_size)


def cell_guess_bound(leaf_cell_count: int) -> Fraction:
    """猜中用户所在最小格子的概率：1/N_g"""
    if leaf_cell_count < 1:
        raise InvalidInputError("格子总数必须为正")
    return Fraction(1, leaf_cell_count)


def trajectory_recovery_probability(intercepted_cells: int, reported: int, ordered: bool = True) -> PrivacyProbability:
    """
    由广播的接触者位置还原病人轨迹的概率

    M = 4·N_v² 个候选格子，q 个上报位置：
    ordered=True  → (M−q)!/M!（有序单射，默认）
    ordered=False → q!·(M−q)!/M!

    Raises:
        InvalidInputError: q > M 或参数非法
    """
    if intercepted_cells < 1 or reported < 0:
        raise InvalidInputError(f"参数非法: N_v={intercepted_cells}, q={reported}")
    cells = 4 * intercepted_cells * intercepted_cells
    if reported > cells:
        raise InvalidInputError(f"上报位置数{reported}超过候选格子数{cells}")

    log_value = (math.lgamma(cells - reported + 1) - math.lgamma(cells + 1)) / math.log(10)
    if not ordered:
        log_value += math.lgamma(reported + 1) / math.log(10)

    exact: Optional[Fraction] = None
    if reported <= EXACT_PRODUCT_LIMIT:
        falling = math.prod(range(cells - reported + 1, cells + 1))
        exact = Fraction(1, falling)
        if not ordered:
            exact *= math.factorial(reported)
        log_value = math.log10(exact.numerator) - math.log10(exact.denominator)

    return PrivacyProbability(exact=exact, log10=log_value)


# ==================
# 汇总（CLI / API 共用）
# ==================

def evaluate_cost_model(params: CostModelInput) -> Dict[str, object]:
    """规划 + 成本 + 加速比"""
    if params.n_regions is None or params.n_grids is None:
        n_r, n_g = plan_partition(params.n_users)
    else:
        n_r, n_g = params.n_regions, params.n_grids

    tree = query_cost_tree(params.query_locations, n_r, n_g, params.n_users)
    flat = query_cost_flat(
        params.n_users,
        params.locations_per_user,
        params.trajectory_length_cm,
        params.leaf_width_cm,
        params.side_cm,
    )
    brute = params.query_locations * params.n_users
    speedup = Fraction(brute) / tree if tree else None

    return {
        "n_regions": n_r,
        "n_grids": n_g,
        "query_cost_tree": tree,
        "query_cost_flat": flat,
        "brute_force": brute,
        "speedup": speedup,
    }


def evaluate_privacy(params: PrivacyBoundInput) -> Dict[str, object]:
    """三个隐私上界"""
    mapping = trajectory_recovery_probability(params.intercepted_cells, params.reported_locations, params.ordered)
    return {
        "identity_guess": identity_guess_bound(params.pseudo_domain_size, params.real_domain_size),
        "cell_guess": cell_guess_bound(params.leaf_cell_count),
        "trajectory_recovery": mapping.value,
        "trajectory_recovery_log10": mapping.log10,
    }
