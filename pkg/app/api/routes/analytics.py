"""
分析API路由

成本模型、分区规划与隐私上界的只读计算接口
"""

from fractions import Fraction
from typing import Any, Dict

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from app.errors import ShareTraceError
from app.logger import get_logger
from app.services.analytics import (
    CostModelInput,
    PrivacyBoundInput,
    evaluate_cost_model,
    evaluate_privacy,
    plan_partition,
    query_cost_tree,
)

logger = get_logger(__name__)
router = APIRouter()


# ==================
# 请求/响应模型
# ==================

class PlanRequest(BaseModel):
    """分区规划请求"""
    n_users: int = Field(..., ge=1)
    query_locations: int = Field(10, ge=0)


def _jsonable(result: Dict[str, Any]) -> Dict[str, Any]:
    # 整数分数保留为整数，其余转浮点
    converted = {}
    for key, value in result.items():
        if isinstance(value, Fraction):
            value = value.numerator if value.denominator == 1 else float(value)
        converted[key] = value
    return converted


# ==================
# API端点
# ==================

@router.post("/plan")
async def plan(request: PlanRequest):
    """
    最优分区

    Returns:
        n_regions, n_grids 与对应的查询比较次数
    """
    try:
        n_r, n_g = plan_partition(request.n_users)
        cost = query_cost_tree(request.query_locations, n_r, n_g, request.n_users)
        return {
            "success": True,
            "data": _jsonable({"n_regions": n_r, "n_grids": n_g, "query_cost_tree": cost})
        }
    except ShareTraceError as e:
        logger.warning("分区规划失败", error=str(e))
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/cost")
async def cost(request: CostModelInput):
    """分区树与无分区的期望比较次数"""
    try:
        return {"success": True, "data": _jsonable(evaluate_cost_model(request))}
    except ShareTraceError as e:
        logger.warning("成本模型计算失败", error=str(e))
        raise HTTPException(status_code=400, detail=str(e))


@router.post("/privacy")
async def privacy(request: PrivacyBoundInput):
    """身份、格子与轨迹还原三个概率上界"""
    try:
        return {"success": True, "data": _jsonable(evaluate_privacy(request))}
    except ShareTraceError as e:
        logger.warning("隐私上界计算失败", error=str(e))
        raise HTTPException(status_code=400, detail=str(e))
