"""
ShareTrace-Lite FastAPI主应用

对外只提供分析类接口；协议本身在进程内由编排模块驱动
"""

from contextlib import asynccontextmanager
from datetime import datetime

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import get_config
from app.logger import get_logger

logger = get_logger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """应用生命周期管理"""
    logger.info("ShareTrace-Lite API启动")
    config = get_config()
    logger.info("配置加载完成", env=config.ENVIRONMENT, parties=config.PARTY_COUNT)

    yield

    logger.info("ShareTrace-Lite API关闭")


app = FastAPI(
    title="ShareTrace-Lite",
    description="基于秘密分享的接触追踪：成本模型与隐私分析API",
    version="0.1.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/")
async def root():
    """根路径"""
    return {
        "name": "ShareTrace-Lite API",
        "version": "0.1.0",
        "status": "running"
    }


@app.get("/health")
async def health_check():
    """健康检查"""
    return {
        "status": "healthy",
        "timestamp": datetime.now().isoformat()
    }


from app.api.routes import analytics  # noqa: E402

app.include_router(analytics.router, prefix="/api/v1/analytics", tags=["分析"])


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
