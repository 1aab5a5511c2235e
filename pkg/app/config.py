"""
ShareTrace-Lite 配置管理

功能:
1. 从环境变量 / .env 文件加载配置
2. 配置验证和类型转换
3. 默认值处理
4. 单例模式
5. 配置重载
6. 安全配置导出（隐藏种子等敏感信息）
"""

import os
from typing import Dict, Optional, Any, List
from pathlib import Path
from dotenv import load_dotenv

from app.errors import ConfigError


TIME_WINDOW_MODES = ["symmetric", "one_sided"]
GENERATION_WINDOWS = ["first_patient", "per_contact"]


class Config:
    """配置管理类"""

    _instance = None

    def __new__(cls, *args, **kwargs):
        """单例模式"""
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self, env_file: Optional[str] = None, force_reload: bool = False):
        """
        初始化配置

        Args:
            env_file: .env文件路径（可选）
            force_reload: 强制重新加载（用于测试）
        """
        if self._initialized and not force_reload:
            return

        if env_file:
            load_dotenv(env_file, override=True)
        else:
            root_dir = Path(__file__).parent.parent
            env_path = root_dir / ".env"
            if env_path.exists():
                load_dotenv(env_path, override=True)

        self._load_config()
        self._validate_config()

        self._initialized = True

    def _load_config(self):
        """从环境变量加载配置"""
        # ==================
        # 多方计算
        # ==================
        self.PARTY_COUNT = self._parse_int("PARTY_COUNT", default=3, minimum=2)
        self.GLOBAL_SEED = self._parse_int("GLOBAL_SEED", default=20240101, minimum=0)
        self.RECORD_TRANSCRIPT = os.getenv("RECORD_TRANSCRIPT", "false").lower() == "true"

        # ==================
        # 追踪参数
        # ==================
        self.INFECTIOUS_DISTANCE_CM = self._parse_int("INFECTIOUS_DISTANCE_CM", default=200, minimum=1)
        self.INFECTIOUS_WINDOW_S = self._parse_int("INFECTIOUS_WINDOW_S", default=3600, minimum=1)
        self.INCUBATION_DAYS = self._parse_int("INCUBATION_DAYS", default=14, minimum=1)
        self.TIME_WINDOW_MODE = os.getenv("TIME_WINDOW_MODE", "symmetric")
        self.GENERATION_WINDOW = os.getenv("GENERATION_WINDOW", "first_patient")

        max_gen = os.getenv("MAX_GENERATIONS", "").strip()
        if max_gen:
            self.MAX_GENERATIONS: Optional[int] = self._to_int("MAX_GENERATIONS", max_gen, minimum=1)
        else:
            self.MAX_GENERATIONS = None

        # ==================
        # 客户端
        # ==================
        self.STAY_RADIUS_CM = self._parse_int("STAY_RADIUS_CM", default=500, minimum=1)
        self.PSEUDO_POOL_SIZE = self._parse_int("PSEUDO_POOL_SIZE", default=64, minimum=1)
        self.GRID_CONFIG_FILE = os.getenv("GRID_CONFIG_FILE", "")

        # ==================
        # 传输
        # ==================
        self.TRANSPORT_MAX_RETRIES = self._parse_int("TRANSPORT_MAX_RETRIES", default=3, minimum=0)
        self.TRANSPORT_FAILURE_RATE = self._parse_rate("TRANSPORT_FAILURE_RATE", default=0.0)

        # ==================
        # 日志与环境
        # ==================
        self.LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
        self.LOG_FILE = os.getenv("LOG_FILE", "")
        self.ENVIRONMENT = os.getenv("ENVIRONMENT", "development")
        self.DEBUG = os.getenv("DEBUG", "true").lower() == "true"

    def _to_int(self, key: str, value_str: str, minimum: int) -> int:
        try:
            value = int(value_str)
        except ValueError:
            raise ConfigError(f"{key}必须是整数，当前值: {value_str}")
        if value < minimum:
            raise ConfigError(f"{key}不能小于{minimum}，当前值: {value}")
        return value

    def _parse_int(self, key: str, default: int, minimum: int = 0) -> int:
        """
        解析整数配置

        Args:
            key: 环境变量名
            default: 默认值
            minimum: 最小允许值

        Returns:
            整数值

        Raises:
            ConfigError: 非整数或低于下限
        """
        value_str = os.getenv(key)
        if value_str is None or value_str.strip() == "":
            return default
        return self._to_int(key, value_str.strip(), minimum)

    def _parse_rate(self, key: str, default: float) -> float:
        """
        解析概率配置（[0, 1)之间）

        Raises:
            ConfigError: 概率超出范围
        """
        value_str = os.getenv(key)
        if value_str is None:
            return default

        try:
            value = float(value_str)
        except ValueError:
            raise ConfigError(f"{key}必须是数字，当前值: {value_str}")

        if not (0 <= value < 1):
            raise ConfigError(f"{key}概率必须在[0,1)之间，当前值: {value}")

        return value

    def _validate_config(self):
        """验证配置"""
        if self.TIME_WINDOW_MODE not in TIME_WINDOW_MODES:
            raise ConfigError(
                f"时间窗口模式必须是symmetric或one_sided，当前值: {self.TIME_WINDOW_MODE}"
            )

        if self.GENERATION_WINDOW not in GENERATION_WINDOWS:
            raise ConfigError(
                f"代际窗口必须是first_patient或per_contact，当前值: {self.GENERATION_WINDOW}"
            )

        if self.GRID_CONFIG_FILE and not Path(self.GRID_CONFIG_FILE).exists():
            raise ConfigError(f"网格配置文件不存在: {self.GRID_CONFIG_FILE}")

    def is_symmetric_window(self) -> bool:
        """是否对称时间窗口"""
        return self.TIME_WINDOW_MODE == "symmetric"

    def to_dict(self, safe: bool = True) -> Dict[str, Any]:
        """
        导出配置为字典

        Args:
            safe: 是否隐藏敏感信息

        Returns:
            配置字典
        """
        config_dict = {}

        for key in dir(self):
            if key.isupper() and not key.startswith("_"):
                value = getattr(self, key)
                if safe:
                    value = self._mask_sensitive(key, value)
                config_dict[key] = value

        return config_dict

    def _mask_sensitive(self, key: str, value: Any) -> Any:
        """隐藏敏感信息（种子可重放全部随机性）"""
        sensitive_keys: List[str] = ["SEED", "SECRET", "TOKEN"]

        if any(keyword in key for keyword in sensitive_keys):
            text = str(value)
            if len(text) > 3:
                return text[:3] + "***"
            return "***"

        return value


# ==================
# 全局配置实例
# ==================

_global_config: Optional[Config] = None


def get_config() -> Config:
    """
    获取全局配置实例

    Returns:
        配置实例
    """
    global _global_config
    if _global_config is None:
        _global_config = Config()
    return _global_config


def reload_config(env_file: Optional[str] = None) -> Config:
    """
    重载配置

    Args:
        env_file: .env文件路径（可选）

    Returns:
        新的配置实例
    """
    global _global_config

    Config._instance = None
    _global_config = None

    _global_config = Config(env_file=env_file)
    return _global_config
