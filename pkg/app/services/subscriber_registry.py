"""
ShareTrace-Lite 订阅方注册表

功能:
1. 用户注册与每日假名池签发（全局唯一的128位假名）
2. 代表确诊用户发起追踪（提交其全部假名）
3. 广播结果的通知匹配（按真实身份去重）
4. 注册表 CSV 导入导出

本模块只处理假名、用户标签与固定通知文本，不接触任何位置数据。
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from app.errors import AlreadyRegisteredError, NotRegisteredError, RegistryError
from app.logger import get_logger
from app.services.client_agent import PseudoIdPool

logger = get_logger(__name__)

NOTIFICATION_MESSAGE = "you may have been in contact with the virus"
DEFAULT_POOL_SIZE = 64
REGISTRY_COLUMNS = ["subscriber_id", "real_id", "token_hex", "day"]


class TokenLedger:
    """跨订阅方共享的假名账本，保证全局唯一"""

    def __init__(self):
        self._owners: Dict[str, str] = {}

    def claim(self, token: str, subscriber_id: str):
        if token in self._owners:
            raise RegistryError(f"假名已被签发: {token}")
        self._owners[token] = subscriber_id

    def __contains__(self, token: str) -> bool:
        return token in self._owners

    def __len__(self) -> int:
        return len(self._owners)


@dataclass
class Registration:
    real_id: str
    pools: List[PseudoIdPool] = field(default_factory=list)

    def tokens(self) -> List[str]:
        return [token for pool in self.pools for token in pool.ids]


class SubscriberRegistry:
    """
    单个订阅方

    持有真实身份 ↔ 假名映射；签发按天进行。
    """

    def __init__(
        self,
        subscriber_id: str,
        ledger: Optional[TokenLedger] = None,
        seed: int = 0,
        pool_size: int = DEFAULT_POOL_SIZE
    ):
        self.subscriber_id = subscriber_id
        self.ledger = ledger if ledger is not None else TokenLedger()
        self.pool_size = pool_size
        # 种子混入订阅方编号，使不同订阅方的随机流互不相同
        self._rng = np.random.default_rng(
            np.random.SeedSequence([seed, *subscriber_id.encode("utf-8")])
        )
        self.registrations: Dict[str, Registration] = {}
        self._token_owner: Dict[str, str] = {}

    # ---------- 签发 ----------

    def _fresh_token(self) -> str:
        while True:
            token = self._rng.bytes(16).hex()
            if token not in self.ledger:
                self.ledger.claim(token, self.subscriber_id)
                return token

    def _issue(self, registration: Registration, m: int, day: Optional[int]) -> PseudoIdPool:
        tokens = [self._fresh_token() for _ in range(m)]
        for token in tokens:
            self._token_owner[token] = registration.real_id
        pool = PseudoIdPool(ids=tokens, issued_by=self.subscriber_id, day=day)
        registration.pools.append(pool)
        return pool

    def register_user(self, real_id: str, m: Optional[int] = None, day: Optional[int] = 0) -> PseudoIdPool:
        """
        注册用户并签发首个假名池

        Raises:
            AlreadyRegisteredError: 用户已在本订阅方注册
        """
        if real_id in self.registrations:
            raise AlreadyRegisteredError(f"用户已注册: {real_id}")
        registration = Registration(real_id=real_id)
        self.registrations[real_id] = registration
        pool = self._issue(registration, m or self.pool_size, day)
        logger.debug("用户注册", subscriber_id=self.subscriber_id, pool_size=len(pool.ids))
        return pool

    def issue_pool(self, real_id: str, day: int, m: Optional[int] = None) -> PseudoIdPool:
        """
        签发某一天的假名池（已签发则返回原池）

        Raises:
            NotRegisteredError: 用户未注册
        """
        registration = self._registration(real_id)
        for pool in registration.pools:
            if pool.day == day:
                return pool
        return self._issue(registration, m or self.pool_size, day)

    # ---------- 查询 ----------

    def _registration(self, real_id: str) -> Registration:
        registration = self.registrations.get(real_id)
        if registration is None:
            raise NotRegisteredError(f"用户未注册: {real_id}")
        return registration

    def tokens_of(self, real_id: str) -> List[str]:
        return self._registration(real_id).tokens()

    def real_id_of(self, token: str) -> Optional[str]:
        return self._token_owner.get(token)

    def contact_groups(self, broadcast: Iterable[str]) -> List[List[str]]:
        """广播中属于本订阅方用户的假名，换成这些用户各自的全部假名（每人一组）"""
        owners = sorted({self._token_owner[token] for token in broadcast if token in self._token_owner})
        return [sorted(self.tokens_of(real_id)) for real_id in owners]

    def initiate_trace(
        self,
        real_id: str,
        orchestrator,
        params,
        today: Optional[int] = None,
        consented: bool = True,
        peers: Optional[Sequence["SubscriberRegistry"]] = None
    ):
        """
        以用户的全部假名为种子发起多代查询

        Args:
            peers: 参与下一代种子换算的全部订阅方，默认只有本订阅方

        Raises:
            NotRegisteredError: 用户未注册
            RegistryError: 用户未同意
        """
        tokens = self.tokens_of(real_id)
        if not consented:
            raise RegistryError(f"用户未同意发起追踪: {real_id}")
        logger.info("发起接触追踪", subscriber_id=self.subscriber_id, seeds=len(tokens))
        subscribers = list(peers) if peers is not None else [self]
        return orchestrator.multi_generation_query(tokens, params, today=today, subscribers=subscribers)

    def match_notifications(self, broadcast: Sequence[str]) -> List[Tuple[str, str]]:
        """本订阅方的通知：每个真实身份一条，外来假名忽略"""
        notified: Set[str] = set()
        notifications: List[Tuple[str, str]] = []
        for token in broadcast:
            real_id = self._token_owner.get(token)
            if real_id is None or real_id in notified:
                continue
            notified.add(real_id)
            notifications.append((real_id, NOTIFICATION_MESSAGE))
        return notifications

    # ---------- CSV ----------

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (self.subscriber_id, registration.real_id, token, pool.day)
            for registration in self.registrations.values()
            for pool in registration.pools
            for token in pool.ids
        ]
        return pd.DataFrame(rows, columns=REGISTRY_COLUMNS)

    def export_csv(self, path: str) -> int:
        frame = self.to_frame()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        return len(frame)

    @classmethod
    def import_csv(cls, path: str, ledger: Optional[TokenLedger] = None) -> List["SubscriberRegistry"]:
        """读取注册表（可含多个订阅方），day 列可省略"""
        frame = pd.read_csv(path, dtype={"subscriber_id": str, "real_id": str, "token_hex": str})
        ledger = ledger if ledger is not None else TokenLedger()
        if "day" not in frame.columns:
            frame["day"] = None

        registries: List[SubscriberRegistry] = []
        for subscriber_id, group in frame.groupby("subscriber_id", sort=True):
            registry = cls(str(subscriber_id), ledger)
            for real_id, rows in group.groupby("real_id", sort=False):
                registration = registry.registrations.setdefault(str(real_id), Registration(real_id=str(real_id)))
                for day, day_rows in rows.groupby("day", sort=True, dropna=False):
                    tokens = [str(t) for t in day_rows["token_hex"]]
                    for token in tokens:
                        ledger.claim(token, registry.subscriber_id)
                        registry._token_owner[token] = registration.real_id
                    pool_day = None if pd.isna(day) else int(day)
                    registration.pools.append(PseudoIdPool(ids=tokens, issued_by=registry.subscriber_id, day=pool_day))
            registries.append(registry)
        return registries
