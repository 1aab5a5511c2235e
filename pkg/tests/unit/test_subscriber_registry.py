"""
订阅方注册表测试

测试范围:
1. 用户注册与每日假名池
2. 跨订阅方假名唯一
3. 发起追踪（同意检查）
4. 通知匹配
5. CSV 导入导出
"""

import pytest


@pytest.fixture
def registry():
    from app.services.subscriber_registry import SubscriberRegistry

    return SubscriberRegistry("subscriber-0", seed=3, pool_size=8)


class TestRegistration:
    """注册与签发"""

    def test_register_issues_pool(self, registry):
        pool = registry.register_user("alice")
        assert len(pool.ids) == 8
        assert all(len(token) == 32 for token in pool.ids)
        assert pool.issued_by == "subscriber-0"
        assert registry.real_id_of(pool.ids[0]) == "alice"

    def test_custom_pool_size(self, registry):
        assert len(registry.register_user("alice", m=3).ids) == 3

    def test_already_registered(self, registry):
        from app.errors import AlreadyRegisteredError

        registry.register_user("alice")
        with pytest.raises(AlreadyRegisteredError):
            registry.register_user("alice")

    def test_issue_pool_per_day(self, registry):
        """同一天返回同一池，新的一天签发新池"""
        first = registry.register_user("alice", day=0)
        assert registry.issue_pool("alice", 0) is first
        second = registry.issue_pool("alice", 1)
        assert not set(first.ids) & set(second.ids)
        assert len(registry.tokens_of("alice")) == 16

    def test_not_registered(self, registry):
        from app.errors import NotRegisteredError

        with pytest.raises(NotRegisteredError):
            registry.issue_pool("mallory", 0)
        with pytest.raises(NotRegisteredError):
            registry.tokens_of("mallory")

    def test_tokens_unique_across_subscribers(self):
        """共享账本保证两个订阅方的假名不重复"""
        from app.services.subscriber_registry import SubscriberRegistry, TokenLedger

        ledger = TokenLedger()
        first = SubscriberRegistry("subscriber-0", ledger, seed=1, pool_size=32)
        second = SubscriberRegistry("subscriber-1", ledger, seed=1, pool_size=32)
        tokens = first.register_user("alice").ids + second.register_user("bob").ids
        assert len(set(tokens)) == 64
        assert len(ledger) == 64

    def test_deterministic(self):
        from app.services.subscriber_registry import SubscriberRegistry

        first = SubscriberRegistry("subscriber-0", seed=5).register_user("alice").ids
        second = SubscriberRegistry("subscriber-0", seed=5).register_user("alice").ids
        assert first == second


class TestNotifications:
    """通知匹配"""

    def test_one_notification_per_user(self, registry):
        from app.services.subscriber_registry import NOTIFICATION_MESSAGE

        alice = registry.register_user("alice").ids
        bob = registry.register_user("bob").ids
        broadcast = [alice[0], alice[3], bob[1], "ff" * 16]
        notifications = registry.match_notifications(broadcast)
        assert notifications == [("alice", NOTIFICATION_MESSAGE), ("bob", NOTIFICATION_MESSAGE)]

    def test_foreign_tokens_ignored(self, registry):
        registry.register_user("alice")
        assert registry.match_notifications(["00" * 16]) == []


class TestInitiateTrace:
    """发起追踪"""

    def test_requires_consent(self, registry, mocker, params):
        from app.errors import RegistryError

        registry.register_user("alice")
        orchestrator = mocker.Mock()
        with pytest.raises(RegistryError):
            registry.initiate_trace("alice", orchestrator, params, consented=False)
        orchestrator.multi_generation_query.assert_not_called()

    def test_seeds_with_all_tokens(self, registry, mocker, params):
        registry.register_user("alice", day=0)
        registry.issue_pool("alice", 1)
        orchestrator = mocker.Mock()
        registry.initiate_trace("alice", orchestrator, params, today=1)
        seeds = orchestrator.multi_generation_query.call_args.args[0]
        assert sorted(seeds) == sorted(registry.tokens_of("alice"))
        assert orchestrator.multi_generation_query.call_args.kwargs["today"] == 1

    def test_subscribers_passed_for_expansion(self, registry, mocker, params):
        from app.services.subscriber_registry import SubscriberRegistry

        registry.register_user("alice")
        other = SubscriberRegistry("subscriber-9", registry.ledger)
        orchestrator = mocker.Mock()

        registry.initiate_trace("alice", orchestrator, params)
        assert orchestrator.multi_generation_query.call_args.kwargs["subscribers"] == [registry]

        registry.initiate_trace("alice", orchestrator, params, peers=[registry, other])
        assert orchestrator.multi_generation_query.call_args.kwargs["subscribers"] == [registry, other]

    def test_unregistered_patient(self, registry, mocker, params):
        from app.errors import NotRegisteredError

        with pytest.raises(NotRegisteredError):
            registry.initiate_trace("mallory", mocker.Mock(), params)


class TestCsv:
    """CSV 导入导出"""

    def test_export_import(self, registry, tmp_path):
        from app.services.subscriber_registry import REGISTRY_COLUMNS, SubscriberRegistry, TokenLedger

        registry.register_user("alice", day=0)
        registry.issue_pool("alice", 1)
        registry.register_user("bob", day=1)
        path = tmp_path / "registry.csv"
        assert registry.export_csv(str(path)) == 24

        import pandas as pd
        assert list(pd.read_csv(path).columns) == REGISTRY_COLUMNS

        ledger = TokenLedger()
        (restored,) = SubscriberRegistry.import_csv(str(path), ledger)
        assert restored.subscriber_id == "subscriber-0"
        assert sorted(restored.tokens_of("alice")) == sorted(registry.tokens_of("alice"))
        assert restored.real_id_of(registry.tokens_of("bob")[0]) == "bob"
        assert len(ledger) == 24

    def test_import_without_day_column(self, tmp_path):
        import pandas as pd

        from app.services.subscriber_registry import SubscriberRegistry

        path = tmp_path / "registry.csv"
        pd.DataFrame(
            [("s0", "alice", "aa" * 16), ("s1", "bob", "bb" * 16)],
            columns=["subscriber_id", "real_id", "token_hex"],
        ).to_csv(path, index=False)
        registries = SubscriberRegistry.import_csv(str(path))
        assert [r.subscriber_id for r in registries] == ["s0", "s1"]
        assert registries[1].real_id_of("bb" * 16) == "bob"
