"""
ShareTrace-Lite 自定义异常体系
"""


class ShareTraceError(Exception):
    """ShareTrace系统基础异常类"""
    pass


# ==================
# 安全多方计算相关异常
# ==================

class MPCError(ShareTraceError):
    """多方计算协议异常"""
    pass


class InvalidPartyCountError(MPCError):
    """参与方数量非法（至少2方）"""
    pass


class IncompleteShareSetError(MPCError):
    """秘密分享集合不完整"""
    pass


class TripleExhaustedError(MPCError):
    """Beaver三元组已被消耗"""
    pass


class ProtocolError(MPCError):
    """协议轮次不同步或消息格式错误"""
    pass


# ==================
# 空间网格相关异常
# ==================

class GridError(ShareTraceError):
    """网格几何异常"""
    pass


class OutsideServiceAreaError(GridError):
    """坐标超出服务区域"""
    pass


# ==================
# 输入验证相关异常
# ==================

class ValidationError(ShareTraceError):
    """验证异常"""
    pass


class InvalidInputError(ValidationError):
    """计算器输入非法"""
    pass


class InvalidSequenceError(ValidationError):
    """定位序列未按时间排序"""
    pass


# ==================
# 客户端与传输相关异常
# ==================

class ClientError(ShareTraceError):
    """客户端异常"""
    pass


class OutOfPseudoIdsError(ClientError):
    """假名池耗尽"""
    pass


class TransportError(ShareTraceError):
    """传输异常"""
    pass


class RetryExhaustedError(TransportError):
    """投递重试次数耗尽"""
    pass


# ==================
# 服务器存储相关异常
# ==================

class StorageError(ShareTraceError):
    """服务器存储异常"""
    pass


class PseudoIdReuseError(StorageError):
    """假名重复使用"""
    pass


class SnapshotError(StorageError):
    """快照文件损坏或版本不符"""
    pass


# ==================
# 订阅方相关异常
# ==================

class RegistryError(ShareTraceError):
    """订阅方注册表异常"""
    pass


class AlreadyRegisteredError(RegistryError):
    """用户已注册"""
    pass


class NotRegisteredError(RegistryError):
    """用户未注册"""
    pass


# ==================
# 配置相关异常
# ==================

class ConfigError(ShareTraceError):
    """配置异常"""
    pass
