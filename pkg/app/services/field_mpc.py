"""
ShareTrace-Lite 素数域多方计算原语

功能:
1. 素数域算术（Q = 2^61 − 1，梅森素数）
2. 加法秘密分享（n-of-n）与重构
3. Beaver三元组安全乘法
4. 隐藏随机数生成
5. 掩码零值检测（eq_zero_open）
6. 有界安全比较（secure_less_than）
7. 模拟可信经销商（预处理材料的生成、录制、序列化与重放）

半诚实模型：各方本地计算、同步轮次开值，协议转录只包含实际传输或打开的值。
"""

import struct
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import (
    IncompleteShareSetError,
    InvalidInputError,
    InvalidPartyCountError,
    ProtocolError,
    TripleExhaustedError,
)
from app.logger import get_logger, log_protocol_round

logger = get_logger(__name__)


# ==================
# 素数域
# ==================

Q = (1 << 61) - 1
FIELD_BITS = Q.bit_length()
HALF_BOUND = Q // 4

FieldElement = int
PartyId = int


def to_field(value: int) -> FieldElement:
    """把任意整数（可为负）映射到 [0, Q)"""
    return value % Q


def to_signed(value: FieldElement) -> int:
    """把域元素解释为 (−Q/2, Q/2] 内的有符号整数"""
    return value - Q if value > Q // 2 else value


class FieldRng:
    """
    种子化的域随机数源

    基于numpy PCG64，批量抽取后逐个发放，保证同种子同序列。
    """

    def __init__(self, seed: Union[int, Sequence[int], np.random.SeedSequence], block: int = 4096):
        self._gen = np.random.default_rng(seed)
        self._block = block
        self._buffer: List[int] = []

    def element(self) -> FieldElement:
        """抽取一个 [0, Q) 上的均匀域元素"""
        if not self._buffer:
            self._buffer = self._gen.integers(0, Q, size=self._block, dtype=np.int64).tolist()
            self._buffer.reverse()
        return self._buffer.pop()

    def elements(self, count: int) -> List[FieldElement]:
        return [self.element() for _ in range(count)]

    def integers(self, low: int, high: int, size: Optional[int] = None):
        """普通整数抽样（不经过域缓冲）"""
        return self._gen.integers(low, high, size=size)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen


# ==================
# 分享类型
# ==================

@dataclass(frozen=True)
class Share:
    """单个参与方持有的一份加法分享"""
    owner: PartyId
    value: FieldElement


class SharedValue:
    """
    一个秘密的完整分享向量（下标即参与方编号）

    加减法与公开常数运算都是本地运算，不需要通信。
    """

    __slots__ = ("values",)

    def __init__(self, values: Sequence[int]):
        self.values: Tuple[int, ...] = tuple(values)

    @property
    def n(self) -> int:
        return len(self.values)

    def shares(self) -> List[Share]:
        return [Share(owner=i, value=v) for i, v in enumerate(self.values)]

    def share_of(self, party: PartyId) -> FieldElement:
        return self.values[party]

    def _check(self, other: "SharedValue"):
        if other.n != self.n:
            raise ProtocolError(f"分享向量长度不一致: {self.n} != {other.n}")

    def __add__(self, other: "SharedValue") -> "SharedValue":
        self._check(other)
        return SharedValue([(a + b) % Q for a, b in zip(self.values, other.values)])

    def __sub__(self, other: "SharedValue") -> "SharedValue":
        self._check(other)
        return SharedValue([(a - b) % Q for a, b in zip(self.values, other.values)])

    def add_public(self, constant: int) -> "SharedValue":
        """加公开常数：只由0号方加"""
        head = (self.values[0] + constant) % Q
        return SharedValue((head,) + self.values[1:])

    def mul_public(self, constant: int) -> "SharedValue":
        c = constant % Q
        return SharedValue([(v * c) % Q for v in self.values])

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SharedValue) and self.values == other.values

    def __hash__(self) -> int:
        return hash(self.values)

    def __repr__(self) -> str:
        return f"SharedValue(n={self.n})"

    @classmethod
    def public(cls, constant: int, n: int) -> "SharedValue":
        """公开常数的平凡分享"""
        return cls([constant % Q] + [0] * (n - 1))

    @classmethod
    def from_shares(cls, shares: Sequence[Share], n: Optional[int] = None) -> "SharedValue":
        """按参与方编号排列分享；缺失或重复的参与方视为不完整"""
        owners = sorted(s.owner for s in shares)
        expected = list(range(n if n is not None else len(shares)))
        if owners != expected:
            raise IncompleteShareSetError(
                f"分享集合不完整: 期望参与方{expected}，实际{owners}"
            )
        ordered = sorted(shares, key=lambda s: s.owner)
        return cls([s.value for s in ordered])


@dataclass
class BeaverTriple:
    """乘法三元组：reconstruct(c) = reconstruct(a)·reconstruct(b) mod Q，仅可使用一次"""
    a: SharedValue
    b: SharedValue
    c: SharedValue
    consumed: bool = field(default=False, compare=False)

    def consume(self):
        if self.consumed:
            raise TripleExhaustedError("Beaver三元组已被使用，禁止重复消耗")
        self.consumed = True

    @property
    def a_shares(self) -> List[Share]:
        return self.a.shares()

    @property
    def b_shares(self) -> List[Share]:
        return self.b.shares()

    @property
    def c_shares(self) -> List[Share]:
        return self.c.shares()


@dataclass
class ComparisonMaterial:
    """比较预处理材料：均匀随机 r 的分享及其逐比特分享（低位在前）"""
    r: SharedValue
    r_bits: List[SharedValue]


# 经销商按请求顺序发放的材料
Material = Union[SharedValue, BeaverTriple, ComparisonMaterial]


def _material_parties(item: Material) -> int:
    if isinstance(item, BeaverTriple):
        return item.a.n
    if isinstance(item, ComparisonMaterial):
        return item.r.n
    return item.n


@dataclass(frozen=True)
class TraceEntry:
    round: int
    sender: PartyId
    receiver: PartyId
    value: FieldElement


class ProtocolTrace:
    """
    协议转录

    只记录实际在参与方之间发送的值（开值时每方把分享发给其他各方）。
    """

    def __init__(self):
        self.entries: List[TraceEntry] = []
        self.opened: List[FieldElement] = []
        self._round = 0

    def next_round(self) -> int:
        self._round += 1
        return self._round

    def record_opening(self, shared: SharedValue, opened: FieldElement):
        round_no = self.next_round()
        for sender, value in enumerate(shared.values):
            for receiver in range(shared.n):
                if receiver != sender:
                    self.entries.append(TraceEntry(round_no, sender, receiver, value))
        self.opened.append(opened)

    def received_by(self, party: PartyId) -> List[FieldElement]:
        """某一参与方在整个运行中收到的全部值"""
        return [e.value for e in self.entries if e.receiver == party]

    @property
    def rounds(self) -> int:
        return self._round

    def __len__(self) -> int:
        return len(self.entries)


# ==================
# 基本操作
# ==================

def _check_party_count(n: int):
    if n < 2:
        raise InvalidPartyCountError(f"参与方数量至少为2，当前值: {n}")


def share_vector(secret: int, n: int, rng: FieldRng) -> SharedValue:
    """分享为向量：前 n−1 份均匀随机，最后一份补齐"""
    _check_party_count(n)
    head = rng.elements(n - 1)
    last = (secret - sum(head)) % Q
    return SharedValue(head + [last])


def share(secret: FieldElement, n: int, rng: FieldRng) -> List[Share]:
    """
    把域元素拆成 n 份加法分享

    Args:
        secret: [0, Q) 内的秘密
        n: 参与方数量（≥2）
        rng: 种子化随机源

    Returns:
        每方一份的 Share 列表

    Raises:
        InvalidPartyCountError: n < 2
        InvalidInputError: 秘密不在域内
    """
    if not (0 <= secret < Q):
        raise InvalidInputError(f"秘密必须在[0, Q)内，当前值: {secret}")
    return share_vector(secret, n, rng).shares()


def reconstruct(shares: Union[SharedValue, Sequence[Share]], n: Optional[int] = None) -> FieldElement:
    """
    重构秘密：Σ values mod Q

    Raises:
        IncompleteShareSetError: 缺少某一方的分享
    """
    if isinstance(shares, SharedValue):
        if n is not None and shares.n != n:
            raise IncompleteShareSetError(f"分享集合不完整: 期望{n}份，实际{shares.n}份")
        return sum(shares.values) % Q
    return sum(SharedValue.from_shares(shares, n).values) % Q


def _open(shared: SharedValue, trace: Optional[ProtocolTrace]) -> FieldElement:
    value = sum(shared.values) % Q
    if trace is not None:
        trace.record_opening(shared, value)
    return value


def secure_mul(
    x: SharedValue,
    y: SharedValue,
    triple: BeaverTriple,
    trace: Optional[ProtocolTrace] = None
) -> SharedValue:
    """
    Beaver安全乘法

    打开 d = x − a 与 e = y − b（均被三元组均匀掩码），
    z_i = c_i + d·b_i + e·a_i，0号方再加 d·e。

    Raises:
        TripleExhaustedError: 三元组重复使用
        ProtocolError: 分享向量长度不一致
    """
    if not (x.n == y.n == triple.a.n):
        raise ProtocolError(f"乘法参与方数量不一致: {x.n}, {y.n}, {triple.a.n}")
    triple.consume()

    d = _open(x - triple.a, trace)
    e = _open(y - triple.b, trace)

    values = [
        (c + d * b + e * a) % Q
        for a, b, c in zip(triple.a.values, triple.b.values, triple.c.values)
    ]
    values[0] = (values[0] + d * e) % Q
    return SharedValue(values)


# ==================
# 模拟可信经销商
# ==================

class Dealer:
    """
    预处理材料来源（半诚实模型下的可信经销商）

    同种子产生完全相同的材料序列。record=True 时按发放顺序保留材料，
    可由 dump_material 导出后交给 ReplayDealer 重放。
    """

    def __init__(self, n_parties: int, seed: int = 0, record: bool = False):
        _check_party_count(n_parties)
        self.n = n_parties
        self.seed = seed
        self._rng = FieldRng(np.random.SeedSequence([seed, 0xDEA1]))
        self.issued: Optional[List[Material]] = [] if record else None

    def _issue(self, item):
        if self.issued is not None:
            self.issued.append(item)
        return item

    def share(self, value: int) -> SharedValue:
        return share_vector(value % Q, self.n, self._rng)

    def random_shared(self) -> SharedValue:
        """每方分享独立均匀，r 本身均匀且任何单方视图都不决定 r"""
        return self._issue(SharedValue(self._rng.elements(self.n)))

    def triple(self) -> BeaverTriple:
        a = self._rng.element()
        b = self._rng.element()
        return self._issue(BeaverTriple(a=self.share(a), b=self.share(b), c=self.share(a * b)))

    def comparison_material(self) -> ComparisonMaterial:
        r = self._rng.element()
        bits = [self.share((r >> j) & 1) for j in range(FIELD_BITS)]
        return self._issue(ComparisonMaterial(r=self.share(r), r_bits=bits))


class ReplayDealer(Dealer):
    """
    按顺序重放预先生成或录制的材料

    请求的材料类型必须与队首一致。

    Raises:
        TripleExhaustedError: 材料用完
        ProtocolError: 材料顺序或参与方数量不符
    """

    def __init__(self, n_parties: int, materials: Sequence[Material]):
        super().__init__(n_parties)
        for item in materials:
            if _material_parties(item) != n_parties:
                raise ProtocolError(f"材料参与方数量{_material_parties(item)}与经销商{n_parties}不一致")
        self._queue = deque(materials)

    def __len__(self) -> int:
        return len(self._queue)

    def _next(self, kind: type):
        if not self._queue:
            raise TripleExhaustedError(f"预处理材料已用完，无法提供{kind.__name__}")
        item = self._queue.popleft()
        if not isinstance(item, kind):
            raise ProtocolError(f"材料顺序不符: 需要{kind.__name__}，队首为{type(item).__name__}")
        return item

    def random_shared(self) -> SharedValue:
        return self._next(SharedValue)

    def triple(self) -> BeaverTriple:
        return self._next(BeaverTriple)

    def comparison_material(self) -> ComparisonMaterial:
        return self._next(ComparisonMaterial)


def secure_rand(n: int, dealer: Dealer) -> SharedValue:
    """
    隐藏随机数生成

    Raises:
        InvalidPartyCountError: n < 2
    """
    _check_party_count(n)
    if dealer.n != n:
        raise ProtocolError(f"经销商参与方数量{dealer.n}与请求{n}不一致")
    return dealer.random_shared()


def dealer_gen(kind: str, count: int, n: int, seed: int = 0) -> list:
    """
    批量生成预处理材料

    Args:
        kind: "triple" 或 "comparison"
        count: 数量
        n: 参与方数量
        seed: 种子

    Returns:
        BeaverTriple 或 ComparisonMaterial 列表
    """
    dealer = Dealer(n, seed)
    if kind == "triple":
        return [dealer.triple() for _ in range(count)]
    if kind == "comparison":
        return [dealer.comparison_material() for _ in range(count)]
    raise InvalidInputError(f"未知的预处理材料类型: {kind}")


# ==================
# 预处理材料序列化（长度前缀 + 小端8字节域元素）
# ==================

_U64 = struct.Struct("<Q")


def _pack_elements(values: Sequence[int]) -> bytes:
    return _U64.pack(len(values)) + np.asarray(values, dtype="<u8").tobytes()


def _unpack_elements(buf: bytes, offset: int) -> Tuple[List[int], int]:
    (length,) = _U64.unpack_from(buf, offset)
    offset += _U64.size
    end = offset + 8 * length
    if end > len(buf):
        raise ProtocolError("预处理材料截断")
    values = np.frombuffer(buf, dtype="<u8", count=length, offset=offset).tolist()
    return [int(v) for v in values], end


def dump_material(materials: Sequence[Material]) -> bytes:
    """序列化预处理材料，便于测试重放"""
    chunks = [_U64.pack(len(materials))]
    for item in materials:
        if isinstance(item, BeaverTriple):
            chunks.append(b"T")
            chunks.append(_pack_elements(item.a.values + item.b.values + item.c.values))
        elif isinstance(item, ComparisonMaterial):
            chunks.append(b"C")
            flat = list(item.r.values)
            for bit in item.r_bits:
                flat.extend(bit.values)
            chunks.append(_pack_elements(flat))
        else:
            chunks.append(b"R")
            chunks.append(_pack_elements(item.values))
    return b"".join(chunks)


def load_material(buf: bytes, n: int) -> List[Material]:
    """反序列化 dump_material 的输出，可交给 ReplayDealer"""
    (count,) = _U64.unpack_from(buf, 0)
    offset = _U64.size
    materials: List[Material] = []
    for _ in range(count):
        tag = buf[offset:offset + 1]
        offset += 1
        flat, offset = _unpack_elements(buf, offset)
        vectors = [SharedValue(flat[i:i + n]) for i in range(0, len(flat), n)]
        if tag == b"T":
            materials.append(BeaverTriple(a=vectors[0], b=vectors[1], c=vectors[2]))
        elif tag == b"C":
            materials.append(ComparisonMaterial(r=vectors[0], r_bits=vectors[1:]))
        elif tag == b"R":
            materials.append(vectors[0])
        else:
            raise ProtocolError(f"未知的材料标记: {tag!r}")
    return materials


# ==================
# 多方计算引擎
# ==================

@dataclass
class MpcStats:
    """协议计数（与硬件无关的成本指标）"""
    multiplications: int = 0
    openings: int = 0
    eq_tests: int = 0
    less_than: int = 0

    def snapshot(self) -> "MpcStats":
        return MpcStats(self.multiplications, self.openings, self.eq_tests, self.less_than)


class MpcEngine:
    """
    多方计算引擎

    由编排模块驱动：每次调用是一组同步轮次，所有参与方同时执行本地计算。
    """

    def __init__(self, n_parties: int, dealer: Optional[Dealer] = None, record_transcript: bool = False):
        _check_party_count(n_parties)
        self.n = n_parties
        self.dealer = dealer if dealer is not None else Dealer(n_parties)
        if self.dealer.n != n_parties:
            raise ProtocolError(f"经销商参与方数量{self.dealer.n}与引擎{n_parties}不一致")
        self.trace: Optional[ProtocolTrace] = ProtocolTrace() if record_transcript else None
        self.stats = MpcStats()

    def open(self, shared: SharedValue) -> FieldElement:
        if shared.n != self.n:
            raise ProtocolError(f"开值参与方数量不一致: {shared.n} != {self.n}")
        self.stats.openings += 1
        return _open(shared, self.trace)

    def mul(self, x: SharedValue, y: SharedValue) -> SharedValue:
        self.stats.multiplications += 1
        self.stats.openings += 2
        return secure_mul(x, y, self.dealer.triple(), self.trace)

    def rand(self) -> SharedValue:
        return secure_rand(self.n, self.dealer)

    def eq_zero(self, d: SharedValue) -> bool:
        """
        掩码零值检测：v = d·r（r 隐藏随机），打开 Σv_i，为0即判定相等

        d = 0 时必然为真；d ≠ 0 时仅当 r = 0（概率 1/Q）误判。
        """
        self.stats.eq_tests += 1
        r = self.rand()
        v = self.mul(d, r)
        result = self.open(v) == 0
        log_protocol_round("eq_zero", self.stats.eq_tests, openings=self.stats.openings)
        return result

    def less_than(self, a: SharedValue, c: int) -> bool:
        """
        有界安全比较 [a < c]

        约定：a 的隐藏值与公共阈值 c 都是绝对值小于 Q/4 的有符号整数，运行时无法检测越界。
        打开 m = 2(a − c) + r；回绕位 w = [m < r] 由经销商提供的 r 的比特分享逐位计算，
        结果位 lsb(2(a − c) mod Q) = m₀ ⊕ r₀ ⊕ w，只打开该结果位。
        """
        if abs(c) >= HALF_BOUND:
            raise InvalidInputError(f"公共阈值超出有界比较约定: {c}")
        self.stats.less_than += 1

        material = self.dealer.comparison_material()
        x = a.add_public(-c).mul_public(2)
        m = self.open(x + material.r)

        lt = SharedValue.public(0, self.n)
        eq: Optional[SharedValue] = None  # None 表示公开常数1
        for j in range(FIELD_BITS - 1, -1, -1):
            r_j = material.r_bits[j]
            t = r_j if eq is None else self.mul(eq, r_j)
            if (m >> j) & 1:
                eq = t
            else:
                lt = lt + t
                eq = (SharedValue.public(1, self.n) if eq is None else eq) - t

        r_0 = material.r_bits[0]
        r0_xor_w = (r_0 + lt) - self.mul(r_0, lt).mul_public(2)
        bit = SharedValue.public(1, self.n) - r0_xor_w if m & 1 else r0_xor_w
        result = self.open(bit) == 1
        log_protocol_round("less_than", self.stats.less_than, openings=self.stats.openings)
        return result

    def less_equal(self, a: SharedValue, c: int) -> bool:
        """[a ≤ c]，即 less_than(a, c + 1)"""
        return self.less_than(a, c + 1)


# ==================
# 模块级协议入口
# ==================

def eq_zero_open(d: SharedValue, engine: Optional[MpcEngine] = None) -> Tuple[bool, ProtocolTrace]:
    """
    对差值分享执行掩码零值检测，返回结果与本次运行的协议转录
    """
    if engine is None:
        engine = MpcEngine(d.n, record_transcript=True)
    trace = ProtocolTrace()
    saved, engine.trace = engine.trace, trace
    try:
        result = engine.eq_zero(d)
    finally:
        engine.trace = saved
        if saved is not None:
            saved.entries.extend(trace.entries)
            saved.opened.extend(trace.opened)
    return result, trace


def secure_less_than(a: SharedValue, c: int, engine: Optional[MpcEngine] = None) -> bool:
    """[hidden(a) < c]，约定见 MpcEngine.less_than"""
    if engine is None:
        engine = MpcEngine(a.n)
    return engine.less_than(a, c)
