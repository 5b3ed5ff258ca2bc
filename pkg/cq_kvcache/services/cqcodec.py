"""
耦合量化（CQ）编解码服务
分组码本学习（均匀 / Fisher 加权）、量化为位压缩码、反量化，以及误差与容量核算

CQCB 码本文件（小端）:
    magic "CQCB" | version u16=1 | c u16 | b u16 | learning_mode u8 | reserved u8 |
    num_groups u64 | centroids (组优先、质心优先, f32) | Fisher 回退位图 (ceil(G/8) 字节)

CQQC 量化缓存文件（小端）:
    magic "CQQC" | version u16=1 | c u16 | b u16 | num_groups u64 | tokens u64 |
    codebook_hash u64 | 每组按字节对齐的位压缩码
"""

import hashlib
import logging
import math
import re
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, List, Optional

import numpy as np

from ..utils.actdata import ActivationMatrix, ModelDims
from ..utils.errors import (
    BadMagicError,
    CodecMismatchError,
    ConfigError,
    FormatError,
    MissingGradientError,
    NonFiniteError,
    ShapeError,
    UnsupportedVersionError,
)
from ..utils.fileio import ByteReader, ByteSink, ByteSource, read_all, write_chunks
from ..utils.rng import check_seed, derive_seed
from .clustering import PointSet, best_of_seeds, nearest_centroids
from .core import WorkerPool

logger = logging.getLogger(__name__)

LEARN_UNIFORM = "uniform"
LEARN_FISHER = "fisher"
_LEARNING_MODES = (LEARN_UNIFORM, LEARN_FISHER)
MAX_CODE_BITS = 16

CQCB_MAGIC = b"CQCB"
CQQC_MAGIC = b"CQQC"
CODEC_FILE_VERSION = 1
_CQCB_HEADER = struct.Struct("<4sHHHBBQ")  # 20 字节
_CQQC_HEADER = struct.Struct("<4sHHHQQQ")  # 34 字节

_NOTATION_RE = re.compile(r"^(?:CQ-)?([1-9]\d*)c([1-9]\d*)b$")


# ==================== 配置 ====================

@dataclass(frozen=True)
class CQConfig:
    """
    CQ-<c>c<b>b 配置: 每 c 个连续通道共享一个 b 比特码

    属性:
        channels_per_group: 每组通道数 c
        bits_per_code: 每个码的比特数 b（1..16）
        learning_mode: uniform | fisher
        kmeans_iters: 每组 k-means 最大迭代次数
        seed: 码本学习种子
        restarts: 每组的种子重启次数（取学习目标最小者）
    """

    channels_per_group: int
    bits_per_code: int
    learning_mode: str = LEARN_UNIFORM
    kmeans_iters: int = 100
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if self.channels_per_group < 1 or self.channels_per_group > 0xFFFF:
            raise ConfigError(f"channels_per_group 必须在 [1, 65535] 内: {self.channels_per_group}")
        if self.bits_per_code < 1 or self.bits_per_code > MAX_CODE_BITS:
            raise ConfigError(f"bits_per_code 必须在 [1, {MAX_CODE_BITS}] 内: {self.bits_per_code}")
        if self.learning_mode not in _LEARNING_MODES:
            raise ConfigError(f"未知的 learning_mode: {self.learning_mode}")
        if self.kmeans_iters < 1:
            raise ConfigError(f"kmeans_iters 必须 ≥ 1: {self.kmeans_iters}")
        if self.restarts < 1:
            raise ConfigError(f"restarts 必须 ≥ 1: {self.restarts}")
        check_seed(self.seed)

    @classmethod
    def parse(cls, notation: str, **overrides) -> "CQConfig":
        """
        解析 "4c8b" 或 "CQ-4c8b" 记号

        参数:
            notation: 配置记号
            overrides: 其余字段（learning_mode / seed / ...）
        """
        match = _NOTATION_RE.match(notation.strip()) if isinstance(notation, str) else None
        if match is None:
            raise ConfigError(f"无法解析 CQ 配置记号: {notation!r}（应为 <c>c<b>b，如 4c8b）")
        return cls(int(match.group(1)), int(match.group(2)), **overrides)

    @property
    def notation(self) -> str:
        return f"CQ-{self.channels_per_group}c{self.bits_per_code}b"

    @property
    def num_centroids(self) -> int:
        return 1 << self.bits_per_code

    @property
    def bits_per_fpn(self) -> float:
        return self.bits_per_code / self.channels_per_group

    def same_codec(self, other: "CQConfig") -> bool:
        """c 与 b 相同（决定码流布局的字段）"""
        return (self.channels_per_group, self.bits_per_code) == (other.channels_per_group, other.bits_per_code)


def bits_per_fpn(config: CQConfig) -> float:
    """每个浮点数的平均比特数 b/c（不含码本存储）"""
    return config.bits_per_fpn


def compression_ratio(config: CQConfig, baseline_bits: int = 16) -> float:
    """相对 baseline_bits 位浮点缓存的压缩比"""
    return baseline_bits / config.bits_per_fpn


# ==================== 码本 ====================

@dataclass(frozen=True, eq=False)
class Codebook:
    """
    每个通道组一组 2^b 个 c 维质心

    属性:
        config: CQ 配置
        centroids: (num_groups, 2^b, c) float32，只读
        fallback: (num_groups,) bool，Fisher 权重全零而回退为均匀权重的组
        objectives: 每组的学习目标值（从文件加载时为 None）
    """

    config: CQConfig
    centroids: np.ndarray
    fallback: Optional[np.ndarray] = None
    objectives: Optional[np.ndarray] = None

    def __post_init__(self):
        centroids = np.array(self.centroids, dtype=np.float32, order="C", copy=True)
        expected = (self.config.num_centroids, self.config.channels_per_group)
        if centroids.ndim != 3 or centroids.shape[0] < 1 or centroids.shape[1:] != expected:
            raise ShapeError(
                f"centroids 形状应为 (num_groups, {expected[0]}, {expected[1]})，实际 {centroids.shape}"
            )
        if not np.all(np.isfinite(centroids)):
            raise NonFiniteError("码本含非有限质心")
        centroids.flags.writeable = False
        object.__setattr__(self, "centroids", centroids)

        groups = centroids.shape[0]
        fallback = np.zeros(groups, dtype=bool) if self.fallback is None else np.array(self.fallback, dtype=bool)
        if fallback.shape != (groups,):
            raise ShapeError(f"fallback 长度 {fallback.shape} 与组数 {groups} 不一致")
        fallback.flags.writeable = False
        object.__setattr__(self, "fallback", fallback)

        if self.objectives is not None:
            objectives = np.array(self.objectives, dtype=np.float64)
            objectives.flags.writeable = False
            object.__setattr__(self, "objectives", objectives)

    @property
    def num_groups(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def channels(self) -> int:
        return self.num_groups * self.config.channels_per_group

    def group_slice(self, group: int) -> slice:
        """第 group 组覆盖的通道区间 [g·c, g·c + c)"""
        c = self.config.channels_per_group
        return slice(group * c, group * c + c)

    @cached_property
    def content_hash(self) -> int:
        """CQCB 字节内容的 64 位 BLAKE2b 摘要，写入 CQQC 用于配对校验"""
        digest = hashlib.blake2b(b"".join(encode_codebook(self)), digest_size=8).digest()
        return int.from_bytes(digest, "little")

    def summary(self) -> dict:
        summary = {
            "config": self.config.notation,
            "learning_mode": self.config.learning_mode,
            "num_groups": self.num_groups,
            "channels": self.channels,
            "centroids_per_group": self.config.num_centroids,
            "fallback_groups": int(np.count_nonzero(self.fallback)),
            "hash": f"{self.content_hash:016x}",
        }
        if self.objectives is not None:
            summary["objective_mean"] = float(np.mean(self.objectives))
            summary["objective_max"] = float(np.max(self.objectives))
        return summary


def _check_divisible(channels: int, config: CQConfig) -> int:
    c = config.channels_per_group
    if channels % c:
        raise ShapeError(
            f"通道数 {channels} 不能被每组通道数 {c} 整除",
            channels=channels,
            channels_per_group=c,
        )
    return channels // c


def _group_points(matrix: ActivationMatrix, config: CQConfig, group: int) -> np.ndarray:
    """第 group 组的 token 列，形状 (tokens, c)"""
    c = config.channels_per_group
    return matrix.values[group * c:(group + 1) * c].T


def fisher_weights(matrix: ActivationMatrix, config: CQConfig) -> np.ndarray:
    """
    每个 (组, token) 的 Fisher 权重: 组内通道梯度平方和

    返回:
        (num_groups, tokens) float64
    """
    if matrix.gradients is None:
        raise MissingGradientError("Fisher 权重需要梯度，但数据中没有梯度")
    groups = _check_divisible(matrix.channels, config)
    squared = matrix.gradients.astype(np.float64) ** 2
    return squared.reshape(groups, config.channels_per_group, matrix.tokens).sum(axis=1)


def _group_seeds(config: CQConfig, group: int) -> List[int]:
    base = derive_seed(config.seed, group)
    return [base] + [derive_seed(base, r) for r in range(1, config.restarts)]


def learn_codebook(
    matrix: ActivationMatrix,
    config: CQConfig,
    threads: Optional[int] = None,
    on_group_done: Optional[Callable[[object], None]] = None,
) -> Codebook:
    """
    学习 CQ 码本

    每个通道组独立运行加权 k-means（k = 2^b）。uniform 模式权重全为 1；
    fisher 模式权重为组内梯度平方和，全零时该组回退为均匀权重。

    参数:
        matrix: 校准数据
        config: CQ 配置
        threads: 并行线程数
        on_group_done: 每组完成后的回调

    返回:
        Codebook
    """
    groups = _check_divisible(matrix.channels, config)
    weights = fisher_weights(matrix, config) if config.learning_mode == LEARN_FISHER else None

    def learn_group(group: int):
        points = _group_points(matrix, config, group)
        fallback = False
        if weights is None:
            w = np.ones(matrix.tokens, dtype=np.float64)
        elif not np.any(weights[group] > 0):
            logger.warning("第 %d 组的 Fisher 权重全为 0，回退为均匀权重", group)
            w = np.ones(matrix.tokens, dtype=np.float64)
            fallback = True
        else:
            w = weights[group]
        result = best_of_seeds(
            PointSet(points, w), config.num_centroids, config.kmeans_iters, _group_seeds(config, group)
        )
        return result.centroids.astype(np.float32), fallback, result.objective

    results = WorkerPool.map_ordered(learn_group, range(groups), threads, on_done=on_group_done)
    return Codebook(
        config=config,
        centroids=np.stack([r[0] for r in results]),
        fallback=np.array([r[1] for r in results], dtype=bool),
        objectives=np.array([r[2] for r in results], dtype=np.float64),
    )


# ==================== 量化 / 反量化 ====================

def _packed_group_bytes(tokens: int, bits: int) -> int:
    return (tokens * bits + 7) // 8


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """
    把一组码按 LSB 优先的位序压缩（码的第 0 位先写入字节的第 0 位）

    参数:
        codes: (tokens,) 非负整数，< 2^bits
        bits: 每个码的比特数
    """
    codes = np.asarray(codes, dtype=np.uint32)
    shifts = np.arange(bits, dtype=np.uint32)
    bit_matrix = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1), bitorder="little").tobytes()


def unpack_codes(data: bytes, tokens: int, bits: int) -> np.ndarray:
    """pack_codes 的逆操作，返回 (tokens,) int64"""
    bit_stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    bit_matrix = bit_stream[:tokens * bits].reshape(tokens, bits).astype(np.int64)
    return (bit_matrix << np.arange(bits, dtype=np.int64)[None, :]).sum(axis=1)


@dataclass(frozen=True, eq=False)
class QuantizedCache:
    """
    位压缩的量化缓存

    属性:
        config: 编码所用 CQ 配置（只有 c、b 影响码流）
        num_groups: 通道组数
        tokens: token 数
        codebook_hash: 编码码本的内容摘要
        payload: 各组依次排列、每组按字节对齐的码流
    """

    config: CQConfig
    num_groups: int
    tokens: int
    codebook_hash: int
    payload: bytes

    @property
    def group_bytes(self) -> int:
        return _packed_group_bytes(self.tokens, self.config.bits_per_code)

    @property
    def expected_payload_bytes(self) -> int:
        return self.num_groups * self.group_bytes

    @property
    def payload_bits(self) -> int:
        """有效码比特数 num_groups·tokens·b"""
        return self.num_groups * self.tokens * self.config.bits_per_code

    @property
    def channels(self) -> int:
        return self.num_groups * self.config.channels_per_group

    def codes(self) -> np.ndarray:
        """解压为 (num_groups, tokens) int64"""
        if len(self.payload) != self.expected_payload_bytes:
            raise CodecMismatchError(
                f"载荷长度 {len(self.payload)} 与期望 {self.expected_payload_bytes} 不一致",
                expected=self.expected_payload_bytes,
                actual=len(self.payload),
            )
        step = self.group_bytes
        return np.stack([
            unpack_codes(self.payload[g * step:(g + 1) * step], self.tokens, self.config.bits_per_code)
            for g in range(self.num_groups)
        ]) if self.num_groups else np.zeros((0, self.tokens), dtype=np.int64)

    def summary(self) -> dict:
        return {
            "config": self.config.notation,
            "num_groups": self.num_groups,
            "channels": self.channels,
            "tokens": self.tokens,
            "codebook_hash": f"{self.codebook_hash:016x}",
            "payload_bytes": len(self.payload),
            "bits_per_fpn": self.config.bits_per_fpn,
        }


def quantize_codes(matrix: ActivationMatrix, codebook: Codebook, threads: Optional[int] = None) -> np.ndarray:
    """
    每个组列的最近质心下标（平方 L2，平局取最小下标）

    返回:
        (num_groups, tokens) int64
    """
    if matrix.channels != codebook.channels:
        raise ShapeError(
            f"矩阵通道数 {matrix.channels} 与码本通道数 {codebook.channels} 不一致",
            expected=codebook.channels,
            actual=matrix.channels,
        )

    def assign(group: int) -> np.ndarray:
        points = _group_points(matrix, codebook.config, group).astype(np.float64)
        labels, _ = nearest_centroids(points, codebook.centroids[group].astype(np.float64))
        return labels

    return np.stack(WorkerPool.map_ordered(assign, range(codebook.num_groups), threads))


def quantize(matrix: ActivationMatrix, codebook: Codebook, threads: Optional[int] = None) -> QuantizedCache:
    """
    量化激活矩阵为位压缩码

    参数:
        matrix: 激活矩阵（通道数须与码本一致）
        codebook: 码本
        threads: 并行线程数
    """
    codes = quantize_codes(matrix, codebook, threads)
    bits = codebook.config.bits_per_code
    payload = b"".join(pack_codes(codes[g], bits) for g in range(codebook.num_groups))
    return QuantizedCache(codebook.config, codebook.num_groups, matrix.tokens, codebook.content_hash, payload)


def dequantize(cache: QuantizedCache, codebook: Codebook) -> ActivationMatrix:
    """
    按码取回质心重建激活矩阵（不含梯度）

    异常:
        CodecMismatchError: 配置、组数、码本哈希或载荷长度不匹配
    """
    if not cache.config.same_codec(codebook.config):
        raise CodecMismatchError(
            f"缓存配置 {cache.config.notation} 与码本配置 {codebook.config.notation} 不一致"
        )
    if cache.num_groups != codebook.num_groups:
        raise CodecMismatchError(
            f"缓存组数 {cache.num_groups} 与码本组数 {codebook.num_groups} 不一致",
            expected=codebook.num_groups,
            actual=cache.num_groups,
        )
    if cache.codebook_hash != codebook.content_hash:
        raise CodecMismatchError(
            f"码本哈希不匹配: 缓存 {cache.codebook_hash:016x}，码本 {codebook.content_hash:016x}"
        )
    codes = cache.codes()
    c = codebook.config.channels_per_group
    values = np.empty((codebook.channels, cache.tokens), dtype=np.float32)
    for g in range(codebook.num_groups):
        values[g * c:(g + 1) * c] = codebook.centroids[g][codes[g]].T
    return ActivationMatrix(values)


def roundtrip(matrix: ActivationMatrix, codebook: Codebook, threads: Optional[int] = None) -> ActivationMatrix:
    """dequantize(quantize(matrix))"""
    return dequantize(quantize(matrix, codebook, threads), codebook)


# ==================== 误差 ====================

def _check_same_shape(original: ActivationMatrix, reconstructed: ActivationMatrix):
    if original.shape != reconstructed.shape:
        raise ShapeError(
            f"形状不一致: {original.shape} vs {reconstructed.shape}",
            expected=original.shape,
            actual=reconstructed.shape,
        )


def quantization_error(original: ActivationMatrix, reconstructed: ActivationMatrix) -> float:
    """差值的 Frobenius 范数平方（float64 累加）"""
    _check_same_shape(original, reconstructed)
    diff = original.values.astype(np.float64) - reconstructed.values.astype(np.float64)
    return float(np.sum(diff * diff))


def fisher_weighted_error(
    original: ActivationMatrix,
    reconstructed: ActivationMatrix,
    weights: np.ndarray,
    config: CQConfig,
) -> float:
    """
    Fisher 加权误差 Σ_g Σ_t w[g,t]·‖x − x̂‖²（即 Fisher 模式的学习目标）

    参数:
        weights: fisher_weights 的输出 (num_groups, tokens)
    """
    _check_same_shape(original, reconstructed)
    groups = _check_divisible(original.channels, config)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (groups, original.tokens):
        raise ShapeError(f"weights 形状应为 {(groups, original.tokens)}，实际 {weights.shape}")
    diff = original.values.astype(np.float64) - reconstructed.values.astype(np.float64)
    per_column = (diff * diff).reshape(groups, config.channels_per_group, original.tokens).sum(axis=1)
    return float(np.sum(weights * per_column))


# ==================== 容量核算 ====================

def codebook_param_count(dims: ModelDims, config: CQConfig) -> int:
    """
    全模型码本参数量 l·2·h·c_head·2^b（与耦合宽度无关）
    """
    dims.validate()
    if dims.head_channels % config.channels_per_group:
        raise ShapeError(
            f"单头通道数 {dims.head_channels} 不能被每组通道数 {config.channels_per_group} 整除",
            channels=dims.head_channels,
            channels_per_group=config.channels_per_group,
        )
    return dims.layers * 2 * dims.kv_heads * dims.head_channels * config.num_centroids


def codebook_bytes(dims: ModelDims, config: CQConfig, bytes_per_param: int = 2) -> int:
    """码本存储字节数（2 = 16 位计数口径，4 = 本工具的 f32 存储）"""
    if bytes_per_param not in (2, 4):
        raise ConfigError(f"bytes_per_param 只能是 2 或 4: {bytes_per_param}")
    return codebook_param_count(dims, config) * bytes_per_param


def centroid_overhead_ratio(dims: ModelDims, config: CQConfig, model_params: int) -> float:
    """码本参数量占模型权重参数量的比例"""
    if model_params <= 0:
        raise ConfigError(f"model_params 必须为正: {model_params}")
    return codebook_param_count(dims, config) / model_params


# ==================== CQCB / CQQC 文件格式 ====================

def encode_codebook(codebook: Codebook) -> list:
    """返回 CQCB 的字节块列表"""
    config = codebook.config
    mode = _LEARNING_MODES.index(config.learning_mode)
    return [
        _CQCB_HEADER.pack(
            CQCB_MAGIC, CODEC_FILE_VERSION, config.channels_per_group, config.bits_per_code,
            mode, 0, codebook.num_groups,
        ),
        codebook.centroids.astype("<f4").tobytes(order="C"),
        np.packbits(codebook.fallback.astype(np.uint8), bitorder="little").tobytes(),
    ]


def save_codebook(codebook: Codebook, destination: ByteSink) -> int:
    """写出 CQCB 文件，返回写入字节数"""
    return write_chunks(destination, encode_codebook(codebook))


def _read_codec_header(reader: ByteReader, magic: bytes):
    found = reader.read(4, "magic")
    if found != magic:
        raise BadMagicError(f"魔数应为 {magic!r}，实际 {found!r}", field="magic", offset=0)
    version = reader.unpack("H", "version")
    if version != CODEC_FILE_VERSION:
        raise UnsupportedVersionError(
            f"不支持的 {magic.decode()} 版本 {version}", field="version", offset=4
        )
    c = reader.unpack("H", "channels_per_group")
    b = reader.unpack("H", "bits_per_code")
    if c < 1 or b < 1 or b > MAX_CODE_BITS:
        raise FormatError(f"非法的 c/b 组合: c={c}, b={b}", field="config", offset=8)
    return c, b


def load_codebook(source: ByteSource) -> Codebook:
    """
    读取 CQCB 文件

    异常:
        BadMagicError / UnsupportedVersionError / TruncatedError / NonFiniteError / FormatError
    """
    reader = ByteReader(read_all(source), name="CQCB")
    c, b = _read_codec_header(reader, CQCB_MAGIC)
    mode = reader.unpack("B", "learning_mode")
    if mode >= len(_LEARNING_MODES):
        raise FormatError(f"未知的 learning_mode 编号 {mode}", field="learning_mode", offset=10)
    reader.unpack("B", "reserved")
    groups = reader.unpack("Q", "num_groups")
    if groups < 1:
        raise FormatError("num_groups 必须 ≥ 1", field="num_groups", offset=12)

    config = CQConfig(c, b, learning_mode=_LEARNING_MODES[mode])
    count = groups * config.num_centroids * c
    start = reader.offset
    centroids = reader.read_array(count, "<f4", "centroids")
    finite = np.isfinite(centroids)
    if not np.all(finite):
        offset = start + 4 * int(np.flatnonzero(~finite)[0])
        raise NonFiniteError(f"centroids 在 offset {offset} 处含非有限值", field="centroids", offset=offset)

    bitset = reader.read_array(math.ceil(groups / 8), "u1", "fallback")
    fallback = np.unpackbits(bitset, bitorder="little")
    if np.any(fallback[groups:]):
        raise FormatError("fallback 位图的填充位非零", field="fallback", offset=reader.offset - len(bitset))
    reader.expect_end()
    return Codebook(
        config,
        centroids.astype(np.float32).reshape(groups, config.num_centroids, c),
        fallback=fallback[:groups].astype(bool),
    )


def encode_cache(cache: QuantizedCache) -> list:
    """返回 CQQC 的字节块列表"""
    config = cache.config
    return [
        _CQQC_HEADER.pack(
            CQQC_MAGIC, CODEC_FILE_VERSION, config.channels_per_group, config.bits_per_code,
            cache.num_groups, cache.tokens, cache.codebook_hash,
        ),
        bytes(cache.payload),
    ]


def save_cache(cache: QuantizedCache, destination: ByteSink) -> int:
    """写出 CQQC 文件，返回写入字节数"""
    return write_chunks(destination, encode_cache(cache))


def load_cache(source: ByteSource) -> QuantizedCache:
    """
    读取 CQQC 文件

    异常:
        BadMagicError / UnsupportedVersionError / TruncatedError / FormatError
    """
    reader = ByteReader(read_all(source), name="CQQC")
    c, b = _read_codec_header(reader, CQQC_MAGIC)
    groups = reader.unpack("Q", "num_groups")
    tokens = reader.unpack("Q", "tokens")
    if groups < 1 or tokens < 1:
        raise FormatError(f"num_groups/tokens 必须为正数: {groups}×{tokens}", field="num_groups", offset=10)
    codebook_hash = reader.unpack("Q", "codebook_hash")
    payload = reader.read(groups * _packed_group_bytes(tokens, b), "payload")
    reader.expect_end()
    return QuantizedCache(CQConfig(c, b), groups, tokens, codebook_hash, payload)
