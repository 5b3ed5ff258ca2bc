"""
激活数据模块
定义激活矩阵类型、ACTD 二进制格式、合成相关激活数据与 KV 缓存容量计算

ACTD 格式（小端，无填充，无校验）:
    magic "ACTD" (4) | version u16=1 | flags u16 (bit0: 含梯度) |
    channels u64 | tokens u64 |
    values (channels·tokens × f32, 通道优先) | [gradients (同布局)]
"""

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DomainError,
    FormatError,
    MissingGradientError,
    NonFiniteError,
    ShapeError,
    UnsupportedVersionError,
)
from .fileio import ByteReader, ByteSink, ByteSource, read_all, write_chunks
from .rng import Rng, check_seed, derive_seed

ACTD_MAGIC = b"ACTD"
ACTD_VERSION = 1
ACTD_FLAG_GRADIENTS = 0x0001
_ACTD_HEADER = struct.Struct("<4sHHQQ")
ACTD_HEADER_SIZE = _ACTD_HEADER.size  # 24

MIXING_DENSE = "dense"
MIXING_IDENTITY = "identity"


def _frozen_f32(array, name: str) -> np.ndarray:
    """转换为只读的 C 连续 float32 副本，并校验有限性"""
    out = np.array(array, dtype=np.float32, order="C", copy=True)
    if out.ndim != 2:
        raise ShapeError(f"{name} 必须是二维 channels×tokens 数组，实际维度 {out.ndim}")
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out.ravel()))[0])
        raise NonFiniteError(f"{name} 含非有限值", field=name, index=bad)
    out.flags.writeable = False
    return out


# ==================== 领域类型 ====================

@dataclass(frozen=True, eq=False)
class ActivationMatrix:
    """
    channels × tokens 的 key/value 激活矩阵（行为通道），可附带同形状的梯度矩阵

    构造后不可变：内部数组是只读副本。
    """

    values: np.ndarray
    gradients: Optional[np.ndarray] = None

    def __post_init__(self):
        values = _frozen_f32(self.values, "values")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ShapeError(f"channels 与 tokens 必须为正数，实际 {values.shape}")
        object.__setattr__(self, "values", values)

        if self.gradients is not None:
            gradients = _frozen_f32(self.gradients, "gradients")
            if gradients.shape != values.shape:
                raise ShapeError(
                    f"gradients 形状 {gradients.shape} 与 values 形状 {values.shape} 不一致"
                )
            object.__setattr__(self, "gradients", gradients)

    @property
    def channels(self) -> int:
        return int(self.values.shape[0])

    @property
    def tokens(self) -> int:
        return int(self.values.shape[1])

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def has_gradients(self) -> bool:
        return self.gradients is not None

    def without_gradients(self) -> "ActivationMatrix":
        return ActivationMatrix(self.values)

    def slice_tokens(self, stop: int) -> "ActivationMatrix":
        """取前 stop 个 token（因果前缀）"""
        grads = None if self.gradients is None else self.gradients[:, :stop]
        return ActivationMatrix(self.values[:, :stop], grads)

    def equals(self, other: "ActivationMatrix") -> bool:
        """逐位比较（含梯度）"""
        if not isinstance(other, ActivationMatrix) or self.shape != other.shape:
            return False
        if self.values.tobytes() != other.values.tobytes():
            return False
        if self.has_gradients != other.has_gradients:
            return False
        return self.gradients is None or self.gradients.tobytes() == other.gradients.tobytes()


@dataclass(frozen=True)
class SynthSpec:
    """
    合成相关激活数据的参数

    每个 token 列为 M·z + ε，z 为 latent_rank 维标准正态，ε 为各向同性噪声
    """

    channels: int
    tokens: int
    latent_rank: int = 2
    noise_sigma: float = 0.1
    mixing_scale: float = 1.0
    seed: int = 0
    mixing: str = MIXING_DENSE

    def validate(self) -> "SynthSpec":
        if self.channels < 1 or self.tokens < 1:
            raise ConfigError(f"channels 与 tokens 必须为正数: channels={self.channels}, tokens={self.tokens}")
        if self.latent_rank < 1:
            raise ConfigError(f"latent_rank 必须 ≥ 1: {self.latent_rank}")
        if self.latent_rank > self.channels:
            raise ConfigError(
                f"latent_rank={self.latent_rank} 超过 channels={self.channels}",
                latent_rank=self.latent_rank,
                channels=self.channels,
            )
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ConfigError(f"noise_sigma 必须是非负有限数: {self.noise_sigma}")
        if not (self.mixing_scale > 0 and math.isfinite(self.mixing_scale)):
            raise ConfigError(f"mixing_scale 必须是正有限数: {self.mixing_scale}")
        if self.mixing not in (MIXING_DENSE, MIXING_IDENTITY):
            raise ConfigError(f"未知的 mixing 方式: {self.mixing}")
        if self.mixing == MIXING_IDENTITY and self.latent_rank != self.channels:
            raise ConfigError(
                f"identity 混合要求 latent_rank == channels ({self.latent_rank} != {self.channels})"
            )
        check_seed(self.seed)
        return self


@dataclass(frozen=True)
class ModelDims:
    """模型维度: 层数 l、KV 头数 h、单头通道数 c、最大上下文 n"""

    layers: int
    kv_heads: int
    head_channels: int
    max_context: int = 2048

    def validate(self) -> "ModelDims":
        for name in ("layers", "kv_heads", "head_channels", "max_context"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} 必须 ≥ 1: {getattr(self, name)}")
        return self


# ==================== ACTD 文件格式 ====================

def encode_activations(matrix: ActivationMatrix) -> list:
    """返回 ACTD 的字节块列表（头部、values、可选 gradients）"""
    flags = ACTD_FLAG_GRADIENTS if matrix.has_gradients else 0
    chunks = [
        _ACTD_HEADER.pack(ACTD_MAGIC, ACTD_VERSION, flags, matrix.channels, matrix.tokens),
        matrix.values.astype("<f4").tobytes(order="C"),
    ]
    if matrix.has_gradients:
        chunks.append(matrix.gradients.astype("<f4").tobytes(order="C"))
    return chunks


def save_activations(matrix: ActivationMatrix, destination: ByteSink) -> int:
    """
    以 ACTD 格式写出激活矩阵

    参数:
        matrix: 激活矩阵
        destination: 文件路径或可写二进制流

    返回:
        int: 写入字节数（2×3 无梯度为 48，含梯度为 72）
    """
    return write_chunks(destination, encode_activations(matrix))


def _read_payload(reader: ByteReader, count: int, field_name: str) -> np.ndarray:
    start = reader.offset
    payload = reader.read_array(count, "<f4", field_name)
    finite = np.isfinite(payload)
    if not np.all(finite):
        index = int(np.flatnonzero(~finite)[0])
        offset = start + 4 * index
        raise NonFiniteError(
            f"{field_name} 在 offset {offset} 处含非有限值",
            field=field_name,
            offset=offset,
        )
    return payload.astype(np.float32)


def load_activations(source: ByteSource) -> ActivationMatrix:
    """
    读取 ACTD 文件

    参数:
        source: 文件路径、字节串或可读二进制流

    返回:
        ActivationMatrix: 与写入时逐位一致

    异常:
        BadMagicError / UnsupportedVersionError / TruncatedError / NonFiniteError
    """
    reader = ByteReader(read_all(source), name="ACTD")
    magic = reader.read(4, "magic")
    if magic != ACTD_MAGIC:
        raise BadMagicError(f"魔数应为 {ACTD_MAGIC!r}，实际 {magic!r}", field="magic", offset=0)
    version = reader.unpack("H", "version")
    if version != ACTD_VERSION:
        raise UnsupportedVersionError(f"不支持的 ACTD 版本 {version}", field="version", offset=4)
    flags = reader.unpack("H", "flags")
    if flags & ~ACTD_FLAG_GRADIENTS:
        raise FormatError(f"未知的 flags 位 0x{flags:04x}", field="flags", offset=6)
    channels = reader.unpack("Q", "channels")
    tokens = reader.unpack("Q", "tokens")
    if channels < 1 or tokens < 1:
        raise FormatError(f"channels/tokens 必须为正数: {channels}×{tokens}", field="channels", offset=8)

    count = channels * tokens
    values = _read_payload(reader, count, "values").reshape(channels, tokens)
    gradients = None
    if flags & ACTD_FLAG_GRADIENTS:
        gradients = _read_payload(reader, count, "gradients").reshape(channels, tokens)
    reader.expect_end()
    return ActivationMatrix(values, gradients)


# ==================== 合成数据 ====================

def _mixing_matrix(spec: SynthSpec, rng: Rng) -> np.ndarray:
    if spec.mixing == MIXING_IDENTITY:
        return np.eye(spec.channels, dtype=np.float64) * spec.mixing_scale
    return rng.normal(spec.channels * spec.latent_rank).reshape(spec.channels, spec.latent_rank) * spec.mixing_scale


def _synth_values(spec: SynthSpec) -> np.ndarray:
    """
    按固定顺序消耗随机流: M（dense 时，行优先）→ Z（r×tokens，行优先）→ ε（channels×tokens）
    """
    rng = Rng(spec.seed)
    mixing = _mixing_matrix(spec, rng)
    latent = rng.normal(spec.latent_rank * spec.tokens).reshape(spec.latent_rank, spec.tokens)
    noise = rng.normal(spec.channels * spec.tokens).reshape(spec.channels, spec.tokens)

    # 逐个潜变量累加（逐元素运算，不依赖 BLAS 的求和顺序）
    values = np.zeros((spec.channels, spec.tokens), dtype=np.float64)
    for k in range(spec.latent_rank):
        values += mixing[:, k:k + 1] * latent[k:k + 1, :]
    values += spec.noise_sigma * noise
    return values.astype(np.float32)


def synth_correlated(spec: SynthSpec) -> ActivationMatrix:
    """
    生成低秩相关的合成激活矩阵（对固定 spec 逐位确定）

    参数:
        spec: 合成参数

    返回:
        ActivationMatrix: 无梯度
    """
    spec.validate()
    return ActivationMatrix(_synth_values(spec))


def synth_with_gradients(
    spec: SynthSpec,
    hot_fraction: float = 0.1,
    hot_scale: float = 10.0,
    cold_scale: float = 0.1,
) -> ActivationMatrix:
    """
    生成带合成梯度的激活矩阵，梯度集中在一小部分 token 上

    values 与 synth_correlated(spec) 完全一致；梯度流使用 derive_seed(seed, 1)。
    热点 token 为按均匀随机键排序后的前 ceil(hot_fraction·tokens) 个。

    参数:
        hot_fraction: 热点 token 比例 (0,1]
        hot_scale: 热点 token 的梯度标准差
        cold_scale: 其余 token 的梯度标准差
    """
    spec.validate()
    if not 0 < hot_fraction <= 1:
        raise ConfigError(f"hot_fraction 必须在 (0,1] 内: {hot_fraction}")
    if hot_scale < 0 or cold_scale < 0:
        raise ConfigError("梯度尺度必须非负")

    rng = Rng(derive_seed(spec.seed, 1))
    keys = rng.uniform(spec.tokens)
    hot_count = max(1, math.ceil(hot_fraction * spec.tokens))
    hot = np.zeros(spec.tokens, dtype=bool)
    hot[np.argsort(keys, kind="stable")[:hot_count]] = True

    scale = np.where(hot, hot_scale, cold_scale)
    gradients = rng.normal(spec.channels * spec.tokens).reshape(spec.channels, spec.tokens) * scale[None, :]
    return ActivationMatrix(_synth_values(spec), gradients.astype(np.float32))


def hot_token_mask(matrix: ActivationMatrix, quantile: float = 0.9) -> np.ndarray:
    """
    按每个 token 的梯度平方和选出高权重 token

    返回:
        bool 数组，权重 ≥ 给定分位数的 token 为 True
    """
    if matrix.gradients is None:
        raise MissingGradientError("hot_token_mask 需要梯度")
    weight = np.sum(matrix.gradients.astype(np.float64) ** 2, axis=0)
    return weight >= np.quantile(weight, quantile)


# ==================== 容量计算 ====================

def kv_cache_bytes(dims: ModelDims, batch: int, tokens: int, bits_per_fpn) -> int:
    """
    KV 缓存字节数: ceil(b·n·l·2·h·c · bits_per_fpn / 8)

    参数:
        dims: 模型维度
        batch: batch 大小 b
        tokens: 序列长度 n（≤ max_context）
        bits_per_fpn: 每个浮点数的平均比特数（可为小数，如 1.25）
    """
    dims.validate()
    if batch < 0 or tokens < 0:
        raise DomainError(f"batch 与 tokens 必须非负: batch={batch}, tokens={tokens}")
    if tokens > dims.max_context:
        raise DomainError(
            f"tokens={tokens} 超过 max_context={dims.max_context}",
            tokens=tokens,
            max_context=dims.max_context,
        )
    bits = Fraction(bits_per_fpn)
    if bits <= 0:
        raise ConfigError(f"bits_per_fpn 必须为正: {bits_per_fpn}")
    fpn = batch * tokens * dims.layers * 2 * dims.kv_heads * dims.head_channels
    return math.ceil(fpn * bits / 8)


def describe_activations(matrix: ActivationMatrix) -> dict:
    """返回激活矩阵的摘要统计（用于 info 子命令）"""
    values = matrix.values.astype(np.float64)
    summary = {
        "channels": matrix.channels,
        "tokens": matrix.tokens,
        "has_gradients": matrix.has_gradients,
        "min": float(values.min()),
        "max": float(values.max()),
        "mean": float(values.mean()),
        "std": float(values.std()),
    }
    if matrix.has_gradients:
        summary["grad_sq_sum"] = float(np.sum(matrix.gradients.astype(np.float64) ** 2))
    return summary
