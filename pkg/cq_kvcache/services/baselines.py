"""
基线编解码服务
逐通道非均匀量化（CQ-1c<b>b 的薄封装）与 min-max 仿射整数量化，用于同等比特预算下的误差对比
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..utils.actdata import ActivationMatrix
from ..utils.errors import ConfigError, ShapeError
from .cqcodec import CQConfig, Codebook, QuantizedCache, dequantize, learn_codebook, quantize

AXIS_CHANNEL = "channel"
AXIS_TOKEN = "token"
# 每个切片的附加信息: fp16 最小值 + fp16 步长
SIDE_INFO_BYTES_PER_SLICE = 4


# ---逐通道非均匀量化---

@dataclass(frozen=True, eq=False)
class ChannelwiseResult:
    """逐通道非均匀量化结果"""

    codebook: Codebook
    cache: QuantizedCache
    reconstruction: ActivationMatrix

    @property
    def codes(self) -> np.ndarray:
        """(channels, tokens) int64"""
        return self.cache.codes()

    @property
    def centroids(self) -> np.ndarray:
        """(channels, 2^bits) float32，每个通道一组标量质心"""
        return self.codebook.centroids[:, :, 0]


def channelwise_nonuniform(
    matrix: ActivationMatrix,
    bits: int,
    seed: int = 0,
    kmeans_iters: int = 100,
    threads: Optional[int] = None,
) -> ChannelwiseResult:
    """
    每个通道独立学习 2^bits 个标量质心

    与 CQ-1c<bits>b 逐位等价（直接复用 cqcodec 的学习与量化）。
    """
    if bits < 1 or bits > 8:
        raise ConfigError(f"逐通道量化的 bits 必须在 [1, 8] 内: {bits}")
    config = CQConfig(1, bits, kmeans_iters=kmeans_iters, seed=seed)
    codebook = learn_codebook(matrix, config, threads)
    cache = quantize(matrix, codebook, threads)
    return ChannelwiseResult(codebook, cache, dequantize(cache, codebook))


# ---min-max 整数量化---

@dataclass(frozen=True)
class UniformQuantConfig:
    """
    仿射整数量化配置

    属性:
        bits: 1..8
        axis: channel（每个通道沿 token 方向一个切片）| token（每个 token 沿通道方向一个切片）
        group_size: 把每个切片再细分为 group_size 个元素的小组（须整除切片长度）
    """

    bits: int
    axis: str = AXIS_CHANNEL
    group_size: Optional[int] = None

    def __post_init__(self):
        if self.bits < 1 or self.bits > 8:
            raise ConfigError(f"整数量化的 bits 必须在 [1, 8] 内: {self.bits}")
        if self.axis not in (AXIS_CHANNEL, AXIS_TOKEN):
            raise ConfigError(f"未知的量化轴: {self.axis}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError(f"group_size 必须 ≥ 1: {self.group_size}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def label(self) -> str:
        text = f"INT{self.bits}-{self.axis}"
        return text + (f"-gs{self.group_size}" if self.group_size else "")


@dataclass(frozen=True, eq=False)
class UniformQuantResult:
    """
    整数量化结果

    属性:
        reconstruction: 重建矩阵
        codes: (channels, tokens) uint8
        code_bits: 码比特总数
        side_info_bytes: 每个切片的 min/scale 附加字节总数（单独核算）
    """

    reconstruction: ActivationMatrix
    codes: np.ndarray
    code_bits: int
    side_info_bytes: int

    @property
    def bits_per_fpn(self) -> float:
        return self.code_bits / self.codes.size

    @property
    def effective_bits_per_fpn(self) -> float:
        """计入附加信息后的平均比特数"""
        return (self.code_bits + 8 * self.side_info_bytes) / self.codes.size


def round_half_away(x: np.ndarray) -> np.ndarray:
    """四舍五入，0.5 远离 0"""
    return np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))


def _to_slices(values: np.ndarray, config: UniformQuantConfig) -> np.ndarray:
    """按轴与 group_size 展开为 (n_slices, slice_len)"""
    data = values if config.axis == AXIS_CHANNEL else values.T
    length = data.shape[1]
    size = config.group_size or length
    if length % size:
        raise ShapeError(
            f"group_size={size} 不能整除切片长度 {length}",
            group_size=size,
            slice_length=length,
        )
    return data.reshape(-1, size)


def _from_slices(slices: np.ndarray, shape: tuple, config: UniformQuantConfig) -> np.ndarray:
    if config.axis == AXIS_CHANNEL:
        return slices.reshape(shape)
    return slices.reshape(shape[1], shape[0]).T


ChannelRanges = Tuple[np.ndarray, np.ndarray]


def fit_channel_ranges(calibration: ActivationMatrix) -> ChannelRanges:
    """
    在校准数据上取每个通道的 (min, max)

    返回:
        (lo, hi)，均为 (channels,) float64
    """
    values = calibration.values.astype(np.float64)
    return values.min(axis=1), values.max(axis=1)


def uniform_int(
    matrix: ActivationMatrix,
    config: UniformQuantConfig,
    ranges: Optional[ChannelRanges] = None,
) -> UniformQuantResult:
    """
    非对称 min-max 仿射量化

    每个切片: scale = (max − min)/(2^bits − 1)，code = round((x − min)/scale)，
    重建 = min + code·scale；常数切片精确重建。

    ranges 给定时（仅限 channel 轴、不分组），min/max 取自校准数据而不是被量化矩阵，
    超出范围的值截断到端点；每个元素的结果只取决于它自身。
    """
    slices = _to_slices(matrix.values.astype(np.float64), config)
    if ranges is None:
        lo = slices.min(axis=1, keepdims=True)
        hi = slices.max(axis=1, keepdims=True)
    else:
        if config.axis != AXIS_CHANNEL or config.group_size is not None:
            raise ConfigError(f"校准范围只适用于不分组的 channel 轴量化: {config.label}")
        lo = np.asarray(ranges[0], dtype=np.float64).reshape(-1, 1)
        hi = np.asarray(ranges[1], dtype=np.float64).reshape(-1, 1)
        if lo.shape[0] != matrix.channels or hi.shape[0] != matrix.channels:
            raise ShapeError(
                f"校准范围长度 {lo.shape[0]} 与通道数 {matrix.channels} 不一致",
                channels=matrix.channels,
            )
    scale = (hi - lo) / config.levels
    degenerate = scale == 0
    safe = np.where(degenerate, 1.0, scale)

    codes = np.clip(round_half_away((slices - lo) / safe), 0, config.levels)
    codes = np.where(degenerate, 0.0, codes)
    recon = lo + codes * scale

    shape = matrix.shape
    return UniformQuantResult(
        reconstruction=ActivationMatrix(_from_slices(recon, shape, config).astype(np.float32)),
        codes=np.ascontiguousarray(_from_slices(codes, shape, config)).astype(np.uint8),
        code_bits=matrix.values.size * config.bits,
        side_info_bytes=slices.shape[0] * SIDE_INFO_BYTES_PER_SLICE,
    )
