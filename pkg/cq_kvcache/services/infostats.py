"""
通道依赖分析服务
分箱熵估计（边缘熵 / 联合熵）、Pearson 相关矩阵与通道对散点数据导出

所有统计量与 token 顺序无关；分箱边界始终在被测数据上拟合。
"""

import csv
import io
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.actdata import ActivationMatrix
from ..utils.errors import ConfigError, DomainError, ShapeError
from ..utils.fileio import PathLike, atomic_write_text
from ..utils.rng import Rng
from .core import WorkerPool

logger = logging.getLogger(__name__)

DEFAULT_NUM_BINS = 16
# 超过 8 个通道时经验联合直方图严重欠采样
MAX_JOINT_GROUP = 8


# ==================== 分箱 ====================

@dataclass(frozen=True, eq=False)
class BinningSpec:
    """
    每个通道的等宽分箱

    属性:
        num_bins: 分箱数（≥ 2）
        mins / maxs: 每个通道在拟合数据上的最小 / 最大值
    """

    num_bins: int
    mins: np.ndarray
    maxs: np.ndarray

    @property
    def channels(self) -> int:
        return int(self.mins.shape[0])

    @property
    def degenerate(self) -> np.ndarray:
        """常数通道（max == min）"""
        return self.maxs <= self.mins

    def edges(self, channel: int) -> np.ndarray:
        """第 channel 个通道的 num_bins+1 个边界"""
        lo = self.mins[channel]
        hi = self.maxs[channel]
        return lo + (hi - lo) * np.arange(self.num_bins + 1, dtype=np.float64) / self.num_bins


def fit_bins(matrix: ActivationMatrix, num_bins: int = DEFAULT_NUM_BINS) -> BinningSpec:
    """
    在全部 token 上拟合每个通道的 [min, max] 等宽分箱

    参数:
        matrix: 激活矩阵
        num_bins: 分箱数
    """
    if num_bins < 2:
        raise ConfigError(f"num_bins 必须 ≥ 2: {num_bins}")
    values = matrix.values.astype(np.float64)
    return BinningSpec(int(num_bins), values.min(axis=1), values.max(axis=1))


def discretize(matrix: ActivationMatrix, bins: BinningSpec) -> np.ndarray:
    """
    把激活值映射为分箱下标

    index = clamp(floor((x − min)·num_bins/(max − min)), 0, num_bins−1)
    常数通道全部落入 0 号箱。

    返回:
        (channels, tokens) int32
    """
    if matrix.channels != bins.channels:
        raise ShapeError(
            f"分箱通道数 {bins.channels} 与矩阵通道数 {matrix.channels} 不一致",
            expected=bins.channels,
            actual=matrix.channels,
        )
    values = matrix.values.astype(np.float64)
    degenerate = bins.degenerate
    span = np.where(degenerate, 1.0, bins.maxs - bins.mins)
    scaled = (values - bins.mins[:, None]) * bins.num_bins / span[:, None]
    index = np.clip(np.floor(scaled), 0, bins.num_bins - 1).astype(np.int32)
    index[degenerate] = 0
    return index


# ==================== 熵估计 ====================

def joint_entropy(indices: np.ndarray, channel_group: Sequence[int]) -> float:
    """
    分组通道的经验联合熵（比特）

    使用稀疏直方图（只统计出现过的下标元组），空单元贡献 0。

    参数:
        indices: discretize 的输出
        channel_group: 通道编号列表（1..8 个）
    """
    group = [int(c) for c in channel_group]
    if not group:
        raise DomainError("channel_group 不能为空")
    if len(group) > MAX_JOINT_GROUP:
        raise DomainError(
            f"分组大小 {len(group)} 超过上限 {MAX_JOINT_GROUP}",
            group_size=len(group),
        )
    channels = indices.shape[0]
    if any(c < 0 or c >= channels for c in group):
        raise ShapeError(f"通道编号越界: {group}（共 {channels} 个通道）")

    tokens = indices.shape[1]
    if len(group) == 1:
        counts = np.bincount(indices[group[0]])
        counts = counts[counts > 0]
    else:
        tuples = np.ascontiguousarray(indices[group].T)
        _, counts = np.unique(tuples, axis=0, return_counts=True)

    p = counts.astype(np.float64) / tokens
    return float(-np.sum(p * np.log2(p)))


def marginal_entropies(indices: np.ndarray) -> np.ndarray:
    """每个通道的边缘熵（比特）"""
    return np.array([joint_entropy(indices, [c]) for c in range(indices.shape[0])], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class EntropyReport:
    """
    单个分组大小的熵报告

    属性:
        group_size: 每组通道数
        num_bins: 分箱数
        joint_bits: 每组联合熵
        sum_marginal_bits: 每组边缘熵之和
        marginal_bits: 参与分组的每个通道的边缘熵
        dropped_channels: 无法整除而被丢弃的尾部通道数
    """

    group_size: int
    num_bins: int
    joint_bits: np.ndarray
    sum_marginal_bits: np.ndarray
    marginal_bits: np.ndarray
    dropped_channels: int = 0

    @property
    def num_groups(self) -> int:
        return int(self.joint_bits.shape[0])

    @property
    def mean_joint(self) -> float:
        return float(np.mean(self.joint_bits))

    @property
    def std_joint(self) -> float:
        return float(np.std(self.joint_bits))

    @property
    def mean_sum_marginal(self) -> float:
        return float(np.mean(self.sum_marginal_bits))

    @property
    def std_sum_marginal(self) -> float:
        return float(np.std(self.sum_marginal_bits))

    @property
    def mean_marginal(self) -> float:
        return float(np.mean(self.marginal_bits))

    @property
    def std_marginal(self) -> float:
        return float(np.std(self.marginal_bits))

    @property
    def upper_bound(self) -> float:
        """group_size·log2(num_bins)"""
        return self.group_size * float(np.log2(self.num_bins))

    def summary(self) -> Dict[str, float]:
        """稳定键顺序的摘要"""
        return {
            "group_size": self.group_size,
            "num_groups": self.num_groups,
            "mean_joint_bits": self.mean_joint,
            "std_joint_bits": self.std_joint,
            "mean_sum_marginal_bits": self.mean_sum_marginal,
            "std_sum_marginal_bits": self.std_sum_marginal,
            "dropped_channels": self.dropped_channels,
        }


def entropy_sweep(
    matrix: ActivationMatrix,
    group_sizes: Iterable[int],
    num_bins: int = DEFAULT_NUM_BINS,
    threads: Optional[int] = None,
    on_group_done: Optional[Callable[[float], None]] = None,
) -> List[EntropyReport]:
    """
    对多个分组大小做联合熵 vs 边缘熵之和的扫描

    通道按连续、不重叠的方式分组；无法整除时丢弃尾部通道并记录在报告中。

    参数:
        matrix: 激活矩阵
        group_sizes: 分组大小集合
        num_bins: 分箱数
        threads: 并行线程数
        on_group_done: 每完成一组的回调

    返回:
        按分组大小升序排列的 EntropyReport 列表
    """
    sizes = sorted({int(g) for g in group_sizes})
    if not sizes:
        raise ConfigError("group_sizes 不能为空")
    for g in sizes:
        if g < 1 or g > MAX_JOINT_GROUP:
            raise DomainError(f"分组大小必须在 [1, {MAX_JOINT_GROUP}] 内: {g}", group_size=g)
        if g > matrix.channels:
            raise ShapeError(f"分组大小 {g} 超过通道数 {matrix.channels}")

    bins = fit_bins(matrix, num_bins)
    indices = discretize(matrix, bins)
    marginals = marginal_entropies(indices)

    reports = []
    for g in sizes:
        n_groups = matrix.channels // g
        used = n_groups * g
        dropped = matrix.channels - used
        if dropped:
            logger.warning("通道数 %d 不能被分组大小 %d 整除，丢弃尾部 %d 个通道", matrix.channels, g, dropped)

        groups = [list(range(i * g, (i + 1) * g)) for i in range(n_groups)]
        joint = WorkerPool.map_ordered(
            lambda grp: joint_entropy(indices, grp), groups, threads, on_done=on_group_done
        )
        sum_marginal = marginals[:used].reshape(n_groups, g).sum(axis=1)
        reports.append(EntropyReport(
            group_size=g,
            num_bins=bins.num_bins,
            joint_bits=np.asarray(joint, dtype=np.float64),
            sum_marginal_bits=sum_marginal,
            marginal_bits=marginals[:used].copy(),
            dropped_channels=dropped,
        ))
    return reports


# ==================== 相关性 ====================

@dataclass(frozen=True, eq=False)
class CorrelationResult:
    """
    Pearson 相关矩阵

    属性:
        matrix: (L, L) float64，对称且对角线为 1
        degenerate: (L,) bool，零方差通道
    """

    matrix: np.ndarray
    degenerate: np.ndarray

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])


def correlation_matrix(matrix: ActivationMatrix, channel_limit: int = 32) -> CorrelationResult:
    """
    前 channel_limit 个通道的 Pearson 相关矩阵

    零方差通道的非对角元素记为 0，并在 degenerate 中标记。
    """
    if channel_limit < 1 or channel_limit > matrix.channels:
        raise ShapeError(
            f"channel_limit={channel_limit} 必须在 [1, {matrix.channels}] 内",
            channel_limit=channel_limit,
            channels=matrix.channels,
        )
    if matrix.tokens < 2:
        raise DomainError(f"相关系数至少需要 2 个 token，实际 {matrix.tokens}")

    x = matrix.values[:channel_limit].astype(np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=1))
    degenerate = norms == 0
    safe = np.where(degenerate, 1.0, norms)

    corr = (centered @ centered.T) / np.outer(safe, safe)
    corr = np.clip(corr, -1.0, 1.0)
    corr[degenerate, :] = 0.0
    corr[:, degenerate] = 0.0

    # 以上三角为准，保证精确对称
    upper = np.triu(corr, 1)
    corr = upper + upper.T
    np.fill_diagonal(corr, 1.0)
    return CorrelationResult(corr, degenerate)


def channel_pair_scatter(
    matrix: ActivationMatrix,
    pairs: Sequence[Tuple[int, int]],
    max_points: int = 2000,
    seed: int = 0,
) -> Dict[Tuple[int, int], np.ndarray]:
    """
    导出通道对的二维散点数据（用于外部绘图）

    token 子样本对所有通道对相同：按均匀随机键排序取前 max_points 个，再按原顺序排列。

    返回:
        {(a, b): (n, 2) float32}
    """
    if max_points < 1:
        raise ConfigError(f"max_points 必须 ≥ 1: {max_points}")
    for a, b in pairs:
        if not (0 <= a < matrix.channels and 0 <= b < matrix.channels):
            raise ShapeError(f"通道对 ({a}, {b}) 越界（共 {matrix.channels} 个通道）")

    if matrix.tokens <= max_points:
        tokens = np.arange(matrix.tokens)
    else:
        keys = Rng(seed).uniform(matrix.tokens)
        tokens = np.sort(np.argsort(keys, kind="stable")[:max_points])

    return {
        (int(a), int(b)): np.stack([matrix.values[a, tokens], matrix.values[b, tokens]], axis=1)
        for a, b in pairs
    }


# ==================== CSV 导出 ====================

ENTROPY_CSV_COLUMNS = ("group_size", "group_index", "joint_bits", "sum_marginal_bits")
SCATTER_CSV_COLUMNS = ("channel_a", "channel_b", "x", "y")


def entropy_csv(reports: Sequence[EntropyReport]) -> str:
    """每组一行: group_size, group_index, joint_bits, sum_marginal_bits"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(ENTROPY_CSV_COLUMNS)
    for report in reports:
        for i in range(report.num_groups):
            writer.writerow([
                report.group_size,
                i,
                repr(float(report.joint_bits[i])),
                repr(float(report.sum_marginal_bits[i])),
            ])
    return buffer.getvalue()


def correlation_csv(result: CorrelationResult) -> str:
    """相关矩阵: 首行为通道编号，每行首列为通道编号"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["channel"] + list(range(result.size)))
    for i in range(result.size):
        writer.writerow([i] + [repr(float(v)) for v in result.matrix[i]])
    return buffer.getvalue()


def scatter_csv(scatter: Dict[Tuple[int, int], np.ndarray]) -> str:
    """散点数据: channel_a, channel_b, x, y"""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SCATTER_CSV_COLUMNS)
    for (a, b), points in scatter.items():
        for x, y in points:
            writer.writerow([a, b, repr(float(x)), repr(float(y))])
    return buffer.getvalue()


def write_entropy_csv(reports: Sequence[EntropyReport], path: PathLike) -> int:
    return atomic_write_text(path, entropy_csv(reports))


def write_correlation_csv(result: CorrelationResult, path: PathLike) -> int:
    return atomic_write_text(path, correlation_csv(result))


def write_scatter_csv(scatter: Dict[Tuple[int, int], np.ndarray], path: PathLike) -> int:
    return atomic_write_text(path, scatter_csv(scatter))
