"""
加权 k-means 聚类服务
k-means++ 初始化 + Lloyd 迭代，是均匀 / Fisher 两种质心学习的优化内核

约定:
- 输入坐标为 float32，距离、均值与目标函数一律以 float64 累加
- 最近质心平局时取下标最小者
- 收敛判据为"分配不再变化"，不使用目标函数阈值
- 空簇修复: 把该质心重置为"加权距离最大"的正权重点
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np

from ..utils.errors import ConfigError, DegenerateInputError, NonFiniteError, ShapeError
from ..utils.rng import Rng

logger = logging.getLogger(__name__)

# 单个距离块的元素上限（点数 × 质心数 × 维度）
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True, eq=False)
class PointSet:
    """
    带权点集

    属性:
        points: (n_pts, dim) float32
        weights: (n_pts,) float64，非负且至少一个为正
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float32, copy=True)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise ShapeError(f"points 必须是非空的 (n_pts, dim) 数组，实际形状 {points.shape}")
        weights = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if weights.shape[0] != points.shape[0]:
            raise ShapeError(f"weights 长度 {weights.shape[0]} 与点数 {points.shape[0]} 不一致")
        if not np.all(np.isfinite(points)):
            raise NonFiniteError("points 含非有限坐标")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ConfigError("weights 必须是非负有限数")
        if not np.any(weights > 0):
            raise DegenerateInputError("至少需要一个正权重点")
        points.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "PointSet":
        """所有权重为 1 的点集"""
        points = np.asarray(points)
        n = points.shape[0]
        return cls(points, np.ones(n, dtype=np.float64))

    @property
    def n_pts(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])

    def distinct_positive(self) -> np.ndarray:
        """正权重点中的不同点（按字典序）"""
        return np.unique(self.points[self.weights > 0], axis=0)


@dataclass(frozen=True, eq=False)
class ClusteringResult:
    """
    聚类结果

    属性:
        centroids: (k, dim) float64
        assignments: (n_pts,) int64，取值 [0, k)
        objective: Σ w·‖x − c[assign]‖²
        iterations_run: 实际执行的 Lloyd 迭代次数
        history: 初始化后以及每次迭代后的目标函数值
        converged: 是否因分配不变而停止
        shortfall: k 超过不同点数量时为 True（多余质心为最后一个点的副本）
    """

    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    iterations_run: int
    history: Tuple[float, ...]
    converged: bool
    shortfall: bool = False

    @property
    def k(self) -> int:
        return int(self.centroids.shape[0])


# ---距离与分配---

def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """
    逐点到每个质心的平方欧氏距离（直接差分，不用展开式）

    按维度顺序逐项累加，对同一个点的结果与分块方式无关，
    保证精确匹配与平局判定可复现。
    """
    diff = points[:, 0:1] - centroids[None, :, 0]
    d2 = diff * diff
    for d in range(1, points.shape[1]):
        diff = points[:, d:d + 1] - centroids[None, :, d]
        d2 += diff * diff
    return d2


def nearest_centroids(points: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    分块计算最近质心

    参数:
        points: (n, dim) float64
        centroids: (k, dim) float64

    返回:
        (labels int64, 最小平方距离 float64)，平局取最小下标
    """
    n = points.shape[0]
    k, dim = centroids.shape
    labels = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(k * dim, 1))
    for start in range(0, n, step):
        stop = min(n, start + step)
        d2 = squared_distances(points[start:stop], centroids)
        idx = np.argmin(d2, axis=1)
        labels[start:stop] = idx
        best[start:stop] = d2[np.arange(stop - start), idx]
    return labels, best


def weighted_objective(weights: np.ndarray, min_d2: np.ndarray) -> float:
    """Σ w·d²（float64，固定求和顺序）"""
    return float(np.sum(weights * min_d2))


# ---k-means++ 初始化---

def _sample_index(mass: np.ndarray, rng: Rng) -> int:
    """
    按 mass 比例抽取一个下标

    区间约定 [cum[i-1], cum[i])；舍入落到末尾时回退到最后一个正质量下标
    """
    cum = np.cumsum(mass)
    total = cum[-1]
    u = rng.uniform_scalar() * total
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= mass.shape[0] or mass[idx] <= 0:
        positive = np.flatnonzero(mass > 0)
        idx = int(positive[-1])
    return idx


def kmeans_pp_init(points: PointSet, k: int, seed: int) -> np.ndarray:
    """
    加权 k-means++ 初始化

    第一个质心按权重抽样；之后每个质心按 权重 × 到最近已选质心的平方距离 抽样。

    参数:
        points: 带权点集
        k: 质心数（≥ 1，且不超过正权重不同点数）
        seed: 64 位种子

    返回:
        (k, dim) float64 质心

    异常:
        DegenerateInputError: k 超过正权重不同点的数量
    """
    if k < 1:
        raise ConfigError(f"k 必须 ≥ 1: {k}")
    distinct = points.distinct_positive().shape[0]
    if k > distinct:
        raise DegenerateInputError(
            f"k={k} 超过正权重不同点的数量 {distinct}", k=k, distinct=distinct
        )

    rng = Rng(seed)
    x = points.points.astype(np.float64)
    w = points.weights

    centroids = np.empty((k, points.dim), dtype=np.float64)
    first = _sample_index(w, rng)
    centroids[0] = x[first]
    closest = squared_distances(x, centroids[0:1])[:, 0]

    for c in range(1, k):
        idx = _sample_index(w * closest, rng)
        centroids[c] = x[idx]
        closest = np.minimum(closest, squared_distances(x, centroids[c:c + 1])[:, 0])
    return centroids


# ---Lloyd 迭代---

def _update_centroids(
    x: np.ndarray,
    w: np.ndarray,
    labels: np.ndarray,
    min_d2: np.ndarray,
    centroids: np.ndarray,
) -> np.ndarray:
    """
    加权均值更新；空簇（权重和为 0）重置到加权距离最大的正权重点
    """
    k, dim = centroids.shape
    weight_sum = np.bincount(labels, weights=w, minlength=k)
    sums = np.empty((k, dim), dtype=np.float64)
    for d in range(dim):
        sums[:, d] = np.bincount(labels, weights=w * x[:, d], minlength=k)

    updated = centroids.copy()
    filled = weight_sum > 0
    updated[filled] = sums[filled] / weight_sum[filled, None]

    empty = np.flatnonzero(~filled)
    if empty.size:
        score = np.where(w > 0, w * min_d2, -1.0)
        for j in empty:
            idx = int(np.argmax(score))
            if score[idx] <= 0:
                break  # 所有正权重点已被精确拟合，保留原质心
            updated[j] = x[idx]
            score[idx] = -1.0
    return updated


def weighted_kmeans(points: PointSet, k: int, max_iters: int, seed: int) -> ClusteringResult:
    """
    加权 k-means

    参数:
        points: 带权点集
        k: 质心数
        max_iters: 最大迭代次数（≥ 1）
        seed: k-means++ 初始化种子

    返回:
        ClusteringResult；k 超过不同点数时返回全部不同点 + 最后一个点的重复副本
    """
    if k < 1:
        raise ConfigError(f"k 必须 ≥ 1: {k}")
    if max_iters < 1:
        raise ConfigError(f"max_iters 必须 ≥ 1: {max_iters}")

    x = points.points.astype(np.float64)
    w = points.weights

    distinct = points.distinct_positive()
    if k > distinct.shape[0]:
        logger.warning("k=%d 超过不同点数量 %d，使用重复质心补齐", k, distinct.shape[0])
        pad = np.repeat(distinct[-1:], k - distinct.shape[0], axis=0)
        centroids = np.vstack([distinct, pad]).astype(np.float64)
        labels, min_d2 = nearest_centroids(x, centroids)
        objective = weighted_objective(w, min_d2)
        return ClusteringResult(centroids, labels, objective, 0, (objective,), True, shortfall=True)

    centroids = kmeans_pp_init(points, k, seed)
    labels, min_d2 = nearest_centroids(x, centroids)
    history = [weighted_objective(w, min_d2)]
    converged = False
    iterations = 0

    for _ in range(max_iters):
        centroids = _update_centroids(x, w, labels, min_d2, centroids)
        new_labels, min_d2 = nearest_centroids(x, centroids)
        history.append(weighted_objective(w, min_d2))
        iterations += 1
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels

    if not converged:
        # 迭代用尽: 质心对齐到返回的分配，末次目标值随之更新（不会变大）
        centroids = _update_centroids(x, w, labels, min_d2, centroids)
        min_d2 = ((x - centroids[labels]) ** 2).sum(axis=1)
        history[-1] = weighted_objective(w, min_d2)

    return ClusteringResult(
        centroids=centroids,
        assignments=labels,
        objective=history[-1],
        iterations_run=iterations,
        history=tuple(history),
        converged=converged,
    )


def best_of_seeds(points: PointSet, k: int, max_iters: int, seeds: Iterable[int]) -> ClusteringResult:
    """
    多种子重启，返回目标函数最小的结果（平局取靠前的种子）
    """
    best: Optional[ClusteringResult] = None
    for seed in seeds:
        result = weighted_kmeans(points, k, max_iters, seed)
        if best is None or result.objective < best.objective:
            best = result
        if best.shortfall:
            break  # 退化结果与种子无关
    if best is None:
        raise ConfigError("至少需要一个种子")
    return best
