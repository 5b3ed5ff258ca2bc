"""
随机数工具模块
基于 numpy 的 Philox4x64-10 计数器型生成器，保证跨平台逐位可复现

流的约定:
- 每个 Rng 以 64 位种子作为 Philox 的 key（不经过 SeedSequence）
- 均匀数取 raw >> 11 的高 53 位，乘以 2^-53
- 正态数使用 Box–Muller：每对 raw 中偶数位置给 u1 ∈ (0,1]，奇数位置给 u2 ∈ [0,1)
"""

import math
from typing import Union

import numpy as np

from .errors import ConfigError

MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / float(1 << 53)


def mix64(value: int) -> int:
    """
    SplitMix64 终结器（64 位混合函数）

    参数:
        value: 任意整数，按 64 位截断

    返回:
        int: 混合后的 64 位无符号整数
    """
    z = (int(value) + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """
    由 (seed, index) 派生子种子，用于每组独立且与调度顺序无关的 k-means

    公式: mix64(mix64(seed) ^ index)
    """
    return mix64(mix64(int(seed) & MASK64) ^ (int(index) & MASK64))


def check_seed(seed: Union[int, np.integer]) -> int:
    """校验种子为 64 位无符号整数"""
    seed = int(seed)
    if seed < 0 or seed > MASK64:
        raise ConfigError(f"种子必须是 64 位无符号整数: {seed}")
    return seed


class Rng:
    """
    可复现的随机数流

    所有随机操作都显式接收种子并创建自己的 Rng，不使用全局状态。
    """

    def __init__(self, seed: int):
        self.seed = check_seed(seed)
        self._bitgen = np.random.Philox(key=self.seed)

    def raw(self, n: int) -> np.ndarray:
        """返回 n 个原始 uint64"""
        return np.asarray(self._bitgen.random_raw(int(n)), dtype=np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        """返回 n 个 [0,1) 均匀数（float64）"""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform_scalar(self) -> float:
        """返回单个 [0,1) 均匀数"""
        return float(self.uniform(1)[0])

    def normal(self, n: int) -> np.ndarray:
        """
        返回 n 个标准正态数（Box–Muller）

        每个正态对消耗两个 raw；n 为奇数时最后一个正弦分量被丢弃。
        """
        n = int(n)
        if n <= 0:
            return np.zeros(0, dtype=np.float64)
        pairs = (n + 1) // 2
        bits = self.raw(2 * pairs) >> np.uint64(11)
        u1 = (bits[0::2].astype(np.float64) + 1.0) * _INV_2_53
        u2 = bits[1::2].astype(np.float64) * _INV_2_53

        radius = np.sqrt(-2.0 * np.log(u1))
        angle = (2.0 * math.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]
