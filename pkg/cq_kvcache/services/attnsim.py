"""
单头注意力解码仿真服务
在精确 KV 缓存与经编解码器存储的 KV 缓存上同步执行因果解码，逐步度量输出偏差

约定:
- 注意力分数默认不除以 √d（scaled=True 时才缩放），报告中记录该选项
- key 在 RoPE 之前量化，反量化后再旋转；value 直接反量化；query 从不量化
- 点积与 softmax 一律以 float64 计算
"""

import json
import logging
import math
import re
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from ..utils.actdata import ActivationMatrix, SynthSpec, synth_correlated
from ..utils.errors import CQError, ConfigError, ShapeError
from ..utils.fileio import PathLike, atomic_write_text
from ..utils.rng import derive_seed
from .baselines import AXIS_CHANNEL, ChannelRanges, UniformQuantConfig, fit_channel_ranges, uniform_int
from .cqcodec import LEARN_FISHER, CQConfig, Codebook, learn_codebook, roundtrip

logger = logging.getLogger(__name__)

CODEC_NONE = "none"
CODEC_CQ = "cq"
CODEC_CHANNELWISE = "cw"
CODEC_INT = "int"

REPORT_CSV_COLUMNS = ("step", "exact_out_norm", "rel_l2_err", "weight_tv_dist")

_INT_ID_RE = re.compile(r"^int:([1-9]\d*)(?::(channel|token))?(?::([1-9]\d*))?$")


# ==================== 编解码器注册 ====================

@dataclass(frozen=True)
class CodecSpec:
    """
    待测编解码器

    codec_id 语法:
        none | cq:<c>c<b>b[:fisher] | cw:<bits> | int:<bits>[:channel|token][:<group_size>]
    """

    codec_id: str
    kind: str
    cq: Optional[CQConfig] = None
    int_config: Optional[UniformQuantConfig] = None

    @property
    def bits_per_fpn(self) -> float:
        if self.kind == CODEC_NONE:
            return 32.0
        if self.kind == CODEC_INT:
            return float(self.int_config.bits)
        return self.cq.bits_per_fpn

    @property
    def needs_calibration(self) -> bool:
        """码本或 channel 轴整数量化的范围都要在校准数据上确定"""
        if self.kind == CODEC_INT:
            return self.int_config.axis == AXIS_CHANNEL
        return self.kind in (CODEC_CQ, CODEC_CHANNELWISE)


def parse_codec_id(codec_id: str) -> CodecSpec:
    """
    解析编解码器标识

    异常:
        ConfigError: 语法不合法
    """
    text = codec_id.strip() if isinstance(codec_id, str) else ""
    if text == CODEC_NONE:
        return CodecSpec(text, CODEC_NONE)

    if text.startswith("cq:"):
        parts = text[3:].split(":")
        mode = "uniform"
        if len(parts) == 2 and parts[1] == LEARN_FISHER:
            mode = LEARN_FISHER
        elif len(parts) != 1:
            raise ConfigError(f"无法解析编解码器标识: {codec_id!r}")
        if parts[0].startswith("CQ-"):
            raise ConfigError(f"cq: 后应直接跟 <c>c<b>b: {codec_id!r}")
        return CodecSpec(text, CODEC_CQ, cq=CQConfig.parse(parts[0], learning_mode=mode))

    if text.startswith("cw:"):
        bits = text[3:]
        if not bits.isdigit() or not 1 <= int(bits) <= 8:
            raise ConfigError(f"cw: 后应为 1..8 的比特数: {codec_id!r}")
        return CodecSpec(text, CODEC_CHANNELWISE, cq=CQConfig(1, int(bits)))

    match = _INT_ID_RE.match(text)
    if match:
        group = int(match.group(3)) if match.group(3) else None
        config = UniformQuantConfig(int(match.group(1)), match.group(2) or AXIS_CHANNEL, group)
        return CodecSpec(text, CODEC_INT, int_config=config)

    raise ConfigError(f"无法解析编解码器标识: {codec_id!r}（支持 none / cq:4c8b / cw:2 / int:2:channel）")


@dataclass(frozen=True, eq=False)
class FittedCodec:
    """
    已完成校准的编解码器: apply(matrix) 返回经存储-读取后的矩阵

    codebook 用于 cq / cw，ranges 用于 channel 轴整数量化；
    校准之后每个 token 列的重建只取决于该列本身。
    """

    spec: CodecSpec
    codebook: Optional[Codebook] = None
    ranges: Optional[ChannelRanges] = None

    def apply(self, matrix: ActivationMatrix, threads: Optional[int] = None) -> ActivationMatrix:
        if self.spec.kind == CODEC_NONE:
            return matrix
        if self.spec.kind == CODEC_INT:
            return uniform_int(matrix, self.spec.int_config, self.ranges).reconstruction
        return roundtrip(matrix, self.codebook, threads)


def fit_codec(
    spec: CodecSpec,
    calibration: ActivationMatrix,
    seed: int = 0,
    kmeans_iters: int = 100,
    threads: Optional[int] = None,
) -> FittedCodec:
    """
    在校准矩阵上学习码本或整数范围（不需要校准的编解码器直接返回）

    异常:
        ConfigError: channel 轴整数量化带 group_size（按 token 分段的范围无法预先校准）
    """
    if not spec.needs_calibration:
        return FittedCodec(spec)
    if spec.kind == CODEC_INT:
        if spec.int_config.group_size is not None:
            raise ConfigError(
                f"解码仿真不支持按 token 分段的 channel 轴整数量化: {spec.codec_id}（可改用 int:<b>:token:<g>）"
            )
        return FittedCodec(spec, ranges=fit_channel_ranges(calibration))
    config = replace(spec.cq, seed=seed, kmeans_iters=kmeans_iters)
    return FittedCodec(spec, learn_codebook(calibration, config, threads))


# ==================== RoPE 与注意力 ====================

def _rope_theta(head_channels: int, base: float) -> np.ndarray:
    if head_channels % 2:
        raise ConfigError(f"RoPE 要求 head_channels 为偶数: {head_channels}")
    if not base > 0:
        raise ConfigError(f"rope_base 必须为正: {base}")
    i = np.arange(head_channels // 2, dtype=np.float64)
    return np.power(float(base), -2.0 * i / head_channels)


def _rotate(vector: np.ndarray, theta: np.ndarray, position: float) -> np.ndarray:
    angle = theta * float(position)
    cos = np.cos(angle)
    sin = np.sin(angle)
    even = vector[0::2]
    odd = vector[1::2]
    out = np.empty_like(vector)
    out[0::2] = even * cos - odd * sin
    out[1::2] = even * sin + odd * cos
    return out


def rope_rotate(embedding: np.ndarray, position: float, base: float = 10000.0) -> np.ndarray:
    """
    旋转位置编码: 通道对 (2i, 2i+1) 旋转 θ_i·position，θ_i = base^(−2i/d)

    返回:
        float64 向量，范数不变
    """
    vector = np.asarray(embedding, dtype=np.float64).reshape(-1)
    return _rotate(vector, _rope_theta(vector.shape[0], base), position)


def rope_rotate_matrix(matrix: np.ndarray, positions: np.ndarray, base: float = 10000.0) -> np.ndarray:
    """
    对 (d, T) 矩阵的每一列按各自位置旋转

    逐列计算，每列结果与 rope_rotate 逐位一致，也与矩阵的 token 总数无关。
    """
    data = np.asarray(matrix, dtype=np.float64)
    theta = _rope_theta(data.shape[0], base)
    out = np.empty_like(data)
    for j, position in enumerate(np.asarray(positions, dtype=np.float64)):
        out[:, j] = _rotate(np.ascontiguousarray(data[:, j]), theta, position)
    return out


def _attend(query: np.ndarray, keys_t: np.ndarray, values_t: np.ndarray, scaled: bool):
    """
    keys_t / values_t 为按 token 排列的 (t, d) 连续数组

    每一步只读取前 t 行，结果与后续 token 是否存在逐位无关。
    """
    scores = (keys_t * query[None, :]).sum(axis=1)
    if scaled:
        scores = scores / math.sqrt(query.shape[0])
    exp = np.exp(scores - scores.max())
    weights = exp / exp.sum()
    output = (values_t * weights[:, None]).sum(axis=0)
    return output, weights


def attention_weights(query: np.ndarray, keys: np.ndarray, scaled: bool = False) -> np.ndarray:
    """softmax(Kᵀq)，keys 为 (d, t)"""
    q, k, _ = _check_attention_inputs(query, keys, keys)
    return _attend(q, k, k, scaled)[1]


def attention_step(query: np.ndarray, keys: np.ndarray, values: np.ndarray, scaled: bool = False) -> np.ndarray:
    """
    单步掩码注意力: output = V·softmax(Kᵀq)

    参数:
        query: (d,)
        keys: (d, t)
        values: (d_v, t)
        scaled: 是否除以 √d
    """
    q, k, v = _check_attention_inputs(query, keys, values)
    return _attend(q, k, v, scaled)[0]


def _check_attention_inputs(query, keys, values):
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    k = np.asarray(keys, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if k.ndim != 2 or v.ndim != 2:
        raise ShapeError("keys / values 必须是二维 (d, t) 数组")
    if k.shape[0] != q.shape[0]:
        raise ShapeError(f"query 维度 {q.shape[0]} 与 key 维度 {k.shape[0]} 不一致")
    if k.shape[1] != v.shape[1] or k.shape[1] < 1:
        raise ShapeError(f"keys 与 values 的 token 数不一致或为 0: {k.shape[1]} vs {v.shape[1]}")
    return q, np.ascontiguousarray(k.T), np.ascontiguousarray(v.T)


# ==================== 解码场景 ====================

@dataclass(frozen=True, eq=False)
class DecodeScenario:
    """
    解码场景

    属性:
        queries / keys / values: (head_channels, tokens) 激活矩阵
        codec: 待测编解码器
        rope_enabled / rope_base: RoPE 设置
        scaled: 注意力分数是否除以 √d
        key_calibration / value_calibration: 校准数据；缺省时退回被测 keys / values，
            此时码本依赖未来 token，prefix() 的结果不再与整段解码逐位一致
        seed / kmeans_iters: 码本学习参数
    """

    queries: ActivationMatrix
    keys: ActivationMatrix
    values: ActivationMatrix
    codec: CodecSpec = CodecSpec(CODEC_NONE, CODEC_NONE)
    rope_enabled: bool = True
    rope_base: float = 10000.0
    scaled: bool = False
    key_calibration: Optional[ActivationMatrix] = None
    value_calibration: Optional[ActivationMatrix] = None
    seed: int = 0
    kmeans_iters: int = 100

    def __post_init__(self):
        shapes = {m.shape for m in (self.queries, self.keys, self.values)}
        if len(shapes) != 1:
            raise ShapeError(f"queries / keys / values 形状不一致: {sorted(shapes)}")
        for name in ("key_calibration", "value_calibration"):
            calib = getattr(self, name)
            if calib is not None and calib.channels != self.head_channels:
                raise ShapeError(
                    f"{name} 通道数 {calib.channels} 与 head_channels {self.head_channels} 不一致"
                )
        if self.rope_enabled:
            if self.head_channels % 2:
                raise ConfigError(f"RoPE 要求 head_channels 为偶数: {self.head_channels}")
            if not self.rope_base > 0:
                raise ConfigError(f"rope_base 必须为正: {self.rope_base}")

    @property
    def head_channels(self) -> int:
        return self.keys.channels

    @property
    def tokens(self) -> int:
        return self.keys.tokens

    def with_codec(self, codec: CodecSpec) -> "DecodeScenario":
        return replace(self, codec=codec)

    def prefix(self, tokens: int) -> "DecodeScenario":
        """前 tokens 个 token 的子场景（校准数据保持不变）"""
        return replace(
            self,
            queries=self.queries.slice_tokens(tokens),
            keys=self.keys.slice_tokens(tokens),
            values=self.values.slice_tokens(tokens),
        )


def synth_scenario(
    head_channels: int,
    tokens: int,
    latent_rank: int = 2,
    noise_sigma: float = 0.1,
    query_scale: float = 0.1,
    seed: int = 0,
    calibration_tokens: Optional[int] = None,
    **options,
) -> DecodeScenario:
    """
    用合成相关数据构造场景: keys / values / queries 各用派生种子独立生成

    query_scale 控制注意力分数的尺度（过大时 softmax 退化为 one-hot）。
    keys / values 各多生成 calibration_tokens 个 token（缺省与 tokens 相同），
    这部分与被测 token 共用混合矩阵，作为固定的校准数据；
    options 中显式给出的 key_calibration / value_calibration 优先。
    """
    extra = tokens if calibration_tokens is None else calibration_tokens
    if extra < 1:
        raise ConfigError(f"calibration_tokens 必须 ≥ 1: {extra}")

    def make(index: int, scale: float, count: int) -> ActivationMatrix:
        spec = SynthSpec(
            channels=head_channels,
            tokens=count,
            latent_rank=latent_rank,
            noise_sigma=noise_sigma * scale,
            mixing_scale=scale,
            seed=derive_seed(seed, index),
        ).validate()
        return synth_correlated(spec)

    def split(matrix: ActivationMatrix):
        return matrix.slice_tokens(tokens), ActivationMatrix(matrix.values[:, tokens:])

    keys, key_calibration = split(make(1, 1.0, tokens + extra))
    values, value_calibration = split(make(2, 1.0, tokens + extra))
    options.setdefault("key_calibration", None)
    options.setdefault("value_calibration", None)
    if options["key_calibration"] is None:
        options["key_calibration"] = key_calibration
    if options["value_calibration"] is None:
        options["value_calibration"] = value_calibration

    return DecodeScenario(
        queries=make(0, query_scale, tokens),
        keys=keys,
        values=values,
        seed=seed,
        **options,
    )


# ==================== 解码报告 ====================

@dataclass(frozen=True, eq=False)
class DecodeReport:
    """
    单个编解码器的逐步偏差报告

    属性:
        exact_outputs / quant_outputs: (tokens, d_v) 每步输出
        rel_errors: 每步 ‖o_q − o‖/‖o‖（精确输出为零向量时取绝对误差）
        tv_distances: 每步注意力权重的总变差距离
        exact_weight_sums: 精确路径每步 softmax 权重之和
    """

    codec_id: str
    bits_per_fpn: float
    head_channels: int
    tokens: int
    rope_enabled: bool
    rope_base: float
    scaled: bool
    seed: int
    exact_outputs: np.ndarray
    quant_outputs: np.ndarray
    rel_errors: np.ndarray
    tv_distances: np.ndarray
    exact_weight_sums: np.ndarray

    @property
    def exact_norms(self) -> np.ndarray:
        return np.linalg.norm(self.exact_outputs, axis=1)

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean(self.rel_errors))

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_errors))

    @property
    def max_tv_distance(self) -> float:
        return float(np.max(self.tv_distances))

    @property
    def mean_tv_distance(self) -> float:
        return float(np.mean(self.tv_distances))

    def summary(self) -> dict:
        """稳定键顺序的摘要（含配置回显）"""
        return {
            "codec": self.codec_id,
            "bits_per_fpn": self.bits_per_fpn,
            "head_channels": self.head_channels,
            "tokens": self.tokens,
            "rope_enabled": self.rope_enabled,
            "rope_base": self.rope_base,
            "scaled": self.scaled,
            "seed": self.seed,
            "mean_rel_l2_err": self.mean_rel_error,
            "max_rel_l2_err": self.max_rel_error,
            "mean_weight_tv_dist": self.mean_tv_distance,
            "max_weight_tv_dist": self.max_tv_distance,
        }

    def to_csv(self) -> str:
        norms = self.exact_norms
        lines = [",".join(REPORT_CSV_COLUMNS)]
        for t in range(self.tokens):
            lines.append(
                f"{t + 1},{float(norms[t])!r},{float(self.rel_errors[t])!r},{float(self.tv_distances[t])!r}"
            )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.summary(), ensure_ascii=False, indent=2)


def write_report_csv(report: DecodeReport, path: PathLike) -> int:
    return atomic_write_text(path, report.to_csv())


def write_summary_json(reports: Sequence[DecodeReport], path: PathLike) -> int:
    """比较摘要: 按平均相对误差升序"""
    payload = {"ranking": [r.codec_id for r in reports], "reports": [r.summary() for r in reports]}
    return atomic_write_text(path, json.dumps(payload, ensure_ascii=False, indent=2))


# ==================== 解码 ====================

def _cache_rows(matrix: ActivationMatrix, rope: bool, base: float) -> np.ndarray:
    """(d, T) → 按 token 排列的 (T, d) float64，必要时按位置旋转"""
    data = matrix.values.astype(np.float64)
    if rope:
        data = rope_rotate_matrix(data, np.arange(matrix.tokens, dtype=np.float64), base)
    return np.ascontiguousarray(data.T)


def fit_scenario_codecs(scenario: DecodeScenario, threads: Optional[int] = None):
    """分别为 key 和 value 校准编解码器，返回 (key_codec, value_codec)"""
    key_calib = scenario.keys if scenario.key_calibration is None else scenario.key_calibration
    value_calib = scenario.values if scenario.value_calibration is None else scenario.value_calibration
    return (
        fit_codec(scenario.codec, key_calib, derive_seed(scenario.seed, 1), scenario.kmeans_iters, threads),
        fit_codec(scenario.codec, value_calib, derive_seed(scenario.seed, 2), scenario.kmeans_iters, threads),
    )


def run_decode_with(
    scenario: DecodeScenario,
    key_codec: FittedCodec,
    value_codec: FittedCodec,
    threads: Optional[int] = None,
    on_step: Optional[Callable[[int], None]] = None,
) -> DecodeReport:
    """
    用给定的已校准编解码器执行精确 / 量化两条同步解码路径

    整个缓存在第一步之前经编解码器存取一次；这一阶段的错误携带 step=0，
    逐步解码中的错误携带出错的步号 t（1..tokens）。
    """
    rope = scenario.rope_enabled
    base = scenario.rope_base
    try:
        stored_keys = key_codec.apply(scenario.keys, threads)
        stored_values = value_codec.apply(scenario.values, threads)
    except CQError as e:
        raise e.with_context(step=0)

    queries = _cache_rows(scenario.queries, rope, base)
    exact_k = _cache_rows(scenario.keys, rope, base)
    exact_v = _cache_rows(scenario.values, False, base)
    quant_k = _cache_rows(stored_keys, rope, base)
    quant_v = _cache_rows(stored_values, False, base)

    tokens = scenario.tokens
    d_v = exact_v.shape[1]
    exact_out = np.empty((tokens, d_v), dtype=np.float64)
    quant_out = np.empty((tokens, d_v), dtype=np.float64)
    rel = np.empty(tokens, dtype=np.float64)
    tv = np.empty(tokens, dtype=np.float64)
    sums = np.empty(tokens, dtype=np.float64)

    for t in range(1, tokens + 1):
        try:
            q = queries[t - 1]
            exact_out[t - 1], w_exact = _attend(q, exact_k[:t], exact_v[:t], scenario.scaled)
            quant_out[t - 1], w_quant = _attend(q, quant_k[:t], quant_v[:t], scenario.scaled)
        except CQError as e:
            raise e.with_context(step=t)
        sums[t - 1] = w_exact.sum()
        tv[t - 1] = 0.5 * float(np.abs(w_exact - w_quant).sum())
        diff = float(np.linalg.norm(quant_out[t - 1] - exact_out[t - 1]))
        norm = float(np.linalg.norm(exact_out[t - 1]))
        rel[t - 1] = diff / norm if norm > 0 else diff
        if on_step is not None:
            on_step(t)

    return DecodeReport(
        codec_id=scenario.codec.codec_id,
        bits_per_fpn=scenario.codec.bits_per_fpn,
        head_channels=scenario.head_channels,
        tokens=tokens,
        rope_enabled=rope,
        rope_base=base,
        scaled=scenario.scaled,
        seed=scenario.seed,
        exact_outputs=exact_out,
        quant_outputs=quant_out,
        rel_errors=rel,
        tv_distances=tv,
        exact_weight_sums=sums,
    )


def run_decode(
    scenario: DecodeScenario,
    threads: Optional[int] = None,
    on_step: Optional[Callable[[int], None]] = None,
) -> DecodeReport:
    """
    执行解码仿真

    编解码器在场景的校准数据上学习（未提供时退回被测 K/V 本身），然后逐步比较两条路径。
    """
    key_codec, value_codec = fit_scenario_codecs(scenario, threads)
    return run_decode_with(scenario, key_codec, value_codec, threads, on_step)


def compare_decodes(
    scenario: DecodeScenario,
    codecs: Sequence[CodecSpec],
    threads: Optional[int] = None,
    on_step: Optional[Callable[[int], None]] = None,
) -> List[DecodeReport]:
    """对多个编解码器运行同一场景，按平均相对误差升序返回（相同误差保持输入顺序）"""
    reports = []
    for codec in codecs:
        logger.info("解码仿真: %s", codec.codec_id)
        reports.append(run_decode(scenario.with_codec(codec), threads, on_step))
    return sorted(reports, key=lambda r: r.mean_rel_error)
