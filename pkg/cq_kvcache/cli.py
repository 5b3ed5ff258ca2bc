"""
命令行入口
子命令: gen / calibrate / quantize / dequantize / stats / simulate / size / info

所有随机子命令都回显种子；错误统一转换为退出码（见 utils/errors.py）。
"""

import argparse
import json
import os
import re
import sys
from dataclasses import dataclass
from typing import List, Optional, Sequence

from .config_manager import ConfigManager, get_config_manager
from .services import attnsim, cqcodec, infostats
from .utils.actdata import (
    ACTD_MAGIC,
    MIXING_DENSE,
    MIXING_IDENTITY,
    ModelDims,
    SynthSpec,
    describe_activations,
    kv_cache_bytes,
    load_activations,
    save_activations,
    synth_correlated,
    synth_with_gradients,
)
from .utils.common import (
    TASK_CALIBRATE,
    TASK_DEQUANTIZE,
    TASK_GEN,
    TASK_INFO,
    TASK_QUANTIZE,
    TASK_SIMULATE,
    TASK_SIZE,
    TASK_STATS,
    ProgressBar,
    format_count,
    generate_run_id,
    log_complete,
    log_error,
    log_info,
    log_prepare,
    log_warn,
    setup_console_logging,
)
from .utils.env_config import get_progress_enabled, get_thread_limit
from .utils.errors import BadMagicError, ConfigError, exit_code_for, format_cli_error
from .utils.fileio import atomic_write_text, read_all


@dataclass
class CommandContext:
    """单次命令执行的上下文"""

    task: str
    run_id: str
    threads: int
    progress: bool
    config: ConfigManager


# ==================== 参数解析辅助 ====================

def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"应为逗号分隔的整数: {text!r}")


def _pair_list(text: str) -> List[tuple]:
    pairs = []
    for part in text.split(","):
        if not part.strip():
            continue
        match = re.fullmatch(r"\s*(\d+):(\d+)\s*", part)
        if match is None:
            raise argparse.ArgumentTypeError(f"通道对应为 a:b 形式: {part!r}")
        pairs.append((int(match.group(1)), int(match.group(2))))
    return pairs


def _pick(value, default):
    """CLI 参数优先，未指定时使用配置值"""
    return default if value is None else value


def _resolve_threads(args, config: ConfigManager) -> int:
    """线程数优先级: --threads > CQKV_THREADS > 配置文件 > 硬件并行度(0)"""
    if args.threads is not None:
        return args.threads
    env_threads = get_thread_limit()
    if env_threads:
        return env_threads
    return int(config.get_runtime_defaults().get("threads", 0))


def _cq_config(notation: str, args, config: ConfigManager) -> cqcodec.CQConfig:
    defaults = config.get_calibration_defaults()
    return cqcodec.CQConfig.parse(
        notation,
        learning_mode=cqcodec.LEARN_FISHER if getattr(args, "fisher", False) else cqcodec.LEARN_UNIFORM,
        kmeans_iters=_pick(getattr(args, "iters", None), defaults["kmeans_iters"]),
        seed=_pick(getattr(args, "seed", None), defaults["seed"]),
        restarts=_pick(getattr(args, "restarts", None), defaults["restarts"]),
    )


def _learn_with_progress(matrix, config: cqcodec.CQConfig, ctx: CommandContext) -> cqcodec.Codebook:
    groups = matrix.channels // config.channels_per_group if matrix.channels % config.channels_per_group == 0 else 0
    bar = ProgressBar(ctx.run_id, TASK_CALIBRATE, groups, unit="组", enabled=ctx.progress)
    codebook = cqcodec.learn_codebook(matrix, config, ctx.threads, on_group_done=lambda _: bar.advance())
    extra = {"组数": codebook.num_groups, "质心/组": config.num_centroids}
    if ctx.progress:
        bar.done(extra)
    else:
        # 关闭进度条时仍报告学习总耗时
        log_complete(TASK_CALIBRATE, ctx.run_id, bar.elapsed_ms, extra)
    return codebook


# ==================== 子命令 ====================

def cmd_gen(args, ctx: CommandContext) -> int:
    defaults = ctx.config.get_synth_defaults()
    spec = SynthSpec(
        channels=_pick(args.channels, defaults["channels"]),
        tokens=_pick(args.tokens, defaults["tokens"]),
        latent_rank=_pick(args.rank, defaults["latent_rank"]),
        noise_sigma=_pick(args.noise, defaults["noise_sigma"]),
        mixing_scale=_pick(args.mixing_scale, defaults["mixing_scale"]),
        seed=_pick(args.seed, defaults["seed"]),
        mixing=args.mixing,
    ).validate()
    log_prepare(TASK_GEN, ctx.run_id, {
        "形状": f"{spec.channels}×{spec.tokens}", "秩": spec.latent_rank, "种子": spec.seed,
    })
    if args.gradients:
        matrix = synth_with_gradients(spec, hot_fraction=args.hot_fraction)
    else:
        matrix = synth_correlated(spec)
    size = save_activations(matrix, args.output)
    log_info(f"输出: {args.output} | 形状:{matrix.channels}×{matrix.tokens} | 字节:{size:,}")
    return 0


def cmd_calibrate(args, ctx: CommandContext) -> int:
    matrix = load_activations(args.input)
    config = _cq_config(args.cq, args, ctx.config)
    log_prepare(TASK_CALIBRATE, ctx.run_id, {
        "配置": config.notation, "模式": config.learning_mode, "种子": config.seed,
        "形状": f"{matrix.channels}×{matrix.tokens}",
    })
    codebook = _learn_with_progress(matrix, config, ctx)
    cqcodec.save_codebook(codebook, args.output)

    summary = codebook.summary()
    log_info(
        f"目标函数 | 平均:{summary['objective_mean']:.6g} | 最大:{summary['objective_max']:.6g}"
        f" | Fisher回退组:{summary['fallback_groups']}"
    )
    log_info(f"输出: {args.output} | 哈希:{summary['hash']}")
    return 0


def cmd_quantize(args, ctx: CommandContext) -> int:
    matrix = load_activations(args.input)
    if args.codebook:
        codebook = cqcodec.load_codebook(args.codebook)
    elif args.cq:
        config = _cq_config(args.cq, args, ctx.config)
        log_prepare(TASK_CALIBRATE, ctx.run_id, {"配置": config.notation, "种子": config.seed})
        codebook = _learn_with_progress(matrix, config, ctx)
        if args.save_codebook:
            cqcodec.save_codebook(codebook, args.save_codebook)
            log_info(f"码本: {args.save_codebook}")
    else:
        raise ConfigError("quantize 需要 --codebook 或 --cq")

    log_prepare(TASK_QUANTIZE, ctx.run_id, {"配置": codebook.config.notation})
    bar = ProgressBar(ctx.run_id, TASK_QUANTIZE, 1, unit="文件", enabled=ctx.progress)
    cache = cqcodec.quantize(matrix, codebook, ctx.threads)
    size = cqcodec.save_cache(cache, args.output)
    bar.advance()
    bar.done({"bits_per_fpn": f"{cache.config.bits_per_fpn:.2f}", "载荷字节": len(cache.payload)})
    log_info(
        f"输出: {args.output} | bits_per_fpn:{cache.config.bits_per_fpn:.2f}"
        f" | 载荷字节:{len(cache.payload):,} | 文件字节:{size:,}"
    )
    return 0


def cmd_dequantize(args, ctx: CommandContext) -> int:
    cache = cqcodec.load_cache(args.input)
    codebook = cqcodec.load_codebook(args.codebook)
    log_prepare(TASK_DEQUANTIZE, ctx.run_id, {"配置": cache.config.notation, "tokens": cache.tokens})
    matrix = cqcodec.dequantize(cache, codebook)
    save_activations(matrix, args.output)
    log_info(f"输出: {args.output} | 形状:{matrix.channels}×{matrix.tokens}")
    if args.ref:
        reference = load_activations(args.ref)
        error = cqcodec.quantization_error(reference, matrix)
        log_info(f"重建误差 ‖A − CQ(A)‖²: {error!r}")
    return 0


def cmd_stats(args, ctx: CommandContext) -> int:
    defaults = ctx.config.get_stats_defaults()
    matrix = load_activations(args.input)
    group_sizes = _pick(args.group_sizes, defaults["group_sizes"])
    num_bins = _pick(args.bins, defaults["num_bins"])
    channel_limit = args.channel_limit if args.channel_limit is not None else min(
        defaults["channel_limit"], matrix.channels
    )
    os.makedirs(args.out_dir, exist_ok=True)

    log_prepare(TASK_STATS, ctx.run_id, {
        "分组": ",".join(str(g) for g in group_sizes), "分箱": num_bins, "通道": matrix.channels,
    })
    total = sum(matrix.channels // g for g in group_sizes if 0 < g <= matrix.channels)
    bar = ProgressBar(ctx.run_id, TASK_STATS, total, unit="组", enabled=ctx.progress)
    reports = infostats.entropy_sweep(
        matrix, group_sizes, num_bins, ctx.threads, on_group_done=lambda _: bar.advance()
    )
    bar.done({"报告": len(reports)})

    entropy_path = os.path.join(args.out_dir, "entropy.csv")
    infostats.write_entropy_csv(reports, entropy_path)
    for report in reports:
        log_info(
            f"分组 {report.group_size} | 联合熵:{report.mean_joint:.4f}±{report.std_joint:.4f}"
            f" | 边缘熵之和:{report.mean_sum_marginal:.4f}±{report.std_sum_marginal:.4f}"
            f" | 丢弃通道:{report.dropped_channels}"
        )

    correlation = infostats.correlation_matrix(matrix, channel_limit)
    correlation_path = os.path.join(args.out_dir, "correlation.csv")
    infostats.write_correlation_csv(correlation, correlation_path)
    log_info(f"相关矩阵: {correlation_path} | {correlation.size}×{correlation.size}")

    if args.scatter_pairs:
        scatter = infostats.channel_pair_scatter(
            matrix,
            args.scatter_pairs,
            _pick(args.scatter_points, defaults["scatter_points"]),
            _pick(args.seed, 0),
        )
        scatter_path = os.path.join(args.out_dir, "scatter.csv")
        infostats.write_scatter_csv(scatter, scatter_path)
        log_info(f"散点数据: {scatter_path} | 通道对:{len(scatter)}")

    log_info(f"熵报告: {entropy_path}")
    return 0


def _load_scenario(args, ctx: CommandContext) -> attnsim.DecodeScenario:
    defaults = ctx.config.get_simulate_defaults()
    synth = ctx.config.get_synth_defaults()
    options = dict(
        rope_enabled=defaults["rope_enabled"] and not args.no_rope,
        rope_base=_pick(args.rope_base, defaults["rope_base"]),
        scaled=args.scaled or defaults["scaled"],
        kmeans_iters=_pick(args.iters, ctx.config.get_calibration_defaults()["kmeans_iters"]),
        key_calibration=load_activations(args.calib_keys) if args.calib_keys else None,
        value_calibration=load_activations(args.calib_values) if args.calib_values else None,
    )
    seed = _pick(args.seed, synth["seed"])

    files = (args.queries, args.keys, args.values)
    if any(files):
        if not all(files):
            raise ConfigError("--queries / --keys / --values 需要同时提供")
        if options["key_calibration"] is None or options["value_calibration"] is None:
            log_warn("未提供 --calib-keys / --calib-values: 码本在被测 K/V 上学习，逐步结果会受后续 token 影响")
        return attnsim.DecodeScenario(
            queries=load_activations(args.queries),
            keys=load_activations(args.keys),
            values=load_activations(args.values),
            seed=seed,
            **options,
        )
    return attnsim.synth_scenario(
        head_channels=_pick(args.head_dim, defaults["head_channels"]),
        tokens=_pick(args.tokens, defaults["tokens"]),
        latent_rank=_pick(args.rank, synth["latent_rank"]),
        noise_sigma=_pick(args.noise, synth["noise_sigma"]),
        query_scale=_pick(args.query_scale, defaults["query_scale"]),
        seed=seed,
        **options,
    )


def _report_name(codec_id: str) -> str:
    return "decode_" + re.sub(r"[^A-Za-z0-9]+", "_", codec_id).strip("_") + ".csv"


def cmd_simulate(args, ctx: CommandContext) -> int:
    codecs = [attnsim.parse_codec_id(c) for c in (args.codec or [attnsim.CODEC_NONE])]
    scenario = _load_scenario(args, ctx)
    report_format = args.format or ctx.config.get_runtime_defaults().get("report_format", "csv")
    os.makedirs(args.out_dir, exist_ok=True)

    log_prepare(TASK_SIMULATE, ctx.run_id, {
        "编解码器": ",".join(c.codec_id for c in codecs),
        "形状": f"{scenario.head_channels}×{scenario.tokens}",
        "RoPE": scenario.rope_enabled,
        "缩放": scenario.scaled,
        "种子": scenario.seed,
    })
    bar = ProgressBar(ctx.run_id, TASK_SIMULATE, scenario.tokens * len(codecs), unit="步", enabled=ctx.progress)
    reports = attnsim.compare_decodes(scenario, codecs, ctx.threads, on_step=lambda _: bar.advance())
    bar.done({"编解码器": len(codecs)})

    for rank, report in enumerate(reports, 1):
        if report_format == "csv":
            attnsim.write_report_csv(report, os.path.join(args.out_dir, _report_name(report.codec_id)))
        log_info(
            f"#{rank} {report.codec_id} | bits_per_fpn:{report.bits_per_fpn:g}"
            f" | 平均相对误差:{report.mean_rel_error:.6g} | 最大相对误差:{report.max_rel_error:.6g}"
            f" | 最大TV:{report.max_tv_distance:.6g}"
        )
    summary_path = os.path.join(args.out_dir, "summary.json")
    attnsim.write_summary_json(reports, summary_path)
    log_info(f"摘要: {summary_path}")
    return 0


def cmd_size(args, ctx: CommandContext) -> int:
    tokens = args.tokens
    dims = ModelDims(
        layers=args.layers,
        kv_heads=args.kv_heads,
        head_channels=args.head_dim,
        max_context=args.max_context,
    ).validate()
    config = cqcodec.CQConfig.parse(args.cq) if args.cq else None
    bits = args.bits if args.bits is not None else (config.bits_per_fpn if config else 16)

    log_prepare(TASK_SIZE, ctx.run_id, {
        "层": dims.layers, "KV头": dims.kv_heads, "头维度": dims.head_channels,
        "配置": config.notation if config else "-",
    })
    result = {
        "layers": dims.layers,
        "kv_heads": dims.kv_heads,
        "head_channels": dims.head_channels,
        "batch": args.batch,
        "tokens": tokens,
        "bits_per_fpn": bits,
        "kv_cache_bytes": kv_cache_bytes(dims, args.batch, tokens, bits),
    }
    log_info(f"KV 缓存字节 (bits_per_fpn={bits:g}): {format_count(result['kv_cache_bytes'])}")

    if config is not None:
        params = cqcodec.codebook_param_count(dims, config)
        result.update({
            "config": config.notation,
            "compression_ratio": cqcodec.compression_ratio(config),
            "centroid_params": params,
            "centroid_bytes_fp16": cqcodec.codebook_bytes(dims, config, 2),
            "centroid_bytes_fp32": cqcodec.codebook_bytes(dims, config, 4),
        })
        log_info(f"质心参数量: {format_count(params)}")
        log_info(
            f"质心存储: fp16 {result['centroid_bytes_fp16']:,} 字节 | fp32 {result['centroid_bytes_fp32']:,} 字节"
        )
        if args.model_params:
            ratio = cqcodec.centroid_overhead_ratio(dims, config, args.model_params)
            result["centroid_overhead_pct"] = ratio * 100
            log_info(f"占模型参数: {ratio * 100:.3f}%")

    if args.json:
        atomic_write_text(args.json, json.dumps(result, ensure_ascii=False, indent=2))
        log_info(f"输出: {args.json}")
    return 0


def cmd_info(args, ctx: CommandContext) -> int:
    data = read_all(args.input)
    magic = data[:4]
    if magic == ACTD_MAGIC:
        summary = {"format": "ACTD", **describe_activations(load_activations(data))}
    elif magic == cqcodec.CQCB_MAGIC:
        summary = {"format": "CQCB", **cqcodec.load_codebook(data).summary()}
    elif magic == cqcodec.CQQC_MAGIC:
        summary = {"format": "CQQC", **cqcodec.load_cache(data).summary()}
    else:
        raise BadMagicError(f"无法识别的文件魔数 {magic!r}", field="magic", offset=0)
    for key, value in summary.items():
        log_info(f"{key}: {value}")
    return 0


# ==================== 解析器 ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cq-kv", description="Coupled Quantization KV 缓存工具")
    parser.add_argument("--config", help="用户配置 JSON（默认读取 CQKV_CONFIG）")
    parser.add_argument("--threads", type=int, help="工作线程数（0 表示硬件并行度）")
    parser.add_argument("--quiet", action="store_true", help="关闭进度条")
    parser.add_argument("--verbose", action="store_true", help="输出 INFO 级别的库日志")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="生成合成相关激活数据 (ACTD)")
    p.add_argument("--channels", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--rank", type=int, help="潜在秩")
    p.add_argument("--noise", type=float, help="噪声标准差")
    p.add_argument("--mixing-scale", type=float)
    p.add_argument("--mixing", choices=[MIXING_DENSE, MIXING_IDENTITY], default=MIXING_DENSE)
    p.add_argument("--gradients", action="store_true", help="同时生成集中在部分 token 上的合成梯度")
    p.add_argument("--hot-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_gen, task=TASK_GEN)

    p = sub.add_parser("calibrate", help="学习 CQ 码本 (CQCB)")
    p.add_argument("input")
    p.add_argument("--cq", required=True, help="配置记号，如 4c8b")
    p.add_argument("--fisher", action="store_true", help="Fisher 加权学习（需要梯度）")
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_calibrate, task=TASK_CALIBRATE)

    p = sub.add_parser("quantize", help="量化激活数据 (CQQC)")
    p.add_argument("input")
    p.add_argument("--codebook", help="已有码本 (CQCB)")
    p.add_argument("--cq", help="未给码本时现场学习的配置记号")
    p.add_argument("--fisher", action="store_true")
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--save-codebook", help="保存现场学习的码本")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_quantize, task=TASK_QUANTIZE)

    p = sub.add_parser("dequantize", help="反量化为激活数据 (ACTD)")
    p.add_argument("input")
    p.add_argument("--codebook", required=True)
    p.add_argument("--ref", help="原始 ACTD，用于报告重建误差")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(handler=cmd_dequantize, task=TASK_DEQUANTIZE)

    p = sub.add_parser("stats", help="熵扫描与相关矩阵 (CSV)")
    p.add_argument("input")
    p.add_argument("--group-sizes", type=_int_list)
    p.add_argument("--bins", type=int)
    p.add_argument("--channel-limit", type=int)
    p.add_argument("--scatter-pairs", type=_pair_list, help="导出散点的通道对，如 0:1,2:3")
    p.add_argument("--scatter-points", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(handler=cmd_stats, task=TASK_STATS)

    p = sub.add_parser("simulate", help="单头注意力解码仿真")
    p.add_argument("--codec", action="append", help="none | cq:4c8b[:fisher] | cw:2 | int:2[:channel|token][:gs]")
    p.add_argument("--queries")
    p.add_argument("--keys")
    p.add_argument("--values")
    p.add_argument("--calib-keys")
    p.add_argument("--calib-values")
    p.add_argument("--head-dim", type=int)
    p.add_argument("--tokens", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--query-scale", type=float)
    p.add_argument("--no-rope", action="store_true")
    p.add_argument("--rope-base", type=float)
    p.add_argument("--scaled", action="store_true", help="注意力分数除以 √d")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--out-dir", default=".")
    p.set_defaults(handler=cmd_simulate, task=TASK_SIMULATE)

    p = sub.add_parser("size", help="KV 缓存与码本容量估算")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--head-dim", type=int, required=True)
    p.add_argument("--cq")
    p.add_argument("--bits", type=float, help="KV 缓存每个浮点数的比特数（默认取 --cq 的 b/c，否则 16）")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--tokens", type=int, default=2048)
    p.add_argument("--max-context", type=int, default=2048)
    p.add_argument("--model-params", type=int, help="模型权重参数量，用于计算码本占比")
    p.add_argument("--json", help="把结果写入 JSON 文件")
    p.set_defaults(handler=cmd_size, task=TASK_SIZE)

    p = sub.add_parser("info", help="查看 ACTD / CQCB / CQQC 文件信息")
    p.add_argument("input")
    p.set_defaults(handler=cmd_info, task=TASK_INFO)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_console_logging(args.verbose)
    run_id = generate_run_id(args.command, getattr(args, "seed", None))

    try:
        config = get_config_manager(args.config)
        ctx = CommandContext(
            task=args.task,
            run_id=run_id,
            threads=_resolve_threads(args, config),
            progress=not args.quiet and get_progress_enabled(),
            config=config,
        )
        return args.handler(args, ctx)
    except Exception as e:
        log_error(args.task, run_id, format_cli_error(e))
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
