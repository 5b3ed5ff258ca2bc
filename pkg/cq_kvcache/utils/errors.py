"""
错误处理模块
统一的异常层级、退出码映射与错误信息格式化
"""

from typing import Any, Dict, Optional


class CQError(Exception):
    """
    所有可预期错误的基类

    属性:
        exit_code: CLI 退出码
        category: 简短的错误类别
        context: 附加上下文（如 step / group / offset），用于格式化
    """

    exit_code = 1
    category = "错误"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def with_context(self, **context: Any) -> "CQError":
        """追加上下文后返回自身，便于在上层补充 step/group 信息后重新抛出"""
        self.context.update(context)
        return self


class ConfigError(CQError):
    """无效配置、参数或记号（如 CQ-3c 记号、rank > channels）"""
    exit_code = 2
    category = "配置错误"


class IOFailure(CQError):
    """读写失败（文件不存在、写入中断等）"""
    exit_code = 3
    category = "I/O错误"


class FormatError(CQError):
    """二进制文件解析失败"""
    exit_code = 4
    category = "格式错误"


class BadMagicError(FormatError):
    """文件魔数不匹配"""


class UnsupportedVersionError(FormatError):
    """不支持的文件版本"""


class TruncatedError(FormatError):
    """文件在某个偏移处被截断"""


class NonFiniteError(FormatError):
    """数据中出现 NaN / Inf"""


class ShapeError(CQError):
    """形状不匹配或通道数无法整除"""
    exit_code = 5
    category = "形状错误"


class MissingGradientError(CQError):
    """Fisher 模式需要梯度，但数据中没有"""
    exit_code = 6
    category = "缺少梯度"


class CodecMismatchError(CQError):
    """码本与量化缓存不匹配（配置、哈希或载荷长度）"""
    exit_code = 7
    category = "编解码不匹配"


class DomainError(CQError):
    """参数超出定义域（如 tokens > max_context、分组过大）"""
    exit_code = 8
    category = "定义域错误"


class DegenerateInputError(CQError):
    """输入退化（如 k 超过不同点的数量）"""
    exit_code = 9
    category = "退化输入"


# 退出码到中文说明的映射
EXIT_CODE_MESSAGES = {
    0: "成功",
    1: "未预期的内部错误",
    ConfigError.exit_code: "配置或参数无效",
    IOFailure.exit_code: "文件读写失败",
    FormatError.exit_code: "文件格式解析失败",
    ShapeError.exit_code: "形状不匹配或无法整除",
    MissingGradientError.exit_code: "Fisher 模式缺少梯度",
    CodecMismatchError.exit_code: "码本与量化缓存不匹配",
    DomainError.exit_code: "参数超出定义域",
    DegenerateInputError.exit_code: "输入数据退化",
}


def exit_code_for(e: BaseException) -> int:
    """
    获取异常对应的退出码

    参数:
        e: 异常对象

    返回:
        int: 退出码（非 CQError 返回 1）
    """
    if isinstance(e, CQError):
        return e.exit_code
    if isinstance(e, OSError):
        return IOFailure.exit_code
    return 1


def format_cli_error(e: BaseException) -> str:
    """
    格式化错误信息用于控制台输出

    参数:
        e: 异常对象

    返回:
        str: "类别: 信息 (key=value ...)"
    """
    if isinstance(e, CQError):
        detail = ""
        if e.context:
            detail = " (" + ", ".join(f"{k}={v}" for k, v in e.context.items()) + ")"
        return f"{e.category}: {e.message}{detail}"

    if isinstance(e, OSError):
        target = f" [{e.filename}]" if getattr(e, "filename", None) else ""
        return f"{IOFailure.category}: {e.strerror or str(e)}{target}"

    # 对于其他类型的异常，返回其类型和基本信息
    return f"内部错误: ({type(e).__name__}) {str(e)}"


def wrap_os_error(e: OSError, path: Optional[str] = None, offset: Optional[int] = None) -> IOFailure:
    """
    将 OSError 包装为 IOFailure，保留文件路径与字节偏移
    """
    context: Dict[str, Any] = {}
    if path is not None:
        context["path"] = path
    if offset is not None:
        context["offset"] = offset
    return IOFailure(e.strerror or str(e), **context)
