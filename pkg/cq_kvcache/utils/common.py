"""
控制台输出工具
✨ 前缀日志、任务名称、运行 ID 与单行刷新的进度条，CLI 与各服务共用同一套格式
"""

import io
import logging
import os
import sys
import threading
import time
from typing import Optional

# Windows 控制台默认 GBK，emoji 前缀会触发 UnicodeEncodeError
if sys.platform == "win32" and (sys.stdout.encoding or "").lower() != "utf-8":
    try:
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding="utf-8", errors="replace")
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding="utf-8", errors="replace")
    except (AttributeError, ValueError):
        pass


PREFIX = "✨"
WARN_PREFIX = "✨-⚠️"

_CLEAR_LINE = "\r\033[K"

# ---任务名称（出现在准备/完成/失败日志中）---
TASK_GEN = "数据生成"
TASK_CALIBRATE = "码本学习"
TASK_QUANTIZE = "量化"
TASK_DEQUANTIZE = "反量化"
TASK_STATS = "熵分析"
TASK_SIMULATE = "解码仿真"
TASK_SIZE = "容量估算"
TASK_INFO = "文件信息"


def get_display_width(text: str) -> int:
    """终端列宽：非 ASCII 字符按 2 列计"""
    return sum(2 if ord(ch) > 0x7F else 1 for ch in text)


def _emit(line: str) -> None:
    # 先清掉可能残留的进度行
    print(f"{_CLEAR_LINE}{line}", flush=True)


def _join(head: str, fields: Optional[dict], tail: list) -> str:
    parts = [head]
    if fields:
        parts.extend(f"{key}:{value}" for key, value in fields.items())
    parts.extend(tail)
    return " | ".join(parts)


def log_prepare(task_type: str, run_id: str, extra: dict = None) -> None:
    """✨ 🟡 {任务}准备 | k:v ... | ID:{id}"""
    _emit(_join(f"{PREFIX} 🟡 {task_type}准备", extra, [f"ID:{run_id}"]))


def log_complete(task_type: str, run_id: str, elapsed_ms: int, extra: dict = None) -> None:
    """✨ ✅ {任务}完成 | ID:{id} | k:v ... | 耗时:{t}"""
    head = f"{PREFIX} ✅ {task_type}完成 | ID:{run_id}"
    _emit(_join(head, extra, [f"耗时:{format_elapsed_time(elapsed_ms)}"]))


def log_error(task_type: str, run_id: str, error_msg: str) -> None:
    _emit(f"{PREFIX} ❌ {task_type}失败 | ID:{run_id} | 错误:{error_msg}")


def log_info(message: str) -> None:
    _emit(f"{PREFIX} {message}")


def log_warn(message: str) -> None:
    _emit(f"{WARN_PREFIX} {message}")


class ConsoleLogHandler(logging.Handler):
    """logging → ✨ 控制台行；WARNING 及以上走警告前缀"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            message = record.getMessage()
        except Exception:
            self.handleError(record)
            return
        (log_warn if record.levelno >= logging.WARNING else log_info)(message)


def setup_console_logging(verbose: bool = False) -> logging.Logger:
    """
    给 cq_kvcache 根 logger 挂上控制台处理器，多次调用只挂一个

    verbose 为 True 时放行 INFO，否则只显示警告
    """
    logger = logging.getLogger("cq_kvcache")
    logger.setLevel(logging.INFO if verbose else logging.WARNING)
    if not any(isinstance(h, ConsoleLogHandler) for h in logger.handlers):
        logger.addHandler(ConsoleLogHandler())
    return logger


def generate_run_id(command: str, seed: Optional[int] = None) -> str:
    """命令[_种子]_时间戳末四位，例如 calibrate_7_3456"""
    stamp = f"{int(time.time()) % 10000:04d}"
    head = command if seed is None else f"{command}_{seed}"
    return f"{head}_{stamp}"


def format_elapsed_time(elapsed_ms: int) -> str:
    return f"{elapsed_ms / 1000:.1f}s"


def format_count(value: int) -> str:
    """
    千分位，百万以上附带 M 简写

    67108864 -> "67,108,864 (67.11M)"
    """
    if value >= 1_000_000:
        return f"{value:,} ({value / 1_000_000:.2f}M)"
    return f"{value:,}"


def _turn_on_ansi() -> None:
    # 旧版 conhost 需要显式打开 VT 模式，\r\033[K 才会生效
    if os.name != "nt":
        return
    try:
        import ctypes

        kernel32 = ctypes.windll.kernel32
        stdout = kernel32.GetStdHandle(-11)
        mode = ctypes.c_ulong()
        if kernel32.GetConsoleMode(stdout, ctypes.byref(mode)):
            kernel32.SetConsoleMode(stdout, mode.value | 0x0004)
    except (AttributeError, OSError):
        pass


_turn_on_ansi()


class ProgressBar:
    """
    单行刷新的计数进度条

    工作线程可并发调用 advance；所有进度条共用一把输出锁，
    并记住上一行的宽度以便在 ANSI 不可用时用空格覆盖。
    作为上下文管理器使用时，正常退出等价于 done()，异常退出等价于 error()。
    enabled=False 时不输出任何内容，但仍然计数。
    """

    _screen_lock = threading.Lock()
    _last_width = 0

    def __init__(self, run_id: str, task_type: str, total: int, unit: str = "组", enabled: bool = True):
        self._run_id = run_id
        self._task_type = task_type
        self._total = max(int(total), 0)
        self._unit = unit
        self._enabled = enabled

        self._count = 0
        self._count_lock = threading.Lock()
        self._started = time.perf_counter()
        self._finished = False

        ProgressBar._last_width = 0
        self._draw()

    @property
    def elapsed_ms(self) -> int:
        return int((time.perf_counter() - self._started) * 1000)

    def _status_line(self) -> str:
        seconds = time.perf_counter() - self._started
        clock = f"{seconds:.1f}s" if seconds < 60 else f"{int(seconds) // 60}m{int(seconds) % 60}s"
        return f"{PREFIX} 🔵 {self._task_type}中 | {self._count}/{self._total}{self._unit} | {clock}"

    def _draw(self) -> None:
        if self._finished or not self._enabled:
            return
        line = self._status_line()
        with ProgressBar._screen_lock:
            width = get_display_width(line)
            pad = " " * max(ProgressBar._last_width - width, 0)
            print(f"{_CLEAR_LINE}{line}{pad}", end="", flush=True)
            ProgressBar._last_width = width + len(pad)

    def advance(self, step: int = 1) -> None:
        if self._finished:
            return
        with self._count_lock:
            self._count += step
        self._draw()

    def _finish(self) -> bool:
        """首次调用返回 True；之后的 done/error 都是空操作"""
        if self._finished:
            return False
        self._finished = True
        ProgressBar._last_width = 0
        return self._enabled

    def done(self, extra: dict = None) -> None:
        if self._finish():
            log_complete(self._task_type, self._run_id, self.elapsed_ms, extra)

    def error(self, message: str) -> None:
        if self._finish():
            log_error(self._task_type, self._run_id, message)

    def __enter__(self) -> "ProgressBar":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc is not None:
            self.error(str(exc))
        else:
            self.done()
