"""
核心基础设施模块
提供工作线程池管理
"""

import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Optional, TypeVar

from ..utils.env_config import get_thread_limit

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int]) -> int:
    """
    解析线程数: None/0 表示硬件并行度，其余按原值（至少 1）

    参数:
        threads: 期望线程数
    """
    if not threads:
        # 未显式指定时参考环境变量，再回退到 CPU 数
        threads = get_thread_limit()
    if not threads:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


class WorkerPool:
    """
    工作线程池
    按线程数缓存持久化的 ThreadPoolExecutor，支持跨调用复用

    numpy 的大部分内核会释放 GIL，因此每组独立的 k-means 可以在线程中并行。
    """
    _executors: Dict[int, ThreadPoolExecutor] = {}
    _lock = threading.Lock()

    @classmethod
    def get_executor(cls, threads: int) -> ThreadPoolExecutor:
        """
        获取或创建指定线程数的执行器

        参数:
            threads: 线程数（≥ 2）
        """
        with cls._lock:
            executor = cls._executors.get(threads)
            if executor is None or getattr(executor, "_shutdown", False):
                executor = ThreadPoolExecutor(max_workers=threads, thread_name_prefix=f"cqkv-{threads}")
                cls._executors[threads] = executor
            return executor

    @classmethod
    def map_ordered(
        cls,
        fn: Callable[[T], R],
        items: Iterable[T],
        threads: Optional[int] = None,
        on_done: Optional[Callable[[R], None]] = None,
    ) -> List[R]:
        """
        并行执行 fn，结果按输入顺序返回

        结果顺序与调度顺序无关，因此并行与串行的输出逐位一致。
        任意任务抛出的异常会在收集结果时原样抛出（按输入顺序的第一个）。

        参数:
            fn: 单个任务函数
            items: 任务输入
            threads: 线程数，1 表示在当前线程内直接执行
            on_done: 每个任务完成后的回调（如进度条推进）
        """
        items = list(items)
        workers = min(resolve_threads(threads), max(len(items), 1))

        if workers <= 1:
            results = []
            for item in items:
                result = fn(item)
                if on_done is not None:
                    on_done(result)
                results.append(result)
            return results

        executor = cls.get_executor(workers)

        def run(item):
            result = fn(item)
            if on_done is not None:
                on_done(result)
            return result

        futures = [executor.submit(run, item) for item in items]
        return [future.result() for future in futures]

    @classmethod
    def shutdown_all(cls):
        """关闭所有已创建的执行器，彻底释放资源"""
        with cls._lock:
            for key in list(cls._executors.keys()):
                executor = cls._executors.pop(key)
                try:
                    executor.shutdown(wait=True)
                except Exception:
                    pass
