"""
环境变量配置模块
通过 .env 文件管理可选的运行时覆盖项（均非必需）

支持的变量:
    CQKV_CONFIG    用户配置 JSON 路径
    CQKV_THREADS   默认工作线程数
    CQKV_PROGRESS  是否显示进度条 (true/false)
"""

import os
from typing import Optional

# 尝试导入 python-dotenv，如果不存在则使用基本的环境变量读取
try:
    from dotenv import load_dotenv

    def _load_env_file():
        """加载 .env 文件（不覆盖已存在的进程环境变量）"""
        load_dotenv(override=False)

except ImportError:
    def _load_env_file():
        """python-dotenv 未安装时的降级处理"""
        pass


_env_loaded = False


def _ensure_env_loaded():
    global _env_loaded
    if not _env_loaded:
        _load_env_file()
        _env_loaded = True


def get_config_path() -> Optional[str]:
    """
    获取用户配置文件路径

    返回:
        Optional[str]: 路径，未配置则返回 None
    """
    _ensure_env_loaded()
    path = os.getenv('CQKV_CONFIG', '').strip()
    return path or None


def get_thread_limit() -> Optional[int]:
    """
    获取默认线程数

    返回:
        Optional[int]: 线程数，未配置或无效则返回 None
    """
    _ensure_env_loaded()
    value = os.getenv('CQKV_THREADS', '').strip()
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        return None
    return threads if threads > 0 else None


def get_progress_enabled() -> bool:
    """
    检查是否显示进度条

    返回:
        bool: 默认 True，仅显式设置为 false/0/no 时关闭
    """
    _ensure_env_loaded()
    value = os.getenv('CQKV_PROGRESS', '').strip().lower()
    return value not in ('false', '0', 'no', 'off')
