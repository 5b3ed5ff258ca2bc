import copy
import json
import os
from typing import Any, Dict, Optional

from .utils.common import log_info
from .utils.errors import ConfigError
from .utils.env_config import get_config_path
from .utils.fileio import atomic_write_text


class ConfigManager:
    """
    分层配置管理

    优先级: CLI 参数 > 环境变量 > 用户配置文件 > 内置模板
    本类负责后两层；CLI 在调用处覆盖。
    """

    def __init__(self, user_config_path: Optional[str] = None, quiet: bool = False):
        # 包目录
        self.dir_path = os.path.dirname(os.path.abspath(__file__))
        self.templates_dir = os.path.join(self.dir_path, "config")
        self.quiet = quiet

        # 用户配置路径：显式参数优先，其次环境变量
        if user_config_path is None:
            user_config_path = get_config_path()
        self.user_config_path = user_config_path

        # ---加载默认配置（从模板文件）---
        self.default_config = self._load_template("config", {"__config_version": "1.0"})

        # ---合并用户配置（缺失的键从模板补全）---
        self.config = copy.deepcopy(self.default_config)
        if self.user_config_path:
            user_config = self._load_user_config(self.user_config_path)
            self.config = self._merge(self.default_config, user_config, path="")

    # --- 统一日志输出 ---
    def _log(self, msg: str):
        """统一控制台日志前缀"""
        if not self.quiet:
            log_info(msg)

    # ---模板加载---
    def _load_template(self, template_name: str, fallback: dict = None) -> dict:
        """
        从模板文件加载默认配置

        参数:
            template_name: 模板名称（不含扩展名和_template后缀）
            fallback: 加载失败时的回退默认值

        返回:
            配置字典（包含 __config_version 用于版本管理）
        """
        template_path = os.path.join(self.templates_dir, f"{template_name}_template.json")
        try:
            with open(template_path, "r", encoding="utf-8") as f:
                return json.load(f)
        except Exception as e:
            self._log(f"加载模板 {template_name} 失败: {str(e)}，使用回退值")
            return dict(fallback or {})

    def _load_user_config(self, path: str) -> dict:
        """读取用户配置文件；文件缺失或格式错误视为配置错误"""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"用户配置文件不存在: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"用户配置文件不是合法 JSON: {path} ({e.msg}, 行 {e.lineno})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"用户配置文件顶层必须是对象: {path}")
        return data

    def _merge(self, defaults: dict, overrides: dict, path: str) -> dict:
        """
        递归合并用户配置

        - 模板中不存在的键: 忽略并记录日志
        - 类型与模板不一致: 配置错误（int 可用于 float 字段）
        """
        merged = copy.deepcopy(defaults)
        for key, value in overrides.items():
            key_path = f"{path}.{key}" if path else key
            if key.startswith("__"):
                continue
            if key not in defaults:
                self._log(f"[config] 忽略未知配置项: {key_path}")
                continue
            default = defaults[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"配置项 {key_path} 应为对象")
                merged[key] = self._merge(default, value, key_path)
            else:
                merged[key] = self._check_type(key_path, default, value)
        return merged

    @staticmethod
    def _check_type(key_path: str, default: Any, value: Any) -> Any:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"配置项 {key_path} 应为布尔值")
            return value
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"配置项 {key_path} 应为数值")
            return float(value)
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"配置项 {key_path} 应为整数")
            return value
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"配置项 {key_path} 应为数组")
            return list(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"配置项 {key_path} 应为字符串")
            return value
        return value

    # ---分节读取---
    def get_section(self, name: str) -> Dict[str, Any]:
        """返回配置分节的副本"""
        return copy.deepcopy(self.config.get(name, {}))

    def get_synth_defaults(self) -> Dict[str, Any]:
        return self.get_section("synth")

    def get_calibration_defaults(self) -> Dict[str, Any]:
        return self.get_section("calibration")

    def get_stats_defaults(self) -> Dict[str, Any]:
        return self.get_section("stats")

    def get_simulate_defaults(self) -> Dict[str, Any]:
        return self.get_section("simulate")

    def get_runtime_defaults(self) -> Dict[str, Any]:
        return self.get_section("runtime")

    def save_user_config(self, path: Optional[str] = None) -> str:
        """
        原子性保存当前合并后的配置

        参数:
            path: 目标路径，默认使用 user_config_path

        返回:
            str: 实际写入路径
        """
        target = path or self.user_config_path
        if not target:
            raise ConfigError("未指定用户配置文件路径")
        atomic_write_text(target, json.dumps(self.config, ensure_ascii=False, indent=2))
        return target


_config_manager: Optional[ConfigManager] = None


def get_config_manager(user_config_path: Optional[str] = None) -> ConfigManager:
    """
    获取配置管理器

    未指定路径时返回惰性创建的全局实例（读取 CQKV_CONFIG）；
    指定路径时返回新实例，不影响全局实例。
    """
    global _config_manager
    if user_config_path:
        return ConfigManager(user_config_path)
    if _config_manager is None:
        _config_manager = ConfigManager(quiet=True)
    return _config_manager
