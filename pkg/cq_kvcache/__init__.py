import os
import re
from importlib.metadata import PackageNotFoundError, version

from .services.cqcodec import (
    CQConfig,
    Codebook,
    QuantizedCache,
    dequantize,
    learn_codebook,
    quantize,
)
from .utils.actdata import ActivationMatrix, ModelDims, SynthSpec, load_activations, save_activations
from .utils.errors import CQError

__all__ = [
    "ActivationMatrix",
    "CQConfig",
    "CQError",
    "Codebook",
    "ModelDims",
    "QuantizedCache",
    "SynthSpec",
    "dequantize",
    "get_version",
    "learn_codebook",
    "load_activations",
    "quantize",
    "save_activations",
]


def get_version():
    """
    获取版本号

    优先读取已安装包的元数据，源码树中运行时回退到 pyproject.toml

    Returns:
        str: 版本号字符串

    Raises:
        ValueError: 当无法找到版本号时抛出
    """
    try:
        return version("cq-kvcache")
    except PackageNotFoundError:
        pass

    toml_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "pyproject.toml")
    with open(toml_path, "r", encoding='utf-8') as f:
        content = f.read()
    version_match = re.search(r'^version\s*=\s*"([^"]+)"', content, re.MULTILINE)
    if version_match:
        return version_match.group(1)
    raise ValueError("未在pyproject.toml中找到版本号")
