"""
文件读写工具模块
提供带偏移追踪的字节读取器、字节写出与原子性文件写入
"""

import os
import shutil
import struct
import tempfile
from typing import BinaryIO, Iterable, Union

import numpy as np

from .errors import FormatError, TruncatedError, wrap_os_error

PathLike = Union[str, os.PathLike]
ByteSink = Union[PathLike, BinaryIO]
ByteSource = Union[PathLike, bytes, bytearray, memoryview, BinaryIO]


def _is_path(target) -> bool:
    return isinstance(target, (str, os.PathLike))


# ---原子性写入---

def atomic_write_bytes(file_path: PathLike, data: bytes) -> int:
    """
    原子性写入二进制文件

    采用"写临时文件 + 原子性重命名"的策略：
    - 写入成功，新文件替换旧文件
    - 写入失败或中断，旧文件保持不变

    参数:
        file_path: 目标文件路径
        data: 文件内容

    返回:
        int: 写入字节数
    """
    file_path = os.fspath(file_path)
    directory = os.path.dirname(os.path.abspath(file_path))
    temp_fd = None
    temp_path = None
    written = 0

    try:
        os.makedirs(directory, exist_ok=True)
        # 在同一目录下创建临时文件（确保在同一文件系统，rename 才是原子的）
        temp_fd, temp_path = tempfile.mkstemp(dir=directory, suffix='.tmp', prefix='.tmp_')
        with os.fdopen(temp_fd, 'wb') as f:
            temp_fd = None  # 已交给文件对象管理
            view = memoryview(data)
            while written < len(view):
                written += f.write(view[written:])
        shutil.move(temp_path, file_path)
        temp_path = None
        return written
    except OSError as e:
        raise wrap_os_error(e, path=file_path, offset=written) from e
    finally:
        if temp_fd is not None:
            try:
                os.close(temp_fd)
            except OSError:
                pass
        if temp_path is not None and os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError:
                pass


def atomic_write_text(file_path: PathLike, text: str) -> int:
    """原子性写入 UTF-8 文本文件（CSV / JSON 报告）"""
    return atomic_write_bytes(file_path, text.encode("utf-8"))


def write_chunks(destination: ByteSink, chunks: Iterable[bytes]) -> int:
    """
    把若干字节块写入目标

    参数:
        destination: 文件路径（原子写入）或可写的二进制流
        chunks: 字节块序列

    返回:
        int: 写入的总字节数

    异常:
        IOFailure: 写入失败，context 中带出失败时的字节偏移
    """
    if _is_path(destination):
        return atomic_write_bytes(destination, b"".join(chunks))

    offset = 0
    try:
        for chunk in chunks:
            view = memoryview(chunk)
            done = 0
            while done < len(view):
                n = destination.write(view[done:])
                if n is None:
                    n = len(view) - done
                if n <= 0:
                    raise OSError(f"写入未推进 (offset {offset + done})")
                done += n
            offset += done
        return offset
    except OSError as e:
        raise wrap_os_error(e, offset=offset) from e


def read_all(source: ByteSource) -> bytes:
    """
    读取完整字节内容

    参数:
        source: 文件路径、字节串或可读二进制流
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if _is_path(source):
        try:
            with open(source, "rb") as f:
                return f.read()
        except OSError as e:
            raise wrap_os_error(e, path=os.fspath(source)) from e
    try:
        return source.read()
    except OSError as e:
        raise wrap_os_error(e) from e


class ByteReader:
    """
    带偏移追踪的小端字节读取器

    所有读取在越界时抛出 TruncatedError，信息中包含偏移和字段名。
    """

    def __init__(self, data: bytes, name: str = "文件"):
        self._data = memoryview(data)
        self._offset = 0
        self.name = name

    @property
    def offset(self) -> int:
        return self._offset

    @property
    def remaining(self) -> int:
        return len(self._data) - self._offset

    def read(self, n: int, field: str) -> bytes:
        """读取 n 字节"""
        end = self._offset + n
        if n < 0 or end > len(self._data):
            raise TruncatedError(
                f"{self.name} truncated at offset {len(self._data)}",
                field=field,
                offset=len(self._data),
                expected_end=end,
            )
        chunk = bytes(self._data[self._offset:end])
        self._offset = end
        return chunk

    def unpack(self, fmt: str, field: str):
        """按 struct 格式读取（自动加小端前缀），单值直接返回"""
        size = struct.calcsize("<" + fmt)
        values = struct.unpack("<" + fmt, self.read(size, field))
        return values[0] if len(values) == 1 else values

    def read_array(self, count: int, dtype: str, field: str) -> np.ndarray:
        """读取 count 个小端元素，返回可写副本"""
        dt = np.dtype(dtype)
        raw = self.read(count * dt.itemsize, field)
        return np.frombuffer(raw, dtype=dt).copy()

    def expect_end(self, field: str = "尾部") -> None:
        """确认已读完；多余的字节视为格式错误"""
        if self.remaining:
            raise FormatError(
                f"{self.name} 在 offset {self._offset} 之后有 {self.remaining} 个多余字节",
                field=field,
                offset=self._offset,
            )
