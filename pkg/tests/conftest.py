import numpy as np
import pytest

from cq_kvcache.services.core import WorkerPool
from cq_kvcache.utils.actdata import ActivationMatrix, SynthSpec, synth_correlated


@pytest.fixture
def small_matrix():
    """2×3 矩阵，值为 0..5"""
    return ActivationMatrix(np.arange(6, dtype=np.float32).reshape(2, 3))


@pytest.fixture
def rank2_matrix():
    """16 通道、2048 token 的秩 2 相关数据"""
    return synth_correlated(SynthSpec(channels=16, tokens=2048, latent_rank=2, noise_sigma=0.05, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True, scope="session")
def _shutdown_pools():
    yield
    WorkerPool.shutdown_all()


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """隔离环境变量，避免开发机上的 .env 影响测试"""
    for name in ("CQKV_CONFIG", "CQKV_THREADS", "CQKV_PROGRESS"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.chdir(tmp_path)
