import json

import pytest

from cq_kvcache.config_manager import ConfigManager, get_config_manager
from cq_kvcache.utils.env_config import get_progress_enabled, get_thread_limit
from cq_kvcache.utils.errors import ConfigError


def _write(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


class TestConfigManager:
    def test_template_defaults(self):
        manager = ConfigManager(quiet=True)
        assert manager.get_calibration_defaults() == {"kmeans_iters": 100, "restarts": 1, "seed": 0}
        assert manager.get_stats_defaults()["group_sizes"] == [1, 2, 3, 4]
        assert manager.get_simulate_defaults()["rope_enabled"] is True

    def test_user_values_merge_over_template(self, tmp_path):
        path = _write(tmp_path / "user.json", {"calibration": {"kmeans_iters": 7}, "simulate": {"rope_base": 500}})
        manager = ConfigManager(path, quiet=True)
        assert manager.get_calibration_defaults() == {"kmeans_iters": 7, "restarts": 1, "seed": 0}
        assert manager.get_simulate_defaults()["rope_base"] == 500.0
        assert isinstance(manager.get_simulate_defaults()["rope_base"], float)

    def test_sections_are_copies(self):
        manager = ConfigManager(quiet=True)
        manager.get_stats_defaults()["group_sizes"].append(8)
        assert manager.get_stats_defaults()["group_sizes"] == [1, 2, 3, 4]

    def test_unknown_keys_are_ignored(self, tmp_path, capsys):
        path = _write(tmp_path / "user.json", {"synth": {"colour": "red"}, "extra": 1})
        manager = ConfigManager(path)
        assert "colour" not in manager.get_synth_defaults()
        assert "synth.colour" in capsys.readouterr().out

    @pytest.mark.parametrize(
        "payload",
        [
            {"synth": {"channels": "many"}},
            {"synth": {"channels": 1.5}},
            {"simulate": {"rope_enabled": 1}},
            {"stats": {"group_sizes": 4}},
            {"runtime": "fast"},
            {"calibration": {"seed": True}},
        ],
    )
    def test_type_mismatch(self, tmp_path, payload):
        with pytest.raises(ConfigError):
            ConfigManager(_write(tmp_path / "user.json", payload), quiet=True)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(str(tmp_path / "nope.json"), quiet=True)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "user.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigError):
            ConfigManager(str(path), quiet=True)

    def test_save_roundtrip(self, tmp_path):
        path = _write(tmp_path / "user.json", {"runtime": {"threads": 3}})
        manager = ConfigManager(path, quiet=True)
        target = manager.save_user_config(str(tmp_path / "saved.json"))
        reloaded = ConfigManager(target, quiet=True)
        assert reloaded.get_runtime_defaults()["threads"] == 3

    def test_save_needs_path(self):
        with pytest.raises(ConfigError):
            ConfigManager(quiet=True).save_user_config()

    def test_env_points_to_user_config(self, tmp_path, monkeypatch):
        path = _write(tmp_path / "env.json", {"synth": {"seed": 42}})
        monkeypatch.setenv("CQKV_CONFIG", path)
        assert ConfigManager(quiet=True).get_synth_defaults()["seed"] == 42

    def test_explicit_path_gives_fresh_instance(self, tmp_path):
        path = _write(tmp_path / "user.json", {"synth": {"seed": 5}})
        assert get_config_manager(path).get_synth_defaults()["seed"] == 5
        assert get_config_manager(path) is not get_config_manager(path)


class TestEnvironment:
    @pytest.mark.parametrize("value, expected", [("4", 4), ("0", None), ("-2", None), ("lots", None), ("", None)])
    def test_thread_limit(self, monkeypatch, value, expected):
        monkeypatch.setenv("CQKV_THREADS", value)
        assert get_thread_limit() == expected

    @pytest.mark.parametrize("value, expected", [("false", False), ("OFF", False), ("0", False), ("yes", True)])
    def test_progress_flag(self, monkeypatch, value, expected):
        monkeypatch.setenv("CQKV_PROGRESS", value)
        assert get_progress_enabled() is expected

    def test_progress_defaults_on(self):
        assert get_progress_enabled() is True
