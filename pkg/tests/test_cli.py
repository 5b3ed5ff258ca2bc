import json

import numpy as np
import pytest

from cq_kvcache.cli import build_parser, main
from cq_kvcache.services.cqcodec import load_cache, load_codebook
from cq_kvcache.utils.actdata import load_activations


def _run(*argv):
    return main(["--quiet", "--threads", "1", *argv])


@pytest.fixture
def actd(tmp_path):
    path = tmp_path / "data.actd"
    assert _run("gen", "--channels", "8", "--tokens", "256", "--seed", "3", "-o", str(path)) == 0
    return path


@pytest.fixture
def actd_with_gradients(tmp_path):
    path = tmp_path / "grad.actd"
    assert _run("gen", "--channels", "8", "--tokens", "256", "--gradients", "-o", str(path)) == 0
    return path


class TestGen:
    def test_deterministic(self, tmp_path, actd):
        again = tmp_path / "again.actd"
        assert _run("gen", "--channels", "8", "--tokens", "256", "--seed", "3", "-o", str(again)) == 0
        assert again.read_bytes() == actd.read_bytes()
        assert load_activations(actd).shape == (8, 256)

    def test_gradients_flag(self, actd_with_gradients):
        assert load_activations(actd_with_gradients).has_gradients

    def test_rank_above_channels_is_config_error(self, tmp_path, capsys):
        code = _run("gen", "--channels", "2", "--tokens", "8", "--rank", "3", "-o", str(tmp_path / "x.actd"))
        assert code == 2
        assert "latent_rank=3" in capsys.readouterr().out
        assert not (tmp_path / "x.actd").exists()


class TestCodecCommands:
    def test_calibrate_quantize_dequantize(self, tmp_path, actd, capsys):
        codebook = tmp_path / "cb.cqcb"
        cache = tmp_path / "kv.cqqc"
        restored = tmp_path / "restored.actd"
        assert _run("calibrate", str(actd), "--cq", "4c4b", "--iters", "20", "-o", str(codebook)) == 0
        assert _run("quantize", str(actd), "--codebook", str(codebook), "-o", str(cache)) == 0
        assert _run(
            "dequantize", str(cache), "--codebook", str(codebook), "--ref", str(actd), "-o", str(restored)
        ) == 0

        assert load_codebook(codebook).config.notation == "CQ-4c4b"
        assert load_cache(cache).tokens == 256
        assert load_activations(restored).shape == (8, 256)
        assert "重建误差" in capsys.readouterr().out

    def test_calibrate_reports_elapsed_time_when_quiet(self, tmp_path, actd, capsys, monkeypatch):
        monkeypatch.setenv("CQKV_PROGRESS", "false")
        capsys.readouterr()
        assert _run("calibrate", str(actd), "--cq", "2c2b", "--iters", "5", "-o", str(tmp_path / "cb.cqcb")) == 0
        out = capsys.readouterr().out
        assert "码本学习完成" in out
        assert "耗时:" in out
        assert "🔵" not in out

    def test_quantize_learns_inline(self, tmp_path, actd):
        cache = tmp_path / "kv.cqqc"
        codebook = tmp_path / "cb.cqcb"
        code = _run(
            "quantize", str(actd), "--cq", "2c2b", "--iters", "10", "--save-codebook", str(codebook), "-o", str(cache)
        )
        assert code == 0
        assert load_cache(cache).codebook_hash == load_codebook(codebook).content_hash

    def test_quantize_reports_rate(self, tmp_path, actd, capsys):
        code = _run("quantize", str(actd), "--cq", "8c10b", "--iters", "3", "-o", str(tmp_path / "kv.cqqc"))
        assert code == 0
        assert "bits_per_fpn:1.25" in capsys.readouterr().out

    def test_quantize_needs_codebook_or_config(self, tmp_path, actd):
        assert _run("quantize", str(actd), "-o", str(tmp_path / "kv.cqqc")) == 2

    def test_indivisible_channels(self, tmp_path, actd):
        assert _run("calibrate", str(actd), "--cq", "3c8b", "-o", str(tmp_path / "cb.cqcb")) == 5

    def test_fisher_without_gradients(self, tmp_path, actd):
        assert _run("calibrate", str(actd), "--cq", "2c2b", "--fisher", "-o", str(tmp_path / "cb.cqcb")) == 6

    def test_fisher_with_gradients(self, tmp_path, actd_with_gradients):
        codebook = tmp_path / "cb.cqcb"
        assert _run(
            "calibrate", str(actd_with_gradients), "--cq", "2c2b", "--fisher", "--iters", "10", "-o", str(codebook)
        ) == 0
        assert load_codebook(codebook).config.learning_mode == "fisher"

    def test_bad_notation(self, tmp_path, actd):
        assert _run("calibrate", str(actd), "--cq", "CQ-3c", "-o", str(tmp_path / "cb.cqcb")) == 2

    def test_codebook_mismatch(self, tmp_path, actd):
        other = tmp_path / "other.actd"
        a = tmp_path / "a.cqcb"
        b = tmp_path / "b.cqcb"
        cache = tmp_path / "kv.cqqc"
        assert _run("gen", "--channels", "8", "--tokens", "256", "--seed", "4", "-o", str(other)) == 0
        assert _run("calibrate", str(actd), "--cq", "2c2b", "--iters", "5", "-o", str(a)) == 0
        assert _run("calibrate", str(other), "--cq", "2c2b", "--iters", "5", "-o", str(b)) == 0
        assert _run("quantize", str(actd), "--codebook", str(a), "-o", str(cache)) == 0
        assert _run("dequantize", str(cache), "--codebook", str(b), "-o", str(tmp_path / "r.actd")) == 7

    def test_missing_input(self, tmp_path):
        assert _run("calibrate", str(tmp_path / "missing.actd"), "--cq", "2c2b", "-o", str(tmp_path / "cb")) == 3

    def test_corrupt_input(self, tmp_path):
        bad = tmp_path / "bad.actd"
        bad.write_bytes(b"NOPE" + bytes(20))
        assert _run("calibrate", str(bad), "--cq", "2c2b", "-o", str(tmp_path / "cb")) == 4


class TestSize:
    BASE = ("size", "--layers", "32", "--kv-heads", "32", "--head-dim", "128")

    def test_fp16_cache(self, tmp_path):
        out = tmp_path / "size.json"
        assert _run(*self.BASE, "--json", str(out)) == 0
        result = json.loads(out.read_text(encoding="utf-8"))
        assert result["kv_cache_bytes"] == 1_073_741_824
        assert "centroid_params" not in result

    def test_cq_config(self, tmp_path, capsys):
        out = tmp_path / "size.json"
        assert _run(*self.BASE, "--cq", "4c8b", "--model-params", "6738415616", "--json", str(out)) == 0
        result = json.loads(out.read_text(encoding="utf-8"))
        assert result["bits_per_fpn"] == 2.0
        assert result["kv_cache_bytes"] == 134_217_728
        assert result["centroid_params"] == 67_108_864
        assert result["centroid_bytes_fp16"] == 134_217_728
        assert result["compression_ratio"] == 8.0
        assert result["centroid_overhead_pct"] == pytest.approx(0.9959, abs=1e-4)
        assert "67,108,864 (67.11M)" in capsys.readouterr().out

    def test_fractional_bits(self, tmp_path):
        out = tmp_path / "size.json"
        assert _run(*self.BASE, "--cq", "8c10b", "--json", str(out)) == 0
        assert json.loads(out.read_text(encoding="utf-8"))["kv_cache_bytes"] == 83_886_080

    def test_tokens_beyond_context(self):
        assert _run(*self.BASE, "--tokens", "4096") == 8

    def test_fewer_kv_heads(self, tmp_path):
        out = tmp_path / "size.json"
        code = _run("size", "--layers", "32", "--kv-heads", "8", "--head-dim", "128", "--cq", "2c8b", "--json", str(out))
        assert code == 0
        assert json.loads(out.read_text(encoding="utf-8"))["centroid_params"] == 16_777_216


class TestStats:
    def test_writes_reports(self, tmp_path, actd):
        out = tmp_path / "stats"
        code = _run(
            "stats", str(actd), "--group-sizes", "1,2,4", "--scatter-pairs", "0:1,2:3",
            "--scatter-points", "50", "--out-dir", str(out),
        )
        assert code == 0
        entropy = (out / "entropy.csv").read_text(encoding="utf-8").splitlines()
        assert len(entropy) == 1 + 8 + 4 + 2
        correlation = (out / "correlation.csv").read_text(encoding="utf-8").splitlines()
        assert len(correlation) == 1 + 8
        scatter = (out / "scatter.csv").read_text(encoding="utf-8").splitlines()
        assert len(scatter) == 1 + 100

    def test_group_too_large(self, tmp_path, actd):
        assert _run("stats", str(actd), "--group-sizes", "9", "--out-dir", str(tmp_path)) == 8

    def test_bad_pair_syntax_is_usage_error(self, actd):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["stats", str(actd), "--scatter-pairs", "0-1"])


class TestSimulate:
    def test_synthetic_run(self, tmp_path):
        out = tmp_path / "sim"
        code = _run(
            "simulate", "--head-dim", "8", "--tokens", "16", "--codec", "none", "--codec", "int:2",
            "--seed", "1", "--out-dir", str(out),
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
        assert summary["ranking"] == ["none", "int:2"]
        assert summary["reports"][0]["mean_rel_l2_err"] == 0.0
        lines = (out / "decode_int_2.csv").read_text(encoding="utf-8").splitlines()
        assert len(lines) == 17
        assert (out / "decode_none.csv").exists()

    def test_json_format_skips_csv(self, tmp_path):
        out = tmp_path / "sim"
        assert _run("simulate", "--head-dim", "4", "--tokens", "6", "--format", "json", "--out-dir", str(out)) == 0
        assert (out / "summary.json").exists()
        assert not list(out.glob("*.csv"))

    def test_files_must_come_together(self, tmp_path, actd):
        assert _run("simulate", "--keys", str(actd), "--out-dir", str(tmp_path)) == 2

    def test_from_files(self, tmp_path, actd):
        out = tmp_path / "sim"
        code = _run(
            "simulate", "--queries", str(actd), "--keys", str(actd), "--values", str(actd),
            "--codec", "cq:2c2b", "--iters", "5", "--no-rope", "--out-dir", str(out),
        )
        assert code == 0
        report = json.loads((out / "summary.json").read_text(encoding="utf-8"))["reports"][0]
        assert report["tokens"] == 256
        assert report["rope_enabled"] is False

    def test_files_without_calibration_warn(self, tmp_path, actd, capsys):
        files = ("--queries", str(actd), "--keys", str(actd), "--values", str(actd))
        assert _run("simulate", *files, "--codec", "int:2", "--out-dir", str(tmp_path / "a")) == 0
        assert "--calib-keys" in capsys.readouterr().out
        calib = ("--calib-keys", str(actd), "--calib-values", str(actd))
        assert _run("simulate", *files, *calib, "--codec", "int:2", "--out-dir", str(tmp_path / "b")) == 0
        assert "--calib-keys" not in capsys.readouterr().out

    def test_unknown_codec(self, tmp_path):
        assert _run("simulate", "--codec", "fp8", "--out-dir", str(tmp_path)) == 2


class TestInfo:
    def test_describes_each_format(self, tmp_path, actd, capsys):
        codebook = tmp_path / "cb.cqcb"
        cache = tmp_path / "kv.cqqc"
        _run("quantize", str(actd), "--cq", "2c1b", "--iters", "5", "--save-codebook", str(codebook), "-o", str(cache))
        capsys.readouterr()

        for path, name in ((actd, "ACTD"), (codebook, "CQCB"), (cache, "CQQC")):
            assert _run("info", str(path)) == 0
            assert f"format: {name}" in capsys.readouterr().out

    def test_unknown_magic(self, tmp_path):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"JUNKJUNK")
        assert _run("info", str(junk)) == 4


class TestUserConfig:
    def test_config_supplies_defaults(self, tmp_path):
        config = tmp_path / "user.json"
        config.write_text(json.dumps({"synth": {"channels": 6, "tokens": 10}}), encoding="utf-8")
        out = tmp_path / "g.actd"
        assert main(["--quiet", "--config", str(config), "gen", "-o", str(out)]) == 0
        assert load_activations(out).shape == (6, 10)

    def test_cli_overrides_config(self, tmp_path):
        config = tmp_path / "user.json"
        config.write_text(json.dumps({"synth": {"channels": 6, "tokens": 10}}), encoding="utf-8")
        out = tmp_path / "g.actd"
        assert main(["--quiet", "--config", str(config), "gen", "--tokens", "4", "-o", str(out)]) == 0
        np.testing.assert_array_equal(load_activations(out).shape, (6, 4))

    def test_bad_config_type(self, tmp_path):
        config = tmp_path / "user.json"
        config.write_text(json.dumps({"synth": {"channels": "many"}}), encoding="utf-8")
        assert main(["--quiet", "--config", str(config), "gen", "-o", str(tmp_path / "g.actd")]) == 2
