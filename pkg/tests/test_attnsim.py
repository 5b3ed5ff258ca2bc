import json
import math

import numpy as np
import pytest

from cq_kvcache.services.attnsim import (
    REPORT_CSV_COLUMNS,
    CodecSpec,
    DecodeScenario,
    FittedCodec,
    attention_step,
    attention_weights,
    compare_decodes,
    fit_codec,
    fit_scenario_codecs,
    parse_codec_id,
    rope_rotate,
    rope_rotate_matrix,
    run_decode,
    run_decode_with,
    synth_scenario,
    write_report_csv,
    write_summary_json,
)
from cq_kvcache.services.cqcodec import CQConfig, Codebook, learn_codebook, quantize_codes
from cq_kvcache.utils.actdata import ActivationMatrix
from cq_kvcache.utils.errors import ConfigError, ShapeError


def _few_distinct(rng, channels, tokens, distinct=8):
    palette = rng.standard_normal((distinct, channels))
    return ActivationMatrix(palette[rng.integers(0, distinct, tokens)].T)


class TestRope:
    def test_position_zero_is_identity(self, rng):
        v = rng.standard_normal(16)
        np.testing.assert_array_equal(rope_rotate(v, 0), v)

    def test_preserves_norm(self, rng):
        v = rng.standard_normal(64)
        for position in (1, 17, 2047):
            assert np.linalg.norm(rope_rotate(v, position)) == pytest.approx(np.linalg.norm(v), rel=1e-12)

    def test_quarter_turn(self):
        np.testing.assert_allclose(rope_rotate([1.0, 0.0], math.pi / 2), [0.0, 1.0], atol=1e-15)

    def test_frequencies_decrease(self):
        out = rope_rotate([1.0, 0.0, 1.0, 0.0], 1.0, base=100.0)
        np.testing.assert_allclose(out, [math.cos(1.0), math.sin(1.0), math.cos(0.1), math.sin(0.1)])

    def test_odd_dimension(self):
        with pytest.raises(ConfigError):
            rope_rotate([1.0, 2.0, 3.0], 1)

    def test_matrix_matches_per_vector(self, rng):
        data = rng.standard_normal((8, 5))
        rotated = rope_rotate_matrix(data, np.arange(5))
        for j in range(5):
            np.testing.assert_array_equal(rotated[:, j], rope_rotate(data[:, j], j))

    def test_relative_position_property(self, rng):
        q = rng.standard_normal(8)
        k = rng.standard_normal(8)
        a = rope_rotate(q, 10) @ rope_rotate(k, 7)
        b = rope_rotate(q, 5) @ rope_rotate(k, 2)
        assert a == pytest.approx(b, rel=1e-9)


class TestAttention:
    def test_single_token_returns_value(self, rng):
        value = rng.standard_normal((4, 1))
        out = attention_step(rng.standard_normal(3), rng.standard_normal((3, 1)), value)
        np.testing.assert_array_equal(out, value[:, 0])

    def test_zero_keys_average_values(self, rng):
        values = rng.standard_normal((4, 6))
        out = attention_step(rng.standard_normal(3), np.zeros((3, 6)), values)
        np.testing.assert_allclose(out, values.mean(axis=1), rtol=1e-12, atol=1e-12)

    def test_matches_dense_formula(self, rng):
        q = rng.standard_normal(8)
        keys = rng.standard_normal((8, 20))
        values = rng.standard_normal((5, 20))
        scores = keys.T @ q
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        np.testing.assert_allclose(attention_step(q, keys, values), values @ weights, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(attention_weights(q, keys), weights, rtol=1e-10, atol=1e-15)

    def test_score_shift_does_not_change_output(self, rng):
        q = rng.standard_normal(6)
        keys = rng.standard_normal((6, 15))
        values = rng.standard_normal((3, 15))
        shifted_keys = np.vstack([keys, np.ones((1, 15))])
        for shift in (-50.0, 3.5, 200.0):
            shifted_q = np.append(q, shift)
            np.testing.assert_allclose(
                attention_step(shifted_q, shifted_keys, values), attention_step(q, keys, values), rtol=1e-10, atol=1e-12
            )
            np.testing.assert_allclose(
                attention_weights(shifted_q, shifted_keys), attention_weights(q, keys), rtol=1e-10, atol=1e-15
            )

    def test_scaled_divides_by_sqrt_dim(self, rng):
        q = rng.standard_normal(16)
        keys = rng.standard_normal((16, 10))
        values = rng.standard_normal((16, 10))
        np.testing.assert_allclose(
            attention_step(q, keys, values, scaled=True), attention_step(q / 4.0, keys, values), rtol=1e-10, atol=1e-12
        )

    def test_large_scores_are_stable(self):
        weights = attention_weights(np.array([1000.0]), np.array([[1.0, 2.0]]))
        assert np.all(np.isfinite(weights))
        assert weights[1] == pytest.approx(1.0)

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeError):
            attention_step(rng.standard_normal(3), rng.standard_normal((4, 2)), rng.standard_normal((4, 2)))
        with pytest.raises(ShapeError):
            attention_step(rng.standard_normal(3), rng.standard_normal((3, 2)), rng.standard_normal((3, 5)))


class TestCodecIds:
    @pytest.mark.parametrize(
        "codec_id, kind, bits",
        [
            ("none", "none", 32.0),
            ("cq:4c8b", "cq", 2.0),
            ("cq:8c8b:fisher", "cq", 1.0),
            ("cw:2", "cw", 2.0),
            ("int:4", "int", 4.0),
            ("int:2:token", "int", 2.0),
            ("int:2:channel:32", "int", 2.0),
        ],
    )
    def test_parse(self, codec_id, kind, bits):
        spec = parse_codec_id(codec_id)
        assert spec.kind == kind
        assert spec.bits_per_fpn == bits

    def test_fisher_flag(self):
        assert parse_codec_id("cq:2c4b:fisher").cq.learning_mode == "fisher"
        assert parse_codec_id("cw:3").cq.channels_per_group == 1

    @pytest.mark.parametrize(
        "codec_id", ["", "fp16", "cq:CQ-4c8b", "cq:4c8b:hessian", "cw:0", "cw:9", "int:9", "int:2:head", "cq:3c"]
    )
    def test_rejects(self, codec_id):
        with pytest.raises(ConfigError):
            parse_codec_id(codec_id)


class TestScenario:
    def test_shapes_must_agree(self, rng):
        a = ActivationMatrix(rng.standard_normal((4, 8)))
        b = ActivationMatrix(rng.standard_normal((4, 7)))
        with pytest.raises(ShapeError):
            DecodeScenario(a, a, b)

    def test_rope_needs_even_head(self, rng):
        m = ActivationMatrix(rng.standard_normal((3, 4)))
        with pytest.raises(ConfigError):
            DecodeScenario(m, m, m)
        assert DecodeScenario(m, m, m, rope_enabled=False).head_channels == 3

    def test_calibration_channels(self, rng):
        m = ActivationMatrix(rng.standard_normal((4, 8)))
        with pytest.raises(ShapeError):
            DecodeScenario(m, m, m, key_calibration=ActivationMatrix(rng.standard_normal((2, 8))))

    def test_synth_supplies_held_out_calibration(self):
        scenario = synth_scenario(8, 16, seed=3)
        assert scenario.key_calibration.shape == (8, 16)
        assert scenario.value_calibration.shape == (8, 16)
        assert not scenario.key_calibration.equals(scenario.keys)
        shorter = scenario.prefix(5)
        assert shorter.key_calibration is scenario.key_calibration
        assert synth_scenario(8, 16, seed=3, calibration_tokens=4).key_calibration.tokens == 4

    def test_synth_explicit_calibration_wins(self, rng):
        calib = ActivationMatrix(rng.standard_normal((8, 30)))
        scenario = synth_scenario(8, 16, seed=3, key_calibration=calib)
        assert scenario.key_calibration is calib
        assert scenario.value_calibration.tokens == 16

    def test_synth_needs_calibration_tokens(self):
        with pytest.raises(ConfigError):
            synth_scenario(8, 16, calibration_tokens=0)

    def test_channel_integer_ranges_come_from_calibration(self, rng):
        calib = ActivationMatrix(rng.standard_normal((4, 50)))
        fitted = fit_codec(parse_codec_id("int:2"), calib)
        np.testing.assert_array_equal(fitted.ranges[0], calib.values.astype(np.float64).min(axis=1))
        np.testing.assert_array_equal(fitted.ranges[1], calib.values.astype(np.float64).max(axis=1))
        assert fit_codec(parse_codec_id("int:2:token"), calib).ranges is None

    def test_grouped_channel_integers_rejected(self, rng):
        calib = ActivationMatrix(rng.standard_normal((4, 64)))
        with pytest.raises(ConfigError):
            fit_codec(parse_codec_id("int:2:channel:32"), calib)

    def test_synth_is_deterministic(self):
        a = synth_scenario(8, 16, seed=3)
        b = synth_scenario(8, 16, seed=3)
        assert a.keys.equals(b.keys) and a.values.equals(b.values) and a.queries.equals(b.queries)
        assert not a.keys.equals(a.values)


class TestDecode:
    def test_no_codec_has_zero_error(self):
        report = run_decode(synth_scenario(8, 24, seed=1))
        assert np.all(report.rel_errors == 0.0)
        assert np.all(report.tv_distances == 0.0)
        assert report.bits_per_fpn == 32.0
        np.testing.assert_allclose(report.exact_weight_sums, 1.0, atol=1e-12)

    def test_exact_fit_codebook_has_zero_error(self, rng):
        keys = _few_distinct(rng, 4, 40)
        values = _few_distinct(rng, 4, 40)
        queries = ActivationMatrix(rng.standard_normal((4, 40)) * 0.1)
        scenario = DecodeScenario(queries, keys, values, codec=parse_codec_id("cq:2c3b"), kmeans_iters=20)
        report = run_decode(scenario)
        assert np.all(report.rel_errors == 0.0)

    def test_lossy_codec_has_error(self):
        scenario = synth_scenario(8, 32, seed=2, codec=parse_codec_id("int:1"))
        assert run_decode(scenario).max_rel_error > 0

    @pytest.mark.parametrize("codec_id", ["cq:2c2b", "int:2", "int:2:token", "cw:2"])
    def test_causality(self, codec_id):
        scenario = synth_scenario(8, 40, seed=4, codec=parse_codec_id(codec_id), kmeans_iters=15)
        full = run_decode(scenario)
        for t in (1, 7, 23):
            prefix = run_decode(scenario.prefix(t))
            np.testing.assert_array_equal(prefix.rel_errors, full.rel_errors[:t])
            np.testing.assert_array_equal(prefix.quant_outputs, full.quant_outputs[:t])

    def test_codec_stage_error_carries_step_zero(self, rng):
        small = ActivationMatrix(rng.standard_normal((4, 64)))
        codebook = learn_codebook(small, CQConfig(2, 2, kmeans_iters=5))
        mismatched = FittedCodec(parse_codec_id("cq:2c2b"), codebook)
        none = FittedCodec(CodecSpec("none", "none"))
        scenario = synth_scenario(8, 16, seed=3)
        with pytest.raises(ShapeError) as excinfo:
            run_decode_with(scenario, none, mismatched)
        assert excinfo.value.context["step"] == 0

    @pytest.mark.parametrize("epsilon", [1e-3, 5e-3])
    def test_centroid_perturbation_is_first_order(self, rng, epsilon):
        keys = _few_distinct(rng, 4, 40)
        values = _few_distinct(rng, 4, 40)
        queries = ActivationMatrix(rng.standard_normal((4, 40)) * 0.1)
        scenario = DecodeScenario(queries, keys, values, codec=parse_codec_id("cq:2c3b"), kmeans_iters=20)
        _, value_codec = fit_scenario_codecs(scenario)
        code = quantize_codes(values, value_codec.codebook)[0, 0]
        none = FittedCodec(CodecSpec("none", "none"))

        def mean_error(shift):
            centroids = value_codec.codebook.centroids.copy()
            centroids[0, code] += shift
            nudged = FittedCodec(value_codec.spec, Codebook(value_codec.codebook.config, centroids))
            return run_decode_with(scenario, none, nudged).mean_rel_error

        single = mean_error(epsilon)
        double = mean_error(2 * epsilon)
        assert 0.0 < single < 100 * epsilon
        assert double == pytest.approx(2 * single, rel=1e-2)

    def test_small_perturbation_small_change(self):
        scenario = synth_scenario(8, 32, seed=5, rope_enabled=False)
        nudged = DecodeScenario(
            scenario.queries,
            ActivationMatrix(scenario.keys.values + 1e-4),
            scenario.values,
            rope_enabled=False,
        )
        none = FittedCodec(CodecSpec("none", "none"))
        a = run_decode_with(scenario, none, none)
        b = run_decode_with(nudged, none, none)
        assert np.max(np.abs(a.exact_outputs - b.exact_outputs)) < 1e-2

    def test_fitted_codecs_use_calibration(self, rng):
        scenario = synth_scenario(8, 32, seed=6, codec=parse_codec_id("cq:4c2b"), kmeans_iters=10)
        key_codec, value_codec = fit_scenario_codecs(scenario)
        assert key_codec.codebook.num_groups == 2
        assert key_codec.codebook.content_hash != value_codec.codebook.content_hash

    def test_on_step_called_per_token(self):
        steps = []
        run_decode(synth_scenario(4, 12, seed=7), on_step=steps.append)
        assert steps == list(range(1, 13))

    def test_compare_sorts_by_mean_error(self):
        scenario = synth_scenario(8, 24, seed=8, kmeans_iters=10)
        codecs = [parse_codec_id(c) for c in ("int:1", "none", "int:4")]
        reports = compare_decodes(scenario, codecs)
        assert [r.codec_id for r in reports] == ["none", "int:4", "int:1"]

    @pytest.mark.slow
    def test_coupled_codebook_beats_two_bit_integers(self):
        scenario = synth_scenario(128, 1024, latent_rank=2, noise_sigma=0.05, seed=9)
        reports = compare_decodes(scenario, [parse_codec_id("int:2"), parse_codec_id("cq:4c8b")])
        assert reports[0].codec_id == "cq:4c8b"
        assert reports[0].mean_rel_error < reports[1].mean_rel_error


class TestReports:
    def test_csv_layout(self, tmp_path):
        report = run_decode(synth_scenario(4, 5, seed=1))
        path = tmp_path / "decode.csv"
        write_report_csv(report, path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == ",".join(REPORT_CSV_COLUMNS)
        assert len(lines) == 6
        assert lines[1].startswith("1,")
        assert lines[-1].startswith("5,")

    def test_summary_key_order(self):
        report = run_decode(synth_scenario(4, 5, seed=1))
        assert list(report.summary()) == [
            "codec", "bits_per_fpn", "head_channels", "tokens", "rope_enabled", "rope_base",
            "scaled", "seed", "mean_rel_l2_err", "max_rel_l2_err", "mean_weight_tv_dist", "max_weight_tv_dist",
        ]
        assert json.loads(report.to_json())["codec"] == "none"

    def test_summary_json_ranking(self, tmp_path):
        scenario = synth_scenario(4, 8, seed=2)
        reports = compare_decodes(scenario, [parse_codec_id("int:1"), parse_codec_id("none")])
        path = tmp_path / "summary.json"
        write_summary_json(reports, path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        assert payload["ranking"] == ["none", "int:1"]
        assert len(payload["reports"]) == 2
