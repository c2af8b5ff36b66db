import json

import numpy as np
import pytest

from mpsep.audio import Spectrogram
from mpsep.engine import (
    conservation_deviation,
    count_sounds,
    localize,
    minus_step,
    plus_step,
    save_separation_result,
    separate,
    separate_independent_baseline,
)
from mpsep.errors import ConfigError
from mpsep.models import ModelConfig, MpModel, SubSpectrogramBank, VisualFeatureMap, compose_mask
from mpsep.specalg import apply_mask, energy


@pytest.fixture(scope="module")
def model():
    return MpModel(ModelConfig.smoke(seed=0))


def rand_mix(seed, rows=64, cols=64, hi=5.0):
    rng = np.random.default_rng(seed)
    return Spectrogram(rng.uniform(0, hi, (rows, cols)), "mel")


def rand_frames(seed, t=2, h=64, w=128):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, (t, h, w, 3)).astype(np.uint8)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30, 30)))


class TestLocalize:
    def test_zero_mixture_ties_to_origin(self, model):
        V = model.visual_encode(rand_frames(0))
        mix = Spectrogram(np.zeros((64, 64)), "mel")
        bank = model.predict_components(mix)
        loc = localize(V, bank, mix)
        assert (loc.x, loc.y) == (0, 0)
        assert np.all(loc.score_map == 0.0)

    def test_constant_features_tie_to_origin(self):
        V = VisualFeatureMap(np.ones((1, 3, 5, 4)))
        bank = SubSpectrogramBank(np.random.default_rng(1).normal(size=(4, 8, 8)))
        mix = rand_mix(2, 8, 8)
        loc = localize(V, bank, mix)
        assert (loc.x, loc.y) == (0, 0)
        assert np.allclose(loc.score_map, loc.score_map[0, 0])

    def test_matches_exhaustive_loop_oracle(self):
        rng = np.random.default_rng(3)
        V = VisualFeatureMap(rng.normal(size=(2, 4, 4, 6)))
        bank = SubSpectrogramBank(rng.normal(size=(6, 8, 8)))
        mix = rand_mix(4, 8, 8)
        loc = localize(V, bank, mix)
        feats = V.grid.max(axis=0)
        best, best_xy = -1.0, None
        for x in range(4):
            for y in range(4):
                acc = np.zeros((8, 8))
                for j in range(6):
                    acc += feats[x, y, j] * bank.channels[j]
                masked = sigmoid(acc) * mix.values
                score = np.mean(masked ** 2)
                assert loc.score_map[x, y] == pytest.approx(score, rel=1e-12)
                if score > best:
                    best, best_xy = score, (x, y)
        assert (loc.x, loc.y) == best_xy
        np.testing.assert_array_equal(loc.v, feats[loc.x, loc.y])

    def test_column_restriction(self):
        rng = np.random.default_rng(5)
        V = VisualFeatureMap(rng.normal(size=(1, 4, 6, 3)))
        bank = SubSpectrogramBank(rng.normal(size=(3, 8, 8)))
        mix = rand_mix(6, 8, 8)
        loc = localize(V, bank, mix, col_range=(3, 6))
        assert 3 <= loc.y < 6
        sub = loc.score_map[:, 3:6]
        assert loc.score_map[loc.x, loc.y] == sub.max()


class TestMinusStep:
    def test_ratio_mode_is_complement_mask_without_clamping(self, model):
        mix = rand_mix(7)
        V = model.visual_encode(rand_frames(7))
        ms = minus_step(mix, V, model)
        assert ms.clamped == 0
        np.testing.assert_allclose(
            ms.mix_next.values, (1 - ms.mask.values) * mix.values, atol=1e-12)

    def test_zero_mixture_stays_zero(self, model):
        mix = Spectrogram(np.zeros((64, 64)), "mel")
        V = model.visual_encode(rand_frames(8))
        ms = minus_step(mix, V, model)
        assert np.all(ms.solo.values == 0.0)
        assert np.all(ms.mix_next.values == 0.0)

    def test_energy_never_increases(self, model):
        for seed in range(5):
            mix = rand_mix(10 + seed)
            V = model.visual_encode(rand_frames(10 + seed))
            ms = minus_step(mix, V, model, mask_kind="ratio")
            assert energy(ms.mix_next) <= energy(mix)
            msb = minus_step(mix, V, model, mask_kind="binary")
            assert energy(msb.mix_next) <= energy(mix)

    def test_solo_is_mask_applied_to_current_mixture(self, model):
        mix = rand_mix(16)
        V = model.visual_encode(rand_frames(16))
        ms = minus_step(mix, V, model)
        np.testing.assert_array_equal(
            ms.solo.values, apply_mask(mix, ms.mask).values)


class TestPlusStep:
    def test_first_sound_identity(self, model):
        solo = rand_mix(20)
        residual, final = plus_step(solo, [], model)
        assert np.all(residual.values == 0.0)
        np.testing.assert_array_equal(final.values, solo.values)

    def test_residual_bounded_by_remix(self, model):
        solo = rand_mix(21)
        finals = [rand_mix(22), rand_mix(23)]
        residual, final = plus_step(solo, finals, model)
        remix = finals[0].values + finals[1].values
        assert np.all(residual.values <= remix + 1e-12)

    def test_final_at_least_minus_solo(self, model):
        solo = rand_mix(24)
        residual, final = plus_step(solo, [rand_mix(25)], model)
        assert np.all(final.values >= solo.values)
        np.testing.assert_allclose(final.values,
                                   solo.values + residual.values, atol=0)


class TestSeparate:
    def test_explicit_n_gives_exactly_n_records(self, model):
        mix = rand_mix(30)
        frames = rand_frames(30)
        for n in (1, 2, 4):
            result = separate(mix, frames, model, n=n)
            assert result.steps == n == len(result.records)

    def test_conservation_default_mode(self, model):
        mix = rand_mix(31)
        result = separate(mix, rand_frames(31), model, n=3)
        assert result.clamp_events == 0
        assert conservation_deviation(result, mix) < 1e-10

    def test_energy_monotone_across_steps(self, model):
        mix = rand_mix(32)
        result = separate(mix, rand_frames(32), model, n=4)
        energies = [result.initial_energy]
        running = mix.values.copy()
        for rec in result.records:
            running = running - rec.minus_solo.values
            energies.append(float(np.mean(running ** 2)))
        assert all(b <= a + 1e-15 for a, b in zip(energies, energies[1:]))

    def test_zero_mixture_terminates_immediately(self, model):
        mix = Spectrogram(np.zeros((64, 64)), "mel")
        result = separate(mix, rand_frames(33), model)
        assert result.steps == 0
        assert not result.hit_step_cap

    def test_step_cap_reported_not_raised(self, model):
        # random model never empties a random mixture at eps 1e-3
        mix = rand_mix(34)
        result = separate(mix, rand_frames(34), model, step_cap=3)
        assert result.steps <= 3
        if result.steps == 3:
            assert result.hit_step_cap

    def test_final_subtract_mode_runs_and_reports_clamps(self, model):
        mix = rand_mix(35)
        result = separate(mix, rand_frames(35), model, n=3, subtract_mode="final")
        assert result.subtract_mode == "final"
        assert result.steps == 3
        # refined sounds re-subtract residual content, so clamping can occur
        assert result.clamp_events >= 0

    def test_plus_disabled_equals_minus_solo(self, model):
        mix = rand_mix(36)
        frames = rand_frames(36)
        result = separate(mix, frames, model, n=2, plus_enabled=False)
        for rec in result.records:
            np.testing.assert_array_equal(rec.final.values, rec.minus_solo.values)
            assert np.all(rec.residual.values == 0.0)

    def test_first_record_final_is_minus_solo(self, model):
        mix = rand_mix(37)
        result = separate(mix, rand_frames(37), model, n=2)
        rec0 = result.records[0]
        np.testing.assert_array_equal(rec0.final.values, rec0.minus_solo.values)
        rec1 = result.records[1]
        np.testing.assert_allclose(
            rec1.final.values, rec1.minus_solo.values + rec1.residual.values)

    def test_count_sounds_zero_mixture(self, model):
        mix = Spectrogram(np.zeros((64, 64)), "mel")
        assert count_sounds(mix, rand_frames(38), model) == 0

    def test_count_bounded_by_cap(self, model):
        mix = rand_mix(39)
        count = count_sounds(mix, rand_frames(39), model, step_cap=4)
        assert 0 <= count <= 4


class TestIndependentBaseline:
    def test_first_sound_matches_minus_step(self, model):
        mix = rand_mix(40)
        frames = rand_frames(40)
        V = model.visual_encode(frames)
        baseline = separate_independent_baseline(mix, frames, model, n=1)
        ms = minus_step(mix, V, model)
        np.testing.assert_array_equal(baseline.records[0].final.values,
                                      ms.solo.values)
        assert baseline.records[0].location == (ms.localization.x,
                                                ms.localization.y)

    def test_masks_all_from_original_mixture(self, model):
        mix = rand_mix(41)
        frames = rand_frames(41)
        V = model.visual_encode(frames)
        bank = model.predict_components(mix)
        feats = V.location_features
        baseline = separate_independent_baseline(mix, frames, model, n=3)
        for rec in baseline.records:
            x, y = rec.location
            expect = apply_mask(mix, compose_mask(feats[x, y], bank))
            np.testing.assert_array_equal(rec.final.values, expect.values)

    def test_locations_distinct_and_ranked(self, model):
        mix = rand_mix(42)
        baseline = separate_independent_baseline(mix, rand_frames(42), model, n=4)
        locs = [rec.location for rec in baseline.records]
        assert len(set(locs)) == 4
        scores = [rec.score for rec in baseline.records]
        assert scores == sorted(scores, reverse=True)

    def test_n_beyond_grid_rejected(self, model):
        mix = rand_mix(43)
        with pytest.raises(ConfigError):
            separate_independent_baseline(mix, rand_frames(43), model, n=1000)


class TestResultSerialization:
    def test_directory_contents(self, model, tmp_path):
        mix = rand_mix(50)
        result = separate(mix, rand_frames(50), model, n=2)
        out = save_separation_result(result, tmp_path / "run")
        summary = json.loads((out / "summary.json").read_text())
        assert summary["steps"] == 2
        assert summary["clamp_events"] == 0
        assert len(summary["sounds"]) == 2
        assert (out / "sound_00" / "final.mpsg").exists()
        assert (out / "sound_01" / "residual.mpsg").exists()
        assert (out / "remainder.mpsg").exists()
        assert summary["remainder_energy"] == pytest.approx(
            energy(result.remainder))
