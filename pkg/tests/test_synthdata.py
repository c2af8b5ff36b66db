import json

import numpy as np
import pytest

from mpsep.audio import StftConfig
from mpsep.errors import ConfigError
from mpsep.specalg import energy
from mpsep.synthdata import (
    GenConfig,
    MixSampler,
    SoloDataset,
    augment_energy,
    default_classes,
    generate_solo,
    generate_solo_set,
    load_dataset,
    make_mix,
    write_dataset,
)

CFG = StftConfig.smoke()
CLASSES = default_classes()


def solo(class_idx=0, seed=0, scale=1.0):
    return generate_solo(CLASSES[class_idx], seed, scale, CFG, n_frames=2)


class TestGenerateSolo:
    def test_same_seed_is_bit_identical(self):
        a = solo(seed=42)
        b = solo(seed=42)
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
        np.testing.assert_array_equal(a.frames, b.frames)
        np.testing.assert_array_equal(a.mel.values, b.mel.values)
        assert a.glyph_location == b.glyph_location

    def test_different_seeds_differ(self):
        a = solo(seed=1)
        b = solo(seed=2)
        assert not np.array_equal(a.waveform.samples, b.waveform.samples)

    def test_zero_energy_scale_is_silent_with_glyph(self):
        clip = solo(seed=3, scale=0.0)
        assert np.all(clip.waveform.samples == 0.0)
        assert np.all(clip.mel.values == 0.0)
        assert clip.frames.max() > 0  # glyph still drawn

    def test_disjoint_fundamental_classes_have_disjoint_support(self):
        # organ (class 0) and whistle (class 1) are designed band-disjoint
        overlaps = []
        for seed in range(5):
            a = generate_solo(CLASSES[0], seed, 1.0, CFG)
            b = generate_solo(CLASSES[1], seed + 100, 1.0, CFG)
            # noise floor at -40 dB relative to peak: below that only window
            # sidelobe leakage remains
            floor_a = 1e-2 * a.mel.values.max()
            floor_b = 1e-2 * b.mel.values.max()
            sup_a = a.mel.values.max(axis=1) > floor_a
            sup_b = b.mel.values.max(axis=1) > floor_b
            union = np.count_nonzero(sup_a | sup_b)
            both = np.count_nonzero(sup_a & sup_b)
            overlaps.append(both / union)
        assert max(overlaps) < 0.10

    def test_frames_shape_and_dtype(self):
        clip = solo(seed=4)
        assert clip.frames.shape == (2, 64, 64, 3)
        assert clip.frames.dtype == np.uint8

    def test_distractor_glyphs(self):
        clip = generate_solo(CLASSES[0], 5, 1.0, CFG, n_frames=1, n_distractors=2,
                             classes=CLASSES)
        plain = generate_solo(CLASSES[0], 5, 1.0, CFG, n_frames=1, classes=CLASSES)
        assert np.count_nonzero(clip.frames) > np.count_nonzero(plain.frames)


class TestMakeMix:
    def test_single_clip_mixture_equals_solo(self):
        c = solo(seed=6)
        mix = make_mix([c])
        np.testing.assert_array_equal(mix.mixture.values, c.mel.values)
        assert mix.n == 1

    def test_silent_plus_active_equals_active(self):
        active = solo(0, seed=7)
        silent = generate_solo(CLASSES[1], 8, 0.0, CFG, n_frames=2)
        mix = make_mix([active, silent])
        np.testing.assert_array_equal(mix.mixture.values, active.mel.values)

    def test_mixture_is_exact_sum(self):
        clips = [solo(i, seed=10 + i) for i in range(3)]
        mix = make_mix(clips)
        total = sum(c.mel.values for c in clips)
        np.testing.assert_array_equal(mix.mixture.values, total)

    def test_mixture_energy_at_least_max_solo(self):
        for seed in range(5):
            clips = [solo(i, seed=20 + seed + i) for i in range(2)]
            mix = make_mix(clips)
            assert energy(mix.mixture) >= max(energy(c.mel) for c in clips)

    def test_order_descends_by_energy(self):
        clips = [solo(0, seed=30, scale=0.2), solo(1, seed=31, scale=1.0)]
        mix = make_mix(clips)
        assert mix.order[0] == 1 and mix.order[1] == 0
        recomputed = np.argsort(-np.array([energy(c.mel) for c in clips]),
                                kind="stable")
        np.testing.assert_array_equal(mix.order, recomputed)

    def test_combined_frames_keep_every_glyph(self):
        clips = [solo(i, seed=40 + i) for i in range(2)]
        mix = make_mix(clips)
        w = mix.frame_width_per_source
        for i, c in enumerate(clips):
            np.testing.assert_array_equal(
                mix.frames[:, :, i * w:(i + 1) * w], c.frames)

    def test_empty_clip_list_rejected(self):
        with pytest.raises(ConfigError):
            make_mix([])

    def test_imbalance_preset_energy_ratio(self):
        clips = [solo(0, seed=50), solo(1, seed=51)]
        rng = np.random.default_rng(0)
        mix = make_mix(clips, imbalance_ratio=10.0, rng=rng)
        e = sorted(energy(c.mel) for c in mix.solos)
        assert e[1] / e[0] == pytest.approx(10.0, rel=1e-9)


class TestAugment:
    def test_unit_factors_preserve_sample(self):
        mix = make_mix([solo(0, seed=60), solo(1, seed=61)])
        aug = augment_energy(mix, np.random.default_rng(0), lo=1.0, hi=1.0 + 1e-12)
        np.testing.assert_allclose(aug.mixture.values, mix.mixture.values, rtol=1e-9)

    def test_energy_scales_quadratically(self):
        c = solo(0, seed=62)
        assert energy(c.scaled(2.0).mel) == pytest.approx(4 * energy(c.mel))

    def test_mixture_still_sum_of_scaled_solos(self):
        mix = make_mix([solo(0, seed=63), solo(1, seed=64)])
        aug = augment_energy(mix, np.random.default_rng(1))
        total = sum(c.mel.values for c in aug.solos)
        np.testing.assert_array_equal(aug.mixture.values, total)

    def test_order_recomputed(self):
        mix = make_mix([solo(0, seed=65), solo(1, seed=66)])
        for seed in range(10):
            aug = augment_energy(mix, np.random.default_rng(seed))
            recomputed = np.argsort(-aug.energies, kind="stable")
            np.testing.assert_array_equal(aug.order, recomputed)


class TestSampler:
    def make_dataset(self, **kw):
        gen = GenConfig(n_train=24, n_val=6, n_test=6, n_frames=2, **kw)
        return SoloDataset(generate_solo_set(gen, CFG), gen, CFG)

    def test_sampling_is_deterministic(self):
        ds = self.make_dataset(seed=3)
        s1 = MixSampler(ds, "train", 2, seed=5).sample(9)
        s2 = MixSampler(ds, "train", 2, seed=5).sample(9)
        np.testing.assert_array_equal(s1.mixture.values, s2.mixture.values)
        np.testing.assert_array_equal(s1.frames, s2.frames)

    def test_distinct_classes(self):
        ds = self.make_dataset(seed=4)
        sampler = MixSampler(ds, "train", 3, seed=6)
        for i in range(10):
            classes = [c.class_id for c in sampler.sample(i).solos]
            assert len(set(classes)) == 3

    def test_mix_n_beyond_classes_rejected(self):
        ds = self.make_dataset(seed=5)
        with pytest.raises(ConfigError):
            MixSampler(ds, "train", 7, seed=0)

    def test_split_partition_is_seed_deterministic(self):
        ds1 = self.make_dataset(seed=8)
        ds2 = self.make_dataset(seed=8)
        for split in ("train", "val", "test"):
            assert ds1.gen.split_of(0) == ds2.gen.split_of(0)
            a = ds1.split(split)
            b = ds2.split(split)
            assert len(a) == len(b)
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x.mel.values, y.mel.values)


class TestDatasetIo:
    def test_round_trip(self, tmp_path):
        gen = GenConfig(n_train=4, n_val=2, n_test=2, seed=11, n_frames=2)
        write_dataset(tmp_path, gen, CFG)
        ds = load_dataset(tmp_path)
        assert len(ds.solos) == 8
        assert ds.gen.n_train == 4
        fresh = generate_solo_set(gen, CFG)
        for loaded, orig in zip(ds.solos, fresh):
            assert loaded.class_id == orig.class_id
            np.testing.assert_array_equal(loaded.frames, orig.frames)
            # mel cache is float32; WAV is 16-bit PCM
            np.testing.assert_allclose(loaded.mel.values, orig.mel.values,
                                       atol=1e-4)
            np.testing.assert_allclose(loaded.waveform.samples,
                                       orig.waveform.samples, atol=1.0 / 32767)

    def test_manifest_lines_and_fields(self, tmp_path):
        gen = GenConfig(n_train=3, n_val=1, n_test=1, seed=12, n_frames=2)
        manifest = write_dataset(tmp_path, gen, CFG)
        lines = manifest.read_text().strip().split("\n")
        assert len(lines) == 5
        rec = json.loads(lines[0])
        for key in ("id", "class", "wav", "frames", "spec", "energy", "split"):
            assert key in rec
        assert rec["split"] == "train"
        assert json.loads(lines[-1])["split"] == "test"

    def test_regeneration_is_identical(self, tmp_path):
        gen = GenConfig(n_train=2, n_val=1, n_test=1, seed=13, n_frames=2)
        m1 = write_dataset(tmp_path / "a", gen, CFG)
        m2 = write_dataset(tmp_path / "b", gen, CFG)
        assert m1.read_text() == m2.read_text()
