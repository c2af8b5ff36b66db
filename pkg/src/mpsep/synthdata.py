"""Synthetic audio-visual solo clips and constructed mixtures.

Each sound class is a harmonic stack (fundamental range as a fraction of
Nyquist, relative harmonic weights, a temporal envelope) paired with a unique
colored glyph.  Solo clips carry the waveform, T video frames showing the
glyph at a random location, and the mel spectrogram.  Mixtures are built by
element-wise addition of solo mel spectrograms, so ground-truth additivity is
exact; waveforms are summed separately for time-domain evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .audio import (
    Spectrogram,
    StftConfig,
    Waveform,
    mel_downsample,
    read_spectrogram_cache,
    read_wav,
    stft_magnitude,
    write_spectrogram_cache,
    write_wav,
)
from .errors import ConfigError
from .specalg import energy


@dataclass(frozen=True)
class SoundClass:
    """A synthesizable sound category with its visual glyph."""

    id: int
    name: str
    f0_range: tuple[float, float]  # fraction of Nyquist
    harmonics: tuple[float, ...]   # relative amplitude per partial
    envelope: str                  # sustained | decaying | pulsed
    glyph_shape: str
    glyph_color: tuple[int, int, int]

    def __post_init__(self):
        if not any(w > 0 for w in self.harmonics):
            raise ConfigError(f"class {self.name}: all harmonic weights are zero")
        if any(w < 0 for w in self.harmonics):
            raise ConfigError(f"class {self.name}: negative harmonic weight")
        if self.f0_range[1] * len(self.harmonics) > 1.0:
            raise ConfigError(
                f"class {self.name}: top partial exceeds Nyquist "
                f"({self.f0_range[1]} x {len(self.harmonics)} harmonics)"
            )


# fundamentals are placed so that every pair of nonzero partials from
# different classes stays >= ~40 Hz apart even under per-clip jitter:
# coinciding partials beat against each other in the mixture and put an
# artifact floor under every time-domain metric that no mask can remove
_CLASS_TABLE = (
    SoundClass(0, "organ", (0.02558, 0.02584), (1.0, 0.6, 0.45, 0.3, 0.2, 0.12),
               "sustained", "circle", (220, 40, 40)),
    SoundClass(1, "whistle", (0.24467, 0.24713), (1.0, 0.5, 0.3, 0.18),
               "sustained", "square", (40, 220, 40)),
    SoundClass(2, "pulse", (0.14145, 0.14287), (1.0, 0.4, 0.25, 0.15),
               "pulsed", "triangle", (70, 100, 235)),
    SoundClass(3, "pluck", (0.08950, 0.09040), (0.5, 1.0, 0.35, 0.2, 0.1),
               "decaying", "cross", (230, 220, 40)),
    SoundClass(4, "reed", (0.06566, 0.06632), (1.0, 0.0, 0.55, 0.0, 0.35),
               "sustained", "ring", (220, 60, 220)),
    SoundClass(5, "beeper", (0.30162, 0.30466), (1.0, 0.25, 0.08),
               "pulsed", "diamond", (40, 220, 220)),
)


def default_classes(n_classes: int = 6) -> tuple[SoundClass, ...]:
    if not 1 <= n_classes <= len(_CLASS_TABLE):
        raise ConfigError(f"n_classes must be in [1, {len(_CLASS_TABLE)}]")
    return _CLASS_TABLE[:n_classes]


@dataclass
class SoloClip:
    """One synthetic solo video clip: audio, frames, and its mel spectrogram."""

    waveform: Waveform
    frames: np.ndarray            # (T, H, W, 3) uint8
    class_id: int
    glyph_location: tuple[int, int]  # (row, col) of glyph center, pixels
    energy_scale: float
    mel: Spectrogram

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def scaled(self, factor: float) -> "SoloClip":
        """Amplitude-scale audio and spectrogram by ``factor`` (>= 0)."""
        if factor < 0:
            raise ConfigError("scale factor must be non-negative")
        return SoloClip(
            Waveform(self.waveform.samples * factor, self.waveform.sample_rate),
            self.frames,
            self.class_id,
            self.glyph_location,
            self.energy_scale * factor,
            Spectrogram(self.mel.values * factor, self.mel.scale),
        )


@dataclass
class MixSample:
    """A constructed mixture plus its ground truth.

    ``mixture`` is the exact element-wise sum of the solo mel spectrograms.
    ``order`` lists source indices by descending spectrogram energy (stable on
    ties).  Frames of the sources are concatenated side by side, source ``i``
    occupying pixel columns [i*W, (i+1)*W).
    """

    solos: list[SoloClip]
    mixture: Spectrogram
    mixture_waveform: Waveform
    frames: np.ndarray
    order: np.ndarray
    energies: np.ndarray

    def __post_init__(self):
        if len(self.solos) == 0:
            raise ConfigError("a mix needs at least one solo clip")
        if sorted(self.order.tolist()) != list(range(self.n)):
            raise ValueError("order must be a permutation of source indices")

    @property
    def n(self) -> int:
        return len(self.solos)

    @property
    def frame_width_per_source(self) -> int:
        return self.frames.shape[2] // self.n

    def mixture_stft(self, cfg: StftConfig) -> tuple[Spectrogram, np.ndarray]:
        """Linear magnitude and phase of the summed waveform (for synthesis)."""
        return stft_magnitude(self.mixture_waveform, cfg)


def _envelope(kind: str, n_samples: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n_samples) / sample_rate
    duration = n_samples / sample_rate
    if kind == "sustained":
        env = np.ones(n_samples)
        edge = max(2, int(0.05 * n_samples))
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(edge) / edge)
        env[:edge] = ramp
        env[-edge:] = ramp[::-1]
        return env
    if kind == "decaying":
        return np.exp(-3.0 * t / duration)
    if kind == "pulsed":
        gate = 0.5 + 0.5 * np.cos(2 * np.pi * 4.0 * t)
        return 0.1 + 0.9 * gate * gate
    raise ConfigError(f"unknown envelope {kind!r}")


def _glyph_mask(shape: str, size: int) -> np.ndarray:
    r = size // 2
    dr, dc = np.mgrid[-r: r + 1, -r: r + 1]
    if shape == "circle":
        return dr * dr + dc * dc <= r * r
    if shape == "square":
        return (np.abs(dr) <= r) & (np.abs(dc) <= r)
    if shape == "triangle":
        return (dr >= -r) & (np.abs(dc) <= (dr + r) / 2.0)
    if shape == "cross":
        third = max(1, r // 3)
        return (np.abs(dr) <= third) | (np.abs(dc) <= third)
    if shape == "ring":
        d2 = dr * dr + dc * dc
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "diamond":
        return np.abs(dr) + np.abs(dc) <= r
    raise ConfigError(f"unknown glyph shape {shape!r}")


def _draw_glyph(img: np.ndarray, cls: SoundClass, center: tuple[int, int],
                size: int = 15) -> None:
    mask = _glyph_mask(cls.glyph_shape, size)
    r0 = center[0] - size // 2
    c0 = center[1] - size // 2
    region = img[r0: r0 + mask.shape[0], c0: c0 + mask.shape[1]]
    region[mask] = np.asarray(cls.glyph_color, dtype=np.uint8)


def generate_solo(cls: SoundClass, seed, energy_scale: float = 1.0,
                  stft_cfg: StftConfig | None = None, n_frames: int = 6,
                  frame_size: int = 64, base_rms: float = 0.05,
                  n_distractors: int = 0,
                  classes: tuple[SoundClass, ...] | None = None) -> SoloClip:
    """Deterministically synthesize one solo clip from (class, seed).

    ``energy_scale`` multiplies amplitude; 0 produces a silent clip whose
    frames still show the glyph.  ``n_distractors`` adds silent glyphs of
    other classes.
    """
    if stft_cfg is None:
        stft_cfg = StftConfig.desk()
    rng = np.random.default_rng([int(cls.id), *_seed_parts(seed)])
    n = stft_cfg.clip_samples
    t = np.arange(n) / stft_cfg.sample_rate

    nyquist = stft_cfg.sample_rate / 2.0
    f0 = rng.uniform(*cls.f0_range) * nyquist
    wave = np.zeros(n)
    for h, weight in enumerate(cls.harmonics, start=1):
        if weight > 0:
            phase = rng.uniform(0, 2 * np.pi)
            wave += weight * np.sin(2 * np.pi * h * f0 * t + phase)
    wave *= _envelope(cls.envelope, n, stft_cfg.sample_rate)
    rms = np.sqrt(np.mean(wave * wave))
    if rms > 0:
        wave *= base_rms / rms
    wave *= energy_scale

    glyph_size = 15
    margin = glyph_size // 2 + 1
    loc = (int(rng.integers(margin, frame_size - margin)),
           int(rng.integers(margin, frame_size - margin)))
    frame = np.zeros((frame_size, frame_size, 3), dtype=np.uint8)
    _draw_glyph(frame, cls, loc, glyph_size)
    if n_distractors:
        pool = [c for c in (classes or _CLASS_TABLE) if c.id != cls.id]
        for _ in range(n_distractors):
            other = pool[int(rng.integers(len(pool)))]
            dloc = (int(rng.integers(margin, frame_size - margin)),
                    int(rng.integers(margin, frame_size - margin)))
            _draw_glyph(frame, other, dloc, glyph_size)
    frames = np.repeat(frame[None], n_frames, axis=0)

    waveform = Waveform(wave, stft_cfg.sample_rate)
    linear, _ = stft_magnitude(waveform, stft_cfg)
    mel = mel_downsample(linear, stft_cfg)
    return SoloClip(waveform, frames, cls.id, loc, energy_scale, mel)


def _seed_parts(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        return [int(s) for s in seed]
    return [int(seed)]


def make_mix(clips: list[SoloClip], imbalance_ratio: float | None = None,
             rng: np.random.Generator | None = None) -> MixSample:
    """Mix-and-Separate construction: sum solos into a supervised mixture.

    With ``imbalance_ratio`` set, all solos are first normalized to equal
    spectrogram energy and one (chosen by ``rng``) is boosted so its energy is
    exactly ``imbalance_ratio`` times the others'.
    """
    if not clips:
        raise ConfigError("make_mix needs at least one clip")
    clips = list(clips)
    if imbalance_ratio is not None:
        if imbalance_ratio <= 0:
            raise ConfigError("imbalance_ratio must be positive")
        energies = [energy(c.mel) for c in clips]
        if min(energies) <= 0:
            raise ConfigError("imbalance preset requires non-silent clips")
        target = float(np.mean(energies))
        clips = [c.scaled(np.sqrt(target / e)) for c, e in zip(clips, energies)]
        loud = int(rng.integers(len(clips))) if rng is not None else 0
        clips[loud] = clips[loud].scaled(float(np.sqrt(imbalance_ratio)))

    mix_values = np.zeros_like(clips[0].mel.values)
    for c in clips:
        if c.mel.values.shape != clips[0].mel.values.shape:
            raise ConfigError("all clips in a mix must share spectrogram shape")
        mix_values = mix_values + c.mel.values
    mixture = Spectrogram(mix_values, "mel")

    wave = np.zeros_like(clips[0].waveform.samples)
    for c in clips:
        wave = wave + c.waveform.samples
    mixture_waveform = Waveform(wave, clips[0].waveform.sample_rate)

    frames = np.concatenate([c.frames for c in clips], axis=2)
    energies = np.array([energy(c.mel) for c in clips])
    order = np.argsort(-energies, kind="stable")
    return MixSample(clips, mixture, mixture_waveform, frames, order, energies)


def augment_energy(sample: MixSample, rng: np.random.Generator,
                   lo: float = 0.5, hi: float = 1.5) -> MixSample:
    """Independently rescale each solo's energy and rebuild the mixture."""
    factors = rng.uniform(lo, hi, sample.n)
    scaled = [c.scaled(float(f)) for c, f in zip(sample.solos, factors)]
    mix_values = np.zeros_like(scaled[0].mel.values)
    for c in scaled:
        mix_values = mix_values + c.mel.values
    wave = np.zeros_like(scaled[0].waveform.samples)
    for c in scaled:
        wave = wave + c.waveform.samples
    energies = np.array([energy(c.mel) for c in scaled])
    order = np.argsort(-energies, kind="stable")
    return MixSample(scaled, Spectrogram(mix_values, "mel"),
                     Waveform(wave, sample.mixture_waveform.sample_rate),
                     sample.frames, order, energies)


@dataclass(frozen=True)
class GenConfig:
    """Dataset-generation settings (counts, classes, randomization)."""

    n_classes: int = 6
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    seed: int = 0
    silent_fraction: float = 0.0
    scale_range: tuple[float, float] = (0.7, 1.3)
    n_frames: int = 6
    frame_size: int = 64
    n_distractors: int = 0

    @property
    def n_total(self) -> int:
        return self.n_train + self.n_val + self.n_test

    def split_of(self, index: int) -> str:
        if index < self.n_train:
            return "train"
        if index < self.n_train + self.n_val:
            return "val"
        return "test"


def generate_solo_set(gen: GenConfig, stft_cfg: StftConfig) -> list[SoloClip]:
    """All solos of a dataset, deterministic in ``gen.seed``."""
    classes = default_classes(gen.n_classes)
    solos = []
    for i in range(gen.n_total):
        rng = np.random.default_rng([gen.seed, i, 7])
        scale = float(rng.uniform(*gen.scale_range))
        if gen.silent_fraction > 0 and rng.uniform() < gen.silent_fraction:
            scale = 0.0
        cls = classes[i % gen.n_classes]
        solos.append(generate_solo(
            cls, (gen.seed, i), scale, stft_cfg,
            n_frames=gen.n_frames, frame_size=gen.frame_size,
            n_distractors=gen.n_distractors, classes=classes))
    return solos


class SoloDataset:
    """A generated solo collection with split bookkeeping."""

    def __init__(self, solos: list[SoloClip], gen: GenConfig, stft_cfg: StftConfig):
        self.solos = solos
        self.gen = gen
        self.stft_cfg = stft_cfg

    def split(self, name: str) -> list[SoloClip]:
        return [s for i, s in enumerate(self.solos) if self.gen.split_of(i) == name]

    def split_indices(self, name: str) -> list[int]:
        return [i for i in range(len(self.solos)) if self.gen.split_of(i) == name]


class MixSampler:
    """Deterministic mixture stream over one dataset split.

    Sample ``index`` is a pure function of (seed, index): classes are drawn
    without replacement (when ``distinct_classes``), then one solo per class.
    """

    def __init__(self, dataset: SoloDataset, split: str, mix_n: int, seed: int,
                 distinct_classes: bool = True,
                 imbalance_ratio: float | None = None):
        self.mix_n = mix_n
        self.seed = seed
        self.distinct_classes = distinct_classes
        self.imbalance_ratio = imbalance_ratio
        self.by_class: dict[int, list[SoloClip]] = {}
        for clip in dataset.split(split):
            if self.imbalance_ratio is not None and energy(clip.mel) <= 0:
                continue  # imbalance normalization cannot use silent clips
            self.by_class.setdefault(clip.class_id, []).append(clip)
        if distinct_classes and mix_n > len(self.by_class):
            raise ConfigError(
                f"mix_n={mix_n} exceeds the {len(self.by_class)} available classes")

    def sample(self, index: int) -> MixSample:
        rng = np.random.default_rng([self.seed, index, 13])
        class_ids = sorted(self.by_class)
        if self.distinct_classes:
            chosen = rng.choice(len(class_ids), size=self.mix_n, replace=False)
        else:
            chosen = rng.integers(0, len(class_ids), size=self.mix_n)
        clips = []
        for ci in chosen:
            pool = self.by_class[class_ids[int(ci)]]
            clips.append(pool[int(rng.integers(len(pool)))])
        return make_mix(clips, self.imbalance_ratio, rng)

    def batch(self, start: int, count: int) -> list[MixSample]:
        return [self.sample(i) for i in range(start, start + count)]


def write_dataset(out_dir, gen: GenConfig, stft_cfg: StftConfig) -> Path:
    """Materialize a dataset directory: WAVs, frame PNGs, mel caches, manifest."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "frames").mkdir(exist_ok=True)
    (out / "spec").mkdir(exist_ok=True)
    solos = generate_solo_set(gen, stft_cfg)
    manifest_path = out / "manifest.jsonl"
    with open(manifest_path, "w") as mf:
        for i, clip in enumerate(solos):
            cid = f"solo_{i:05d}"
            wav_rel = f"wav/{cid}.wav"
            spec_rel = f"spec/{cid}.mpsg"
            frame_dir = out / "frames" / cid
            frame_dir.mkdir(exist_ok=True)
            write_wav(out / wav_rel, clip.waveform)
            write_spectrogram_cache(out / spec_rel, clip.mel)
            frame_rels = []
            for t in range(clip.n_frames):
                rel = f"frames/{cid}/f{t}.png"
                Image.fromarray(clip.frames[t]).save(out / rel)
                frame_rels.append(rel)
            mf.write(json.dumps({
                "id": cid,
                "class": clip.class_id,
                "wav": wav_rel,
                "frames": frame_rels,
                "spec": spec_rel,
                "energy": energy(clip.mel),
                "split": gen.split_of(i),
                "glyph_location": list(clip.glyph_location),
                "energy_scale": clip.energy_scale,
            }) + "\n")
    meta = {"gen": _gen_to_dict(gen), "stft": _stft_to_dict(stft_cfg)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2))
    return manifest_path


def load_dataset(root) -> SoloDataset:
    """Read a dataset directory back into memory."""
    root = Path(root)
    meta = json.loads((root / "dataset.json").read_text())
    gen = GenConfig(**{**meta["gen"],
                       "scale_range": tuple(meta["gen"]["scale_range"])})
    stft_cfg = StftConfig(**meta["stft"])
    solos = []
    with open(root / "manifest.jsonl") as mf:
        for line in mf:
            rec = json.loads(line)
            waveform = read_wav(root / rec["wav"])
            mel = read_spectrogram_cache(root / rec["spec"], "mel")
            frames = np.stack([
                np.asarray(Image.open(root / rel).convert("RGB"))
                for rel in rec["frames"]])
            solos.append(SoloClip(waveform, frames, rec["class"],
                                  tuple(rec["glyph_location"]), rec["energy_scale"],
                                  mel))
    return SoloDataset(solos, gen, stft_cfg)


def _gen_to_dict(gen: GenConfig) -> dict:
    return {
        "n_classes": gen.n_classes, "n_train": gen.n_train, "n_val": gen.n_val,
        "n_test": gen.n_test, "seed": gen.seed,
        "silent_fraction": gen.silent_fraction,
        "scale_range": list(gen.scale_range), "n_frames": gen.n_frames,
        "frame_size": gen.frame_size, "n_distractors": gen.n_distractors,
    }


def _stft_to_dict(cfg: StftConfig) -> dict:
    return {
        "sample_rate": cfg.sample_rate, "window_size": cfg.window_size,
        "hop": cfg.hop, "clip_seconds": cfg.clip_seconds, "mel_bins": cfg.mel_bins,
    }
