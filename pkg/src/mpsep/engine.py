"""The recursive separation control flow.

The minus stage repeatedly predicts sub-spectrogram channels from the current
mixture, scores every image location by the energy its location-specific mask
would capture, composes the winning location's mask, cuts the sound out, and
subtracts it from the running mixture.  The plus stage refines each cut with a
residual recovered from the remix of the preceding separations.  Termination
is either an explicit sound count or the running mixture's energy falling
below a mixture-relative threshold, under a hard step cap.

Default subtraction removes the minus-stage solo, which conserves the mixture
exactly (original = sum of solos + remainder, zero clamping with ratio
masks).  A second mode subtracts the refined (post-plus) sound instead; the
residual content was already removed in earlier steps, so this re-subtraction
clamps and breaks conservation, but it is available behind ``subtract_mode``
for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import Spectrogram, write_spectrogram_cache
from .errors import ConfigError
from .models import MpModel, SubSpectrogramBank, VisualFeatureMap, compose_mask
from .specalg import Mask, apply_mask, binarize, energy, subtract

DEFAULT_EPS_REL = 1e-3
DEFAULT_STEP_CAP = 8
_ZERO_ENERGY_FLOOR = 1e-30


@dataclass
class LocalizationResult:
    x: int                 # feature-grid row of the winning location
    y: int                 # feature-grid column
    v: np.ndarray          # k-vector at (x, y)
    score_map: np.ndarray  # H' x W' energy scores


@dataclass
class SoundRecord:
    """One separated sound: minus-stage cut, plus-stage refinement, location."""

    final: Spectrogram
    minus_solo: Spectrogram
    residual: Spectrogram
    location: tuple[int, int]
    energy: float          # energy of the minus-stage solo when it was cut
    score: float           # localization score of the winning cell
    mask: Mask
    score_map: np.ndarray | None = None


@dataclass
class SeparationResult:
    records: list[SoundRecord]
    remainder: Spectrogram
    steps: int
    mask_kind: str
    subtract_mode: str
    clamp_events: int
    hit_step_cap: bool
    requested_n: int | None
    initial_energy: float

    @property
    def finals(self) -> list[Spectrogram]:
        return [r.final for r in self.records]


def localize(V: VisualFeatureMap, bank: SubSpectrogramBank, mix: Spectrogram,
             col_range: tuple[int, int] | None = None) -> LocalizationResult:
    """Score every location by the energy its mask captures from ``mix``.

    score(x, y) = energy(sigmoid(sum_j V(x,y,j) * bank_j) (x) mix).  The
    argmax wins; ties break to the smallest (x, then y).  ``col_range``
    restricts the argmax to feature columns [lo, hi) while the full score map
    is still returned.
    """
    feats = V.location_features  # (H', W', k)
    h, w, k = feats.shape
    if k != bank.k:
        raise ConfigError(f"feature map has k={k}, bank has k={bank.k}")
    logits = feats.reshape(-1, k) @ bank.channels.reshape(k, -1)
    np.clip(logits, -30.0, 30.0, out=logits)
    masks = 1.0 / (1.0 + np.exp(-logits))
    masked = masks * mix.values.reshape(1, -1)
    scores = np.mean(masked * masked, axis=1)
    score_map = scores.reshape(h, w)

    candidate = score_map
    if col_range is not None:
        lo, hi = col_range
        candidate = np.full_like(score_map, -np.inf)
        candidate[:, lo:hi] = score_map[:, lo:hi]
    flat_idx = int(np.argmax(candidate))  # C order: first max = smallest (x, y)
    x, y = divmod(flat_idx, w)
    return LocalizationResult(x, y, feats[x, y].copy(), score_map)


@dataclass
class MinusStepResult:
    solo: Spectrogram
    mask: Mask
    localization: LocalizationResult
    mix_next: Spectrogram
    clamped: int


def minus_step(mix_prev: Spectrogram, V: VisualFeatureMap, model: MpModel,
               mask_kind: str = "ratio", binarize_threshold: float = 0.5,
               col_range: tuple[int, int] | None = None) -> MinusStepResult:
    """One recursive extraction: predict channels, localize, mask, subtract."""
    bank = model.predict_components(mix_prev)
    loc = localize(V, bank, mix_prev, col_range)
    mask = compose_mask(loc.v, bank)
    if mask_kind == "binary":
        mask = binarize(mask, binarize_threshold)
    elif mask_kind != "ratio":
        raise ConfigError(f"unknown mask kind {mask_kind!r}")
    solo = apply_mask(mix_prev, mask)
    mix_next, clamped = subtract(mix_prev, solo)
    return MinusStepResult(solo, mask, loc, mix_next, clamped)


def plus_step(solo: Spectrogram, preceding_finals: list[Spectrogram],
              model: MpModel) -> tuple[Spectrogram, Spectrogram]:
    """Residual refinement: recover content shared with earlier separations.

    Returns (residual, final).  With no preceding separations the remix is
    the zero grid, so the residual is zero and the final equals the solo.
    """
    remix_values = np.zeros_like(solo.values)
    for f in preceding_finals:
        remix_values = remix_values + f.values
    if not remix_values.any():
        zero = Spectrogram(np.zeros_like(solo.values), solo.scale)
        return zero, solo.copy()
    remix = Spectrogram(remix_values, solo.scale)
    mr = model.residual_mask(remix, solo)
    residual = apply_mask(remix, mr)
    final = Spectrogram(solo.values + residual.values, solo.scale)
    return residual, final


def separate(mix: Spectrogram, frames: np.ndarray, model: MpModel,
             n: int | None = None, mask_kind: str = "ratio",
             binarize_threshold: float = 0.5, subtract_mode: str = "minus",
             eps_rel: float = DEFAULT_EPS_REL, step_cap: int = DEFAULT_STEP_CAP,
             plus_enabled: bool = True) -> SeparationResult:
    """Run the full minus/plus recursion on one mixture.

    With ``n`` given, exactly ``n`` sounds are emitted.  Otherwise steps
    continue until the running mixture's energy drops below
    ``eps_rel * energy(mix)`` or the step cap is reached (the cap is reported
    in the result, not raised).
    """
    if subtract_mode not in ("minus", "final"):
        raise ConfigError(f"unknown subtract_mode {subtract_mode!r}")
    V = model.visual_encode(frames)
    initial_energy = energy(mix)
    eps_abs = max(eps_rel * initial_energy, _ZERO_ENERGY_FLOOR)

    current = mix.copy()
    records: list[SoundRecord] = []
    finals: list[Spectrogram] = []
    clamp_events = 0
    hit_cap = False
    while True:
        if n is not None:
            if len(records) >= n:
                break
        else:
            if energy(current) <= eps_abs:
                break
            if len(records) >= step_cap:
                hit_cap = True
                break
        ms = minus_step(current, V, model, mask_kind, binarize_threshold)
        if plus_enabled:
            residual, final = plus_step(ms.solo, finals, model)
        else:
            residual = Spectrogram(np.zeros_like(ms.solo.values), ms.solo.scale)
            final = ms.solo.copy()
        if subtract_mode == "final":
            current, clamped = subtract(current, final)
            clamp_events += clamped
        else:
            current = ms.mix_next
            clamp_events += ms.clamped
        records.append(SoundRecord(
            final=final, minus_solo=ms.solo, residual=residual,
            location=(ms.localization.x, ms.localization.y),
            energy=energy(ms.solo), score=float(ms.localization.score_map[
                ms.localization.x, ms.localization.y]),
            mask=ms.mask, score_map=ms.localization.score_map.copy()))
        finals.append(final)

    return SeparationResult(
        records=records, remainder=current, steps=len(records),
        mask_kind=mask_kind, subtract_mode=subtract_mode,
        clamp_events=clamp_events, hit_step_cap=hit_cap, requested_n=n,
        initial_energy=initial_energy)


def count_sounds(mix: Spectrogram, frames: np.ndarray, model: MpModel,
                 eps_rel: float = DEFAULT_EPS_REL,
                 step_cap: int = DEFAULT_STEP_CAP, **kwargs) -> int:
    """Number of sounds found under the energy-threshold termination rule."""
    result = separate(mix, frames, model, n=None, eps_rel=eps_rel,
                      step_cap=step_cap, **kwargs)
    return result.steps


def separate_independent_baseline(mix: Spectrogram, frames: np.ndarray,
                                  model: MpModel, n: int,
                                  mask_kind: str = "ratio",
                                  binarize_threshold: float = 0.5) -> SeparationResult:
    """Non-recursive reference: n masks, all computed from the original mixture.

    Uses the n best-scoring distinct locations of the localization map; no
    subtraction between predictions and no plus stage, so predictions are
    order-independent.
    """
    V = model.visual_encode(frames)
    bank = model.predict_components(mix)
    loc = localize(V, bank, mix)
    h, w = loc.score_map.shape
    if n > h * w:
        raise ConfigError(f"n={n} exceeds the {h * w} grid cells")

    flat_order = np.argsort(-loc.score_map.reshape(-1), kind="stable")
    feats = V.location_features
    records = []
    extracted = np.zeros_like(mix.values)
    for flat_idx in flat_order[:n]:
        x, y = divmod(int(flat_idx), w)
        mask = compose_mask(feats[x, y], bank)
        if mask_kind == "binary":
            mask = binarize(mask, binarize_threshold)
        solo = apply_mask(mix, mask)
        zero = Spectrogram(np.zeros_like(solo.values), solo.scale)
        records.append(SoundRecord(
            final=solo, minus_solo=solo, residual=zero, location=(x, y),
            energy=energy(solo), score=float(loc.score_map[x, y]), mask=mask,
            score_map=loc.score_map.copy()))
        extracted = extracted + solo.values

    remainder, clamped = subtract(mix, Spectrogram(extracted, mix.scale))
    return SeparationResult(
        records=records, remainder=remainder, steps=len(records),
        mask_kind=mask_kind, subtract_mode="independent",
        clamp_events=clamped, hit_step_cap=False, requested_n=n,
        initial_energy=energy(mix))


def conservation_deviation(result: SeparationResult, mix: Spectrogram) -> float:
    """Max |mix - (sum of minus-stage solos + remainder)| over all bins."""
    total = result.remainder.values.copy()
    for rec in result.records:
        total = total + rec.minus_solo.values
    return float(np.max(np.abs(mix.values - total)))


def save_separation_result(result: SeparationResult, out_dir,
                           estimates: list | None = None,
                           remainder_wav=None) -> Path:
    """Serialize a result to a directory.

    Writes per-sound spectrogram caches, optional WAV reconstructions
    (``estimates`` as Waveform list aligned with records), and a JSON summary
    with locations, energies, step order, clamp counts and remainder energy.
    """
    from .audio import write_wav  # local import to avoid cycle in type hints

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sounds_meta = []
    for i, rec in enumerate(result.records):
        sdir = out / f"sound_{i:02d}"
        sdir.mkdir(exist_ok=True)
        write_spectrogram_cache(sdir / "final.mpsg", rec.final)
        write_spectrogram_cache(sdir / "minus.mpsg", rec.minus_solo)
        write_spectrogram_cache(sdir / "residual.mpsg", rec.residual)
        if estimates is not None:
            write_wav(sdir / "estimate.wav", estimates[i])
        sounds_meta.append({
            "step": i,
            "location": list(rec.location),
            "energy": rec.energy,
            "score": rec.score,
        })
    write_spectrogram_cache(out / "remainder.mpsg", result.remainder)
    if remainder_wav is not None:
        write_wav(out / "remainder.wav", remainder_wav)
    summary = {
        "steps": result.steps,
        "mask_kind": result.mask_kind,
        "subtract_mode": result.subtract_mode,
        "clamp_events": result.clamp_events,
        "hit_step_cap": result.hit_step_cap,
        "requested_n": result.requested_n,
        "initial_energy": result.initial_energy,
        "remainder_energy": energy(result.remainder),
        "sounds": sounds_meta,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return out
