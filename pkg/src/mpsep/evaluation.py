"""Driving the separator over test mixtures and scoring the results.

Estimates are reconstructed by converting each separated mel spectrogram into
an effective mel mask against the mixture, upsampling it to linear bins, and
inverting the masked mixture STFT with the mixture phase.  Predictions are
assigned to ground-truth sources by the permutation that maximizes total SDR
(standard practice for separation scoring); the same alignment feeds the
cross-pair similarity so "other sources" is well defined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import Spectrogram, StftConfig, Waveform, mel_mask_to_linear, reconstruct_waveform
from .engine import (
    SeparationResult,
    separate,
    separate_independent_baseline,
)
from .errors import ConfigError
from .metrics import (
    MetricReport,
    SourceRow,
    amid,
    best_permutation,
    bss_decompose,
    sar,
    sdr,
    sir,
)
from .models import MpModel
from .synthdata import MixSample, MixSampler, SoloDataset

METHODS = ("mpnet", "mnet_only", "independent")
MASK_DELTA = 1e-8


@dataclass(frozen=True)
class EvalConfig:
    method: str = "mpnet"
    mask_kind: str = "ratio"
    mix_n: int = 2
    n_eval: int = 64
    seed: int = 900
    provide_n: bool = True
    eps_rel: float = 1e-3
    step_cap: int = 8
    subtract_mode: str = "minus"
    imbalance_ratio: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")


def build_eval_mixtures(dataset: SoloDataset, ev: EvalConfig,
                        split: str = "test") -> list[MixSample]:
    sampler = MixSampler(dataset, split, ev.mix_n, seed=ev.seed,
                         imbalance_ratio=ev.imbalance_ratio)
    return [sampler.sample(i) for i in range(ev.n_eval)]


def run_separation(model: MpModel, sample: MixSample, ev: EvalConfig,
                   n: int | None = None) -> SeparationResult:
    """Run the configured method on one mixture."""
    if n is None and ev.provide_n:
        n = sample.n
    if ev.method == "independent":
        return separate_independent_baseline(
            sample.mixture, sample.frames, model, n=n or sample.n,
            mask_kind=ev.mask_kind)
    return separate(
        sample.mixture, sample.frames, model, n=n, mask_kind=ev.mask_kind,
        subtract_mode=ev.subtract_mode, eps_rel=ev.eps_rel,
        step_cap=ev.step_cap, plus_enabled=(ev.method == "mpnet"))


def effective_mel_mask(separated: Spectrogram, mixture: Spectrogram) -> np.ndarray:
    """Mel-domain ratio mask the separation implies against the mixture."""
    return np.clip(separated.values / (mixture.values + MASK_DELTA), 0.0, 1.0)


def reconstruct_estimates(result: SeparationResult, sample: MixSample,
                          cfg: StftConfig) -> tuple[list[Waveform], Waveform]:
    """Waveforms for every separated sound plus the remainder."""
    mix_linear, mix_phase = sample.mixture_stft(cfg)

    def to_wave(spec: Spectrogram) -> Waveform:
        mel_mask = effective_mel_mask(spec, sample.mixture)
        lin_mask = mel_mask_to_linear(mel_mask, cfg)
        return reconstruct_waveform(mix_phase, mix_linear, lin_mask, cfg)

    estimates = [to_wave(rec.final) for rec in result.records]
    remainder = to_wave(result.remainder)
    return estimates, remainder


def glyph_cells(sample: MixSample, source_index: int,
                glyph_half: int = 7) -> set[tuple[int, int]]:
    """Feature-grid cells touched by the glyph of one source."""
    clip = sample.solos[source_index]
    w = sample.frame_width_per_source
    r, c = clip.glyph_location
    abs_c = source_index * w + c
    cells = set()
    for rr in range(max(0, r - glyph_half), r + glyph_half + 1):
        for cc in range(max(0, abs_c - glyph_half), abs_c + glyph_half + 1):
            cells.add((rr // 16, cc // 16))
    return cells


@dataclass
class SampleEvaluation:
    rows: list[SourceRow]
    amid: float | None
    predicted_count: int | None
    localization_hits: list[bool]
    assignment: tuple[int, ...]
    result: SeparationResult


def evaluate_sample(model: MpModel, sample: MixSample, cfg: StftConfig,
                    ev: EvalConfig, sample_index: int = 0,
                    with_count: bool = False) -> SampleEvaluation:
    result = run_separation(model, sample, ev, n=sample.n)
    estimates, _ = reconstruct_estimates(result, sample, cfg)
    refs = [c.waveform for c in sample.solos]
    mixture = sample.mixture_waveform
    m = sample.n

    decomps = [[bss_decompose(est, refs, j) for j in range(m)]
               for est in estimates]
    sdr_matrix = np.array([[sdr(d) for d in row] for row in decomps])
    perm = best_permutation(sdr_matrix)
    mix_sdr = [sdr(bss_decompose(mixture, refs, j)) for j in range(m)]

    rows = []
    hits = []
    finals_by_ref: list[Spectrogram | None] = [None] * m
    for i, ref_idx in enumerate(perm):
        d = decomps[i][ref_idx]
        rows.append(SourceRow(
            sample_index=sample_index, source_index=ref_idx,
            class_id=sample.solos[ref_idx].class_id,
            nsdr=sdr_matrix[i][ref_idx] - mix_sdr[ref_idx],
            sir=sir(d), sar=sar(d)))
        finals_by_ref[ref_idx] = result.records[i].final
        if ev.method != "independent":
            hits.append(result.records[i].location in glyph_cells(sample, ref_idx))

    amid_value = None
    if m >= 2:
        gts = [c.mel for c in sample.solos]
        amid_value = amid([finals_by_ref[j] for j in range(m)], gts)

    predicted_count = None
    if with_count:
        count_result = separate(
            sample.mixture, sample.frames, model, n=None,
            mask_kind=ev.mask_kind, subtract_mode=ev.subtract_mode,
            eps_rel=ev.eps_rel, step_cap=ev.step_cap,
            plus_enabled=(ev.method == "mpnet"))
        predicted_count = count_result.steps

    return SampleEvaluation(rows=rows, amid=amid_value,
                            predicted_count=predicted_count,
                            localization_hits=hits, assignment=perm,
                            result=result)


def evaluate_dataset(model: MpModel, dataset: SoloDataset, cfg: StftConfig,
                     ev: EvalConfig, split: str = "test",
                     with_count: bool = False) -> MetricReport:
    report = MetricReport()
    for i, sample in enumerate(build_eval_mixtures(dataset, ev, split)):
        se = evaluate_sample(model, sample, cfg, ev, sample_index=i,
                             with_count=with_count)
        report.rows.extend(se.rows)
        if se.amid is not None:
            report.amid_per_sample.append(se.amid)
        if se.predicted_count is not None:
            report.count_correct.append(se.predicted_count == sample.n)
        report.localization_hits.extend(se.localization_hits)
    return report


def sweep_mix_counts(model: MpModel, dataset: SoloDataset, cfg: StftConfig,
                     base: EvalConfig, n_tests=(2, 3, 4, 5),
                     methods=METHODS) -> list[dict]:
    """Robustness curves: every method evaluated at every mixture size.

    Returns one row per (method, n_test, metric).
    """
    rows = []
    for method in methods:
        for n_test in n_tests:
            ev = EvalConfig(method=method, mask_kind=base.mask_kind,
                            mix_n=n_test, n_eval=base.n_eval, seed=base.seed,
                            provide_n=True, eps_rel=base.eps_rel,
                            step_cap=base.step_cap,
                            subtract_mode=base.subtract_mode,
                            imbalance_ratio=base.imbalance_ratio)
            report = evaluate_dataset(model, dataset, cfg, ev)
            means = report.means()
            for metric in ("nsdr", "sir", "sar", "amid"):
                rows.append({"method": method, "n_test": n_test,
                             "metric": metric,
                             "value": means[f"mean_{metric}"]})
    return rows


def sweep_rows_to_csv(rows: list[dict], path) -> None:
    from pathlib import Path
    lines = ["method,n_test,metric,value"]
    for r in rows:
        lines.append(f"{r['method']},{r['n_test']},{r['metric']},{r['value']:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
