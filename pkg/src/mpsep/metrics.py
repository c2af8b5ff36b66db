"""Separation quality metrics.

Time-domain metrics use a projection-based (time-invariant, filter-free)
decomposition of each estimate into target, interference and artifact
components; it is exactly testable against a least-squares oracle.  dB ratios
are capped at +-60 so degenerate cases stay finite.  Spectrogram-domain
metrics are windowed structural similarity and the cross-pair average used to
measure how much of the *other* sounds leaks into each separation (lower is
better).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import Spectrogram, StftConfig, Waveform, reconstruct_waveform, stft_magnitude
from .errors import ConfigError, ShapeMismatchError, UndefinedMetricError

DB_CAP = 60.0
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L_FLOOR = 1e-8


@dataclass
class BssDecomposition:
    """estimate = s_target + e_interf + e_artif, exactly.

    ``s_target`` is the projection of the estimate onto the reference source;
    ``e_interf`` the rest of its projection onto the span of all references;
    ``e_artif`` whatever lies outside that span.
    """

    s_target: np.ndarray
    e_interf: np.ndarray
    e_artif: np.ndarray

    @property
    def estimate(self) -> np.ndarray:
        return self.s_target + self.e_interf + self.e_artif


def bss_decompose(estimate: Waveform, references: list[Waveform],
                  target_index: int) -> BssDecomposition:
    """Orthogonal-projection decomposition of an estimate against references."""
    est = np.asarray(estimate.samples, dtype=np.float64)
    refs = [np.asarray(r.samples, dtype=np.float64) for r in references]
    for r in refs:
        if r.shape != est.shape:
            raise ShapeMismatchError("estimate and references must share length")
        if not np.any(r):
            raise UndefinedMetricError("all-zero reference source")
    if not 0 <= target_index < len(refs):
        raise ConfigError(f"target_index {target_index} out of range")

    R = np.stack(refs)                       # (m, L)
    gram = R @ R.T
    try:
        coef = np.linalg.solve(gram, R @ est)
    except np.linalg.LinAlgError as exc:
        raise UndefinedMetricError(f"references are linearly dependent: {exc}")
    p_all = R.T @ coef

    target = refs[target_index]
    s_target = (np.dot(est, target) / np.dot(target, target)) * target
    e_interf = p_all - s_target
    e_artif = est - p_all
    return BssDecomposition(s_target, e_interf, e_artif)


def _ratio_db(num: float, den: float) -> float:
    if num == 0.0:
        return -DB_CAP
    if den == 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def _sq(x: np.ndarray) -> float:
    return float(np.dot(x, x))


def sdr(d: BssDecomposition) -> float:
    """Signal-to-distortion ratio in dB (capped at +-60)."""
    return _ratio_db(_sq(d.s_target), _sq(d.e_interf + d.e_artif))


def sir(d: BssDecomposition) -> float:
    """Signal-to-interference ratio in dB (capped at +-60)."""
    return _ratio_db(_sq(d.s_target), _sq(d.e_interf))


def sar(d: BssDecomposition) -> float:
    """Signal-to-artifact ratio in dB (capped at +-60)."""
    return _ratio_db(_sq(d.s_target + d.e_interf), _sq(d.e_artif))


def nsdr(estimate: Waveform, mixture: Waveform, references: list[Waveform],
         target_index: int) -> float:
    """SDR improvement of the estimate over the unprocessed mixture."""
    est_sdr = sdr(bss_decompose(estimate, references, target_index))
    mix_sdr = sdr(bss_decompose(mixture, references, target_index))
    return est_sdr - mix_sdr


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    d = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(d * d) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a: Spectrogram, b: Spectrogram, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    """Mean local structural similarity over a sliding Gaussian window.

    The dynamic range is the joint max of both inputs (spectrograms are
    unbounded, unlike 8-bit images), floored so an all-zero pair scores 1.
    """
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError(
            f"ssim: shapes {a.values.shape} vs {b.values.shape}")
    if a.scale != b.scale:
        raise ShapeMismatchError(f"ssim: scales {a.scale!r} vs {b.scale!r}")
    if min(a.values.shape) < window:
        raise ConfigError(f"ssim needs grids of at least {window}x{window}")

    va, vb = a.values, b.values
    level = max(va.max(), vb.max(), SSIM_L_FLOOR)
    c1 = (SSIM_K1 * level) ** 2
    c2 = (SSIM_K2 * level) ** 2
    kernel = _gaussian_kernel(window, sigma)

    def local_mean(x):
        return np.einsum("xyij,ij->xy", sliding_window_view(x, (window, window)),
                         kernel)

    mu_a = local_mean(va)
    mu_b = local_mean(vb)
    e_aa = local_mean(va * va)
    e_bb = local_mean(vb * vb)
    e_ab = local_mean(va * vb)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(ssim_map.mean())


def amid(solos: list[Spectrogram], gts: list[Spectrogram]) -> float:
    """Average cross-pair SSIM: separation i against the ground truth of j != i.

    Low values mean each separated sound resembles only its own source.
    """
    m = len(solos)
    if m != len(gts):
        raise ShapeMismatchError(f"{m} separations vs {len(gts)} ground truths")
    if m < 2:
        raise UndefinedMetricError("cross-pair average needs at least 2 sources")
    total = 0.0
    for i in range(m):
        for j in range(m):
            if i != j:
                total += ssim(solos[i], gts[j])
    return total / (m * (m - 1))


@dataclass
class DemoRow:
    placement: str
    row: int
    sdr: float
    sir: float
    sar: float
    ssim: float


@dataclass
class DemoTable:
    rows: list[DemoRow]

    def spread(self, metric: str) -> float:
        vals = [getattr(r, metric) for r in self.rows]
        return max(vals) - min(vals)

    @property
    def sdr_family_spread(self) -> float:
        return max(self.spread("sdr"), self.spread("sir"), self.spread("sar"))

    @property
    def ssim_spread(self) -> float:
        return self.spread("ssim")


def metric_sensitivity_demo(base: Spectrogram, patch: np.ndarray,
                            placements: dict[str, int],
                            references: list[Waveform],
                            mix_phase: np.ndarray, cfg: StftConfig,
                            target_index: int = 0) -> DemoTable:
    """Score the same mismatch patch at different frequency placements.

    ``base`` is the target's linear magnitude spectrogram; each placement adds
    ``patch`` (top row at the given bin) to it, reconstructs a waveform with
    the mixture phase, and reports the time-domain ratios next to the
    spectrogram-domain similarity.  The ratios react to *where* the mismatch
    falls relative to the sources' spectral content; similarity reacts only to
    local statistics.
    """
    if base.scale != "linear":
        raise ConfigError("demo operates on linear spectrograms")
    patch = np.asarray(patch, dtype=np.float64)
    rows = []
    for name, row in placements.items():
        est_values = base.values.copy()
        if patch.size:
            pr, pc = patch.shape
            if row + pr > est_values.shape[0] or pc > est_values.shape[1]:
                raise ConfigError(f"patch does not fit at placement {name!r}")
            est_values[row: row + pr, :pc] += patch
        est_spec = Spectrogram(est_values, "linear")
        wave = reconstruct_waveform(mix_phase, est_spec,
                                    np.ones_like(est_values), cfg)
        d = bss_decompose(wave, references, target_index)
        rows.append(DemoRow(name, row, sdr(d), sir(d), sar(d),
                            ssim(est_spec, base)))
    return DemoTable(rows)


def build_demo_case(cfg: StftConfig, seed: int = 0,
                    patch_rows: int = 3, patch_level: float = 0.25):
    """Default two-tone scenario for the sensitivity demo.

    The target sings at a low bin, an interferer at a mid bin, and a high band
    stays empty; the same constant patch lands on each of the three bands.
    Returns (base spectrogram, patch, placements, references, mix_phase).
    """
    rng = np.random.default_rng(seed)
    n_bins = cfg.n_freq_bins
    r_low, r_mid, r_high = n_bins // 8, n_bins // 2, (3 * n_bins) // 4

    def tone(row):
        freq = row * cfg.sample_rate / cfg.window_size
        t = np.arange(cfg.clip_samples) / cfg.sample_rate
        return Waveform(0.1 * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi)),
                        cfg.sample_rate)

    target = tone(r_low)
    interferer = tone(r_mid)
    mixture = Waveform(target.samples + interferer.samples, cfg.sample_rate)
    _, mix_phase = stft_magnitude(mixture, cfg)
    base, _ = stft_magnitude(target, cfg)

    n_frames = base.values.shape[1]
    patch = np.full((patch_rows, n_frames), patch_level * base.values.max())
    placements = {"low": r_low - patch_rows // 2,
                  "mid": r_mid - patch_rows // 2,
                  "high": r_high - patch_rows // 2}
    return base, patch, placements, [target, interferer], mix_phase


@dataclass
class SourceRow:
    """Per-source metric record (one CSV row)."""

    sample_index: int
    source_index: int
    class_id: int
    nsdr: float
    sir: float
    sar: float


@dataclass
class MetricReport:
    """Evaluation results over a test set."""

    rows: list[SourceRow] = field(default_factory=list)
    amid_per_sample: list[float] = field(default_factory=list)
    count_correct: list[bool] = field(default_factory=list)
    localization_hits: list[bool] = field(default_factory=list)

    def means(self) -> dict:
        out = {
            "n_samples": len(self.amid_per_sample),
            "n_sources": len(self.rows),
        }
        for key in ("nsdr", "sir", "sar"):
            vals = [getattr(r, key) for r in self.rows]
            out[f"mean_{key}"] = float(np.mean(vals)) if vals else float("nan")
        out["mean_amid"] = (float(np.mean(self.amid_per_sample))
                            if self.amid_per_sample else float("nan"))
        if self.count_correct:
            out["count_accuracy"] = float(np.mean(self.count_correct))
        if self.localization_hits:
            out["localization_accuracy"] = float(np.mean(self.localization_hits))
        return out

    def to_csv(self, path) -> None:
        lines = ["sample_index,source_index,class_id,nsdr,sir,sar"]
        for r in self.rows:
            lines.append(f"{r.sample_index},{r.source_index},{r.class_id},"
                         f"{r.nsdr:.6f},{r.sir:.6f},{r.sar:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")

    def write_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.means(), indent=2))


def best_permutation(sdr_matrix: np.ndarray) -> tuple[int, ...]:
    """Assignment of estimates to references maximizing total SDR.

    ``sdr_matrix[i, j]`` scores estimate i against reference j.  Exhaustive
    over permutations (source counts here are tiny).
    """
    m = sdr_matrix.shape[0]
    if sdr_matrix.shape != (m, m):
        raise ShapeMismatchError("sdr matrix must be square")
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(m)):
        total = sum(sdr_matrix[i, perm[i]] for i in range(m))
        if total > best:
            best, best_perm = total, perm
    return best_perm
