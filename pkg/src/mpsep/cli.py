"""Command-line surface: reproducible generate/train/separate/evaluate runs.

One flat key-value config file (JSON) feeds every subcommand; flags override
individual keys and every run writes its resolved configuration next to its
outputs, so re-running a directory reproduces it identically.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .audio import StftConfig, mel_downsample, read_wav, stft_magnitude
from .engine import (
    conservation_deviation,
    save_separation_result,
    separate,
    separate_independent_baseline,
)
from .errors import ConfigError, MpsepError, TrainingDivergedError
from .evaluation import (
    EvalConfig,
    build_eval_mixtures,
    evaluate_dataset,
    reconstruct_estimates,
    run_separation,
    sweep_mix_counts,
    sweep_rows_to_csv,
)
from .metrics import build_demo_case, metric_sensitivity_demo
from .models import ModelConfig, load_checkpoint, save_checkpoint
from .synthdata import GenConfig, MixSampler, load_dataset, write_dataset
from .training import TrainConfig, history_to_csv, train

CONSERVATION_TOL = 1e-5


@dataclass
class RunConfig:
    """Every tunable of every subcommand, flat so a single file drives a run."""

    profile: str = "desk"          # paper | desk | smoke
    seed: int = 0
    out: str = "runs/out"
    dataset_dir: str = ""
    checkpoint: str = ""
    # generation
    n_classes: int = 6
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    silent_fraction: float = 0.0
    n_distractors: int = 0
    n_frames: int = 6
    frame_size: int = 64
    # mixing and masks
    mask_kind: str = "ratio"
    mix_n: int = 2
    imbalance_ratio: float = 0.0   # 0 disables the preset
    distinct_classes: bool = True
    # training
    epochs_r1: int = 8
    epochs_r2: int = 4
    epochs_r3: int = 4
    lr_r1: float = 1e-3
    lr_r2: float = 1e-3
    lr_r3: float = 3e-4
    batch_size: int = 8
    samples_per_epoch: int = 256
    remainder_weight: float = 0.1
    augment_lo: float = 0.5
    augment_hi: float = 1.5
    optimizer: str = "adam"
    momentum: float = 0.9
    backprop_subtraction: bool = False
    silence_weight: float = 0.1
    # model sizing overrides (0 keeps the profile default)
    model_k: int = 0
    unet_base: int = 0
    pnet_base: int = 0
    visual_base: int = 0
    # engine and evaluation
    eps_rel: float = 1e-3
    step_cap: int = 8
    subtract_mode: str = "minus"
    method: str = "mpnet"
    n_eval: int = 64
    provide_n: bool = True
    n_separate: int = 0            # 0 -> energy-threshold termination
    sample_index: int = 0
    check_conservation: bool = False
    with_count: bool = False
    plots: bool = False
    workers: int = 0               # >0 pins the numeric kernel thread count


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw):
    if not isinstance(raw, str):
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(path=None, overrides=()) -> RunConfig:
    """Config file plus key=value overrides; unknown keys are rejected."""
    values = {}
    if path:
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        for key, value in data.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            values[key] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def stft_for(cfg: RunConfig) -> StftConfig:
    try:
        return {"paper": StftConfig.paper, "desk": StftConfig.desk,
                "smoke": StftConfig.smoke}[cfg.profile]()
    except KeyError:
        raise ConfigError(f"unknown profile {cfg.profile!r}")


def model_config_for(cfg: RunConfig) -> ModelConfig:
    base = {"paper": ModelConfig.paper_scale, "desk": ModelConfig.desk,
            "smoke": ModelConfig.smoke}[cfg.profile](seed=cfg.seed)
    updates = {}
    if cfg.model_k:
        updates["k"] = cfg.model_k
    if cfg.unet_base:
        updates["unet_base"] = cfg.unet_base
    if cfg.pnet_base:
        updates["pnet_base"] = cfg.pnet_base
    if cfg.visual_base:
        updates["visual_base"] = cfg.visual_base
    if updates:
        base = ModelConfig(**{**asdict_model(base), **updates})
    return base


def asdict_model(mc: ModelConfig) -> dict:
    return {"k": mc.k, "unet_depth": mc.unet_depth, "unet_base": mc.unet_base,
            "pnet_depth": mc.pnet_depth, "pnet_base": mc.pnet_base,
            "visual_base": mc.visual_base, "seed": mc.seed}


def write_resolved(cfg: RunConfig, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **asdict(cfg)}
    (out / "resolved_config.json").write_text(json.dumps(payload, indent=2))


def _gen_config(cfg: RunConfig) -> GenConfig:
    return GenConfig(
        n_classes=cfg.n_classes, n_train=cfg.n_train, n_val=cfg.n_val,
        n_test=cfg.n_test, seed=cfg.seed, silent_fraction=cfg.silent_fraction,
        n_frames=cfg.n_frames, frame_size=cfg.frame_size,
        n_distractors=cfg.n_distractors)


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        mask_kind=cfg.mask_kind, mix_n=cfg.mix_n,
        epochs=(cfg.epochs_r1, cfg.epochs_r2, cfg.epochs_r3),
        lr=(cfg.lr_r1, cfg.lr_r2, cfg.lr_r3), batch_size=cfg.batch_size,
        samples_per_epoch=cfg.samples_per_epoch, seed=cfg.seed,
        remainder_weight=cfg.remainder_weight, eps_rel=cfg.eps_rel,
        augment_range=(cfg.augment_lo, cfg.augment_hi),
        optimizer=cfg.optimizer, momentum=cfg.momentum,
        silence_weight=cfg.silence_weight,
        backprop_through_subtraction=cfg.backprop_subtraction,
        distinct_classes=cfg.distinct_classes,
        imbalance_ratio=cfg.imbalance_ratio or None,
        model=model_config_for(cfg))


def _eval_config(cfg: RunConfig, method=None, mix_n=None) -> EvalConfig:
    return EvalConfig(
        method=method or cfg.method, mask_kind=cfg.mask_kind,
        mix_n=mix_n or cfg.mix_n, n_eval=cfg.n_eval, seed=cfg.seed,
        provide_n=cfg.provide_n, eps_rel=cfg.eps_rel, step_cap=cfg.step_cap,
        subtract_mode=cfg.subtract_mode,
        imbalance_ratio=cfg.imbalance_ratio or None)


def _require(cfg: RunConfig, attr: str, what: str) -> str:
    value = getattr(cfg, attr)
    if not value:
        raise ConfigError(f"{what} required: set config key {attr!r}")
    return value


def cmd_gen(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    stft_cfg = stft_for(cfg)
    manifest = write_dataset(out, _gen_config(cfg), stft_cfg)
    write_resolved(cfg, out, "gen")
    n_lines = sum(1 for _ in open(manifest))
    print(f"gen: wrote {n_lines} solos to {out}")
    return 0


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(_require(cfg, "dataset_dir", "dataset"))
    tcfg = _train_config(cfg)
    model, start_round = None, 1
    if resume:
        model, meta = load_checkpoint(resume)
        start_round = int(meta.get("round", 0)) + 1
        print(f"train: resuming after round {start_round - 1}")
    try:
        model, history = train(dataset, tcfg, model=model,
                               start_round=start_round, checkpoint_dir=out)
    except TrainingDivergedError as exc:
        history_to_csv(exc.history or [], out / "train_log.csv")
        write_resolved(cfg, out, "train")
        print(f"train: diverged: {exc}", file=sys.stderr)
        return 3
    history_to_csv(history, out / "train_log.csv")
    write_resolved(cfg, out, "train")
    final_loss = history[-1]["total_loss"] if history else float("nan")
    print(f"train: {len(history)} steps, final loss {final_loss:.4f}, "
          f"checkpoints in {out}")
    return 0


def _load_mix_dir(mix_dir: str, stft_cfg: StftConfig):
    """An on-disk mixture: mixture.wav plus frames/*.png."""
    root = Path(mix_dir)
    wave = read_wav(root / "mixture.wav")
    frame_paths = sorted((root / "frames").glob("*.png"))
    if not frame_paths:
        raise ConfigError(f"{mix_dir}: no frames/*.png found")
    frames = np.stack([np.asarray(Image.open(p).convert("RGB"))
                       for p in frame_paths])
    linear, phase = stft_magnitude(wave, stft_cfg)
    mel = mel_downsample(linear, stft_cfg)
    return mel, frames, linear, phase


def cmd_separate(cfg: RunConfig, mix_dir: str | None = None) -> int:
    out = Path(cfg.out)
    stft_cfg = stft_for(cfg)
    model, _ = load_checkpoint(_require(cfg, "checkpoint", "checkpoint"))
    n = cfg.n_separate or None

    if mix_dir:
        mel, frames, linear, phase = _load_mix_dir(mix_dir, stft_cfg)
        sample = None
    else:
        dataset = load_dataset(_require(cfg, "dataset_dir", "dataset"))
        sampler = MixSampler(dataset, "test", cfg.mix_n, seed=cfg.seed,
                             imbalance_ratio=cfg.imbalance_ratio or None)
        sample = sampler.sample(cfg.sample_index)
        mel, frames = sample.mixture, sample.frames
        linear, phase = sample.mixture_stft(stft_cfg)

    if cfg.method == "independent":
        result = separate_independent_baseline(
            mel, frames, model, n=n or cfg.mix_n, mask_kind=cfg.mask_kind)
    else:
        result = separate(mel, frames, model, n=n, mask_kind=cfg.mask_kind,
                          subtract_mode=cfg.subtract_mode, eps_rel=cfg.eps_rel,
                          step_cap=cfg.step_cap,
                          plus_enabled=(cfg.method == "mpnet"))

    from .audio import Spectrogram, mel_mask_to_linear, reconstruct_waveform
    from .evaluation import effective_mel_mask
    estimates = []
    for rec in result.records:
        mel_mask = effective_mel_mask(rec.final, mel)
        lin_mask = mel_mask_to_linear(mel_mask, stft_cfg)
        estimates.append(reconstruct_waveform(phase, linear, lin_mask, stft_cfg))
    rem_mask = mel_mask_to_linear(effective_mel_mask(result.remainder, mel),
                                  stft_cfg)
    remainder_wav = reconstruct_waveform(phase, linear, rem_mask, stft_cfg)

    save_separation_result(result, out, estimates=estimates,
                           remainder_wav=remainder_wav)
    write_resolved(cfg, out, "separate")
    if n is None:
        print(f"separate: predicted {result.steps} sounds "
              f"(eps termination, cap hit: {result.hit_step_cap})")
    else:
        print(f"separate: emitted {result.steps} sounds")

    if cfg.check_conservation:
        deviation = conservation_deviation(result, mel)
        print(f"separate: conservation max deviation {deviation:.3e}, "
              f"clamp events {result.clamp_events}")
        if cfg.subtract_mode == "minus" and cfg.method != "independent":
            if deviation > CONSERVATION_TOL or result.clamp_events:
                print("separate: conservation check FAILED", file=sys.stderr)
                return 1
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stft_cfg = stft_for(cfg)
    model, _ = load_checkpoint(_require(cfg, "checkpoint", "checkpoint"))
    dataset = load_dataset(_require(cfg, "dataset_dir", "dataset"))
    ev = _eval_config(cfg)
    report = evaluate_dataset(model, dataset, stft_cfg, ev,
                              with_count=cfg.with_count)
    report.to_csv(out / "per_source.csv")
    report.write_summary(out / "summary.json")
    write_resolved(cfg, out, "eval")
    means = report.means()
    print(f"eval[{ev.method}/{ev.mask_kind}]: "
          f"NSDR {means['mean_nsdr']:.2f} dB, SIR {means['mean_sir']:.2f}, "
          f"SAR {means['mean_sar']:.2f}, AMID {means['mean_amid']:.4f}")
    if "count_accuracy" in means:
        print(f"eval: sound-count accuracy {means['count_accuracy']:.2%}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stft_cfg = stft_for(cfg)
    model, _ = load_checkpoint(_require(cfg, "checkpoint", "checkpoint"))
    dataset = load_dataset(_require(cfg, "dataset_dir", "dataset"))
    rows = sweep_mix_counts(model, dataset, stft_cfg, _eval_config(cfg))
    sweep_rows_to_csv(rows, out / "sweep.csv")
    write_resolved(cfg, out, "sweep")
    if cfg.plots:
        _plot_sweep(rows, out / "sweep_nsdr.png")
    print(f"sweep: wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return 0


def _plot_sweep(rows, path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("sweep: matplotlib unavailable, skipping plot", file=sys.stderr)
        return
    fig, ax = plt.subplots()
    for method in sorted({r["method"] for r in rows}):
        pts = [(r["n_test"], r["value"]) for r in rows
               if r["method"] == method and r["metric"] == "nsdr"]
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=method)
    ax.set_xlabel("sounds in test mixture")
    ax.set_ylabel("mean NSDR (dB)")
    ax.legend()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _heatmap_image(score_map: np.ndarray, frames: np.ndarray,
                   location: tuple[int, int]) -> Image.Image:
    """Score map upscaled over the mean frame, argmax cell outlined."""
    lo, hi = score_map.min(), score_map.max()
    norm = (score_map - lo) / (hi - lo) if hi > lo else np.zeros_like(score_map)
    heat = np.kron(norm, np.ones((16, 16)))  # nearest-neighbor upscale
    base = frames.mean(axis=0).astype(np.float64)  # (H, W, 3)
    img = 0.4 * base
    img[..., 0] += 0.6 * 255 * heat[:base.shape[0], :base.shape[1]]
    x, y = location
    r0, c0 = x * 16, y * 16
    img[r0:r0 + 16, c0:c0 + 2, 1] = 255
    img[r0:r0 + 16, c0 + 14:c0 + 16, 1] = 255
    img[r0:r0 + 2, c0:c0 + 16, 1] = 255
    img[r0 + 14:r0 + 16, c0:c0 + 16, 1] = 255
    return Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))


def cmd_localize(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stft_cfg = stft_for(cfg)
    model, _ = load_checkpoint(_require(cfg, "checkpoint", "checkpoint"))
    dataset = load_dataset(_require(cfg, "dataset_dir", "dataset"))
    sampler = MixSampler(dataset, "test", cfg.mix_n, seed=cfg.seed,
                         imbalance_ratio=cfg.imbalance_ratio or None)
    sample = sampler.sample(cfg.sample_index)
    result = separate(sample.mixture, sample.frames, model, n=sample.n,
                      mask_kind=cfg.mask_kind, eps_rel=cfg.eps_rel,
                      step_cap=cfg.step_cap)
    steps_meta = []
    for i, rec in enumerate(result.records):
        img = _heatmap_image(rec.score_map, sample.frames, rec.location)
        img.save(out / f"step_{i:02d}_heatmap.png")
        steps_meta.append({
            "step": i,
            "location": list(rec.location),
            "map_shape": list(rec.score_map.shape),
            "score_map": rec.score_map.tolist(),
        })
    payload = {"sample_index": cfg.sample_index, "n": sample.n,
               "steps": steps_meta}
    (out / "localization.json").write_text(json.dumps(payload, indent=2))
    write_resolved(cfg, out, "localize")
    print(f"localize: {len(steps_meta)} steps written to {out}")
    return 0


def cmd_metric_demo(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stft_cfg = stft_for(cfg)
    base, patch, placements, refs, phase = build_demo_case(stft_cfg, cfg.seed)
    table = metric_sensitivity_demo(base, patch, placements, refs, phase,
                                    stft_cfg)
    lines = ["placement,row,sdr,sir,sar,ssim"]
    for r in table.rows:
        lines.append(f"{r.placement},{r.row},{r.sdr:.4f},{r.sir:.4f},"
                     f"{r.sar:.4f},{r.ssim:.6f}")
    (out / "metric_demo.csv").write_text("\n".join(lines) + "\n")
    summary = {
        "sdr_spread": table.spread("sdr"),
        "sir_spread": table.spread("sir"),
        "sar_spread": table.spread("sar"),
        "sdr_family_spread": table.sdr_family_spread,
        "ssim_spread": table.ssim_spread,
    }
    (out / "metric_demo.json").write_text(json.dumps(summary, indent=2))
    write_resolved(cfg, out, "metric-demo")
    for line in lines:
        print(line)
    print(f"metric-demo: ratio-family spread {table.sdr_family_spread:.2f} dB "
          f"vs similarity spread {table.ssim_spread:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mpsep",
        description="Recursive minus/plus visual sound separation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")

    for name in ("gen", "train", "separate", "eval", "sweep", "localize",
                 "metric-demo"):
        p = sub.add_parser(name)
        common(p)
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
        if name == "separate":
            p.add_argument("--n", type=int, help="number of sounds to emit")
            p.add_argument("--mask", choices=("ratio", "binary"))
            p.add_argument("--subtract", choices=("minus", "final"))
            p.add_argument("--sample", type=int, help="test mixture index")
            p.add_argument("--mix-dir", help="directory with mixture.wav + frames/")
            p.add_argument("--check-conservation", action="store_true")
        if name == "eval":
            p.add_argument("--method", choices=("mpnet", "mnet_only", "independent"))
        if name == "localize":
            p.add_argument("--sample", type=int, help="test mixture index")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if cfg.workers > 0:
            import torch
            torch.set_num_threads(cfg.workers)
        if args.command == "separate":
            if args.n is not None:
                cfg.n_separate = args.n
            if args.mask:
                cfg.mask_kind = args.mask
            if args.subtract:
                cfg.subtract_mode = args.subtract
            if args.sample is not None:
                cfg.sample_index = args.sample
            if args.check_conservation:
                cfg.check_conservation = True
        if args.command == "eval" and args.method:
            cfg.method = args.method
        if args.command == "localize" and args.sample is not None:
            cfg.sample_index = args.sample

        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "train":
            return cmd_train(cfg, resume=args.resume)
        if args.command == "separate":
            return cmd_separate(cfg, mix_dir=args.mix_dir)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "localize":
            return cmd_localize(cfg)
        if args.command == "metric-demo":
            return cmd_metric_demo(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except MpsepError as exc:
        print(f"mpsep {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
