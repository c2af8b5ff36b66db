"""Mix-and-Separate training.

Each constructed mixture is separated recursively during training, with the
predictions supervised in descending order of ground-truth source energy: the
step-t mask pair is compared against the ground-truth mask of the t-th most
energetic source, and the feature vector feeding the mask comes from the best
scoring cell *within that source's frame region*, so training localization
follows the same scoring rule inference uses.

The schedule has three rounds: (1) the minus-stage nets alone, (2) the
residual net with the minus-stage frozen, (3) joint finetuning.  The running
mixture is recursed on predicted solos with gradients blocked at the
subtraction boundary, so each step's gradient flows only through its own
masks; the terminal remainder penalty is computed from the live (non-detached)
solo sum so it can actually pull the masks.  Masks are always predicted as
sigmoids; the "binary" setting selects partition-style ground truth and a BCE
loss (and binarized masks at inference), not a hard forward pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, TrainingDivergedError
from .models import ModelConfig, MpModel, compose_mask_torch, save_checkpoint
from .specalg import energy_values
from .synthdata import MixSample, MixSampler, SoloDataset, augment_energy

GT_DELTA = 1e-8
BCE_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    mask_kind: str = "ratio"
    mix_n: int = 2
    epochs: tuple[int, int, int] = (8, 4, 4)
    lr: tuple[float, float, float] = (1e-3, 1e-3, 3e-4)
    batch_size: int = 8
    samples_per_epoch: int = 256
    seed: int = 0
    remainder_weight: float = 0.1
    eps_rel: float = 1e-3
    augment_range: tuple[float, float] = (0.5, 1.5)
    optimizer: str = "adam"   # sgd saturates the attention logits; see ledger
    momentum: float = 0.9     # used by the sgd option
    silence_weight: float = 0.1   # pushes background-cell masks toward zero
    cell_selection: str = "mixed"  # mixed | glyph | argmax
    teacher_floor: float = 0.5     # steady glyph-forced batch fraction (mixed)
    backprop_through_subtraction: bool = False
    distinct_classes: bool = True
    imbalance_ratio: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.mask_kind not in ("ratio", "binary"):
            raise ConfigError(f"unknown mask kind {self.mask_kind!r}")
        if self.mix_n < 1:
            raise ConfigError("mix_n must be at least 1")
        if len(self.epochs) != 3 or len(self.lr) != 3:
            raise ConfigError("epochs and lr must have one entry per round")
        if min(self.epochs) < 0 or min(self.lr) <= 0:
            raise ConfigError("epochs must be >= 0 and lr positive")
        if self.batch_size < 1 or self.samples_per_epoch < 1:
            raise ConfigError("batch_size and samples_per_epoch must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.cell_selection not in ("mixed", "glyph", "argmax"):
            raise ConfigError(f"unknown cell_selection {self.cell_selection!r}")
        if not 0.0 <= self.teacher_floor <= 1.0:
            raise ConfigError("teacher_floor must lie in [0, 1]")
        if not 0 < self.augment_range[0] <= self.augment_range[1]:
            raise ConfigError("augment_range must satisfy 0 < lo <= hi")
        if self.remainder_weight < 0 or self.eps_rel <= 0:
            raise ConfigError("remainder_weight >= 0 and eps_rel > 0 required")


@dataclass
class GroundTruthMask:
    """Per-source masks defined against the original (augmented) mixture."""

    masks: np.ndarray  # (n, freq, time)
    kind: str


def gt_masks(sample: MixSample, kind: str, delta: float = GT_DELTA) -> GroundTruthMask:
    """Ground-truth masks for every source of a mixture.

    Ratio: solo / (mixture + delta), clipped to [0, 1].  Binary: each bin with
    mixture energy goes to the per-bin argmax source (ties to the lowest
    index); silent bins belong to nobody.
    """
    mix = sample.mixture.values
    solos = np.stack([c.mel.values for c in sample.solos])
    if kind == "ratio":
        masks = np.clip(solos / (mix[None] + delta), 0.0, 1.0)
    elif kind == "binary":
        active = mix > delta
        winner = np.argmax(solos, axis=0)  # first max wins ties
        masks = np.stack([(winner == i) & active for i in range(len(solos))])
        masks = masks.astype(np.float64)
    else:
        raise ConfigError(f"unknown mask kind {kind!r}")
    return GroundTruthMask(masks, kind)


def _to_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.from_numpy(np.asarray(x, dtype=np.float64))


def step_loss(pred_mask, pred_residual_mask, gt, kind: str):
    """Supervision for one prediction step.

    Binary masks: BCE between clip(M + M_r, 0, 1) and the ground truth.
    Ratio masks: mean absolute error of (M + M_r) against the ground truth.
    Round 1 passes ``pred_residual_mask=None`` and supervises M alone.
    Returns a float for array inputs, a scalar tensor for tensor inputs.
    """
    was_array = not torch.is_tensor(pred_mask)
    m = _to_tensor(pred_mask)
    g = _to_tensor(gt)
    combined = m if pred_residual_mask is None else m + _to_tensor(pred_residual_mask)
    if kind == "binary":
        p = combined.clamp(BCE_EPS, 1.0 - BCE_EPS)
        loss = -(g * torch.log(p) + (1.0 - g) * torch.log1p(-p)).mean()
    elif kind == "ratio":
        loss = (combined - g).abs().mean()
    else:
        raise ConfigError(f"unknown mask kind {kind!r}")
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite step loss")
    return float(loss) if was_array else loss


def remainder_loss(final_mix) -> float:
    """Mean absolute value of what is left after all predictions."""
    values = final_mix.values if hasattr(final_mix, "values") else final_mix
    return float(np.mean(np.abs(values)))


def _background_cell(rng: np.random.Generator, height: int, lo: int, hi: int,
                     gx: int, gy: int) -> tuple[int, int]:
    """A region cell at least 2 cells away from the glyph (random, seeded)."""
    candidates = [(x, y) for x in range(height) for y in range(lo, hi)
                  if max(abs(x - gx), abs(y - gy)) >= 2]
    if not candidates:
        candidates = [(x, y) for x in range(height) for y in range(lo, hi)
                      if (x, y) != (gx, gy)]
    return candidates[int(rng.integers(len(candidates)))]


def _select_cells(feats: torch.Tensor, bank: torch.Tensor, cur: torch.Tensor,
                  col_ranges, glyph_cells, teacher_frac: float) -> torch.Tensor:
    """Pick the feature cell whose vector drives each sample's mask.

    ``teacher_frac`` of 1 forces the known glyph cell of the supervised
    source; 0 uses the best-scoring cell within the source's frame region
    (the inference rule).  Annealing from teacher to student is what lets
    glyph-cell features receive gradient at all early on: with pure argmax
    selection the shared background vector wins every early tie, absorbs
    conflicting class gradients, and the glyph cells stay untrained.
    """
    b, h, w, k = feats.shape
    if teacher_frac >= 1.0:
        xs = torch.tensor([g[0] for g in glyph_cells])
        ys = torch.tensor([g[1] for g in glyph_cells])
        return feats[torch.arange(b), xs, ys]
    with torch.no_grad():
        logits = torch.einsum("bxyk,bkft->bxyft", feats, bank)
        masked = torch.sigmoid(logits.clamp(-30, 30)) * cur[:, None, None]
        scores = masked.pow(2).mean(dim=(-1, -2))
        for i, (lo, hi) in enumerate(col_ranges):
            scores[i, :, :lo] = -torch.inf
            scores[i, :, hi:] = -torch.inf
        flat = scores.reshape(b, -1).argmax(dim=1)
    xs, ys = flat // w, flat % w
    if teacher_frac > 0.0:
        take = int(round(teacher_frac * b))
        if take:
            xs = xs.clone()
            ys = ys.clone()
            xs[:take] = torch.tensor([g[0] for g in glyph_cells[:take]])
            ys[:take] = torch.tensor([g[1] for g in glyph_cells[:take]])
    return feats[torch.arange(b), xs, ys]


def _batch_step(model: MpModel, samples: list[MixSample], cfg: TrainConfig,
                round_idx: int, teacher_frac: float = 0.0,
                rng: np.random.Generator | None = None) -> dict:
    """Forward pass over one batch; returns loss tensor plus logged scalars."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = samples[0].n
    mix0 = torch.from_numpy(np.stack(
        [s.mixture.values for s in samples]).astype(np.float32))
    gts = np.stack([gt_masks(s, cfg.mask_kind).masks[s.order]
                    for s in samples])  # (B, n, F, T), teacher order
    gts_t = torch.from_numpy(gts.astype(np.float32))
    frames = torch.from_numpy(np.stack(
        [s.frames for s in samples]).astype(np.float32) / 255.0)
    frames = frames.permute(0, 1, 4, 2, 3)  # (B, T, 3, H, W)

    grid = model.encode_frames(frames)          # (B, T, h, w, k)
    feats = grid.max(dim=1).values              # (B, h, w, k)
    region_cells = samples[0].frame_width_per_source // 16

    use_pnet = round_idx >= 2
    cur = mix0
    remix = torch.zeros_like(mix0)
    step_losses = []
    silence_losses = []
    live_solo_sum = torch.zeros_like(mix0)
    coverage_gap = torch.ones_like(mix0)  # prod_t (1 - M_t) per bin, live
    for t in range(n):
        bank = model.component_logits(cur)      # (B, k, F, T)
        col_ranges = []
        glyphs = []
        bg_cells = []
        for s in samples:
            src = int(s.order[t])
            lo, hi = src * region_cells, (src + 1) * region_cells
            col_ranges.append((lo, hi))
            r, c = s.solos[src].glyph_location
            gx, gy = r // 16, (src * s.frame_width_per_source + c) // 16
            glyphs.append((gx, gy))
            bg_cells.append(_background_cell(rng, feats.shape[1], lo, hi, gx, gy))
        v = _select_cells(feats, bank, cur, col_ranges, glyphs, teacher_frac)
        mask = compose_mask_torch(v, bank)
        if cfg.silence_weight > 0:
            # a location with no sounding object should emit a silent mask;
            # untrained background cells otherwise win the energy argmax
            # with grab-everything masks.  The bank is detached so only the
            # visual gating learns to silence, without distorting the
            # channels the real masks are composed from.
            bxs = torch.tensor([b[0] for b in bg_cells])
            bys = torch.tensor([b[1] for b in bg_cells])
            v_bg = feats[torch.arange(len(samples)), bxs, bys]
            silence_losses.append(compose_mask_torch(v_bg, bank.detach()).mean())
        solo = mask * cur
        if use_pnet:
            mr_logits = model.residual_logits(remix.detach(), solo)
            mr = torch.sigmoid(mr_logits.clamp(-30, 30))
            residual = remix.detach() * mr
            final = solo + residual
            step_losses.append(step_loss(mask, mr, gts_t[:, t], cfg.mask_kind))
        else:
            final = solo
            step_losses.append(step_loss(mask, None, gts_t[:, t], cfg.mask_kind))
        live_solo_sum = live_solo_sum + solo
        coverage_gap = coverage_gap * (1.0 - mask)
        remix = remix + final.detach()
        if cfg.backprop_through_subtraction:
            cur = cur - solo
        else:
            cur = cur - solo.detach()

    mask_loss = torch.stack(step_losses).mean()
    # remainder pressure on the masks, per bin in *relative* terms: the
    # fraction of each bin still uncovered, weighted by how active the bin
    # is.  A raw-magnitude remainder has per-bin gradients proportional to
    # the (unbounded) mel magnitude and slams every strong bin's mask into
    # saturation before the mask loss can react; this form is bounded like
    # the mask loss, so the configured weight is meaningful.
    with torch.no_grad():
        activity = mix0 / (mix0 + mix0.mean(dim=(-1, -2), keepdim=True)
                           .clamp_min(1e-8))
    coverage_loss = ((activity * coverage_gap).sum(dim=(-1, -2))
                     / activity.sum(dim=(-1, -2)).clamp_min(1e-8)).mean()
    total = mask_loss + cfg.remainder_weight * coverage_loss
    if silence_losses:
        total = total + cfg.silence_weight * torch.stack(silence_losses).mean()
    live_remainder = (mix0 - live_solo_sum).abs().mean()
    return {
        "loss": total,
        "mask_loss": float(mask_loss.detach()),
        "remainder_loss": float(live_remainder.detach()),
        "remainder_energy": float(cur.detach().pow(2).mean()),
    }


def _round_parameters(model: MpModel, round_idx: int):
    if round_idx == 1:
        train = [model.visual_net, model.component_net]
        frozen = [model.residual_net]
    elif round_idx == 2:
        train = [model.residual_net]
        frozen = [model.visual_net, model.component_net]
    else:
        train = [model.visual_net, model.component_net, model.residual_net]
        frozen = []
    return train, frozen


def train(dataset: SoloDataset, cfg: TrainConfig, model: MpModel | None = None,
          start_round: int = 1, checkpoint_dir=None,
          status_every: int = 0) -> tuple[MpModel, list[dict]]:
    """Run the three-round schedule and return (model, history rows).

    Batches are pure functions of (seed, round, epoch, step), so a run resumed
    from a round checkpoint reproduces the next round's losses bit-exactly.
    A non-finite loss aborts with the last epoch-end parameter state attached.
    """
    if model is None:
        model = MpModel(cfg.model)
    sampler = MixSampler(dataset, "train", cfg.mix_n, seed=cfg.seed,
                         distinct_classes=cfg.distinct_classes,
                         imbalance_ratio=cfg.imbalance_ratio)
    history: list[dict] = []
    last_good = copy.deepcopy(model.state_dict())

    for round_idx in range(start_round, 4):
        train_mods, frozen_mods = _round_parameters(model, round_idx)
        for mod in frozen_mods:
            mod.requires_grad_(False)
        for mod in train_mods:
            mod.requires_grad_(True)
        params = [p for mod in train_mods for p in mod.parameters()]
        if cfg.optimizer == "adam":
            opt = torch.optim.Adam(params, lr=cfg.lr[round_idx - 1])
        else:
            opt = torch.optim.SGD(params, lr=cfg.lr[round_idx - 1],
                                  momentum=cfg.momentum)

        n_epochs = cfg.epochs[round_idx - 1]
        steps_per_epoch = max(1, (cfg.samples_per_epoch + cfg.batch_size - 1)
                              // cfg.batch_size)
        round_steps = max(1, n_epochs * steps_per_epoch)
        done_steps = 0
        for epoch in range(n_epochs):
            for step in range(steps_per_epoch):
                base_idx = (round_idx * 1_000_000 + epoch * cfg.samples_per_epoch
                            + step * cfg.batch_size)
                count = min(cfg.batch_size,
                            cfg.samples_per_epoch - step * cfg.batch_size)
                if count <= 0:
                    break
                batch = []
                for i in range(count):
                    sample = sampler.sample(base_idx + i)
                    rng = np.random.default_rng(
                        [cfg.seed, round_idx, epoch, step, i, 23])
                    batch.append(augment_energy(sample, rng, *cfg.augment_range))
                # which cell's feature vector drives each training mask: the
                # known glyph cell (stationary teacher), the inference argmax
                # (student), or the default mix that anneals to a floor where
                # part of every batch stays glyph-anchored while the rest
                # explores via the argmax
                if cfg.cell_selection == "glyph":
                    teacher_frac = 1.0
                elif cfg.cell_selection == "argmax":
                    teacher_frac = 0.0
                elif round_idx == 1:
                    ramp = 1.0 - 2.0 * done_steps / round_steps
                    teacher_frac = max(cfg.teacher_floor, ramp)
                else:
                    teacher_frac = cfg.teacher_floor
                done_steps += 1
                step_rng = np.random.default_rng(
                    [cfg.seed, round_idx, epoch, step, 31])
                try:
                    result = _batch_step(model, batch, cfg, round_idx,
                                         teacher_frac, rng=step_rng)
                    loss = result["loss"]
                    if not torch.isfinite(loss):
                        raise FloatingPointError("non-finite total loss")
                except FloatingPointError as exc:
                    model.load_state_dict(last_good)
                    raise TrainingDivergedError(
                        f"round {round_idx}, epoch {epoch}: {exc}",
                        last_good_state=last_good, history=history)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                row = {"round": round_idx, "epoch": epoch, "step": step,
                       "total_loss": float(loss.detach()),
                       "mask_loss": result["mask_loss"],
                       "remainder_loss": result["remainder_loss"],
                       "remainder_energy": result["remainder_energy"]}
                history.append(row)
                if status_every and len(history) % status_every == 0:
                    print(f"round {round_idx} epoch {epoch} step {step}: "
                          f"loss {row['total_loss']:.4f}")
            last_good = copy.deepcopy(model.state_dict())
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"round{round_idx}.mpck"
            save_checkpoint(model, path, round_number=round_idx,
                            extra_meta={"train_seed": cfg.seed,
                                        "mask_kind": cfg.mask_kind,
                                        "mix_n": cfg.mix_n})
    for mod in model.modules():
        mod.requires_grad_(True)
    return model, history


def history_to_csv(history: list[dict], path) -> None:
    lines = ["round,epoch,step,total_loss,mask_loss,remainder_loss,remainder_energy"]
    for row in history:
        lines.append(
            f"{row['round']},{row['epoch']},{row['step']},"
            f"{row['total_loss']:.8f},{row['mask_loss']:.8f},"
            f"{row['remainder_loss']:.8f},{row['remainder_energy']:.8f}")
    Path(path).write_text("\n".join(lines) + "\n")
