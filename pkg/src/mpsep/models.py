"""The three learnable components of the separator.

* a visual encoder mapping T video frames to a T x H/16 x W/16 x k grid of
  association scores between image locations and sub-spectrogram channels,
* a component predictor (encoder-decoder with skip connections) mapping the
  current mixture to k sub-spectrogram channels, and
* a residual predictor mapping (remix, solo) pairs to a refinement mask.

Networks run in float32 torch; every public operation accepts and returns
the numpy domain types used by the rest of the system.  Spectrograms enter
networks as log(1 + S); masks always multiply raw magnitudes.  Mask logits
are clamped to +-30 before the sigmoid so ratio masks are strictly inside
(0, 1) and running-mixture subtraction never clamps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio import Spectrogram
from .errors import ConfigError, ShapeMismatchError
from .specalg import Mask

LOGIT_CLAMP = 30.0
CHECKPOINT_MAGIC = b"MPCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    k: int = 16
    unet_depth: int = 4
    unet_base: int = 16
    pnet_depth: int = 3
    pnet_base: int = 8
    visual_base: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be positive")
        if min(self.unet_depth, self.pnet_depth) < 1:
            raise ConfigError("network depth must be positive")

    @classmethod
    def desk(cls, seed: int = 0) -> "ModelConfig":
        return cls(seed=seed)

    @classmethod
    def paper_scale(cls, seed: int = 0) -> "ModelConfig":
        # 256x256 spectrograms need one more halving
        return cls(unet_depth=5, unet_base=16, pnet_depth=4, seed=seed)

    @classmethod
    def smoke(cls, seed: int = 0) -> "ModelConfig":
        return cls(k=8, unet_depth=3, unet_base=8, pnet_depth=2, pnet_base=6,
                   visual_base=8, seed=seed)

    @classmethod
    def tiny(cls, seed: int = 0) -> "ModelConfig":
        # <= 5k parameters total; for gradient checks
        return cls(k=3, unet_depth=2, unet_base=3, pnet_depth=1, pnet_base=3,
                   visual_base=3, seed=seed)


@dataclass
class VisualFeatureMap:
    """Association scores between image locations and mask channels.

    ``grid`` is T x H' x W' x k with H' = H/16, W' = W/16.  The time axis is
    reduced by max when a single per-location vector is needed, and the pooled
    view is the max over all of (t, x, y).
    """

    grid: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 4:
            raise ValueError(f"feature grid must be 4-D, got {self.grid.shape}")

    @property
    def location_features(self) -> np.ndarray:
        """H' x W' x k map after max over frames."""
        return self.grid.max(axis=0)

    @property
    def pooled(self) -> np.ndarray:
        """k-vector: max over (t, x, y)."""
        return self.grid.max(axis=(0, 1, 2))

    @property
    def k(self) -> int:
        return self.grid.shape[3]


@dataclass
class SubSpectrogramBank:
    """k pre-sigmoid pattern channels predicted from a mixture."""

    channels: np.ndarray  # (k, freq, time)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3:
            raise ValueError(f"bank must be 3-D, got {self.channels.shape}")

    @property
    def k(self) -> int:
        return self.channels.shape[0]


class VisualEncoder(nn.Module):
    """Four stride-2 conv blocks: H x W frames -> H/16 x W/16 x k scores."""

    def __init__(self, k: int, base: int):
        super().__init__()
        chans = [3, base, base * 2, base * 2]
        layers = []
        for cin, cout in zip(chans, chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
        layers.append(nn.Conv2d(chans[-1], k, 3, stride=2, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        # frames: (B, 3, H, W) in [0, 1] -> (B, k, H/16, W/16)
        return self.net(frames)


class UNet(nn.Module):
    """Small encoder-decoder with skip connections.

    One 3x3 conv per level, 2x max-pool down, nearest-neighbor up, linear
    1x1 head.  Input spatial dims must be divisible by 2**depth.
    """

    def __init__(self, in_channels: int, out_channels: int, base: int, depth: int):
        super().__init__()
        self.depth = depth
        widths = [base * min(2 ** i, 4) for i in range(depth)]
        self.enc = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.enc.append(nn.Conv2d(c, w, 3, padding=1))
            c = w
        self.bottleneck = nn.Conv2d(c, c, 3, padding=1)
        self.dec = nn.ModuleList()
        for w in reversed(widths):
            self.dec.append(nn.Conv2d(c + w, w, 3, padding=1))
            c = w
        self.head = nn.Conv2d(c, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        step = 2 ** self.depth
        if h % step or w % step:
            raise ShapeMismatchError(
                f"input {h}x{w} not divisible by 2^depth ({step})")
        act = F.leaky_relu
        skips = []
        for enc in self.enc:
            x = act(enc(x), 0.2)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = act(self.bottleneck(x), 0.2)
        for dec, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = act(dec(torch.cat([x, skip], dim=1)), 0.2)
        return self.head(x)


def _seeded_init(module: nn.Module, seed: int) -> None:
    # fan-in-scaled uniform for every weight and bias, fixed draw order
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
            bound = 1.0 / float(np.sqrt(fan_in))
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)


class MpModel(nn.Module):
    """Container for the three components plus numpy-facing contracts."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.visual_net = VisualEncoder(config.k, config.visual_base)
        self.component_net = UNet(1, config.k, config.unet_base, config.unet_depth)
        self.residual_net = UNet(2, 1, config.pnet_base, config.pnet_depth)
        _seeded_init(self.visual_net, config.seed)
        _seeded_init(self.component_net, config.seed + 1)
        _seeded_init(self.residual_net, config.seed + 2)

    # --- torch paths (training uses these directly) ---

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, 3, H, W) in [0,1] -> (B, T, H/16, W/16, k)."""
        b, t, c, h, w = frames.shape
        if h % 16 or w % 16:
            raise ConfigError(f"frame dims {h}x{w} must be divisible by 16")
        out = self.visual_net(frames.reshape(b * t, c, h, w))
        out = out.reshape(b, t, self.config.k, h // 16, w // 16)
        return out.permute(0, 1, 3, 4, 2)

    def component_logits(self, mix: torch.Tensor) -> torch.Tensor:
        """(B, F, T) raw magnitudes -> (B, k, F, T) channel logits."""
        return self.component_net(torch.log1p(mix).unsqueeze(1))

    def residual_logits(self, remix: torch.Tensor, solo: torch.Tensor) -> torch.Tensor:
        """(B, F, T) x2 raw magnitudes -> (B, F, T) mask logits."""
        stacked = torch.stack([torch.log1p(remix), torch.log1p(solo)], dim=1)
        return self.residual_net(stacked).squeeze(1)

    # --- numpy-facing operations ---

    def visual_encode(self, frames: np.ndarray) -> VisualFeatureMap:
        """T x H x W x 3 uint8 frames -> feature map."""
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[3] != 3:
            raise ShapeMismatchError(f"expected (T, H, W, 3) frames, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ConfigError("need at least one frame")
        x = torch.from_numpy(frames.astype(np.float32) / 255.0).permute(0, 3, 1, 2)
        with torch.no_grad():
            grid = self.encode_frames(x.unsqueeze(0))[0]
        return VisualFeatureMap(grid.numpy().astype(np.float64))

    def predict_components(self, mix: Spectrogram) -> SubSpectrogramBank:
        """Mixture -> k sub-spectrogram channels of the same spatial size."""
        x = torch.from_numpy(mix.values.astype(np.float32)).unsqueeze(0)
        with torch.no_grad():
            bank = self.component_logits(x)[0]
        return SubSpectrogramBank(bank.numpy().astype(np.float64))

    def residual_mask(self, remix: Spectrogram, solo: Spectrogram) -> Mask:
        """Ratio mask over the remix of preceding separations."""
        if remix.values.shape != solo.values.shape:
            raise ShapeMismatchError(
                f"remix {remix.values.shape} vs solo {solo.values.shape}")
        r = torch.from_numpy(remix.values.astype(np.float32)).unsqueeze(0)
        s = torch.from_numpy(solo.values.astype(np.float32)).unsqueeze(0)
        with torch.no_grad():
            logits = self.residual_logits(r, s)[0]
        values = _sigmoid_np(logits.numpy().astype(np.float64))
        return Mask(values, "ratio")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Named float32 arrays for every parameter (serialization view)."""
        return {name: p.detach().numpy().astype("<f4", copy=True)
                for name, p in self.named_parameters()}

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def compose_mask(v: np.ndarray, bank: SubSpectrogramBank) -> Mask:
    """Sigmoid of the v-weighted channel sum: the attention-composed mask."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) != bank.k:
        raise ShapeMismatchError(
            f"weight vector of length {v.shape} vs {bank.k} channels")
    logits = np.einsum("k,kft->ft", v, bank.channels)
    return Mask(_sigmoid_np(logits), "ratio")


def _sigmoid_np(logits: np.ndarray) -> np.ndarray:
    clipped = np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    return 1.0 / (1.0 + np.exp(-clipped))


def compose_mask_torch(v: torch.Tensor, bank: torch.Tensor) -> torch.Tensor:
    """Torch twin of compose_mask: (B, k) x (B, k, F, T) -> (B, F, T)."""
    logits = torch.einsum("bk,bkft->bft", v, bank)
    return torch.sigmoid(logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


def gradient(loss_fn, model: MpModel) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with respect to every model parameter.

    ``loss_fn(model)`` must build a scalar torch tensor from the model's
    differentiable paths.  Parameters the loss does not touch get zero
    gradients.  A non-finite loss raises.
    """
    params = dict(model.named_parameters())
    loss = loss_fn(model)
    if not torch.is_tensor(loss) or loss.dim() != 0:
        raise ConfigError("loss_fn must return a scalar tensor")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss: {loss.item()}")
    if not loss.requires_grad:
        # loss is constant with respect to every parameter
        return {name: np.zeros(p.shape, dtype=np.float64)
                for name, p in params.items()}
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        out[name] = (np.zeros(p.shape, dtype=np.float64) if g is None
                     else g.detach().numpy().astype(np.float64))
    return out


def save_checkpoint(model: MpModel, path, round_number: int = 0,
                    extra_meta: dict | None = None) -> None:
    """Named-array container + JSON metadata sidecar.

    Layout: magic "MPCK", u32 array count; per array: u16 name length, name
    (utf-8), u8 ndim, ndim x u32 dims, then the float32 little-endian data.
    """
    path = Path(path)
    arrays = model.state_arrays()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {
        "version": CHECKPOINT_VERSION,
        "k": model.config.k,
        "depth": model.config.unet_depth,
        "seeds": [model.config.seed],
        "round": round_number,
        "model_config": {
            "k": model.config.k,
            "unet_depth": model.config.unet_depth,
            "unet_base": model.config.unet_base,
            "pnet_depth": model.config.pnet_depth,
            "pnet_base": model.config.pnet_base,
            "visual_base": model.config.visual_base,
            "seed": model.config.seed,
        },
    }
    meta.update(extra_meta or {})
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))


def load_checkpoint(path) -> tuple[MpModel, dict]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    arrays = {}
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: bad checkpoint magic")
        (count,) = struct.unpack("<I", fh.read(4))
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = data
    model = MpModel(ModelConfig(**meta["model_config"]))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model, meta
