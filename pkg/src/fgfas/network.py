"""Dual-stream central-difference network with a three-channel pixel-wise head.

Checkpoints are directories holding ``config.json`` and ``params.bin``; the
latter is a flat sequence of named blocks::

    name_len:u32 | name:utf-8 | n_values:u32 | values:f32[n_values]      (little-endian)
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import FormatError, ValidationError


@dataclass
class ModelConfig:
    theta: float = 0.7
    width_multiplier: float = 0.25
    input_size: tuple[int, int] = (64, 64)
    output_channels: int = 3

    def __post_init__(self) -> None:
        self.input_size = tuple(int(v) for v in self.input_size)
        if not 0.0 <= self.theta <= 1.0:
            raise ValidationError("theta must lie in [0, 1]")
        if self.width_multiplier <= 0:
            raise ValidationError("width_multiplier must be positive")
        if self.output_channels != 3:
            raise ValidationError("the head always predicts 3 channels")
        if any(v < 8 or v % 8 for v in self.input_size):
            raise ValidationError("input size must be a positive multiple of 8")


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 0.5

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValidationError("loss weights must be non-negative with a positive sum")


_NEIGHBOURS = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]


def cdc_conv(x: torch.Tensor, weight: torch.Tensor, theta: float, bias: torch.Tensor | None = None) -> torch.Tensor:
    """3x3 central difference convolution, stride 1, replicate padding 1.

    ``y(p0) = sum_n w(pn) x(p0 + pn) - theta * x(p0) * sum_n w(pn)``

    Evaluated as ``sum_n w(pn) (x(p0 + pn) - x(p0)) + (1 - theta) x(p0) sum_n w(pn)``
    so the neighbour differences are formed before any weighting: at
    ``theta = 1`` a constant input gives exactly zero instead of the float
    residue of two large cancelling sums. Replicate padding keeps the border
    free of a fake step edge. ``theta = 0`` is a plain convolution.
    """
    if weight.dim() != 4 or weight.shape[2:] != (3, 3):
        raise ValidationError(f"central difference convolution needs 3x3 kernels, got {tuple(weight.shape)}")
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    if theta == 0.0:
        out = F.conv2d(padded, weight, bias)
    else:
        h, w = x.shape[-2:]
        diffs = torch.cat([padded[:, :, r : r + h, c : c + w] - x for r, c in _NEIGHBOURS], dim=1)
        kernel = torch.cat([weight[:, :, r, c] for r, c in _NEIGHBOURS], dim=1)[:, :, None, None]
        out = F.conv2d(diffs, kernel, bias)
        if theta != 1.0:
            out = out + (1.0 - theta) * F.conv2d(x, weight.sum(dim=(2, 3), keepdim=True))
    return out.squeeze(0) if squeeze else out


class CDConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, theta: float = 0.7):
        super().__init__()
        self.theta = theta
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        nn.init.kaiming_uniform_(self.weight, a=5**0.5)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return cdc_conv(x, self.weight, self.theta)


def _block(c_in: int, c_out: int, theta: float) -> nn.Sequential:
    return nn.Sequential(CDConv2d(c_in, c_out, theta), nn.BatchNorm2d(c_out), nn.ReLU(inplace=True))


class CrossFeatureInteraction(nn.Module):
    """Bidirectional fusion: a 1x1 conv over both streams' features, split
    back and added residually to each stream."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(2 * channels, 2 * channels, kernel_size=1)
        nn.init.zeros_(self.fuse.bias)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        da, db = self.fuse(torch.cat([a, b], dim=1)).chunk(2, dim=1)
        return a + da, b + db


class DualCDCN(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        stem = max(4, int(round(64 * cfg.width_multiplier)))
        ch = max(4, int(round(128 * cfg.width_multiplier)))
        self.streams = nn.ModuleList()
        for _ in range(2):
            self.streams.append(
                nn.ModuleDict(
                    {
                        "stem": _block(3, stem, cfg.theta),
                        "stage1": _block(stem, ch, cfg.theta),
                        "stage2": _block(ch, ch, cfg.theta),
                        "stage3": _block(ch, ch, cfg.theta),
                    }
                )
            )
        self.cfim = nn.ModuleList([CrossFeatureInteraction(ch) for _ in range(3)])
        self.pool = nn.MaxPool2d(2)
        self.head = nn.Sequential(
            nn.Conv2d(6 * ch, ch, kernel_size=1, bias=False),
            nn.BatchNorm2d(ch),
            nn.ReLU(inplace=True),
            _block(ch, stem, cfg.theta),
            nn.Conv2d(stem, cfg.output_channels, kernel_size=3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != self.cfg.input_size:
            raise ValidationError(f"expected (B, 3, {self.cfg.input_size[0]}, {self.cfg.input_size[1]}) input, got {tuple(x.shape)}")
        h, w = self.cfg.input_size
        grid = (h // 2, w // 2)
        a = self.streams[0]["stem"](x)
        b = self.streams[1]["stem"](x)
        feats = []
        for k, fuse in enumerate(self.cfim, start=1):
            a = self.pool(self.streams[0][f"stage{k}"](a))
            b = self.pool(self.streams[1][f"stage{k}"](b))
            a, b = fuse(a, b)
            for f in (a, b):
                feats.append(f if f.shape[2:] == grid else F.interpolate(f, size=grid, mode="bilinear", align_corners=False))
        out = self.head(torch.cat(feats, dim=1))
        out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
        return torch.sigmoid(out)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float32 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().div_(255.0)


@torch.no_grad()
def predict_maps(model: DualCDCN, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = [model(images_to_tensor(images[k : k + batch_size])).numpy() for k in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 3) + model.cfg.input_size, dtype=np.float32)


# --------------------------------------------------------------------------- #
# Losses
# --------------------------------------------------------------------------- #


def _check_pair(pred: torch.Tensor, label: torch.Tensor) -> None:
    if pred.shape != label.shape:
        raise ValidationError(f"prediction {tuple(pred.shape)} and label {tuple(label.shape)} differ")


def mse_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, label)
    return ((pred - label) ** 2).mean()


def contrast_kernels(dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Eight 3x3 kernels: +1 at the centre, -1 at one neighbour."""
    k = torch.zeros(8, 1, 3, 3, dtype=dtype)
    neighbours = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
    for d, (r, c) in enumerate(neighbours):
        k[d, 0, 1, 1] = 1.0
        k[d, 0, r, c] = -1.0
    return k


def contrastive_depth_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Sum over the 8 contrast directions of the mean squared difference of
    the contrast responses (valid convolution), averaged over channels."""
    _check_pair(pred, label)
    b, c, h, w = pred.shape
    k = contrast_kernels(pred.dtype).to(pred.device)
    diff = F.conv2d((pred - label).reshape(b * c, 1, h, w), k)
    per = (diff**2).reshape(b, c, 8, h - 2, w - 2).mean(dim=(0, 3, 4))
    return per.sum(dim=1).mean()


def total_loss(pred: torch.Tensor, label: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return cfg.alpha * mse_loss(pred, label) + cfg.beta * contrastive_depth_loss(pred, label)


# --------------------------------------------------------------------------- #
# Checkpoints
# --------------------------------------------------------------------------- #

_U32 = struct.Struct("<I")


def encode_params(state: dict[str, torch.Tensor]) -> bytes:
    parts = []
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        values = tensor.detach().cpu().numpy().astype("<f4").ravel()
        parts += [_U32.pack(len(raw)), raw, _U32.pack(values.size), values.tobytes()]
    return b"".join(parts)


def decode_params(data: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    try:
        while pos < len(data):
            (n,) = _U32.unpack_from(data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise FormatError("truncated block name")
            pos += n
            (count,) = _U32.unpack_from(data, pos)
            pos += 4
            end = pos + 4 * count
            if end > len(data):
                raise FormatError(f"block {name!r} is truncated")
            out[name] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float32)
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt parameter file: {exc}") from exc
    return out


def save_checkpoint(
    model: DualCDCN, directory: str | Path, loss_cfg: LossConfig | None = None, seed: int = 0, extra: dict | None = None
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = {
        "model": {**asdict(model.cfg), "input_size": list(model.cfg.input_size)},
        "loss": asdict(loss_cfg or LossConfig()),
        "seed": seed,
    }
    if extra:
        config.update(extra)
    (directory / "config.json").write_text(json.dumps(config, indent=2))
    (directory / "params.bin").write_bytes(encode_params(model.state_dict()))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[DualCDCN, dict]:
    directory = Path(directory)
    try:
        config = json.loads((directory / "config.json").read_text())
        blocks = decode_params((directory / "params.bin").read_bytes())
    except FileNotFoundError as exc:
        raise ValidationError(f"not a checkpoint directory: {directory}") from exc
    model = DualCDCN(ModelConfig(**config["model"]))
    state = model.state_dict()
    if set(blocks) != set(state):
        raise FormatError(f"checkpoint blocks do not match the model: {sorted(set(blocks) ^ set(state))[:5]}")
    loaded = {}
    for name, ref in state.items():
        if blocks[name].size != ref.numel():
            raise FormatError(f"block {name!r} has {blocks[name].size} values, expected {ref.numel()}")
        loaded[name] = torch.from_numpy(blocks[name].reshape(tuple(ref.shape))).to(ref.dtype)
    model.load_state_dict(loaded)
    model.eval()
    return model, config
