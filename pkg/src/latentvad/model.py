"""Appearance autoencoder and Conv3D latent-code predictor.

Tensor layout is NCHW for frames and (N, C, Hz, Wz) for latent codes.  The
decoder never sees the current frame's encoder features: its shortcuts come
from the encoder pyramid of the previous frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

CHECKPOINT_FORMAT = "latentvad-checkpoint"
CHECKPOINT_VERSION = "1.0"


@dataclass
class ModelConfig:
    input_size: Tuple[int, int] = (128, 192)
    k: int = 8
    encoder_blocks: int = 4
    base_channels: int = 32
    latent_channels: int = 128
    t_offset: int = 6
    motion_blocks: int = 3
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self):
        h, w = self.input_size
        div = 2 ** self.encoder_blocks
        if self.encoder_blocks < 1:
            raise ValueError("encoder_blocks must be >= 1")
        if h % div or w % div:
            raise ValueError(f"input size {self.input_size} not divisible by 2^{self.encoder_blocks}")
        if self.k < 1 or self.t_offset < 1 or self.motion_blocks < 1:
            raise ValueError("k, t_offset and motion_blocks must be >= 1")
        if self.base_channels < 1 or self.latent_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        div = 2 ** self.encoder_blocks
        return (self.latent_channels, self.input_size[0] // div, self.input_size[1] // div)

    def level_channels(self) -> List[int]:
        """Channels at levels 0..B; level 0 is the full-resolution decoder output width."""
        B, C = self.encoder_blocks, self.latent_channels
        chans = [min(self.base_channels * 2 ** (lvl - 1), C) for lvl in range(1, B)] + [C]
        return [self.base_channels] + chans

    @property
    def frame_offset(self) -> int:
        """Sampled-frame index of the first scoreable frame."""
        return self.k - 1 + self.t_offset

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "ucsd_ped1": ModelConfig(input_size=(128, 192), k=8, encoder_blocks=5),
    "ucsd_ped2": ModelConfig(input_size=(128, 192), k=8, encoder_blocks=4),
    "avenue": ModelConfig(input_size=(128, 224), k=6, encoder_blocks=4),
    "shanghaitech": ModelConfig(input_size=(128, 224), k=6, encoder_blocks=4),
    "moving_mnist": ModelConfig(input_size=(32, 32), k=6, encoder_blocks=3, base_channels=16,
                                latent_channels=32, t_offset=6),
}


def temporal_sizes(k: int, blocks: int = 3) -> List[int]:
    """Temporal extent after each motion block (kernel 3, stride 2, padding 1)."""
    sizes, L = [], k
    for _ in range(blocks):
        L = (L + 2 * 1 - 3) // 2 + 1
        sizes.append(L)
    return sizes


def _conv_bn(cin, cout, stride, slope):
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.BatchNorm2d(cout),
            nn.LeakyReLU(slope)]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.level_channels()
        blocks, cin = [], 3
        for lvl in range(1, cfg.encoder_blocks + 1):
            cout = chans[lvl]
            blocks.append(nn.Sequential(*_conv_bn(cin, cout, 1, cfg.leaky_slope),
                                        *_conv_bn(cout, cout, 2, cfg.leaky_slope)))
            cin = cout
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        pyramid = []
        for block in self.blocks:
            x = block(x)
            pyramid.append(x)
        return x, pyramid


class Decoder(nn.Module):
    """Mirror of the encoder; level l concatenates the previous frame's level-l features."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = cfg.level_channels()
        blocks = []
        for lvl in range(cfg.encoder_blocks, 0, -1):
            cin, cout = 2 * chans[lvl], chans[lvl - 1]
            blocks.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                        *_conv_bn(cin, cout, 1, cfg.leaky_slope),
                                        *_conv_bn(cout, cout, 1, cfg.leaky_slope)))
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(chans[0], 3, 1)

    def forward(self, latent: torch.Tensor, pyramid_prev: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(pyramid_prev) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} pyramid levels, got {len(pyramid_prev)}")
        x = latent
        for block, skip in zip(self.blocks, reversed(pyramid_prev)):
            if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:] or skip.shape[1] != x.shape[1]:
                raise ValueError(f"pyramid level {tuple(skip.shape)} does not match decoder input {tuple(x.shape)}")
            x = block(torch.cat([x, skip], dim=1))
        return torch.tanh(self.head(x))


class MotionModel(nn.Module):
    """Conv3D blocks striding over time only, then a projection back to one latent code."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C = cfg.latent_channels
        layers = []
        for _ in range(cfg.motion_blocks):
            layers += [nn.Conv3d(C, C, 3, stride=(2, 1, 1), padding=1), nn.BatchNorm3d(C),
                       nn.LeakyReLU(cfg.leaky_slope)]
        self.blocks = nn.Sequential(*layers)
        self.t_final = temporal_sizes(cfg.k, cfg.motion_blocks)[-1]
        self.head = nn.Conv3d(C, C, (self.t_final, 1, 1))
        self.k = cfg.k

    def forward(self, codes: torch.Tensor) -> torch.Tensor:
        # codes: (N, k, C, Hz, Wz) -> (N, C, k, Hz, Wz)
        if codes.dim() != 5 or codes.shape[1] != self.k:
            raise ValueError(f"expected (N, {self.k}, C, Hz, Wz) latent stack, got {tuple(codes.shape)}")
        x = self.blocks(codes.transpose(1, 2))
        return self.head(x)[:, :, 0]


class AnomalyNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.motion = MotionModel(cfg)

    def _check_frames(self, frames: torch.Tensor):
        if frames.dim() != 4 or frames.shape[1] != 3 or tuple(frames.shape[2:]) != self.cfg.input_size:
            raise ValueError(f"frame batch {tuple(frames.shape)} does not match "
                             f"(N, 3, {self.cfg.input_size[0]}, {self.cfg.input_size[1]})")

    def encode(self, frames: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """(N, 3, H, W) frames -> (N, C, H/2^B, W/2^B) codes and the feature pyramid."""
        self._check_frames(frames)
        return self.encoder(frames)

    def decode(self, latent: torch.Tensor, pyramid_prev: Sequence[torch.Tensor]) -> torch.Tensor:
        if tuple(latent.shape[1:]) != self.cfg.latent_shape:
            raise ValueError(f"latent {tuple(latent.shape[1:])} != {self.cfg.latent_shape}")
        return self.decoder(latent, pyramid_prev)

    def predict_latent(self, codes: torch.Tensor) -> torch.Tensor:
        """(N, k, C, Hz, Wz) stacked codes z_1..z_k -> predicted future code (N, C, Hz, Wz)."""
        if tuple(codes.shape[2:]) != self.cfg.latent_shape:
            raise ValueError(f"latent {tuple(codes.shape[2:])} != {self.cfg.latent_shape}")
        return self.motion(codes)

    def forward(self, clips: torch.Tensor):
        """Training pass on (N, k + 1, 3, H, W) clips (k inputs then the future target).

        Returns (reconstructions of frames 2..k, their targets, predicted code,
        target code).  The target code is detached.
        """
        N, L = clips.shape[:2]
        k = self.cfg.k
        if L != k + 1:
            raise ValueError(f"expected {k + 1} frames per clip, got {L}")
        z, pyr = self.encode(clips.reshape(N * L, *clips.shape[2:]))
        z = z.reshape(N, L, *z.shape[1:])
        pyr = [p.reshape(N, L, *p.shape[1:]) for p in pyr]
        # reconstruct frame q from z_q and the pyramid of frame q-1, for q = 2..k
        z_cur = z[:, 1:k].reshape(N * (k - 1), *z.shape[2:])
        pyr_prev = [p[:, :k - 1].reshape(N * (k - 1), *p.shape[2:]) for p in pyr]
        recon = self.decode(z_cur, pyr_prev).reshape(N, k - 1, *clips.shape[2:])
        z_hat = self.predict_latent(z[:, :k])
        return recon, clips[:, 1:k], z_hat, z[:, k].detach()


def save_checkpoint(path, model: AnomalyNet, background=None, meta: Optional[Dict] = None) -> Path:
    """Write a self-describing checkpoint (config, weights, optional background frame)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "background": None if background is None else {
            "mean_frame": np.asarray(background.mean_frame), "frame_count": int(background.frame_count)},
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Returns (model in eval mode, BackgroundModel or None, meta dict)."""
    from .data.frames import BackgroundModel

    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    major = str(payload.get("version", "0")).split(".")[0]
    if major != CHECKPOINT_VERSION.split(".")[0]:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict(payload["config"])
    model = AnomalyNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    bg = payload.get("background")
    background = None if bg is None else BackgroundModel(np.asarray(bg["mean_frame"], dtype=np.float32),
                                                          bg["frame_count"])
    return model, background, payload.get("meta", {})
