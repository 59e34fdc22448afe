"""Pose sequence decoder: three rounds of ×2 upsampling and 1-D temporal convolution."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class DecoderConfig:
    C_latent: int = 64
    V: int = 13
    C_in: int = 2
    hidden_channels: tuple[int, int] = (64, 32)
    kernel: int = 7

    def __post_init__(self):
        self.hidden_channels = tuple(int(c) for c in self.hidden_channels)
        if len(self.hidden_channels) != 2 or min(self.hidden_channels) < 1:
            raise ValueError("decoder needs two positive hidden widths")
        if self.kernel % 2 != 1:
            raise ValueError("decoder kernel must be odd")

    @classmethod
    def wide(cls, V: int = 13, C_in: int = 2) -> "DecoderConfig":
        return cls(C_latent=256, V=V, C_in=C_in, hidden_channels=(128, 64))

    @property
    def stage_channels(self) -> tuple[int, int, int]:
        return (*self.hidden_channels, self.V * self.C_in)


class Decoder:
    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        k = config.kernel
        self.params: dict[str, Tensor] = {}
        cin = config.C_latent
        for i, cout in enumerate(config.stage_channels):
            last = i == 2
            # small final layer: generated coordinates start near the origin
            std = np.sqrt((0.01 if last else 2.0) / (k * cin))
            self.params[f"decoder.stage{i}.w"] = ad.parameter(rng.normal(0.0, std, (k, cin, cout)))
            self.params[f"decoder.stage{i}.b"] = ad.parameter(np.zeros(cout))
            cin = cout

    def __call__(self, latent) -> Tensor:
        """``[B, T', C_latent]`` → ``[B, 8T', V, C_in]``; a 2-D latent gives one sequence."""
        latent = ad.as_tensor(latent)
        if latent.ndim == 2:
            return self(ad.reshape(latent, (1,) + latent.shape))[0]
        cfg = self.config
        if latent.ndim != 3 or latent.shape[2] != cfg.C_latent:
            raise ad.ShapeError(f"decoder expects [B, T', {cfg.C_latent}], got {latent.shape}")
        h = latent
        for i, cout in enumerate(cfg.stage_channels):
            h = ad.upsample2(h, axis=1)
            h = ad.conv1d(h, self.params[f"decoder.stage{i}.w"], padding=cfg.kernel // 2)
            h = h + ad.broadcast_to(ad.reshape(self.params[f"decoder.stage{i}.b"], (1, 1, cout)), h.shape)
            if i < 2:
                h = ad.relu(h)
        B, T, _ = h.shape
        return ad.reshape(h, (B, T, cfg.V, cfg.C_in))


def decode(decoder: Decoder, latent) -> Tensor:
    return decoder(latent)
