"""Skeleton sequence encoder and the linear classification head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    V: int = 13
    C_in: int = 2
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: tuple[int, int, int] = (4, 3, 3)
    temporal_kernel: int = 9
    # flat block indices that downsample time by 2; None means the default placement
    strided_blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 3 or len(self.blocks_per_stage) != 3:
            raise ValueError("encoder has exactly three stages")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("stage channels and block counts must be positive")
        if not (self.stage_channels[0] < self.stage_channels[1] < self.stage_channels[2]):
            raise ValueError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if self.C_in not in (2, 3) or self.V < 2:
            raise ValueError(f"invalid input layout V={self.V} C_in={self.C_in}")
        if self.temporal_kernel % 2 != 1:
            raise ValueError("temporal kernel must be odd")
        if self.strided_blocks is None:
            b1, b2, _ = self.blocks_per_stage
            self.strided_blocks = (b1 - 1, b1, b1 + b2)
        self.strided_blocks = tuple(int(i) for i in self.strided_blocks)
        if len(set(self.strided_blocks)) != 3 or not all(0 <= i < self.n_blocks for i in self.strided_blocks):
            raise ValueError("exactly three distinct blocks must carry stride 2")

    @classmethod
    def wide(cls, V: int = 13, C_in: int = 2) -> "EncoderConfig":
        return cls(V=V, C_in=C_in, stage_channels=(64, 128, 256), blocks_per_stage=(4, 3, 3))

    @property
    def n_blocks(self) -> int:
        return sum(self.blocks_per_stage)

    @property
    def C_out(self) -> int:
        return self.stage_channels[-1]

    def block_layout(self) -> list[tuple[int, int, int]]:
        """(in_channels, out_channels, stride) per block."""
        layout, cin = [], self.C_in
        for stage, (ch, nb) in enumerate(zip(self.stage_channels, self.blocks_per_stage)):
            for _ in range(nb):
                i = len(layout)
                layout.append((cin, ch, 2 if i in self.strided_blocks else 1))
                cin = ch
        return layout

    def latent_length(self, T: int) -> int:
        if T % 8:
            raise ValueError(f"T={T} must be divisible by 8 (three stride-2 blocks)")
        return T // 8


RESIDUAL_GAIN = 0.1


def _he(rng, shape, fan_in, gain=2.0):
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class Encoder:
    """Stacked spatial/temporal blocks followed by spatial average pooling.

    Each block: 1×1 channel expansion, multiplication by a learnable V×V
    dependency matrix along the joint axis, a strided 9×1 temporal
    convolution, and ReLU. Blocks whose channel count is unchanged carry a
    residual (temporally subsampled when strided).
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        V, k = config.V, config.temporal_kernel
        self.params: dict[str, Tensor] = {}
        bound = 1.0 / np.sqrt(V)
        for i, (cin, cout, _) in enumerate(config.block_layout()):
            p = f"encoder.block{i}."
            self.params[p + "expand.w"] = ad.parameter(_he(rng, (1, 1, cin, cout), cin, 1.0))
            self.params[p + "expand.b"] = ad.parameter(np.zeros(cout))
            self.params[p + "dependency"] = ad.parameter(rng.uniform(-bound, bound, (V, V)))
            # the uniform dependency matrix shrinks variance by ~3x; compensate here,
            # and start residual branches small so activations do not grow with depth
            gain = 6.0 * (RESIDUAL_GAIN if cin == cout else 1.0)
            self.params[p + "temporal.w"] = ad.parameter(_he(rng, (k, 1, cout, cout), k * cout, gain))
            self.params[p + "temporal.b"] = ad.parameter(np.zeros(cout))

    def block(self, i: int, x: Tensor) -> Tensor:
        cin, cout, stride = self.config.block_layout()[i]
        p = self.params
        pre = f"encoder.block{i}."
        B, T, V, _ = x.shape
        h = ad.conv2d(x, p[pre + "expand.w"])
        h = h + ad.broadcast_to(ad.reshape(p[pre + "expand.b"], (1, 1, 1, cout)), h.shape)
        # mix joints: [B, T, C, V] @ [V, V]
        h = ad.transpose(ad.matmul(ad.transpose(h, (0, 1, 3, 2)), p[pre + "dependency"]), (0, 1, 3, 2))
        pad = self.config.temporal_kernel // 2
        h = ad.conv2d(h, p[pre + "temporal.w"], stride=(stride, 1), padding=(pad, 0))
        h = h + ad.broadcast_to(ad.reshape(p[pre + "temporal.b"], (1, 1, 1, cout)), h.shape)
        if cin == cout:
            h = h + (x if stride == 1 else x[:, ::stride])
        return ad.relu(h)

    def __call__(self, x) -> Tensor:
        """``[B, T, V, C_in]`` (root-centred) → latent ``[B, T/8, C_out]``."""
        x = ad.as_tensor(x)
        if x.ndim == 3:
            return self(ad.reshape(x, (1,) + x.shape))[0]
        _, T, V, C = x.shape
        if V != self.config.V or C != self.config.C_in:
            raise ad.ShapeError(f"encoder expects [B, T, {self.config.V}, {self.config.C_in}], got {x.shape}")
        self.config.latent_length(T)
        h = x
        for i in range(self.config.n_blocks):
            h = self.block(i, h)
        return ad.mean(h, axis=2)


def encode(encoder: Encoder, seq) -> Tensor:
    """Latent code ``[T', C_out]`` of one skeleton sequence."""
    from .skeleton import SkeletonSequence
    frames = seq.frames if isinstance(seq, SkeletonSequence) else seq
    return encoder(frames)


class ProbeHead:
    """Temporal average pooling plus one affine map to class logits."""

    def __init__(self, in_channels: int, n_classes: int, rng: np.random.Generator | None = None,
                 zero: bool = False):
        if n_classes < 2:
            raise ValueError(f"probe needs at least 2 classes, got {n_classes}")
        self.n_classes = n_classes
        if zero or rng is None:
            w = np.zeros((in_channels, n_classes))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(in_channels), (in_channels, n_classes))
        self.params = {"probe.w": ad.parameter(w), "probe.b": ad.parameter(np.zeros(n_classes))}

    def pool(self, latent: Tensor) -> Tensor:
        return ad.mean(latent, axis=-2)

    def logits_from_pooled(self, pooled: Tensor) -> Tensor:
        w, b = self.params["probe.w"], self.params["probe.b"]
        out = ad.matmul(pooled, w)
        return out + ad.broadcast_to(ad.reshape(b, (1, self.n_classes)), out.shape)

    def __call__(self, latent) -> Tensor:
        """``[B, T', C]`` or ``[T', C]`` latent → ``[B, n_classes]`` or ``[n_classes]`` logits."""
        latent = ad.as_tensor(latent)
        if latent.ndim == 2:
            return self(ad.reshape(latent, (1,) + latent.shape))[0]
        return self.logits_from_pooled(self.pool(latent))
