"""The retargeting autoencoder: encoder, character basis, decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import lmd
from .autodiff import Tensor
from .decoder import Decoder, DecoderConfig
from .encoder import Encoder, EncoderConfig


@dataclass
class ModelConfig:
    V: int = 13
    C_in: int = 2
    stage_channels: tuple[int, int, int] = (16, 32, 64)
    blocks_per_stage: tuple[int, int, int] = (4, 3, 3)
    temporal_kernel: int = 9
    decoder_channels: tuple[int, int] = (64, 32)
    decoder_kernel: int = 7
    K: int = 32

    @classmethod
    def wide(cls, V: int = 13, C_in: int = 2) -> "ModelConfig":
        return cls(V=V, C_in=C_in, stage_channels=(64, 128, 256), decoder_channels=(128, 64))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("stage_channels", "blocks_per_stage", "decoder_channels"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(V=self.V, C_in=self.C_in, stage_channels=self.stage_channels,
                             blocks_per_stage=self.blocks_per_stage, temporal_kernel=self.temporal_kernel)

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(C_latent=self.stage_channels[-1], V=self.V, C_in=self.C_in,
                             hidden_channels=self.decoder_channels, kernel=self.decoder_kernel)


class ViAModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng([seed, 11])
        self.encoder = Encoder(config.encoder_config(), rng)
        self.decoder = Decoder(config.decoder_config(), rng)
        C = config.stage_channels[-1]
        self.basis = ad.parameter(lmd.init_basis(config.K, C, rng))
        self.basis.name = "lmd.basis"
        # fixed input normalization: z = (x - mean_pose) / scale
        self.buffers = {
            "norm.mean": np.zeros((config.V, config.C_in), dtype=self.basis.data.dtype),
            "norm.scale": np.ones(1, dtype=self.basis.data.dtype),
        }

    def fit_normalizer(self, frames: np.ndarray) -> None:
        """Mean pose and one global std from root-centred ``[N, T, V, C]`` frames."""
        x = np.asarray(frames, dtype=np.float64)
        mean = x.mean(axis=(0, 1))
        scale = (x - mean).std()
        self.buffers["norm.mean"][...] = mean
        self.buffers["norm.scale"][...] = scale if scale > 0 else 1.0

    def normalize(self, frames) -> np.ndarray:
        dtype = self.basis.data.dtype
        x = np.asarray(frames, dtype=np.float64)
        return ((x - self.buffers["norm.mean"]) / self.buffers["norm.scale"][0]).astype(dtype)

    def denormalize(self, z) -> np.ndarray:
        z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
        return z * self.buffers["norm.scale"][0] + self.buffers["norm.mean"]

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out["lmd.basis"] = self.basis
        out.update(self.decoder.params)
        return out

    def encoder_params(self) -> dict[str, Tensor]:
        return dict(self.encoder.params)

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def decompose(self, r, check: bool = True) -> lmd.Decomposition:
        return lmd.decompose(r, self.basis, check=check)

    def decode(self, latent) -> Tensor:
        return self.decoder(latent)

    # the methods below take and return root-centred coordinates

    def retarget(self, driving, source) -> np.ndarray:
        """Motion of ``driving`` rendered with the character of ``source``."""
        dm = self.decompose(self.encode(self.normalize(driving)))
        sc = self.decompose(self.encode(self.normalize(source)))
        return self.denormalize(self.decode(lmd.recombine(dm.motion, sc.character)))

    def reconstruct(self, x) -> np.ndarray:
        d = self.decompose(self.encode(self.normalize(x)))
        return self.denormalize(self.decode(lmd.recombine(d.motion, d.character)))

    def with_magnitudes(self, x, magnitudes) -> np.ndarray:
        """Re-render ``x`` with its character magnitudes replaced by ``magnitudes``."""
        d = self.decompose(self.encode(self.normalize(x)))
        return self.denormalize(self.decode(lmd.manipulate(d.motion, self.basis, magnitudes)))

    def decomposition(self, x) -> lmd.Decomposition:
        return self.decompose(self.encode(self.normalize(x)))
