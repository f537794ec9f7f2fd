"""Architecture hyperparameters shared by encoder, decoder and checkpoints."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 39
    encoder_channels: int = 768
    encoder_dense_layers: int = 4
    encoder_downsample: int = 2
    codebook_size: int = 512
    code_dim: int = 64
    n_speakers: int = 1
    post_vq_kernel: int = 3
    residual_channels: int = 256
    skip_channels: int = 256
    head_channels: int = 256
    n_layers: int = 20
    dilation_cycle: int = 10
    kernel_size: int = 2
    mu: int = 127

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @property
    def n_classes(self) -> int:
        return self.mu + 1

    @property
    def dilations(self) -> list[int]:
        return [2 ** (k % self.dilation_cycle) for k in range(self.n_layers)]

    @property
    def cond_channels(self) -> int:
        return self.code_dim + self.n_speakers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Reduced widths for tests and desk-scale experiments."""
        base = dict(encoder_channels=64, codebook_size=32, code_dim=16, residual_channels=32,
                    skip_channels=32, head_channels=32, n_layers=16, dilation_cycle=8)
        base.update(overrides)
        return cls(**base)
