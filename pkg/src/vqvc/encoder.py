"""Convolutional encoder: five convolutions (third one strided), four
residual per-frame dense stages, then a 1x1 projection to the code dimension."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .nn import functional as F
from .nn.tensor import Parameter, Tensor, as_tensor


def conv_layout(downsample: int = 2):
    """(kernel, stride, residual) for conv1..conv5."""
    return ((3, 1, False), (3, 1, True), (4, downsample, False), (3, 1, True), (3, 1, True))


class Encoder:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        c = cfg.encoder_channels
        p = {}
        c_in = cfg.feature_dim
        self.layout = conv_layout(cfg.encoder_downsample)
        for i, (k, _, _) in enumerate(self.layout, start=1):
            # no nonlinearity follows these convolutions
            p[f"enc.conv{i}.w"] = F.xavier_uniform(rng, (c, c_in, k), c_in * k, c * k)
            p[f"enc.conv{i}.b"] = np.zeros(c, np.float32)
            c_in = c
        for j in range(cfg.encoder_dense_layers):
            i = 6 + j
            p[f"enc.dense{i}.w"] = F.he_uniform(rng, (c, c), c)
            p[f"enc.dense{i}.b"] = np.zeros(c, np.float32)
        p["enc.proj.w"] = F.xavier_uniform(rng, (cfg.code_dim, c), c, cfg.code_dim)
        p["enc.proj.b"] = np.zeros(cfg.code_dim, np.float32)
        self.params = {k: Parameter(v, k) for k, v in p.items()}

    def stages(self, x) -> list[tuple[Tensor, Tensor | None]]:
        """Every stage output h_i paired with its residual branch (None if not residual)."""
        x = as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise ValueError("encoder input contains non-finite values")
        p = self.params
        out = []
        h = x
        for i, (k, s, res) in enumerate(self.layout, start=1):
            branch = F.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"], stride=s, padding="same")
            if res:
                h = h + branch
                out.append((h, branch))
            else:
                h = branch
                out.append((h, None))
        for j in range(self.cfg.encoder_dense_layers):
            i = 6 + j
            branch = F.relu(F.dense(h, p[f"enc.dense{i}.w"], p[f"enc.dense{i}.b"]))
            h = h + branch
            out.append((h, branch))
        return out

    def __call__(self, x) -> Tensor:
        """(..., feature_dim, T) -> (..., code_dim, ceil(T/downsample))."""
        h = self.stages(x)[-1][0]
        return F.dense(h, self.params["enc.proj.w"], self.params["enc.proj.b"])


def stack_receptive_field(layers) -> int:
    """Input frames seen by one output of stacked convolutions given as
    (kernel, stride, dilation) triples, in input-to-output order."""
    rf, jump = 1, 1
    for k, s, d in layers:
        rf += (k - 1) * d * jump
        jump *= s
    return rf


def receptive_field(encoder: Encoder | None = None) -> int:
    layout = encoder.layout if encoder is not None else conv_layout()
    # dense stages and the projection act per frame and add nothing
    return stack_receptive_field([(k, s, 1) for k, s, _ in layout])


def output_length(t: int, downsample: int = 2) -> int:
    for k, s, _ in conv_layout(downsample):
        t = F.conv_output_length(t, k, s, 1, "same")
    return t
