"""Small trainable convolutional feature extractor.

A stack of conv3x3 + batch-norm + ReLU blocks turns an input image into the
feature map the pyramid slices. An empty stage list gives an identity
backbone that passes precomputed feature maps straight through, which lets
wide-channel geometries be exercised without any convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(ag.default_dtype())


class BatchNorm:
    """Per-channel batch normalization with learnable affine and running stats."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        dtype = ag.default_dtype()
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ag.batch_norm(x, self.gamma, self.beta, self.running_mean,
                             self.running_var, training=training,
                             momentum=self.momentum, eps=self.eps)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class ConvBlock:
    """conv3x3 (padding 1) + batch-norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng: np.random.Generator):
        self.weight = Tensor(fan_in_uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9),
                             requires_grad=True)
        self.stride = stride
        self.bn = BatchNorm(out_ch)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ag.relu(self.bn(ag.conv2d(x, self.weight, stride=self.stride, padding=1),
                               training))

    def named_parameters(self, prefix: str):
        yield f"{prefix}.conv.weight", self.weight
        yield from self.bn.named_parameters(f"{prefix}.bn")

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 3
    # (out_channels, stride) per block; empty tuple = identity passthrough
    stages: tuple = ((16, 2), (32, 2), (64, 1))

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be positive, got {self.in_channels}")
        for out_ch, stride in self.stages:
            if stride not in (1, 2):
                raise ConfigError(f"block stride must be 1 or 2, got {stride}")
            if out_ch < 1:
                raise ConfigError(f"block width must be positive, got {out_ch}")

    @property
    def out_channels(self) -> int:
        return self.stages[-1][0] if self.stages else self.in_channels

    @property
    def stride_product(self) -> int:
        p = 1
        for _, s in self.stages:
            p *= s
        return p


class Backbone:
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.blocks = []
        in_ch = config.in_channels
        for out_ch, stride in config.stages:
            self.blocks.append(ConvBlock(in_ch, out_ch, stride, rng))
            in_ch = out_ch

    def output_shape(self, h_img: int, w_img: int) -> tuple[int, int, int]:
        """(C, H, W) of the feature map for an h_img x w_img input."""
        sp = self.config.stride_product
        if h_img % sp or w_img % sp:
            raise ConfigError(f"input size {h_img}x{w_img} not divisible by the "
                              f"backbone stride product {sp}")
        return self.config.out_channels, h_img // sp, w_img // sp

    def forward(self, images: Tensor, training: bool) -> Tensor:
        x = images
        for block in self.blocks:
            x = block(x, training)
        return x

    def named_parameters(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"backbone.block{i}")

    def named_buffers(self):
        for i, block in enumerate(self.blocks):
            yield from block.named_buffers(f"backbone.block{i}")
