"""Coarse-to-fine pyramid of horizontal feature-map stripes.

The feature map of height H is cut into n basic parts. Level l of the
pyramid holds every window of l consecutive basic parts (sliding step one),
so level l has n-l+1 branches and the whole pyramid n(n+1)/2. Each branch
pools its sub-map (max pool plus average pool, added), reduces to a
feature_dim vector through a bias-free 1x1 conv + batch-norm + ReLU, and
feeds its own identity classifier. The concatenation of all enabled branch
features is the retrieval embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .backbone import Backbone, BatchNorm, fan_in_uniform
from .errors import ConfigError


@dataclass(frozen=True)
class BranchSpec:
    """One pyramid member: level, position, and its 1-based inclusive row range."""
    level: int
    position: int
    row_start: int
    row_end: int

    @property
    def rows(self) -> int:
        return self.row_end - self.row_start + 1


def enumerate_branches(n: int, height: int) -> list[BranchSpec]:
    """All branch specs for an n-part pyramid over a height-H feature map,
    ordered level-major then position."""
    if n < 1:
        raise ConfigError(f"part count must be positive, got {n}")
    if height % n:
        raise ConfigError(f"feature map height {height} not divisible by part count {n}")
    unit = height // n
    specs = []
    for level in range(1, n + 1):
        for pos in range(1, n - level + 2):
            start = (pos - 1) * unit + 1
            specs.append(BranchSpec(level, pos, start, (pos - 1) * unit + level * unit))
    return specs


def slice_branch(fmap: Tensor, spec: BranchSpec) -> Tensor:
    """Contiguous row slab of the feature map covered by one branch."""
    return ag.slice_rows(fmap, spec.row_start - 1, spec.row_end)


@dataclass(frozen=True)
class BranchMask:
    """Per-level enable flags; index 0 = level 1 (finest)."""
    flags: tuple

    @classmethod
    def full(cls, n: int) -> "BranchMask":
        return cls(tuple([True] * n))

    @classmethod
    def from_string(cls, text: str) -> "BranchMask":
        if not text or any(c not in "01" for c in text):
            raise ConfigError(f"mask must be a nonempty string of 0/1, got {text!r}")
        flags = tuple(c == "1" for c in text)
        if not any(flags):
            raise ConfigError(f"mask {text!r} disables every pyramid level")
        return cls(flags)

    def __str__(self):
        return "".join("1" if f else "0" for f in self.flags)

    @property
    def n(self) -> int:
        return len(self.flags)

    def level_enabled(self, level: int) -> bool:
        return self.flags[level - 1]

    def enabled_branch_count(self) -> int:
        n = self.n
        return sum(n - l + 1 for l in range(1, n + 1) if self.flags[l - 1])


class BranchParams:
    """Independent per-branch parameters: 1x1 reduction, batch-norm, classifier."""

    def __init__(self, in_channels: int, feature_dim: int, num_identities: int,
                 rng: np.random.Generator, classifier_bias: bool = False):
        # stored (C, D): the 1x1 conv applied to a pooled C-vector is a matmul
        self.reduce_weight = Tensor(fan_in_uniform(rng, (in_channels, feature_dim),
                                                   in_channels), requires_grad=True)
        self.bn = BatchNorm(feature_dim)
        self.classifier_weight = Tensor(fan_in_uniform(rng, (feature_dim, num_identities),
                                                       feature_dim), requires_grad=True)
        self.classifier_bias = None
        if classifier_bias:
            # stored (1, K) so the batch broadcast is a plain matmul with ones
            self.classifier_bias = Tensor(np.zeros((1, num_identities), dtype=ag.default_dtype()),
                                          requires_grad=True)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.reduce.weight", self.reduce_weight
        yield from self.bn.named_parameters(f"{prefix}.bn")
        yield f"{prefix}.classifier.weight", self.classifier_weight
        if self.classifier_bias is not None:
            yield f"{prefix}.classifier.bias", self.classifier_bias

    def named_buffers(self, prefix: str):
        yield from self.bn.named_buffers(f"{prefix}.bn")


def branch_forward(sub_map: Tensor, params: BranchParams, training: bool):
    """(feature, logits) for one branch.

    feature = ReLU(BN(W_reduce @ (global max pool + global avg pool)))
    logits  = classifier(feature)

    Accepts a single (C,H,W) sub-map or a batched (N,C,H,W) one; the single
    form returns (D,) / (num_identities,) vectors.
    """
    c_in = params.reduce_weight.data.shape[0]
    if sub_map.data.shape[-3] != c_in:
        raise ValueError(f"branch_forward: sub-map has {sub_map.data.shape[-3]} channels, "
                         f"reduction expects {c_in}")
    single = sub_map.data.ndim == 3
    if single:
        sub_map = ag.reshape(sub_map, (1,) + sub_map.data.shape)
    pooled = ag.add(ag.global_max_pool(sub_map), ag.global_avg_pool(sub_map))
    feature = ag.relu(params.bn(ag.matmul(pooled, params.reduce_weight), training))
    logits = ag.matmul(feature, params.classifier_weight)
    if params.classifier_bias is not None:
        ones = Tensor(np.ones((feature.data.shape[0], 1), dtype=feature.data.dtype))
        logits = ag.add(logits, ag.matmul(ones, params.classifier_bias))
    if single:
        feature = ag.reshape(feature, (feature.data.shape[1],))
        logits = ag.reshape(logits, (logits.data.shape[1],))
    return feature, logits


def assemble_embedding(branch_features: list, mask: BranchMask) -> Tensor:
    """Concatenate enabled branch features, in enumeration order."""
    n = mask.n
    levels = [l for l in range(1, n + 1) for _ in range(n - l + 1)]
    if len(branch_features) != len(levels):
        raise ValueError(f"assemble_embedding: expected {len(levels)} branch features for "
                         f"an n={n} pyramid, got {len(branch_features)}")
    if not any(mask.flags):
        raise ValueError("assemble_embedding: mask disables every level")
    picked = []
    for level, feat in zip(levels, branch_features):
        if mask.level_enabled(level):
            if feat is None:
                raise ValueError(f"assemble_embedding: missing feature for enabled level {level}")
            picked.append(feat)
    if len(picked) == 1:
        return picked[0]
    return ag.concat(picked, axis=1)


class PyramidOutput:
    __slots__ = ("features", "logits", "embedding")

    def __init__(self, features, logits, embedding):
        self.features = features
        self.logits = logits
        self.embedding = embedding

    def enabled_logits(self) -> list:
        return [lg for lg in self.logits if lg is not None]


class PyramidModel:
    """Backbone + pyramid branches + assembled embedding."""

    def __init__(self, backbone: Backbone, n: int, feature_dim: int,
                 num_identities: int, image_hw: tuple, rng: np.random.Generator,
                 classifier_bias: bool = False):
        self.backbone = backbone
        self.n = n
        self.feature_dim = feature_dim
        self.num_identities = num_identities
        self.image_hw = tuple(image_hw)
        c, h, w = backbone.output_shape(*self.image_hw)
        if h % n:
            raise ConfigError(f"feature map height {h} not divisible by part count {n}; "
                              f"adjust image height or backbone strides")
        self.map_shape = (c, h, w)
        self.specs = enumerate_branches(n, h)
        self.branches = [BranchParams(c, feature_dim, num_identities, rng, classifier_bias)
                         for _ in self.specs]
        self.full_mask = BranchMask.full(n)

    def embedding_dim(self, mask: BranchMask | None = None) -> int:
        mask = mask or self.full_mask
        return self.feature_dim * mask.enabled_branch_count()

    def forward(self, images: Tensor, training: bool,
                mask: BranchMask | None = None) -> PyramidOutput:
        mask = mask or self.full_mask
        if mask.n != self.n:
            raise ConfigError(f"mask {mask} has {mask.n} levels, model has {self.n}")
        fmap = self.backbone.forward(images, training)
        features: list = [None] * len(self.specs)
        logits: list = [None] * len(self.specs)
        for i, (spec, params) in enumerate(zip(self.specs, self.branches)):
            if not mask.level_enabled(spec.level):
                continue
            sub = slice_branch(fmap, spec)
            features[i], logits[i] = branch_forward(sub, params, training)
        embedding = assemble_embedding(features, mask)
        return PyramidOutput(features, logits, embedding)

    def named_parameters(self):
        yield from self.backbone.named_parameters()
        for spec, params in zip(self.specs, self.branches):
            yield from params.named_parameters(f"branch_l{spec.level}_k{spec.position}")

    def named_buffers(self):
        yield from self.backbone.named_buffers()
        for spec, params in zip(self.specs, self.branches):
            yield from params.named_buffers(f"branch_l{spec.level}_k{spec.position}")

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None
