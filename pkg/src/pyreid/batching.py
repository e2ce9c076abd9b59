"""Mini-batch samplers and the hard-example selector.

Two strategies feed the trainer: plain seeded permutations chunked into
batches, and ID-balanced P x K batches that guarantee in-batch triplets.
All randomness comes from numpy's PCG64 seeded through SeedSequence, so
every stream is a pure function of (seed, purpose, epoch index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Split:
    """A dataset split as flat arrays (index into the parent dataset)."""
    indices: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class MiniBatch:
    indices: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    strategy: str
    partial: bool = False

    def __len__(self):
        return len(self.indices)


def stream_rng(seed: int, purpose: int, epoch: int) -> np.random.Generator:
    """PCG64 generator derived from (seed, purpose, epoch) via SeedSequence."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose, epoch])))


_RANDOM_PURPOSE = 101
_PK_PURPOSE = 202


def random_batches(split: Split, batch_size: int, seed: int, epoch: int) -> list[MiniBatch]:
    """One epoch of uniformly shuffled batches; every image appears exactly
    once, the final batch may be short (flagged partial)."""
    if batch_size < 1:
        raise ValueError(f"random_batches: batch_size must be >= 1, got {batch_size}")
    if len(split) == 0:
        raise ValueError("random_batches: empty split")
    rng = stream_rng(seed, _RANDOM_PURPOSE, epoch)
    order = rng.permutation(len(split))
    batches = []
    for off in range(0, len(order), batch_size):
        sel = order[off:off + batch_size]
        batches.append(MiniBatch(indices=split.indices[sel],
                                 identities=split.identities[sel],
                                 cameras=split.cameras[sel],
                                 strategy="random",
                                 partial=len(sel) < batch_size))
    return batches


def pk_batches(split: Split, p: int, k: int, seed: int, epoch: int,
               with_replacement: bool = False) -> list[MiniBatch]:
    """One epoch of ID-balanced batches: P identities x K images each, drawn
    i.i.d. per batch.

    By default identities with fewer than K images are never used; the
    with_replacement policy keeps them and samples their images with
    replacement. Epoch length is ceil(eligible images / (P*K)) batches.
    """
    if p < 1 or k < 1:
        raise ValueError(f"pk_batches: P and K must be >= 1, got P={p} K={k}")
    if len(split) == 0:
        raise ValueError("pk_batches: empty split")
    groups: dict[int, np.ndarray] = {}
    for ident in np.unique(split.identities):
        groups[int(ident)] = np.flatnonzero(split.identities == ident)
    if with_replacement:
        eligible = sorted(groups)
    else:
        eligible = sorted(i for i, g in groups.items() if len(g) >= k)
    if len(eligible) < p:
        counts = {i: len(g) for i, g in sorted(groups.items())}
        raise ValueError(f"pk_batches: only {len(eligible)} identities have >= {k} images, "
                         f"need P={p}; per-identity counts: {counts}")
    n_eligible_imgs = sum(len(groups[i]) for i in eligible)
    n_batches = math.ceil(n_eligible_imgs / (p * k))
    rng = stream_rng(seed, _PK_PURPOSE, epoch)
    eligible_arr = np.asarray(eligible, dtype=np.int64)
    batches = []
    for _ in range(n_batches):
        ids = rng.choice(eligible_arr, size=p, replace=False)
        sel = []
        for ident in ids:
            g = groups[int(ident)]
            replace = with_replacement and len(g) < k
            sel.append(rng.choice(g, size=k, replace=replace))
        sel = np.concatenate(sel)
        batches.append(MiniBatch(indices=split.indices[sel],
                                 identities=split.identities[sel],
                                 cameras=split.cameras[sel],
                                 strategy="id_balanced"))
    return batches


def batch_hard_mine(dist: np.ndarray, labels, validate: bool = False) -> list:
    """Per anchor, the index of its hardest positive (max same-label
    distance) and hardest negative (min different-label distance), or None
    where no candidate exists. Ties break toward the smallest index."""
    dist = np.asarray(dist)
    labels = np.asarray(labels)
    n = dist.shape[0]
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"batch_hard_mine: distance matrix must be square, got {dist.shape}")
    if labels.shape != (n,):
        raise ValueError(f"batch_hard_mine: {labels.shape[0]} labels for a {n}x{n} matrix")
    if validate:
        if not np.allclose(dist, dist.T, atol=1e-5):
            raise ValueError("batch_hard_mine: distance matrix is not symmetric")
        if (dist < -1e-9).any():
            raise ValueError("batch_hard_mine: distance matrix has negative entries")

    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    out = []
    ninf = -np.inf
    pinf = np.inf
    for i in range(n):
        hp = hn = None
        if pos_mask[i].any():
            row = np.where(pos_mask[i], dist[i], ninf)
            hp = int(row.argmax())  # argmax returns the first (smallest) index on ties
        if neg_mask[i].any():
            row = np.where(neg_mask[i], dist[i], pinf)
            hn = int(row.argmin())
        out.append((hp, hn))
    return out
