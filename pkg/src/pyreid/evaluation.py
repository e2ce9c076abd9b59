"""Single-query retrieval evaluation: ranking, CMC, mAP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, no_grad
from .data_synth import ReIDDataset
from .errors import ConfigError
from .pyramid import BranchMask, PyramidModel


@dataclass(frozen=True)
class RankedResult:
    """One query's filtered gallery ranking."""
    query_index: int
    order: np.ndarray    # gallery indices, ascending distance
    matches: np.ndarray  # bool per ranked position


def rank_gallery(query_emb: np.ndarray, query_id: int, query_cam: int,
                 gallery_embs: np.ndarray, gallery_ids: np.ndarray,
                 gallery_cams: np.ndarray, query_index: int = 0) -> RankedResult:
    """Rank gallery entries by Euclidean distance to the query, after
    dropping same-identity same-camera entries (junk under the standard
    protocol). Distance ties break toward the lower gallery index."""
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if q.shape != g.shape[1:]:
        raise ValueError(f"rank_gallery: embedding dims differ, query {q.shape} vs "
                         f"gallery {g.shape[1:]}")
    keep = ~((gallery_ids == query_id) & (gallery_cams == query_cam))
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        raise ValueError(f"rank_gallery: query {query_index} has an empty gallery "
                         f"after filtering")
    dist = np.sqrt(((g[kept] - q) ** 2).sum(axis=1))
    order_local = np.argsort(dist, kind="stable")
    order = kept[order_local]
    return RankedResult(query_index=query_index, order=order,
                        matches=gallery_ids[order] == query_id)


def compute_cmc(results: list, max_rank: int) -> np.ndarray:
    """CMC[r] (1-based rank r) = fraction of queries whose first true match
    appears at position <= r."""
    if not results:
        raise ValueError("compute_cmc: no results")
    hits = np.zeros(max_rank, dtype=np.float64)
    for res in results:
        if not res.matches.any():
            raise ValueError(f"compute_cmc: query {res.query_index} has no true match")
        first = int(res.matches.argmax())
        if first < max_rank:
            hits[first:] += 1.0
    return hits / len(results)


def compute_map(results: list) -> float:
    """Mean over queries of average precision over all true matches."""
    if not results:
        raise ValueError("compute_map: no results")
    aps = []
    for res in results:
        pos = np.flatnonzero(res.matches)
        if pos.size == 0:
            raise ValueError(f"compute_map: query {res.query_index} has no true match")
        precisions = (np.arange(1, pos.size + 1)) / (pos + 1.0)
        aps.append(precisions.mean())
    return float(np.mean(aps))


def extract_embeddings(model: PyramidModel, images: np.ndarray,
                       mask: BranchMask | None = None, batch_size: int = 64,
                       l2_normalize: bool = False) -> np.ndarray:
    """Eval-mode embeddings (running batch-norm statistics) for a stack of
    images, in input order."""
    chunks = []
    with no_grad():
        for off in range(0, len(images), batch_size):
            out = model.forward(Tensor(images[off:off + batch_size]), training=False,
                                mask=mask)
            chunks.append(out.embedding.data)
    embs = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 0))
    if l2_normalize:
        norms = np.sqrt((embs.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
        embs = embs / np.maximum(norms, 1e-12)
    return embs


def evaluate_model(model: PyramidModel, dataset: ReIDDataset,
                   mask: BranchMask | None = None, max_rank: int = 10,
                   l2_normalize: bool = False) -> dict:
    """mAP and CMC at ranks 1/5/10 over the dataset's query/gallery splits."""
    query = dataset.query_split()
    gallery = dataset.gallery_split()
    if len(query) == 0 or len(gallery) == 0:
        raise ConfigError("evaluate_model: dataset has no query/gallery split")
    q_embs = extract_embeddings(model, dataset.images[query.indices], mask,
                                l2_normalize=l2_normalize)
    g_embs = extract_embeddings(model, dataset.images[gallery.indices], mask,
                                l2_normalize=l2_normalize)
    results = [rank_gallery(q_embs[i], int(query.identities[i]), int(query.cameras[i]),
                            g_embs, gallery.identities, gallery.cameras, query_index=i)
               for i in range(len(query))]
    cmc = compute_cmc(results, max_rank)
    return {"mAP": compute_map(results),
            "rank1": float(cmc[0]),
            "rank5": float(cmc[4]) if max_rank >= 5 else float("nan"),
            "rank10": float(cmc[9]) if max_rank >= 10 else float("nan")}


def evaluate_checkpoint(checkpoint_path, dataset: ReIDDataset,
                        mask: BranchMask | None = None,
                        l2_normalize: bool = False) -> dict:
    """Rebuild the model stored in a checkpoint and evaluate it."""
    from .trainer import load_checkpoint, rebuild_model

    ck = load_checkpoint(checkpoint_path)
    model, config = rebuild_model(ck)
    if model.image_hw != dataset.image_hw:
        raise ConfigError(f"checkpoint expects {model.image_hw} images, dataset has "
                          f"{dataset.image_hw}")
    if mask is None:
        mask = BranchMask.from_string(config.pyramid_mask)
    return evaluate_model(model, dataset, mask=mask, l2_normalize=l2_normalize)


def metrics_table(metrics: dict) -> str:
    keys = ["mAP", "rank1", "rank5", "rank10"]
    head = " | ".join(f"{k:>7}" for k in keys)
    vals = " | ".join(f"{metrics[k]:7.4f}" for k in keys)
    rule = "-+-".join("-" * 7 for _ in keys)
    return f"{head}\n{rule}\n{vals}"
