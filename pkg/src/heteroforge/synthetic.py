"""Desk-scale synthetic graph generators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .graph import MASK_NONE, MASK_TEST, MASK_TRAIN, MASK_VAL, FeatureMatrix, HeteroSchema, HomogenizedGraph, homogenize


@dataclass
class SyntheticGraph:
    graph: HomogenizedGraph
    features: dict
    block_of: np.ndarray | None = None  # planted cluster per global vertex
    planted_cut: int | None = None


def _check_prob(name, p):
    if not (0.0 <= p <= 1.0) or not np.isfinite(p):
        raise ConfigurationError(f"{name} must be a probability in [0, 1], got {p}")


def _split_fracs(fracs):
    fracs = tuple(float(f) for f in fracs)
    if len(fracs) != 3 or min(fracs) < 0 or sum(fracs) > 1 + 1e-9:
        raise ConfigurationError(f"split fractions must be 3 non-negative values summing to <= 1, got {fracs}")
    return fracs


def stratified_masks(groups: np.ndarray, fracs, rng) -> np.ndarray:
    """Assign train/val/test within each group so every group gets the same split shares."""
    train, val, test = _split_fracs(fracs)
    masks = np.full(len(groups), MASK_NONE, dtype=np.uint8)
    for b in np.unique(groups):
        idx = rng.permutation(np.flatnonzero(groups == b))
        n1 = int(round(train * len(idx)))
        n2 = n1 + int(round(val * len(idx)))
        n3 = min(len(idx), n2 + int(round(test * len(idx))))
        masks[idx[:n1]] = MASK_TRAIN
        masks[idx[n1:n2]] = MASK_VAL
        masks[idx[n2:n3]] = MASK_TEST
    return masks


def _pairs_between(a_ids, b_ids, p, rng, same):
    if same:
        iu, ju = np.triu_indices(len(a_ids), 1)
        keep = rng.random(len(iu)) < p
        return a_ids[iu[keep]], a_ids[ju[keep]]
    total = len(a_ids) * len(b_ids)
    cnt = rng.binomial(total, p)
    lin = np.sort(rng.choice(total, size=cnt, replace=False))
    return a_ids[lin // len(b_ids)], b_ids[lin % len(b_ids)]


def planted_partition(
    n: int = 400,
    blocks: int = 2,
    p_in: float = 0.2,
    p_out: float = 0.01,
    seed: int = 0,
    feat_dim: int = 8,
    split=(0.5, 0.25, 0.25),
    separation: float = 3.0,
    vertex_type: str = "v",
    relation: str = "link",
) -> SyntheticGraph:
    """Stochastic block model with block-separable features and block labels.

    Every undirected pair is stored in both directions, so the planted cut
    counts each inter-block pair twice.
    """
    _check_prob("p_in", p_in)
    _check_prob("p_out", p_out)
    if blocks < 1 or n < blocks:
        raise ConfigurationError("need 1 <= blocks <= n")
    rng = np.random.default_rng(seed)
    block_of = np.repeat(np.arange(blocks), -(-n // blocks))[:n]
    members = [np.flatnonzero(block_of == b) for b in range(blocks)]
    src, dst = [], []
    for a in range(blocks):
        for b in range(a, blocks):
            s, d = _pairs_between(members[a], members[b], p_in if a == b else p_out, rng, a == b)
            src.append(s)
            dst.append(d)
    s = np.concatenate(src)
    d = np.concatenate(dst)
    pairs = np.stack([np.concatenate([s, d]), np.concatenate([d, s])], axis=1)
    masks = stratified_masks(block_of, split, rng)
    centers = np.zeros((blocks, feat_dim))
    centers[np.arange(blocks), np.arange(blocks) % feat_dim] = separation
    feats = (centers[block_of] + rng.standard_normal((n, feat_dim))).astype(np.float32)
    schema = HeteroSchema.from_counts({vertex_type: n}, [(vertex_type, relation, vertex_type)])
    g = homogenize(schema, {relation: pairs}, masks=masks, labels=block_of.astype(np.int64))
    cut = int(np.count_nonzero(block_of[pairs[:, 0]] != block_of[pairs[:, 1]]))
    return SyntheticGraph(g, {vertex_type: FeatureMatrix(vertex_type, feats)}, block_of, cut)


def two_cliques(size: int = 8, feat_dim: int = 4, seed: int = 0) -> SyntheticGraph:
    """Two cliques joined by a single directed bridge edge (clique edges stored both ways)."""
    rng = np.random.default_rng(seed)
    n = 2 * size
    pairs = []
    for base in (0, size):
        for i in range(size):
            for j in range(size):
                if i != j:
                    pairs.append((base + i, base + j))
    pairs.append((size - 1, size))
    block_of = np.repeat([0, 1], size)
    schema = HeteroSchema.from_counts({"v": n}, [("v", "link", "v")])
    g = homogenize(schema, {"link": pairs}, labels=block_of.astype(np.int64))
    feats = rng.standard_normal((n, feat_dim)).astype(np.float32)
    return SyntheticGraph(g, {"v": FeatureMatrix("v", feats)}, block_of, 1)


def random_hetero(
    counts: dict,
    edge_types: list,
    edges_per_type,
    feat_dim: int = 8,
    num_classes: int = 3,
    split=(0.6, 0.2, 0.2),
    seed: int = 0,
) -> SyntheticGraph:
    """Uniform random typed multigraph with a shared feature width across vertex types."""
    rng = np.random.default_rng(seed)
    schema = HeteroSchema.from_counts(counts, edge_types)
    if np.isscalar(edges_per_type):
        edges_per_type = [int(edges_per_type)] * len(edge_types)
    lists = {}
    for (s, r, d), m in zip(edge_types, edges_per_type):
        lists[r] = np.stack([rng.integers(0, counts[s], m), rng.integers(0, counts[d], m)], axis=1)
    n = sum(counts.values())
    tmp = homogenize(schema, lists)
    vtypes = tmp.vertex_types_of(np.arange(n))
    masks = stratified_masks(vtypes, split, rng)
    labels = rng.integers(0, num_classes, n).astype(np.int64)
    g = homogenize(schema, lists, masks=masks, labels=labels)
    feats = {t: FeatureMatrix(t, rng.standard_normal((c, feat_dim)).astype(np.float32)) for t, c in counts.items()}
    return SyntheticGraph(g, feats)


def fig3_hetero(scale: int = 50, feat_dim: int = 8, seed: int = 0) -> SyntheticGraph:
    """Three vertex types and four relations in the shape of a small social-commerce graph."""
    counts = {"user": 4 * scale, "item": 3 * scale, "tag": scale}
    ets = [("user", "follows", "user"), ("user", "buys", "item"), ("item", "bought-by", "user"), ("item", "tagged", "tag")]
    return random_hetero(counts, ets, [8 * scale, 12 * scale, 12 * scale, 6 * scale], feat_dim=feat_dim, seed=seed)
