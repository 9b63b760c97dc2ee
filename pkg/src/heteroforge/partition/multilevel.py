"""Multilevel k-way min-edge-cut partitioning under multiple balance constraints.

Coarsening uses heavy-edge matching (heaviest edge, then lowest neighbour ID)
with exact aggregation of edge and vertex weights, so the cut of a coarse
assignment equals the cut of its projection.  The coarsest graph is split by
greedy region growing (several seeded trials), and every level is refined by
a balancing pass followed by boundary Fiduccia-Mattheyses passes that reject
moves which worsen any constraint's (1+eps) bound.

Vertex weights are normalised per constraint so that the ideal per-partition
load is 1.0 and the bound is ``1 + eps`` for every component.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ConfigurationError
from ..graph import HomogenizedGraph

log = logging.getLogger(__name__)

_TOL = 1e-9
MAX_EPS = 1.0


@dataclass
class PartitionAssignment:
    part_of: np.ndarray
    k: int
    sums: np.ndarray  # (k, m) raw constraint sums per partition
    constraint_names: tuple = ()
    eps: float = 0.05
    eps_used: float = 0.05
    relaxed: bool = False
    balanced: bool = True
    cut: int = 0
    meta: dict = field(default_factory=dict)

    def imbalance(self) -> np.ndarray:
        """max_p sum_c(p) / (total_c / k) per component; 0 where total is 0."""
        totals = self.sums.sum(0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(totals > 0, self.sums.max(0) / (totals / self.k), 0.0)
        return ratio


def symmetric_adjacency(src, dst, n) -> sp.csr_matrix:
    """Undirected weighted adjacency: w(u,v) = number of edges between u and v."""
    keep = src != dst
    s, d = src[keep], dst[keep]
    a = sp.coo_matrix((np.ones(len(s)), (s, d)), shape=(n, n))
    a = (a + a.T).tocsr()
    a.sum_duplicates()
    a.sort_indices()
    return a


def edge_cut(g: HomogenizedGraph, part) -> int:
    part = np.asarray(part)
    return int(np.count_nonzero(part[g.src] != part[g.dst]))


def weighted_cut(adj: sp.csr_matrix, part) -> float:
    coo = adj.tocoo()
    return float(coo.data[part[coo.row] != part[coo.col]].sum()) / 2.0


# -- coarsening --------------------------------------------------------------


@dataclass
class Level:
    adj: sp.csr_matrix
    vwgt: np.ndarray
    cmap: np.ndarray | None = None  # this level's vertex -> next coarser vertex


def edge_rating(adj: sp.csr_matrix) -> np.ndarray:
    """Edge weight, with ties broken by common-neighbour count (kept below 1)."""
    b = adj.copy()
    b.data = np.ones_like(b.data)
    common = b.multiply(b @ b).tocsr()
    # pattern of `common` is a subset of adj's; realign onto adj's slots
    extra = np.asarray(sp.csr_matrix((common.data, common.indices, common.indptr), shape=adj.shape)[
        np.repeat(np.arange(adj.shape[0]), np.diff(adj.indptr)), adj.indices
    ]).ravel()
    top = extra.max() if extra.size else 0.0
    return adj.data + extra / (top + 1.0)


def heavy_edge_matching(adj: sp.csr_matrix, vwgt: np.ndarray, cap: np.ndarray, rng) -> np.ndarray:
    """Return cmap (fine vertex -> coarse vertex).

    Each unmatched vertex, visited in seeded random order, takes its heaviest
    unmatched neighbour; equal weights prefer more shared neighbours, then the
    lower ID.  Pairs whose combined weight exceeds ``cap`` in any component are
    skipped unless one endpoint already exceeds it alone.
    """
    n = adj.shape[0]
    match = np.full(n, -1, dtype=np.int64)
    indptr, indices, data = adj.indptr.tolist(), adj.indices.tolist(), edge_rating(adj).tolist()
    vw = vwgt.tolist()
    capl = cap.tolist()
    for v in rng.permutation(n).tolist():
        if match[v] >= 0:
            continue
        best, bw = -1, -1.0
        wv = vw[v]
        for j in range(indptr[v], indptr[v + 1]):
            u = indices[j]
            if match[u] >= 0:
                continue
            w = data[j]
            if w > bw or (w == bw and u < best):
                wu = vw[u]
                if all(a + b <= max(c, a, b) + _TOL for a, b, c in zip(wv, wu, capl)):
                    best, bw = u, w
        if best >= 0:
            match[v], match[best] = best, v
        else:
            match[v] = v
    cmap = np.full(n, -1, dtype=np.int64)
    c = 0
    for v in range(n):
        if cmap[v] < 0:
            cmap[v] = cmap[match[v]] = c
            c += 1
    return cmap


def contract(adj: sp.csr_matrix, vwgt: np.ndarray, cmap: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    n, nc = adj.shape[0], int(cmap.max()) + 1
    p = sp.csr_matrix((np.ones(n), (np.arange(n), cmap)), shape=(n, nc))
    coarse = (p.T @ adj @ p).tocsr()
    coarse.setdiag(0)
    coarse.eliminate_zeros()
    coarse.sort_indices()
    return coarse, np.asarray(p.T @ vwgt)


def coarsen(adj, vwgt, k, rng, coarsen_to=None) -> list[Level]:
    coarsen_to = coarsen_to or max(30 * k, 40)
    cap = 1.5 * vwgt.sum(0) / coarsen_to
    levels = [Level(adj, vwgt)]
    while levels[-1].adj.shape[0] > coarsen_to:
        cur = levels[-1]
        cmap = heavy_edge_matching(cur.adj, cur.vwgt, cap, rng)
        nc = int(cmap.max()) + 1
        if nc > 0.95 * cur.adj.shape[0]:
            break
        cur.cmap = cmap
        levels.append(Level(*contract(cur.adj, cur.vwgt, cmap)))
    return levels


# -- refinement state ----------------------------------------------------------


def _row_violation(load, bound):
    return np.maximum(load - bound, 0.0).sum(-1)


class _State:
    """Partition + per-vertex connectivity + loads for one level."""

    def __init__(self, adj, w, part, k, bound):
        self.adj, self.w, self.k = adj, w, k
        # (k, 1): per-partition load bound, broadcast over constraints
        self.bound = np.broadcast_to(np.asarray(bound, dtype=np.float64).reshape(-1, 1), (k, 1))
        self.part = part.astype(np.int64).copy()
        n = adj.shape[0]
        rows = np.repeat(np.arange(n), np.diff(adj.indptr))
        self.conn = np.bincount(rows * k + self.part[adj.indices], weights=adj.data, minlength=n * k).reshape(n, k)
        self.load = np.zeros((k, w.shape[1]))
        np.add.at(self.load, self.part, w)
        self.cut = float((self.conn.sum(1) - self.conn[np.arange(n), self.part]).sum() / 2.0)

    def violation(self) -> float:
        return float(_row_violation(self.load, self.bound).sum())

    def move_dviol(self, v, a, b) -> float:
        w = self.w[v]
        la, lb, ba, bb = self.load[a], self.load[b], self.bound[a], self.bound[b]
        return float(
            _row_violation(la - w, ba) - _row_violation(la, ba)
            + _row_violation(lb + w, bb) - _row_violation(lb, bb)
        )

    def move(self, v, b):
        a = self.part[v]
        lo, hi = self.adj.indptr[v], self.adj.indptr[v + 1]
        nb, wt = self.adj.indices[lo:hi], self.adj.data[lo:hi]
        self.cut += self.conn[v, a] - self.conn[v, b]
        self.part[v] = b
        self.load[a] -= self.w[v]
        self.load[b] += self.w[v]
        self.conn[nb, a] -= wt
        self.conn[nb, b] += wt
        return nb

    def best_move(self, v):
        """Best allowed boundary move of v as (gain, dviol, target) or None."""
        a = self.part[v]
        row = self.conn[v]
        cand = row > 0
        cand[a] = False
        if not cand.any():
            return None
        w = self.w[v]
        ba = self.bound[a]
        da = float(_row_violation(self.load[a] - w, ba) - _row_violation(self.load[a], ba))
        dq = _row_violation(self.load + w, self.bound) - _row_violation(self.load, self.bound)
        dv = dq + da
        ok = cand & (dv <= _TOL)
        if not ok.any():
            return None
        qs = np.flatnonzero(ok)
        gains = row[qs] - row[a]
        order = np.lexsort((qs, dv[qs], -gains))
        q = int(qs[order[0]])
        return float(row[q] - row[a]), float(dv[q]), q


def _potential(load, bound):
    # violation dominates; the quadratic term rewards evening out loads that are
    # within bounds, which lets balancing make the "swap half" of a swap
    return _BALANCE_WEIGHT * np.maximum(load - bound, 0.0).sum(-1) + (load * load).sum(-1)


_BALANCE_WEIGHT = 100.0


def balance(state: _State, rng, max_moves=None) -> None:
    """Drive violation to zero with single-vertex moves.

    Each step considers every (vertex, target) pair, keeps those whose drop in
    potential is at least half the best available drop, and takes the one with
    the smallest cut increase.
    """
    n = state.adj.shape[0]
    max_moves = max_moves or 2 * n
    idx = np.arange(n)
    for _ in range(max_moves):
        if state.violation() <= _TOL:
            return
        base = _potential(state.load, state.bound)  # (k,)
        a = state.part
        w = state.w
        pa = _potential(state.load[a] - w, state.bound[a]) - base[a]  # (n,)
        pq = _potential(state.load[None, :, :] + w[:, None, :], state.bound[None]) - base[None, :]  # (n, k)
        dp = pq + pa[:, None]
        dp[idx, a] = np.inf
        best = dp.min()
        if not best < -_TOL:
            return
        ok = dp <= 0.5 * best
        vi, qi = np.nonzero(ok)
        cut_inc = state.conn[vi, a[vi]] - state.conn[vi, qi]
        j = np.lexsort((vi, qi, dp[vi, qi], cut_inc))[0]
        state.move(int(vi[j]), int(qi[j]))


def fm_refine(state: _State, rng, max_passes=8) -> None:
    n = state.adj.shape[0]
    limit = min(max(25, n // 20), 200)
    for _ in range(max_passes):
        start_key = (round(state.violation(), 9), state.cut)
        locked = np.zeros(n, dtype=bool)
        stamp = np.zeros(n, dtype=np.int64)
        heap = []
        boundary = np.flatnonzero(state.conn.sum(1) - state.conn[np.arange(n), state.part] > 0)
        for v in rng.permutation(boundary).tolist():
            bm = state.best_move(v)
            if bm is not None:
                heap.append((-bm[0], bm[1], v, bm[2], 0))
        heapq.heapify(heap)
        moves = []
        best_key, best_len, since = start_key, 0, 0
        while heap and since < limit:
            ng, dv, v, q, st = heapq.heappop(heap)
            if locked[v] or st != stamp[v]:
                continue
            bm = state.best_move(v)
            if bm is None:
                continue
            if bm[2] != q or abs(bm[0] + ng) > _TOL or abs(bm[1] - dv) > _TOL:
                stamp[v] += 1
                heapq.heappush(heap, (-bm[0], bm[1], v, bm[2], int(stamp[v])))
                continue
            a = int(state.part[v])
            nb = state.move(v, q)
            locked[v] = True
            moves.append((v, a))
            key = (round(state.violation(), 9), state.cut)
            if key < best_key:
                best_key, best_len, since = key, len(moves), 0
            else:
                since += 1
            for u in np.unique(nb).tolist():
                if locked[u]:
                    continue
                stamp[u] += 1
                bm = state.best_move(u)
                if bm is not None:
                    heapq.heappush(heap, (-bm[0], bm[1], u, bm[2], int(stamp[u])))
        for v, a in reversed(moves[best_len:]):
            state.move(v, a)
        if best_len == 0:
            return


# -- initial partition ---------------------------------------------------------


def grow_bisection(adj: sp.csr_matrix, w: np.ndarray, frac: float, rng) -> np.ndarray:
    """Greedy graph growing: absorb the max-gain frontier vertex until the
    region holds ``frac`` of the total weight.  Returns 0/1 side labels."""
    n = adj.shape[0]
    side = np.ones(n, dtype=np.int64)
    if n < 2:
        return np.zeros(n, dtype=np.int64)
    deg = np.asarray(adj.sum(1)).ravel()
    inside = np.zeros(n)  # connection weight into the region
    target = frac * w.sum()
    load = 0.0
    v = int(rng.integers(n))
    while True:
        side[v] = 0
        load += w[v].sum()
        lo, hi = adj.indptr[v], adj.indptr[v + 1]
        inside[adj.indices[lo:hi]] += adj.data[lo:hi]
        if load >= target - _TOL or not (side == 1).any():
            break
        free = side == 1
        frontier = free & (inside > 0)
        if frontier.any():
            gain = np.where(frontier, 2 * inside - deg, -np.inf)
            v = int(np.argmax(gain))
        else:
            v = int(rng.choice(np.flatnonzero(free)))
    return side


def _bisect(adj, w, k, eps, rng, trials, slack) -> np.ndarray:
    """Recursive bisection into k parts on normalised weights (ideal part load 1)."""
    n = adj.shape[0]
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    k1 = k // 2
    bound = (1.0 + eps + slack) * np.array([k1, k - k1], dtype=np.float64)
    best, best_key = None, None
    for _ in range(trials):
        side = grow_bisection(adj, w, k1 / k, rng)
        st = _State(adj, w, side, 2, bound)
        balance(st, rng)
        fm_refine(st, rng)
        key = (round(st.violation(), 9), st.cut)
        if best_key is None or key < best_key:
            best, best_key = st.part.copy(), key
    part = np.empty(n, dtype=np.int64)
    for s_, kk, off in ((0, k1, 0), (1, k - k1, k1)):
        idx = np.flatnonzero(best == s_)
        if kk == 1 or idx.size == 0:
            part[idx] = off
            continue
        sub = adj[idx][:, idx].tocsr()
        part[idx] = off + _bisect(sub, w[idx], kk, eps, rng, trials, slack)
    return part


def _initial(level: Level, k, eps, rng, trials) -> np.ndarray:
    return _bisect(level.adj, level.vwgt, k, eps, rng, trials, slack=float(level.vwgt.max()))


def _normalise(vwgt: np.ndarray, k: int) -> np.ndarray:
    totals = vwgt.sum(0)
    scale = np.where(totals > 0, k / np.where(totals > 0, totals, 1.0), 0.0)
    return vwgt * scale


def multilevel_partition(adj, w_norm, k, eps, rng, trials=4) -> tuple[np.ndarray, float]:
    """One multilevel run on normalised weights; returns (part, violation)."""
    levels = coarsen(adj, w_norm, k, rng)
    part = _initial(levels[-1], k, eps, rng, trials)
    st = None
    for depth in range(len(levels) - 2, -1, -1):
        lvl = levels[depth]
        part = part[lvl.cmap]
        # coarse levels get one vertex-weight of slack; the finest level is exact
        slack = 0.0 if depth == 0 else float(lvl.vwgt.max())
        st = _State(lvl.adj, lvl.vwgt, part, k, 1.0 + eps + slack)
        balance(st, rng)
        fm_refine(st, rng)
        part = st.part
    if st is None:
        st = _State(levels[0].adj, levels[0].vwgt, part, k, 1.0 + eps)
        balance(st, rng)
        fm_refine(st, rng)
    return st.part.copy(), st.violation()


def partition_graph(adj: sp.csr_matrix, vwgt: np.ndarray, k: int, eps: float = 0.05, seed: int = 0, names=()):
    """Partition a symmetric weighted graph; shared by both partition levels."""
    n = adj.shape[0]
    if k < 1:
        raise ConfigurationError("k must be >= 1")
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the number of vertices ({n})")
    if eps <= 0:
        raise ConfigurationError("eps must be > 0")
    vwgt = np.asarray(vwgt, dtype=np.float64)
    if vwgt.ndim == 1:
        vwgt = vwgt[:, None]
    if vwgt.shape[0] != n or not np.all(np.isfinite(vwgt)) or (vwgt < 0).any():
        raise ConfigurationError("constraint weights must be finite, non-negative, one row per vertex")

    if k == 1:
        part, eps_used, viol = np.zeros(n, dtype=np.int64), eps, 0.0
    else:
        w_norm = _normalise(vwgt, k)
        eps_used, attempt = eps, 0
        while True:
            rng = np.random.default_rng([seed, attempt])
            part, viol = multilevel_partition(adj, w_norm, k, eps_used, rng)
            if viol <= _TOL or eps_used >= MAX_EPS:
                break
            log.info("partition infeasible at eps=%.3f (violation %.4f); relaxing", eps_used, viol)
            eps_used = min(2 * eps_used, MAX_EPS)
            attempt += 1

    sums = np.zeros((k, vwgt.shape[1]))
    np.add.at(sums, part, vwgt)
    return PartitionAssignment(
        part_of=part,
        k=k,
        sums=sums,
        constraint_names=tuple(names),
        eps=eps,
        eps_used=eps_used,
        relaxed=eps_used > eps,
        balanced=viol <= _TOL,
        cut=int(round(weighted_cut(adj, part))) if k > 1 else 0,
    )


def partition_multiconstraint(g: HomogenizedGraph, k: int, constraints: np.ndarray, eps: float = 0.05, seed: int = 0, names=()):
    adj = symmetric_adjacency(g.src, g.dst, g.num_vertices)
    result = partition_graph(adj, constraints, k, eps=eps, seed=seed, names=names)
    result.cut = edge_cut(g, result.part_of)
    return result
