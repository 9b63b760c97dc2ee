"""Reference GraphSage model with manual backpropagation and synchronous SGD.

Layer update for a destination v:
    relu(h_v W_self + sum_r mean_{u in N_r(v)} h_u W_neigh + b)
where r ranges over edge types present among v's sampled in-edges.  The last
layer has no relu.  Arithmetic runs in float64; parameters are stored as f32.
"""
from __future__ import annotations

import csv
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, GraphIOError, StructuralError

CKPT_MAGIC = b"HFCK"


@dataclass
class SageLayer:
    w_self: np.ndarray
    w_neigh: np.ndarray
    bias: np.ndarray

    @property
    def shapes(self):
        return [self.w_self.shape, self.w_neigh.shape, self.bias.shape]

    def arrays(self):
        return [self.w_self, self.w_neigh, self.bias]


@dataclass
class TrainConfig:
    layers: int = 3
    hidden: int = 256
    fanouts: tuple = (15, 10, 5)
    batch_size: int = 1000
    lr: float = 0.1
    epochs: int = 1
    task: str = "vertex"
    num_negatives: int = 1
    seed: int = 0

    def __post_init__(self):
        self.fanouts = tuple(self.fanouts)
        if len(self.fanouts) != self.layers:
            raise ConfigurationError(f"{len(self.fanouts)} fanouts for {self.layers} layers")
        if self.task not in ("vertex", "link"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be positive")


def mean_operator(dst, src, etype, n_dst: int, n_src: int) -> sp.csr_matrix:
    """Sparse M with (M h)[v] = sum over edge types of the mean of h over v's in-edges of that type."""
    dst = np.asarray(dst, dtype=np.int64)
    src = np.asarray(src, dtype=np.int64)
    etype = np.asarray(etype, dtype=np.int64)
    if len(dst) == 0:
        return sp.csr_matrix((n_dst, n_src))
    key = dst * (int(etype.max()) + 1) + etype
    _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    w = 1.0 / counts[inv]
    return sp.csr_matrix((w, (dst, src)), shape=(n_dst, n_src))


class SageModel:
    def __init__(self, dims, seed: int = 0):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigurationError(f"bad layer dimensions {dims}")
        rng = np.random.default_rng(seed)
        self.layers = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            lim = 1.0 / np.sqrt(d_in)
            self.layers.append(
                SageLayer(
                    rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32),
                    rng.uniform(-lim, lim, (d_in, d_out)).astype(np.float32),
                    rng.uniform(-lim, lim, d_out).astype(np.float32),
                )
            )

    @property
    def dims(self):
        return [self.layers[0].w_self.shape[0]] + [l.w_self.shape[1] for l in self.layers]

    @property
    def num_layers(self):
        return len(self.layers)

    # -- parameters -------------------------------------------------------------------

    def arrays(self):
        return [a for l in self.layers for a in l.arrays()]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()]).astype(np.float32)

    def load_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float32)
        if flat.size != self.num_params:
            raise StructuralError(f"{flat.size} values for {self.num_params} parameters")
        off = 0
        for l in self.layers:
            for name in ("w_self", "w_neigh", "bias"):
                a = getattr(l, name)
                setattr(l, name, flat[off : off + a.size].reshape(a.shape).copy())
                off += a.size

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "SageModel":
        m = SageModel.__new__(SageModel)
        m.layers = [SageLayer(*(a.copy() for a in l.arrays())) for l in self.layers]
        return m

    # -- forward / backward ---------------------------------------------------------

    def _check_input(self, feats):
        if feats.ndim != 2 or feats.shape[1] != self.layers[0].w_self.shape[0]:
            raise StructuralError(f"feature width {feats.shape[-1]} != input dimension {self.layers[0].w_self.shape[0]}")

    def forward_ops(self, ops, feats, cache: list | None = None) -> np.ndarray:
        """Run layers over (M, n_dst) operators, input-most first."""
        h = np.asarray(feats, dtype=np.float64)
        self._check_input(h)
        for i, (layer, (m, n_dst)) in enumerate(zip(self.layers, ops)):
            if m.shape[1] != h.shape[0]:
                raise StructuralError(f"layer {i}: operator expects {m.shape[1]} inputs, got {h.shape[0]}")
            agg = m @ h
            pre = h[:n_dst] @ layer.w_self.astype(np.float64) + agg @ layer.w_neigh.astype(np.float64) + layer.bias
            last = i == len(self.layers) - 1
            out = pre if last else np.maximum(pre, 0.0)
            if cache is not None:
                cache.append((h, agg, pre, m, n_dst, last))
            h = out
        return h

    def block_ops(self, mb):
        hops = mb.num_hops
        if hops != self.num_layers:
            raise StructuralError(f"batch has {hops} hops, model has {self.num_layers} layers")
        ops = []
        for hop in range(hops - 1, -1, -1):
            n_dst, n_src = mb.sizes[hop], mb.sizes[hop + 1]
            ops.append((mean_operator(mb.block_dst[hop], mb.block_src[hop], mb.block_etype[hop], n_dst, n_src), n_dst))
        return ops

    def forward(self, mb, feats=None, cache: list | None = None) -> np.ndarray:
        """Seed outputs (logits or embeddings) for a compacted mini-batch."""
        feats = mb.features if feats is None else feats
        return self.forward_ops(self.block_ops(mb), feats, cache)

    def backward(self, cache, d_out) -> list[np.ndarray]:
        """Gradients (float64) in flattening order, given dLoss/dOutput."""
        grads = [None] * (3 * len(self.layers))
        d = np.asarray(d_out, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            h, agg, pre, m, n_dst, last = cache[i]
            layer = self.layers[i]
            dy = d if last else d * (pre > 0)
            grads[3 * i] = h[:n_dst].T @ dy
            grads[3 * i + 1] = agg.T @ dy
            grads[3 * i + 2] = dy.sum(axis=0)
            if i > 0:
                dh = m.T @ (dy @ layer.w_neigh.astype(np.float64).T)
                dh[:n_dst] += dy @ layer.w_self.astype(np.float64).T
                d = dh
        return grads

    def loss_and_grad(self, mb, task: str = "vertex", loss_scale: float = 1.0):
        """(loss, flat float64 gradient) of the batch's mean loss."""
        cache = []
        out = self.forward(mb, cache=cache)
        if task == "vertex":
            loss, d = softmax_cross_entropy(out, mb.labels)
        elif task == "link":
            loss, d = link_logistic(out, mb.pos_pairs, mb.neg_pairs)
        else:
            raise ConfigurationError(f"unknown task {task!r}")
        grads = self.backward(cache, d * loss_scale)
        return loss * loss_scale, flatten_grads(grads)

    def dense_forward(self, g, feats) -> np.ndarray:
        """Full-graph message passing over every in-edge; the single-machine oracle."""
        n = g.num_vertices
        m = mean_operator(g.dst, g.src, g.edge_types_of(np.arange(g.num_edges)), n, n)
        return self.forward_ops([(m, n)] * self.num_layers, feats)

    # -- checkpoint -------------------------------------------------------------------

    def save(self, path, step: int = 0) -> None:
        arrays = self.arrays()
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIQI", CKPT_MAGIC, 1, step, len(arrays)))
            for a in arrays:
                fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
                fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> tuple["SageModel", int]:
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise GraphIOError(f"cannot read checkpoint {path}: {exc}") from exc
        try:
            magic, version, step, count = struct.unpack_from("<4sIQI", buf, 0)
            if magic != CKPT_MAGIC or version != 1 or count % 3:
                raise GraphIOError(f"{path}: not a checkpoint")
            off = struct.calcsize("<4sIQI")
            arrays = []
            for _ in range(count):
                (ndim,) = struct.unpack_from("<I", buf, off)
                shape = struct.unpack_from(f"<{ndim}Q", buf, off + 4)
                off += 4 + 8 * ndim
                size = int(np.prod(shape))
                arrays.append(np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32))
                off += 4 * size
            if off != len(buf):
                raise GraphIOError(f"{path}: trailing bytes")
        except (struct.error, ValueError) as exc:
            raise GraphIOError(f"{path}: truncated checkpoint") from exc
        m = cls.__new__(cls)
        m.layers = [SageLayer(*arrays[i : i + 3]) for i in range(0, count, 3)]
        return m, step


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.asarray(g, dtype=np.float64).ravel() for g in grads])


# -- losses ---------------------------------------------------------------------------------


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def pair_scores(emb, pairs) -> np.ndarray:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return np.einsum("ij,ij->i", emb[pairs[:, 0]], emb[pairs[:, 1]])


def link_logistic(emb, pos_pairs, neg_pairs):
    """Mean binary logistic loss over positive and negative pairs scored by dot product."""
    pos = np.asarray(pos_pairs, dtype=np.int64).reshape(-1, 2)
    neg = np.asarray(neg_pairs, dtype=np.int64).reshape(-1, 2)
    pairs = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    s = pair_scores(emb, pairs)
    n = len(pairs)
    loss = -_log_sigmoid(y * s).mean()
    ds = -y * (1.0 / (1.0 + np.exp(y * s))) / n  # d/ds of -log sigmoid(y s)
    d = np.zeros_like(emb)
    np.add.at(d, pairs[:, 0], ds[:, None] * emb[pairs[:, 1]])
    np.add.at(d, pairs[:, 1], ds[:, None] * emb[pairs[:, 0]])
    return float(loss), d


# -- optimisation and evaluation ------------------------------------------------------------


def sync_step(group, model: SageModel, local_grads, lr: float) -> SageModel:
    """model - lr * allreduce_mean(grads); identical on every member of the group."""
    mean = np.asarray(group.allreduce_mean(np.asarray(local_grads, dtype=np.float32)), dtype=np.float32)
    if mean.size != model.num_params:
        raise StructuralError(f"reduced gradient has {mean.size} entries for {model.num_params} parameters")
    flat = model.flatten().astype(np.float64) - float(lr) * mean.astype(np.float64)
    model.load_flat(flat.astype(np.float32))
    return model


def accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def hit_rate(pos_scores, neg_scores) -> float:
    """Fraction of positives scored strictly above their paired negatives."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if len(pos) == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    reps = len(neg) // len(pos)
    return float(np.mean(np.repeat(pos, reps) > neg))


def evaluate(model: SageModel, batches, task: str = "vertex") -> float:
    """Accuracy or hit-rate over mini-batches (use fanout FULL for a deterministic score)."""
    hits, total = 0.0, 0
    for mb in batches:
        out = model.forward(mb)
        if task == "vertex":
            n = len(mb.labels)
            if n:
                hits += accuracy(out, mb.labels) * n
            total += n
        else:
            pos = pair_scores(out, mb.pos_pairs)
            if len(pos):
                hits += hit_rate(pos, pair_scores(out, mb.neg_pairs)) * len(pos)
            total += len(pos)
    if total == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    return hits / total


def evaluate_dense(model: SageModel, g, feats, ids) -> float:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ConfigurationError("cannot evaluate an empty split")
    return accuracy(model.dense_forward(g, feats)[ids], g.labels[ids])


class TrainLog:
    """CSV rows of (epoch, step, seq_no, loss, epoch_time); epoch_time is set on an epoch's last step."""

    FIELDS = ["epoch", "step", "seq_no", "loss", "epoch_time"]

    def __init__(self, path=None):
        self.path = path
        self.rows = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="")
            self._w = csv.writer(self._fh)
            self._w.writerow(self.FIELDS)

    def add(self, epoch, step, seq_no, loss, epoch_time=None):
        row = [epoch, step, seq_no, loss, epoch_time]
        self.rows.append(row)
        if self._fh:
            self._w.writerow([epoch, step, seq_no, repr(float(loss)), "" if epoch_time is None else f"{epoch_time:.6f}"])
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None

    @property
    def losses(self):
        return [r[3] for r in self.rows]


def train(model: SageModel, source, group, lr: float, steps: int, steps_per_epoch: int, task: str = "vertex",
          log: TrainLog | None = None, on_step=None) -> list[float]:
    """Consume `steps` batches from `source`, each followed by a synchronous SGD step.

    A failed batch aborts training (the error carries its seq_no).
    """
    log = log or TrainLog()
    losses = []
    t0 = time.perf_counter()
    for i in range(steps):
        mb = source.next_minibatch()
        if mb is None:
            break
        loss, grad = model.loss_and_grad(mb, task)
        sync_step(group, model, grad, lr)
        losses.append(loss)
        end_of_epoch = (i + 1) % steps_per_epoch == 0
        now = time.perf_counter()
        log.add(mb.epoch, mb.step, mb.seq_no, loss, now - t0 if end_of_epoch else None)
        if end_of_epoch:
            t0 = now
        if on_step is not None:
            on_step(i, mb, loss)
    return losses


__all__ = [
    "SageLayer",
    "SageModel",
    "TrainConfig",
    "TrainLog",
    "accuracy",
    "evaluate",
    "evaluate_dense",
    "flatten_grads",
    "hit_rate",
    "link_logistic",
    "mean_operator",
    "pair_scores",
    "softmax_cross_entropy",
    "sync_step",
    "train",
]
