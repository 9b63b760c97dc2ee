"""Train a two-layer GraphSAGE model on a planted two-cluster graph across two in-process machines.

Each machine runs two trainers; all four step together through an allreduce, so
their parameters stay identical.  Run: python demos/train_planted.py
"""
import numpy as np

from heteroforge.cluster import LocalCluster, run_local_training
from heteroforge.pipeline import CapacityConfig
from heteroforge.synthetic import planted_partition
from heteroforge.trainer import TrainConfig, evaluate_dense

sg = planted_partition(400, 2, p_in=0.05, p_out=0.005, seed=0, feat_dim=8, separation=0.5)
g = sg.graph
print(f"{g.num_vertices} vertices, {g.num_edges} edges, planted cut {sg.planted_cut}")

cfg = TrainConfig(layers=2, hidden=16, fanouts=(10, 10), batch_size=20, lr=0.5, epochs=10, seed=0)
with LocalCluster.from_graph(sg, 2, trainers=2, fanouts=cfg.fanouts, seed=0) as cl:
    print(f"min-cut partition: {cl.book.first_level.cut} cut edges")
    results = run_local_training(cl, cfg, CapacityConfig(25, 5, 1))

model = results[0]["model"]
assert all(np.array_equal(model.flatten(), r["model"].flatten()) for r in results)
spe = results[0]["steps_per_epoch"]
for epoch in range(cfg.epochs):
    losses = [np.mean(r["losses"][epoch * spe : (epoch + 1) * spe]) for r in results]
    print(f"epoch {epoch}: mean loss {np.mean(losses):.3f}")

feats = sg.features["v"].values
for split in ("train", "val", "test"):
    print(f"{split} accuracy {evaluate_dense(model, g, feats, g.ids_in_split(split)):.3f}")
