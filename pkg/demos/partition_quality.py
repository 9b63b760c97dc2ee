"""Min-cut partitioning against random assignment, and what it saves in remote feature traffic."""
from heteroforge.bench import remote_bytes
from heteroforge.cluster import make_book
from heteroforge.synthetic import planted_partition

sg = planted_partition(800, 4, p_in=0.05, p_out=0.002, seed=2, feat_dim=16)
g = sg.graph
print(f"planted cut {sg.planted_cut}")
for method in ("random", "mincut"):
    book = make_book(g, 4, method=method)
    fl = book.first_level
    row = remote_bytes(sg, 4, method, batches=20)
    print(f"{method:>6}: cut {fl.cut:5d}, max/mean load {fl.imbalance().max():.3f}, "
          f"remote feature bytes {row['remote_bytes']}, local {row['local_bytes']}")
