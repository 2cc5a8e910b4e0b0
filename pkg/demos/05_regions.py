"""Three candidate regions and three seed cells on a grid with planted blobs."""
import numpy as np

from topopack.roi import build_similarity_graph, mst_cluster, triangular_seeds
from topopack.synth import synthetic_grid

grid, truth = synthetic_grid(12, 12, 16, blobs=3, noise=0.05, seed=4, return_labels=True)
proposal = mst_cluster(build_similarity_graph(grid))
labels = proposal.labels((12, 12))
seeds = set(triangular_seeds(grid))

print("planted        proposed")
for i in range(12):
    left = "".join("ABC"[t] for t in truth[i])
    right = "".join("*" if (i, j) in seeds else "abc"[l] for j, l in enumerate(labels[i]))
    print(f"{left}   {right}")
for r, (c, s) in enumerate(zip(proposal.centroids, proposal.similarity)):
    print(f"region {'abc'[r]}: {len(proposal.regions[r])} cells, centre ({c[0]:.1f}, {c[1]:.1f}), "
          f"mean tree similarity {s:.3f}")
