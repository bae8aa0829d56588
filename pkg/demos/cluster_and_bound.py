"""
Clustering synthetic embeddings and bounding the cluster count
================================================================

Eight Gaussian modes stand in for frozen image embeddings. We cluster them
with k-means and with TEMI, score both against the true modes, then ask the
utilization bound how many clusters the data can support.

Run: ``python demos/cluster_and_bound.py`` (a few minutes on one core).
"""

import numpy as np

from clustercond.bounds import find_upper_bound
from clustercond.dataset import SyntheticSpec, l2_normalize, make_synthetic, mine_knn
from clustercond.kmeans import kmeans_fit
from clustercond.metrics import anmi, cluster_accuracy
from clustercond.pipeline.config import ExperimentConfig
from clustercond.temi import temi_assign, temi_fit

# 8 modes of 512 points in 2-D, spaced 2 apart
raw = make_synthetic(SyntheticSpec(modes=8, dim=2, samples_per_mode=512, mode_separation=2.0,
                                   mode_scale=0.1, seed=0))
fs = l2_normalize(raw)
print("features", fs.features.shape, "labels", np.bincount(raw.labels))

# k-means on the normalized features
km = kmeans_fit(fs, 8, seed=0)
print(f"k-means  ANMI {anmi(km, raw.labels):.3f}  accuracy {cluster_accuracy(km, raw.labels):.3f}")

# TEMI trains student/teacher heads on nearest-neighbour pairs
cfg = ExperimentConfig()
tc = cfg.temi_config(8, fs.n, seed=0)
neighbors = mine_knn(fs, tc.m)
model, _ = temi_fit(fs, neighbors, tc)
tm = temi_assign(model, fs)
print(f"TEMI     ANMI {anmi(tm, raw.labels):.3f}  accuracy {cluster_accuracy(tm, raw.labels):.3f}"
      f"  utilized {tm.utilized}/{tm.C}")

# the bound doubles C until some clusters stay empty, then refines
report = find_upper_bound(fs, neighbors, cfg.bound_config(fs.n, seed=0))
for p in report.probes:
    print(f"  C={p.C:3d}  r_C={p.r_C:.3f}  {p.phase}")
print("C_max =", report.C_max)
