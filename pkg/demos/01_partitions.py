"""
Splitting blobs across clients
==============================

Two ways of handing a labelled dataset to simulated clients: Dirichlet label
skew and the pathological "few classes per client" layout, including a
client that alone holds two classes.
"""

# %%
# A small synthetic dataset: ten Gaussian clusters in eight dimensions.
import numpy as np

from fedmem.datasets import make_blobs, split_train_test
from fedmem.partitioning import PartitionSpec, assign_test_slices, partition

data = make_blobs(10, 8, 300, 1.0, layout_seed=0, sample_seed=0)
train, test = split_train_test(data, 0.1, seed=12345)
print("train rows:", len(train), " test rows:", len(test))

# %%
# Dirichlet skew. Small alpha concentrates each class on a few clients.
for alpha in (100.0, 1.0, 0.05):
    shards = partition(train, PartitionSpec("dirichlet", 5, seed=0, alpha=alpha))
    print(f"\nalpha = {alpha}: rows per class on each client")
    print(shards.histograms(train))

# %%
# The pathological layout: every client holds exactly two classes, and
# client 8 is the only holder of classes 8 and 9.
spec = PartitionSpec("pathological", 10, seed=0, gamma=2, monopoly_client=8, monopoly_classes=(8, 9))
shards = partition(train, spec)
for k in range(10):
    print(f"client {k}: classes {sorted(shards.classes_of(train, k))}")

# %%
# Each client's test slice follows its own label mix.
slices = assign_test_slices(train, shards, test)
print("\ntest labels on client 8:", np.unique(test.labels[slices[8]]))
