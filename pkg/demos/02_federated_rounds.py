"""
FedAvg against clients training alone
=====================================

Runs a few federated rounds on skewed data and compares the shared model
with purely local models, on the global test set and on each client's own
slice.
"""

# %%
import numpy as np

from fedmem.datasets import make_blobs, split_train_test
from fedmem.numerics import init_mlp
from fedmem.partitioning import DropoutSchedule, PartitionSpec, assign_test_slices, partition
from fedmem.protocol import ClientState, TrainingConfig, evaluate, run_federation, train_local_baseline

data = make_blobs(10, 8, 300, 1.0, layout_seed=0, sample_seed=1)
train, test = split_train_test(data, 0.1, seed=12345)
shards = partition(train, PartitionSpec("dirichlet", 5, seed=1, alpha=0.05))
slices = assign_test_slices(train, shards, test)
clients = [ClientState(k, train.subset(shards[k]), test.subset(slices[k])) for k in range(5)]

# %%
# Ten rounds of five local epochs keep this demo under a minute.
cfg = TrainingConfig(local_epochs=5, rounds=10, learning_rate=1e-3)
init = init_mlp([8, 64, 32, 10], seed=0)
server, trained, records = run_federation(init, clients, cfg, DropoutSchedule(5), master_seed=1, global_test=test)
curve = [r.value for r in records if r.client_id == "global" and r.metric == "accuracy"]
print("FedAvg global accuracy by round:", np.round(curve, 3))

# %%
local_models, _ = train_local_baseline(init, clients, cfg, master_seed=1)
for c in clients:
    if not len(c.test):
        continue
    fa = evaluate(server.global_params, c.test)[0]
    lo = evaluate(local_models[c.id], c.test)[0]
    lo_global = evaluate(local_models[c.id], test)[0]
    print(f"client {c.id}: own slice FedAvg {fa:.2f} / local {lo:.2f};  local model on global test {lo_global:.2f}")

# %%
# Local models look strong on their own slices because those slices share
# the client's label skew, but they know little about other classes.
