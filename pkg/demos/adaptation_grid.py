"""Sweep freeze modes against the number of target images used for
adaptation, writing the grid as tab-separated values.

    python demos/adaptation_grid.py [grid.tsv]
"""
import sys

from threadpoolctl import threadpool_limits

from mslesion import cascade as cs
from mslesion.adapt import run_adaptation_grid
from mslesion.phantom import generate_domain_set, shifted_domain, small_phantom_spec, source_domain
from mslesion.training import TrainConfig

spec = small_phantom_spec()
source_train = generate_domain_set(spec, source_domain(), 6, master_seed=1, prefix="src-train")
target_train = generate_domain_set(spec, shifted_domain(), 4, master_seed=3, prefix="tgt-train")
target_test = generate_domain_set(spec, shifted_domain(), 4, master_seed=4, prefix="tgt-test")

with threadpool_limits(1):
    source = cs.train_cascade(source_train, TrainConfig(max_epochs=8, patience=8, batch_size=16, seed=0))
    grid = run_adaptation_grid(source, target_train, target_test,
                               modes=["fc3", "fc2_fc3", "fc1_fc2_fc3"], sizes=[1, 2, 4],
                               config=TrainConfig(max_epochs=60, patience=15, batch_size=16),
                               master_seed=7, store=cs.FeatureStore())

print(grid.to_table())
if len(sys.argv) > 1:
    with open(sys.argv[1], "w") as fh:
        fh.write(grid.to_dsv())
