"""Train a source cascade and see how much it loses on a shifted domain.
A single annotated target image then recovers most of the loss.

The full trainings are cut to 15 epochs so the script finishes in about six
minutes on one core. Adaptation only retrains cached fully connected layers,
so it keeps the long schedule.

    python demos/train_and_adapt.py
"""
import time

from threadpoolctl import threadpool_limits

from mslesion import cascade as cs
from mslesion.adapt import adapt, recommend_freeze
from mslesion.metrics import evaluate
from mslesion.phantom import generate_domain_set, shifted_domain, small_phantom_spec, source_domain
from mslesion.training import TrainConfig

spec = small_phantom_spec()
source_train = generate_domain_set(spec, source_domain(), 10, master_seed=1, prefix="src-train")
source_test = generate_domain_set(spec, source_domain(), 10, master_seed=2, prefix="src-test")
target_train = generate_domain_set(spec, shifted_domain(), 1, master_seed=3, prefix="tgt-train")
target_test = generate_domain_set(spec, shifted_domain(), 10, master_seed=4, prefix="tgt-test")

config = TrainConfig(max_epochs=15, patience=15, batch_size=16, seed=0)

with threadpool_limits(1):
    t = time.perf_counter()
    source = cs.train_cascade(source_train, config)
    print(f"source cascade trained in {time.perf_counter() - t:.0f}s")
    print(cs.inspect_cascade(source))

    # Convolutional features depend only on the frozen weights, so one store
    # serves every evaluation and adaptation of this source model.
    store = cs.FeatureStore()
    print("\nsource model on source test cases")
    print(evaluate(source, source_test).to_table())
    print("\nsource model on shifted test cases")
    print(evaluate(source, target_test, store=store).to_table())

    one = target_train[0]
    freeze = recommend_freeze(one.lesion_voxels, float(one.flair.voxel_volume))
    print(f"\none target image with {one.lesion_volume_ml():.3f} ml of lesion: retraining {freeze.mode.value}")
    long_config = TrainConfig(max_epochs=400, patience=50, batch_size=16, seed=0)
    adapted = adapt(source, [one], freeze, long_config, store)
    print(evaluate(adapted, target_test, store=store).to_table())
