"""
Which part of the weight gradient matters?
==========================================

A 5-layer MLP trained three ways from one shared initialization: the full
inner-product gradient, the gradient with its length part removed, and the
gradient with its direction part removed.  PR is added for comparison.

Fashion-MNIST is the intended dataset (``prgrad ablation-fmnist``); this
demo uses scikit-learn's bundled 8x8 digits so it runs offline in about a
minute.
"""
from collections import OrderedDict

import numpy as np
from sklearn.datasets import load_digits

from prgrad import harness
from prgrad.data import Dataset
from prgrad.layers import build_model, mlp_spec

digits = load_digits()
images = (digits.images / 16.0).astype(np.float32)[:, None]
labels = digits.target.astype(np.int64)
perm = np.random.default_rng(0).permutation(len(labels))
images, labels = images[perm], labels[perm]
train = Dataset(images[:1400], labels[:1400], "digits/train")
test = Dataset(images[1400:], labels[1400:], "digits/test")

spec = mlp_spec([64, 256, 256, 256, 256, 10])
init = OrderedDict((k, v.data.copy()) for k, v in build_model(spec, seed=0).params.items())

results = {}
for mode in ("P", "P_DIRECTION_ONLY", "P_LENGTH_ONLY", "PR"):
    cfg = harness.TrainConfig(model=spec.to_dict(), mode=mode, epochs=30, batch_size=64,
                              optimizer={"name": "sgd", "lr": 0.1, "momentum": 0.9},
                              out_dir=f"runs/digits/{mode}", angle_samples=200)
    results[mode] = harness.run_experiment(cfg, datasets=(train, test, None), initial=init)

print(f"{'mode':<18} {'start':>6} {'final':>6}")
for mode, r in results.items():
    print(f"{mode:<18} {r.initial_test_acc:6.3f} {r.final_test_acc:6.3f}")

# expected shape of the result: removing the length part barely matters,
# removing the direction part cripples training
