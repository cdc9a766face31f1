"""
How orthogonal do weights and data become?
==========================================

For every product layer we track min |sin(theta)| over all (weight row,
input row) pairs of an evaluation batch.  Under P the direction gradient
vanishes as a pair aligns; under PR it does not, so PR is expected to keep
pairs further from parallel.
"""
import numpy as np
from sklearn.datasets import load_digits

from prgrad import harness
from prgrad.data import Dataset
from prgrad.layers import LstmParams, mlp_spec

digits = load_digits()
X = (digits.data / 16.0).astype(np.float32)
y = digits.target.astype(np.int64)
train, test = Dataset(X[:1400], y[:1400]), Dataset(X[1400:], y[1400:])

spec = mlp_spec([64, 128, 128, 10])
final = {}
for mode in ("P", "PR"):
    cfg = harness.TrainConfig(model=spec.to_dict(), mode=mode, epochs=15, batch_size=64,
                              optimizer={"name": "sgd", "lr": 0.05, "momentum": 0.9},
                              out_dir=f"runs/angles/{mode}", angle_samples=300)
    result = harness.run_experiment(cfg, datasets=(train, test, None))
    last = max(s.epoch for s in result.angles)
    final[mode] = {s.layer: s.min_abs_sin for s in result.angles if s.epoch == last}
    print(mode, "test acc", round(result.final_test_acc, 4))

print(f"{'layer':<6} {'P':>10} {'PR':>10}")
for layer in final["P"]:
    print(f"{layer:<6} {final['P'][layer]:10.4f} {final['PR'][layer]:10.4f}")

# recurrent layers report the input-to-hidden and hidden-to-hidden parts apart
lstm = LstmParams.init(8, 16, "PR", rng=0)
seq = np.random.default_rng(1).standard_normal((10, 4, 8))
for s in harness.lstm_angle_stats(lstm, seq, epoch=0):
    print(f"{s.layer:<20} min|sin| {s.min_abs_sin:.4f}  mean|cos| {s.mean_abs_cos:.4f}")
