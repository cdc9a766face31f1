"""Training runs, the three-way gradient ablation, the small-CIFAR comparison
and per-layer orthogonality statistics."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .layers import LstmParams, Model, ModelSpec, build_model, mlp_spec, small_cnn_spec
from .optim import Optimizer, cosine_lr
from .products import ProductMode, pair_geometry

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"PRNET001"
METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "seconds")
ANGLE_COLUMNS = ("epoch", "layer", "min_abs_sin", "mean_abs_cos")

MODEL_PRESETS = {
    "fmnist_mlp": lambda: mlp_spec([784, 256, 256, 256, 256, 10]),
    "cifar_cnn": lambda: small_cnn_spec(),
}


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    model: object = "fmnist_mlp"  # preset name or {"layers": [...]}
    mode: str = "P"
    dataset: dict = field(default_factory=lambda: {"name": "synthetic_blobs"})
    epochs: int = 1
    batch_size: int = 128
    optimizer: dict = field(default_factory=lambda: {"name": "sgd", "lr": 0.1, "momentum": 0.9,
                                                     "weight_decay": 0.0})
    schedule: str = "cosine"
    seed: int = 0
    augment: bool = False
    out_dir: str = "runs/default"
    shadow: bool = False
    angle_samples: int = 256
    record_time: bool = False

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_spec(self) -> ModelSpec:
        if isinstance(self.model, str):
            if self.model not in MODEL_PRESETS:
                raise ConfigError(f"unknown model preset {self.model!r}; "
                                  f"expected one of {sorted(MODEL_PRESETS)}")
            return MODEL_PRESETS[self.model]()
        return ModelSpec.from_dict(self.model)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        try:
            ProductMode.parse(self.mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.optimizer.get("name", "sgd") not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer.get('name')!r}")
        name = self.dataset.get("name")
        if name in ("fashion_mnist", "cifar10"):
            path = self.dataset.get("data_dir")
            if not path or not Path(path).is_dir():
                raise ConfigError(f"dataset {name}: data_dir {path!r} does not exist")
        elif name != "synthetic_blobs":
            raise ConfigError(f"unknown dataset {name!r}")
        self.model_spec()


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    lr: float
    seconds: float


@dataclass
class AngleStats:
    epoch: int
    layer: str
    min_abs_sin: float
    mean_abs_cos: float


@dataclass
class RunResult:
    config: TrainConfig
    history: list
    angles: list
    initial_test_acc: float
    model: Model
    out_dir: Path

    @property
    def final_test_acc(self):
        return self.history[-1].test_acc


# ---------------------------------------------------------------------------
# angle statistics
# ---------------------------------------------------------------------------


def angle_min_sin(W, X, chunk=65536):
    """(min |sin theta|, mean |cos theta|) over every (row of W, row of X) pair."""
    W = np.asarray(W)
    X = np.asarray(X)
    if X.shape[0] == 0 or W.shape[0] == 0:
        raise ValueError("angle_min_sin: empty batch")
    lo, total, count = 1.0, 0.0, 0
    for start in range(0, len(X), chunk):
        _, _, _, cos, sin = pair_geometry(W, X[start:start + chunk])
        lo = min(lo, float(sin.min()))
        total += float(np.abs(cos).sum())
        count += cos.size
    return lo, total / count


def model_angle_stats(model: Model, X, epoch) -> list:
    stats = OrderedDict()

    def observe(name, W, rows):
        stats[name] = angle_min_sin(W, rows)

    with T.no_grad():
        model.forward(X, observe)
    return [AngleStats(epoch, name, s, c) for name, (s, c) in stats.items()]


def lstm_angle_stats(params: LstmParams, inputs, epoch, name="lstm") -> list:
    """Input-to-hidden and hidden-to-hidden parts reported separately, over all steps."""
    from .layers import lstm_sequence

    rows = {}

    def observe(part, W, X):
        rows.setdefault(part, [W, []])[1].append(X)

    with T.no_grad():
        lstm_sequence(params, inputs, observe=observe, name=name)
    out = []
    for part, (W, xs) in rows.items():
        s, c = angle_min_sin(W, np.concatenate(xs))
        out.append(AngleStats(epoch, part, s, c))
    return out


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _fmt(v):
    return f"{v:.8g}" if isinstance(v, float) else str(v)


def _atomic_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    D.atomic_write_bytes(path, buf.getvalue().encode())


def emit_metrics(history, stats, out_dir):
    if not history:
        raise ValueError("emit_metrics: empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_csv(out_dir / "metrics.csv", METRICS_COLUMNS,
                [[getattr(r, c) for c in METRICS_COLUMNS] for r in history])
    _atomic_csv(out_dir / "angles.csv", ANGLE_COLUMNS,
                [[getattr(s, c) for c in ANGLE_COLUMNS] for s in stats])
    return out_dir / "metrics.csv", out_dir / "angles.csv"


def save_checkpoint(path, tensors):
    """magic, uint32 count, then per tensor: name length, name, rank, dims, float32 LE data."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    D.atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> OrderedDict:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {buf[:8]!r})")
    pos = 8
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        name = buf[pos + 4:pos + 4 + n].decode("utf-8")
        pos += 4 + n
        (rank,) = struct.unpack_from("<I", buf, pos)
        dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, "<f4", count=size, offset=pos).reshape(dims).copy()
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def load_datasets(cfg: TrainConfig):
    """(train, test, preprocess) for the configured dataset."""
    spec = dict(cfg.dataset)
    name = spec.pop("name")
    if name == "synthetic_blobs":
        params = {"seed": cfg.seed, "n_per_class": 200, "classes": 2, "dim": 2, "sep": 10.0}
        params.update({k: v for k, v in spec.items() if k in params})
        full = D.synthetic_blobs(**params)
        n_test = int(spec.get("test_fraction", 0.25) * len(full))
        test = D.Dataset(full.images[:n_test], full.labels[:n_test], full.name, full.num_classes)
        train = D.Dataset(full.images[n_test:], full.labels[n_test:], full.name, full.num_classes)
        return train, test, None
    if name == "fashion_mnist":
        train, test = D.load_fashion_mnist(spec["data_dir"])
    else:
        train, test = D.load_cifar10(spec["data_dir"])
    if spec.get("train_subset"):
        train = train.subset(int(spec["train_subset"]))
    if spec.get("test_subset"):
        test = test.subset(int(spec["test_subset"]))
    if name == "cifar10":
        mean, std = D.channel_stats(train)
        return train, test, lambda x: D.standardize(x, mean, std)
    return train, test, None


def evaluate(model, ds, preprocess=None, batch_size=1000):
    correct = 0
    with T.no_grad():
        for X, y in D.make_batches(ds, batch_size, shuffle=False):
            if preprocess is not None:
                X = preprocess(X)
            logits = model.forward(T.Tensor(X)).data
            correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(ds)


def _train(cfg: TrainConfig, train, test, preprocess, initial=None):
    spec = cfg.model_spec()
    model = build_model(spec, seed=cfg.seed, mode=cfg.mode)
    if initial is not None:
        for name, value in initial.items():
            model.params[name].data = np.array(value, dtype=model.params[name].dtype)
    opt_cfg = dict(cfg.optimizer)
    opt = Optimizer(model.parameters(), opt_cfg.pop("name", "sgd"), **opt_cfg)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    eval_X = test.images[:cfg.angle_samples]
    if preprocess is not None:
        eval_X = preprocess(eval_X)

    initial_acc = evaluate(model, test, preprocess)
    angles = model_angle_stats(model, eval_X, 0)
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        epoch_lr = opt.state.lr if cfg.schedule == "constant" else cosine_lr(step, total_steps, opt.base_lr)
        aug_rng = np.random.default_rng([cfg.seed, epoch, 1])
        loss_sum, correct = 0.0, 0
        for X, y in D.make_batches(train, cfg.batch_size, cfg.seed, True, epoch):
            if cfg.schedule == "cosine":
                opt.set_lr(cosine_lr(step, total_steps, opt.base_lr))
            if cfg.augment:
                X = D.augment_batch(X, aug_rng)
            if preprocess is not None:
                X = preprocess(X)
            T.zero_grad(model.parameters())
            logits = model.forward(T.Tensor(X))
            loss = T.cross_entropy(logits, y)
            value = loss.item()
            if not np.isfinite(value):
                T.zero_grad()
                raise TrainingDiverged(step, value)
            T.backward(loss)
            opt.step()
            loss_sum += value * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            step += 1
        T.zero_grad(model.parameters())
        test_acc = evaluate(model, test, preprocess)
        angles += model_angle_stats(model, eval_X, epoch)
        seconds = time.perf_counter() - t0
        history.append(MetricsRecord(epoch, loss_sum / len(train), correct / len(train), test_acc,
                                     float(epoch_lr), seconds if cfg.record_time else 0.0))
        log.info("%s epoch %d: loss %.4f train %.4f test %.4f (%.1fs)", cfg.mode, epoch,
                 history[-1].train_loss, history[-1].train_acc, test_acc, seconds)
    return model, history, angles, initial_acc


def run_experiment(cfg: TrainConfig, datasets=None, initial=None) -> RunResult:
    """Train from a seeded init, evaluate every epoch, write CSVs and a checkpoint.

    ``datasets`` may pass pre-loaded ``(train, test, preprocess)`` to share
    decoding across runs.
    """
    cfg.validate()
    train, test, preprocess = datasets or load_datasets(cfg)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.shadow:
        with T.shadow_precision():
            model, history, angles, initial_acc = _train(cfg, train, test, preprocess, initial)
    else:
        model, history, angles, initial_acc = _train(cfg, train, test, preprocess, initial)
    emit_metrics(history, angles, out_dir)
    save_checkpoint(out_dir / "checkpoint.prnet", model.params)
    D.atomic_write_bytes(out_dir / "config.json",
                         (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    return RunResult(cfg, history, angles, initial_acc, model, out_dir)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

ABLATION_MODES = (ProductMode.P, ProductMode.P_DIRECTION_ONLY, ProductMode.P_LENGTH_ONLY)


def ablation_config(data_dir, out_dir="runs/ablation", epochs=30, subset=None, seed=0):
    dataset = {"name": "fashion_mnist", "data_dir": str(data_dir)}
    if subset:
        dataset["train_subset"] = subset
    return TrainConfig(model="fmnist_mlp", dataset=dataset, epochs=epochs, batch_size=128,
                       optimizer={"name": "sgd", "lr": 0.1, "momentum": 0.9, "weight_decay": 0.0},
                       schedule="cosine", seed=seed, out_dir=str(out_dir), angle_samples=1000)


def intro_ablation(base: TrainConfig, modes=ABLATION_MODES) -> dict:
    """Train one MLP per mode from a shared initialisation; write ablation.csv."""
    base.validate()
    datasets = load_datasets(base)
    init = build_model(base.model_spec(), seed=base.seed).params
    shared = OrderedDict((k, v.data.copy()) for k, v in init.items())
    results = OrderedDict()
    for mode in modes:
        mode = ProductMode.parse(mode)
        cfg = dataclasses.replace(base, mode=mode.value, out_dir=str(Path(base.out_dir) / mode.value))
        results[mode.value] = run_experiment(cfg, datasets, initial=shared)
    _atomic_csv(Path(base.out_dir) / "ablation.csv", ("mode", "initial_test_acc", "final_test_acc"),
                [[m, r.initial_test_acc, r.final_test_acc] for m, r in results.items()])
    return results


def cifar_config(data_dir, seed, mode, out_dir, epochs=20):
    return TrainConfig(model="cifar_cnn", mode=mode,
                       dataset={"name": "cifar10", "data_dir": str(data_dir)},
                       epochs=epochs, batch_size=128,
                       optimizer={"name": "sgd", "lr": 0.1, "momentum": 0.9, "weight_decay": 5e-4},
                       schedule="cosine", seed=seed, augment=True, out_dir=str(out_dir),
                       angle_samples=256)


def compare_runs(results) -> dict:
    """Summarise {(mode, seed): RunResult} into mean accuracies and per-layer final min|sin|."""
    modes = sorted({m for m, _ in results})
    summary = {"mean_test_acc": {}, "final_min_abs_sin": {}}
    for m in modes:
        runs = [r for (mm, _), r in results.items() if mm == m]
        summary["mean_test_acc"][m] = float(np.mean([r.final_test_acc for r in runs]))
        per_layer = {}
        for r in runs:
            last = max(s.epoch for s in r.angles)
            for s in r.angles:
                if s.epoch == last:
                    per_layer.setdefault(s.layer, []).append(s.min_abs_sin)
        summary["final_min_abs_sin"][m] = {k: float(np.mean(v)) for k, v in per_layer.items()}
    if {"P", "PR"} <= set(modes):
        p, pr = summary["final_min_abs_sin"]["P"], summary["final_min_abs_sin"]["PR"]
        wins = [layer for layer in p if pr[layer] >= p[layer]]
        summary["pr_layers_more_orthogonal"] = wins
        summary["pr_orthogonal_fraction"] = len(wins) / len(p)
        summary["acc_gap_pr_minus_p"] = summary["mean_test_acc"]["PR"] - summary["mean_test_acc"]["P"]
    return summary


def cifar_small(data_dir, seeds=3, out_dir="runs/cifar_small", epochs=20, modes=("P", "PR")):
    results = OrderedDict()
    first = cifar_config(data_dir, 0, "P", out_dir, epochs)
    first.validate()
    datasets = load_datasets(first)
    for seed in range(seeds):
        for mode in modes:
            cfg = cifar_config(data_dir, seed, mode, Path(out_dir) / f"{mode}_seed{seed}", epochs)
            results[(mode, seed)] = run_experiment(cfg, datasets)
    summary = compare_runs(results)
    D.atomic_write_bytes(Path(out_dir) / "summary.json",
                         (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode())
    return results, summary


def checkpoint_angle_stats(checkpoint, data_dir=None, config=None, samples=256):
    """Angle statistics of a saved model on the first ``samples`` test images."""
    checkpoint = Path(checkpoint)
    cfg_path = Path(config) if config else checkpoint.with_name("config.json")
    cfg = TrainConfig.load(cfg_path)
    if data_dir is not None:
        cfg.dataset = dict(cfg.dataset, data_dir=str(data_dir))
    cfg.angle_samples = samples
    cfg.validate()
    _, test, preprocess = load_datasets(cfg)
    model = build_model(cfg.model_spec(), seed=cfg.seed, mode=cfg.mode)
    for name, value in load_checkpoint(checkpoint).items():
        model.params[name].data = value
    X = test.images[:samples]
    if preprocess is not None:
        X = preprocess(X)
    return model_angle_stats(model, X, epoch=0)
