"""Losses, Adam/AdamW, plateau scheduling, early stopping, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import MetricsReport, classification_report, regression_report
from .models import GraphModel, ModelConfig, Sample, build_model, make_batch

log = logging.getLogger(__name__)

IMPROVEMENT_EPS = 1e-8


# losses

def nll_loss(log_probs, labels) -> Tensor:
    """Mean of -log_probs[n, labels[n]]."""
    lp = ad.as_tensor(log_probs)
    labels = np.asarray(labels, dtype=np.int64)
    if lp.ndim != 2 or labels.shape != (lp.shape[0],):
        raise ad.ShapeError("nll_loss expects an (N, C) matrix and N labels")
    if labels.size and (labels.min() < 0 or labels.max() >= lp.shape[1]):
        raise ValueError(f"labels must lie in [0, {lp.shape[1]})")
    picked = lp[np.arange(labels.size), labels]
    return -ad.mean(picked)


def mse_loss(pred, target) -> Tensor:
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mse_loss got shapes {pred.shape} and {target.shape}")
    diff = pred - target
    return ad.mean(diff * diff)


# optimizer

@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam (coupled L2) or adamw (decoupled decay)
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
                   state: AdamState, config: OptimizerConfig, lr: float | None = None) -> AdamState:
    """One bias-corrected Adam/AdamW update, applied to ``params`` in place.

    AdamW shrinks each parameter by ``lr * weight_decay`` before the Adam
    term; plain Adam adds ``weight_decay * p`` to the gradient instead.
    """
    lr = config.lr if lr is None else lr
    if config.kind not in ("adam", "adamw"):
        raise ValueError(f"unknown optimizer {config.kind!r}")
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise ad.NonFiniteError("non-finite gradient passed to optimizer_step")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for k, p in enumerate(params):
        g = np.zeros_like(p) if grads[k] is None else grads[k]
        if config.kind == "adam" and config.weight_decay:
            g = g + config.weight_decay * p
        if config.kind == "adamw" and config.weight_decay:
            p -= lr * config.weight_decay * p
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1 ** t)
        v_hat = state.v[k] / (1 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return state


class Optimizer:
    """Adam/AdamW bound to a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.lr = config.lr
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self) -> None:
        optimizer_step([p.data for p in self.params], [p.grad for p in self.params],
                       self.state, self.config, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# schedule and stopping

def _improved(metric: float, best: float | None, maximize: bool) -> bool:
    if best is None:
        return True
    return metric > best + IMPROVEMENT_EPS if maximize else metric < best - IMPROVEMENT_EPS


@dataclass
class PlateauScheduler:
    """Divide the lr by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 5.0
    patience: int = 10
    maximize: bool = True
    best: float | None = None
    bad_epochs: int = 0

    def __post_init__(self):
        if self.factor <= 1:
            raise ValueError("plateau factor must be > 1")
        if self.patience < 1:
            raise ValueError("plateau patience must be >= 1")

    def step(self, metric: float) -> float:
        if _improved(metric, self.best, self.maximize):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr /= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class EarlyStopping:
    """Tracks the best validation metric and a snapshot of the parameters that reached it."""

    patience: int = 20
    maximize: bool = True
    best: float | None = None
    best_epoch: int = -1
    bad_epochs: int = 0
    best_state: list | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("early stopping patience must be >= 1")

    def update(self, metric: float, epoch: int, params: Sequence[Tensor] = ()) -> str:
        if _improved(metric, self.best, self.maximize):
            self.best = metric
            self.best_epoch = epoch
            self.bad_epochs = 0
            self.best_state = [p.data.copy() for p in params]
            return "continue"
        self.bad_epochs += 1
        return "stop" if self.bad_epochs >= self.patience else "continue"

    def restore(self, params: Sequence[Tensor]) -> None:
        if self.best_state is None:
            return
        for p, saved in zip(params, self.best_state):
            p.data[...] = saved


# training loop

@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 0.0
    batch_size: int = 16
    max_epochs: int = 200
    early_stop_patience: int = 20
    scheduler: str = "plateau"  # plateau or none
    plateau_factor: float = 5.0
    plateau_patience: int = 10
    loss: str = "nll"  # nll or mse
    seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if not self.lr >= 0:
            errors.append("train.lr must be >= 0")
        if self.optimizer not in ("adam", "adamw"):
            errors.append(f"train.optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if self.weight_decay < 0:
            errors.append("train.weight_decay must be >= 0")
        if self.batch_size < 1:
            errors.append("train.batch_size must be >= 1")
        if self.max_epochs < 0:
            errors.append("train.max_epochs must be >= 0")
        if self.early_stop_patience < 1:
            errors.append("train.early_stop_patience must be >= 1")
        if self.scheduler not in ("plateau", "none"):
            errors.append(f"train.scheduler must be 'plateau' or 'none', got {self.scheduler!r}")
        if self.plateau_factor <= 1:
            errors.append("train.plateau_factor must be > 1")
        if self.plateau_patience < 1:
            errors.append("train.plateau_patience must be >= 1")
        if self.loss not in ("nll", "mse"):
            errors.append(f"train.loss must be 'nll' or 'mse', got {self.loss!r}")
        return errors

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: GraphModel
    history: list[dict]
    report: MetricsReport
    best_epoch: int
    initial_train_loss: float
    stopped_early: bool = False
    extra: dict = field(default_factory=dict)


def _loss(model: GraphModel, out: Tensor, y: np.ndarray, kind: str) -> Tensor:
    if kind == "nll":
        return nll_loss(out, y.astype(np.int64))
    return mse_loss(out, y.astype(np.float64))


def predict(model: GraphModel, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    """Model outputs in evaluation mode, concatenated over batches."""
    outs = []
    with ad.no_grad():
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start:start + batch_size], model.config.needs_dag)
            outs.append(model.forward(batch).data)
    if not outs:
        return np.zeros((0,) if model.config.num_classes is None else (0, model.config.num_classes))
    return np.concatenate(outs, axis=0)


def evaluate(model: GraphModel, samples: Sequence[Sample], loss: str | None = None,
             batch_size: int = 64) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty split")
    out = predict(model, samples, batch_size)
    y = np.array([s.y for s in samples])
    loss = loss or ("mse" if model.config.num_classes is None else "nll")
    value = _loss(model, ad.Tensor(out), y, loss).item()
    if model.config.num_classes is None:
        return regression_report(out, y, value)
    return classification_report(out.argmax(axis=1), y.astype(np.int64),
                                 model.config.num_classes, value)


def _monitor(model: GraphModel, report: MetricsReport) -> float:
    if model.config.num_classes is None:
        return report.loss
    return report.balanced_accuracy


def train(model: GraphModel, train_set: Sequence[Sample], val_set: Sequence[Sample],
          config: TrainConfig, test_set: Sequence[Sample] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Mini-batch training with seeded shuffling, validation, plateau lr and early stopping.

    The validation metric is balanced accuracy (maximized) for classification
    and the validation loss (minimized) for regression. When ``val_set`` is
    empty the training loss is monitored instead. Parameters from the best
    epoch are restored before the final report on ``test_set`` (or the
    validation set when no test set is given).
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    if not train_set:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = Optimizer(params, OptimizerConfig(config.optimizer, config.lr, config.weight_decay))
    maximize = model.config.num_classes is not None and bool(val_set)
    sched = PlateauScheduler(config.lr, config.plateau_factor, config.plateau_patience, maximize)
    stopper = EarlyStopping(config.early_stop_patience, maximize)
    initial = evaluate(model, train_set, config.loss).loss
    history: list[dict] = []
    stopped = False
    n = len(train_set)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = make_batch([train_set[i] for i in idx], model.config.needs_dag)
            opt.zero_grad()
            loss = _loss(model, model.forward(batch, train=True, rng=rng), batch.y, config.loss)
            if not np.isfinite(loss.item()):
                raise ad.NonFiniteError(f"non-finite training loss at epoch {epoch}, batch {start}")
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        record = {"epoch": epoch, "train_loss": total / n, "lr": opt.lr}
        if val_set:
            val = evaluate(model, val_set, config.loss)
            record["val_loss"] = val.loss
            metric = _monitor(model, val)
        else:
            metric = record["train_loss"]
        record["val_metric"] = metric
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.scheduler == "plateau":
            sched.lr = opt.lr
            opt.lr = sched.step(metric)
        if stopper.update(metric, epoch, params) == "stop":
            stopped = True
            break
    stopper.restore(params)
    final_split = test_set if test_set else (val_set if val_set else train_set)
    report = evaluate(model, final_split, config.loss)
    return TrainResult(model, history, report, stopper.best_epoch, initial, stopped)


# checkpoints

def save_checkpoint(model: GraphModel, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.f64`` (little-endian float64 vector).

    The manifest lists every parameter's dotted name, shape and offset into the
    flat vector in traversal order, plus the model configuration.
    """
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, t in model.named_parameters():
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "size": t.size})
        chunks.append(np.asarray(t.data, dtype="<f8").ravel())
        offset += t.size
    manifest = {"format": "flat-float64-le", "model": model.config.to_dict(),
                "num_values": offset, "params": entries}
    man_path = path.with_suffix(".json")
    bin_path = path.with_suffix(".f64")
    man_path.write_text(json.dumps(manifest, indent=2) + "\n")
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    bin_path.write_bytes(flat.tobytes())
    return man_path, bin_path


def load_checkpoint(path: str | Path) -> GraphModel:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".f64").read_bytes(), dtype="<f8")
    if flat.size != manifest["num_values"]:
        raise ValueError(f"checkpoint holds {flat.size} values, manifest expects "
                         f"{manifest['num_values']}")
    model = build_model(ModelConfig(**manifest["model"]), seed=0)
    named = dict(model.named_parameters())
    for e in manifest["params"]:
        if e["name"] not in named:
            raise ValueError(f"checkpoint parameter {e['name']!r} does not exist in the model")
        t = named[e["name"]]
        if list(t.shape) != e["shape"]:
            raise ValueError(f"shape mismatch for {e['name']}: {t.shape} vs {e['shape']}")
        t.data[...] = flat[e["offset"]:e["offset"] + e["size"]].reshape(t.shape)
    return model
