"""MAE regression training: Adam, plateau LR halving, early stopping, multi-seed runs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSplits, MultimodalSample, batch_iterator
from .metrics import METRIC_NAMES, MetricsReport, compute_metrics
from .model import MMLatchModel, ModelConfig
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    initial_lr: float = 5e-4
    lr_halve_patience: int = 2
    early_stop_patience: int = 10
    dropout: float = 0.2
    hidden: int = 100
    max_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    feedback: str = "lstm"
    feedback_init: str = "zero"
    # minimum validation MAE decrease that counts as an improvement
    improvement_tol: float = 1e-6

    def __post_init__(self):
        if self.lr_halve_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patiences must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.batch_size < 1 or self.hidden < 1 or self.max_epochs < 0:
            raise ValueError("batch_size and hidden must be >= 1, max_epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})

    def model_config(self, dims: dict[str, int]) -> ModelConfig:
        return ModelConfig(dims=dict(dims), hidden=self.hidden, dropout=self.dropout,
                           feedback=self.feedback, feedback_init=self.feedback_init, seed=self.seed)


def build_model(config: TrainConfig, dims: dict[str, int]) -> MMLatchModel:
    return MMLatchModel(config.model_config(dims))


def mae_loss(pred: Tensor, target) -> Tensor:
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mae_loss: prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("mae_loss on an empty batch")
    return T.mean(T.abs_(pred - target))


class Adam:
    """Adam with bias correction. ``step`` consumes and then clears the gradients."""

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for name, p in self.params:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def predict(model: MMLatchModel, samples: Sequence[MultimodalSample], batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for batch in batch_iterator(samples, batch_size):
            out.append(model(batch, training=False).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(model: MMLatchModel, samples: Sequence[MultimodalSample], batch_size: int = 64) -> MetricsReport:
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    labels = np.array([s.label for s in samples])
    return compute_metrics(predict(model, samples, batch_size), labels)


def _mae(model, samples, batch_size) -> float:
    labels = np.array([s.label for s in samples])
    return float(np.mean(np.abs(predict(model, samples, batch_size) - labels)))


class Plateau:
    """Validation bookkeeping: when to halve the learning rate and when to stop.

    An epoch improves when its loss beats the best so far by more than
    ``tol``. ``update`` reports (improved, halve, stop): halve after
    ``halve_patience`` non-improving epochs since the last improvement or
    halving, stop after ``stop_patience`` consecutive non-improving epochs.
    """

    def __init__(self, halve_patience: int, stop_patience: int, tol: float = 1e-6):
        self.halve_patience = halve_patience
        self.stop_patience = stop_patience
        self.tol = tol
        self.best = math.inf
        self.bad_epochs = 0
        self._since_halving = 0

    def update(self, loss: float) -> tuple[bool, bool, bool]:
        improved = loss < self.best - self.tol
        if improved:
            self.best = loss
            self.bad_epochs = self._since_halving = 0
        else:
            self.bad_epochs += 1
            self._since_halving += 1
        stop = self.bad_epochs >= self.stop_patience
        halve = not stop and self._since_halving >= self.halve_patience
        if halve:
            self._since_halving = 0
        return improved, halve, stop


def _run_epoch(model, optimizer, train_set, val_set, config, epoch) -> tuple[float, float]:
    """One pass over shuffled training batches; returns (mean train MAE, val MAE).

    Any non-finite loss, gradient or activation surfaces as FloatingPointError.
    """
    total, count = 0.0, 0
    for batch in batch_iterator(train_set, config.batch_size, shuffle=True, seed=[config.seed, epoch]):
        loss = mae_loss(model(batch, training=True), batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError("non-finite training loss")
        T.backward(loss)
        optimizer.step()
        total += value * len(batch)
        count += len(batch)
    val_mae = _mae(model, val_set, config.batch_size)
    if not math.isfinite(val_mae):
        raise FloatingPointError("non-finite validation MAE")
    return total / count, val_mae


def train(model: MMLatchModel, train_set: Sequence[MultimodalSample], val_set: Sequence[MultimodalSample],
          config: TrainConfig) -> tuple[MMLatchModel, list[dict]]:
    """Fit ``model`` in place and return it with the per-epoch history.

    The learning rate is halved after ``lr_halve_patience`` consecutive epochs
    without validation improvement, training stops after
    ``early_stop_patience`` such epochs, and the best-validation parameters
    are restored at the end.
    """
    history: list[dict] = []
    if config.max_epochs == 0:
        return model, history
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    optimizer = Adam(model.named_parameters(), lr=config.initial_lr)
    model.reseed_dropout([config.seed, 2])
    plateau = Plateau(config.lr_halve_patience, config.early_stop_patience, config.improvement_tol)
    best_state = model.state_dict()
    for epoch in range(1, config.max_epochs + 1):
        lr = optimizer.lr
        try:
            # overflow shows up as non-finite values and is reported as TrainingDiverged
            with np.errstate(over="ignore", invalid="ignore"):
                train_mae, val_mae = _run_epoch(model, optimizer, train_set, val_set, config, epoch)
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
        improved, halve, stop = plateau.update(val_mae)
        if improved:
            best_state = model.state_dict()
        history.append({"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae, "lr": lr,
                        "improved": improved})
        logger.debug("epoch %d train %.4f val %.4f lr %.2e", epoch, train_mae, val_mae, lr)
        if stop:
            break
        if halve:
            optimizer.lr = lr / 2.0
    model.load_state_dict(best_state)
    return model, history


def history_csv(history: Sequence[dict]) -> str:
    lines = ["epoch,train_mae,val_mae,lr"]
    for h in history:
        lines.append(f"{h['epoch']},{h['train_mae']!r},{h['val_mae']!r},{h['lr']!r}")
    return "\n".join(lines) + "\n"


@dataclass
class SeedRun:
    seed: int
    report: MetricsReport | None
    history: list[dict]
    model: MMLatchModel | None = None
    error: str | None = None


@dataclass
class ExperimentSummary:
    runs: list[SeedRun]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    # a single completed run has no spread; std is reported as 0 and this is set
    std_undefined: bool = False
    best_seed: int | None = None

    @property
    def best(self) -> SeedRun | None:
        return next((r for r in self.runs if r.seed == self.best_seed), None)

    def table(self) -> str:
        """Markdown rows: mean +- std over seeds, then the best (lowest MAE) run."""
        header = "| Model | " + " | ".join(METRIC_NAMES) + " |"
        rows = [header, "|" + "---|" * (len(METRIC_NAMES) + 1)]
        mark = "*" if self.std_undefined else ""
        rows.append("| average | " + " | ".join(
            f"{self.mean[m]:.4f} ± {self.std[m]:.4f}{mark}" for m in METRIC_NAMES) + " |")
        if self.best is not None:
            rows.append("| best | " + " | ".join(
                f"{getattr(self.best.report, m):.4f}" for m in METRIC_NAMES) + " |")
        failed = [r.seed for r in self.runs if r.report is None]
        notes = []
        if self.std_undefined:
            notes.append("* single run: standard deviation undefined, shown as 0")
        if failed:
            notes.append(f"failed seeds: {failed}")
        return "\n".join(rows + notes) + "\n"


def summarize(runs: list[SeedRun]) -> ExperimentSummary:
    done = [r for r in runs if r.report is not None]
    summary = ExperimentSummary(runs=runs)
    if not done:
        return summary
    for m in METRIC_NAMES:
        values = np.array([getattr(r.report, m) for r in done])
        summary.mean[m] = float(np.mean(values))
        summary.std[m] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    summary.std_undefined = len(done) == 1
    summary.best_seed = min(done, key=lambda r: r.report.mae).seed
    return summary


def run_experiment(config: TrainConfig, n_seeds: int, splits: DatasetSplits,
                   eval_split: str = "test", keep_models: bool = False) -> ExperimentSummary:
    """Train one model per seed 0..n_seeds-1 and aggregate the evaluation metrics."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    runs = []
    for seed in range(n_seeds):
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": seed})
        model = build_model(cfg, splits.dims)
        try:
            model, history = train(model, splits.train, splits.val, cfg)
        except (TrainingDiverged, FloatingPointError) as exc:
            logger.warning("seed %d aborted: %s", seed, exc)
            runs.append(SeedRun(seed, None, getattr(exc, "history", []), error=str(exc)))
            continue
        report = evaluate(model, splits.split(eval_split), cfg.batch_size)
        runs.append(SeedRun(seed, report, history, model if keep_models else None))
    return summarize(runs)
