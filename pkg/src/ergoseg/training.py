"""Adam, the learning-rate sweep with early stopping, evaluation and prediction."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import Dataset, SkeletonSequence, load_dataset, pad_and_mask
from .layers import EdTcnConfig
from .losses import LossWeights, has_loss, hpa_loss, mtl_loss
from .metrics import MetricsReport, confusion_matrix, video_metrics
from .model import (AssessmentModel, Checkpoint, ModelConfig, Variant, load_checkpoint,
                    save_checkpoint)
from .tensor import Tensor, backward, no_grad, softmax_np

log = logging.getLogger(__name__)

SEED_ENV = "ERGOSEG_SEED"
OUTPUT_ENV = "ERGOSEG_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Every learning rate in the sweep diverged."""


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str, count: int):
        self.name, self.count = name, count
        super().__init__(f"{count} non-finite gradient entries in {name}")


# -- optimizer -----------------------------------------------------------------------
@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place.  Nothing moves if any gradient is non-finite."""
    for name, g in grads.items():
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        if bad:
            raise NonFiniteGradient(name, bad)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- configuration -----------------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    variant: Variant = Variant.MTL_BASE
    learning_rates: tuple[float, ...] = (1e-3, 3e-4)
    batch_size: int = 2
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    weight_init: float = 1.0
    manifest: str | None = None
    checkpoint_dir: str = "runs"
    train_split: str = "train"
    monitor_split: str = "val"
    # architecture
    gcn_channels: tuple[int, ...] = (64, 128, 256)
    pool_width: int = 2048
    tcn_hidden: tuple[int, int] = (64, 96)
    tcn_kernel: int = 9
    dropout: float = 0.3
    regressor_width: int = 256
    lstm_hidden: int = 128
    lstm_layers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not self.learning_rates:
            raise ConfigError("at least one learning rate is required")
        if any(not (lr > 0 and math.isfinite(lr)) for lr in self.learning_rates):
            raise ConfigError("learning rates must be positive and finite")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")

    def model_config(self, num_classes: int) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, num_classes=num_classes, gcn_channels=self.gcn_channels,
            pool_width=self.pool_width,
            tcn=EdTcnConfig(hidden=self.tcn_hidden, kernel=self.tcn_kernel, dropout=self.dropout),
            regressor_width=self.regressor_width, lstm_hidden=self.lstm_hidden,
            lstm_layers=self.lstm_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


_TUPLE_KEYS = {"learning_rates": float, "gcn_channels": int, "tcn_hidden": int}


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(TrainConfig)}[name]
    try:
        if name in _TUPLE_KEYS:
            return tuple(_TUPLE_KEYS[name](x) for x in raw.replace(",", " ").split())
        if "int" in kind and "tuple" not in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    try:
        return replace(base or TrainConfig(), **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def apply_env(config: TrainConfig, environ=os.environ) -> TrainConfig:
    updates = {}
    if environ.get(SEED_ENV):
        updates["seed"] = _coerce("seed", environ[SEED_ENV])
    if environ.get(OUTPUT_ENV):
        updates["checkpoint_dir"] = environ[OUTPUT_ENV]
    return replace(config, **updates) if updates else config


def load_config(path: str | Path, environ=os.environ) -> TrainConfig:
    return apply_env(parse_config(Path(path).read_text()), environ)


# -- loss evaluation ----------------------------------------------------------------------
def loss_parameters(variant: Variant, weights: LossWeights) -> dict[str, Tensor]:
    """Loss weights that take part in optimization for ``variant``."""
    names = {Variant.STL_AS: (), Variant.STL_PA: ("alpha", "beta")}.get(
        variant, ("alpha", "beta", "gamma"))
    return {n: getattr(weights, n) for n in names}


def batch_loss(model: AssessmentModel, weights: LossWeights, batch) -> tuple[Tensor, dict]:
    """Monitored loss: risk loss plus gamma-weighted segmentation loss, or the single head's loss."""
    out = model(batch.joints, batch.mask)
    parts = {}
    has = hpa = None
    if out.logits is not None:
        has = has_loss(out.logits, batch.labels, batch.mask)
        parts["has"] = has.item()
    if out.risk is not None:
        hpa = hpa_loss(out.risk, batch.targets, weights, batch.mask)
        parts["hpa"] = hpa.item()
    if has is not None and hpa is not None:
        total = mtl_loss(hpa, has, weights)
    else:
        total = has if has is not None else hpa
    parts["total"] = total.item()
    return total, {"parts": parts, "output": out}


def _batches(seqs: list[SkeletonSequence], size: int, order=None):
    idx = range(len(seqs)) if order is None else order
    idx = list(idx)
    for i in range(0, len(idx), size):
        yield [seqs[j] for j in idx[i:i + size]]


def _frame_stats(out, batch) -> dict:
    m = batch.mask
    stats = {"frames": int(m.sum())}
    if out.logits is not None:
        pred = out.logits.data.argmax(-1)
        stats["correct"] = int(((pred == batch.labels) & m).sum())
    if out.risk is not None:
        stats["sq_err"] = float((np.where(m, out.risk.data - batch.targets, 0.0) ** 2).sum())
    return stats


def run_epoch(model, weights, seqs, batch_size, ignore_label, *, train: bool, lr=None,
              state=None, rng=None) -> dict:
    """One pass; returns summed loss parts plus frame accuracy and MSE."""
    model.train(train)
    order = rng.permutation(len(seqs)) if (train and rng is not None) else None
    totals: dict[str, float] = {}
    frames = correct = 0
    sq_err = 0.0
    params = {**model.named_parameters(), **{f"loss.{k}": v for k, v in
                                              loss_parameters(model.variant, weights).items()}}
    for group in _batches(seqs, batch_size, order):
        batch = pad_and_mask(group, ignore_label=ignore_label)
        if train:
            loss, info = batch_loss(model, weights, batch)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite training loss {loss.item()}")
            grads = backward(loss)
            adam_step(params, {k: grads[p] for k, p in params.items() if p in grads}, state, lr)
        else:
            with no_grad():
                loss, info = batch_loss(model, weights, batch)
        for k, v in info["parts"].items():
            totals[k] = totals.get(k, 0.0) + v
        s = _frame_stats(info["output"], batch)
        frames += s["frames"]
        correct += s.get("correct", 0)
        sq_err += s.get("sq_err", 0.0)
    if not all(math.isfinite(v) for v in totals.values()):
        raise FloatingPointError(f"non-finite loss {totals}")
    out = {f"loss_{k}": v for k, v in totals.items()}
    if model.variant.has_segmentation:
        out["accuracy"] = correct / frames
    if model.variant.has_risk:
        out["mse"] = sq_err / frames
    return out


# -- fitting -------------------------------------------------------------------------------
class EarlyStopping:
    """Track the best (lowest) monitored loss; signal a stop after ``patience`` stale epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be at least 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch: int | None = None
        self.stale = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; True if it is the new best."""
        self.epoch += 1
        if loss < self.best:
            self.best, self.best_epoch, self.stale = loss, self.epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class SweepRun:
    lr: float
    status: str = "ok"           # ok | diverged | halted
    best_epoch: int | None = None
    best_loss: float = math.inf
    history: list[dict] = field(default_factory=list)
    error: str | None = None


@dataclass
class FitResult:
    model: AssessmentModel
    weights: LossWeights
    best_lr: float
    runs: list[SweepRun]
    checkpoint: Path | None = None

    def history_dict(self) -> dict:
        return {"best_lr": self.best_lr,
                "runs": [asdict(r) for r in self.runs]}


def _snapshot(model, weights) -> dict[str, np.ndarray]:
    snap = {k: p.data.copy() for k, p in model.named_parameters().items()}
    snap.update({f"loss.{k}": p.data.copy() for k, p in weights.named_parameters().items()})
    return snap


def _restore(model, weights, snap) -> None:
    for k, p in model.named_parameters().items():
        p.data = snap[k].copy()
    for k, p in weights.named_parameters().items():
        p.data = snap[f"loss.{k}"].copy()


def init_output_bias(model: AssessmentModel, seqs) -> None:
    """Start the risk output at the mean training target so Adam need not climb to it."""
    if model.regressor is None:
        return
    targets = np.concatenate([s.reba_smooth for s in seqs])
    model.regressor.fc_out.bias.data = np.array([targets.mean()])


def fit(config: TrainConfig, dataset: Dataset | None = None, *, save: bool = True,
        epoch_callback=None) -> FitResult:
    """Train one model per learning rate; keep the best validation checkpoint overall.

    ``epoch_callback(lr, record)`` sees every epoch record; returning a truthy value ends
    the run for that learning rate (the sweep then moves on to the next one).
    """
    if dataset is None:
        if config.manifest is None:
            raise ConfigError("no dataset or manifest given")
        dataset = load_dataset(config.manifest)
    train_seqs = dataset.split(config.train_split)
    monitor = dataset.split(config.monitor_split)
    if not train_seqs:
        raise ConfigError(f"split {config.train_split!r} is empty")
    if not monitor:
        raise ConfigError(f"split {config.monitor_split!r} is empty")
    ignore = dataset.num_classes
    model_cfg = config.model_config(dataset.num_classes)
    runs: list[SweepRun] = []
    best = None  # (loss, lr, snapshot)
    for i, lr in enumerate(config.learning_rates):
        run = SweepRun(lr)
        runs.append(run)
        model = AssessmentModel(model_cfg, dataset.topology, seed=config.seed)
        model.reseed_dropout([config.seed, i, 2])
        init_output_bias(model, train_seqs)
        weights = LossWeights(config.weight_init, config.weight_init, config.weight_init)
        state = AdamState()
        rng = np.random.default_rng([config.seed, i, 3])
        snap = None
        stopper = EarlyStopping(config.patience)
        for epoch in range(1, config.max_epochs + 1):
            try:
                tr = run_epoch(model, weights, train_seqs, config.batch_size, ignore,
                               train=True, lr=lr, state=state, rng=rng)
                va = run_epoch(model, weights, monitor, config.batch_size, ignore, train=False)
            except (FloatingPointError, NonFiniteGradient) as exc:
                run.status, run.error = "diverged", f"epoch {epoch}: {exc}"
                log.warning("lr=%g diverged at epoch %d: %s", lr, epoch, exc)
                break
            record = {"epoch": epoch, **{f"train_{k}": v for k, v in tr.items()},
                      **{f"val_{k}": v for k, v in va.items()}, **weights.values()}
            run.history.append(record)
            halt = bool(epoch_callback(lr, record)) if epoch_callback is not None else False
            if stopper.update(va["loss_total"]):
                snap = _snapshot(model, weights)
            run.best_loss, run.best_epoch = stopper.best, stopper.best_epoch
            if halt:
                run.status = "halted"
                break
            if stopper.should_stop:
                break
        if snap is not None and (best is None or run.best_loss < best[0]):
            best = (run.best_loss, lr, snap)
    if best is None:
        raise DivergenceError("; ".join(f"lr={r.lr:g}: {r.error}" for r in runs))
    model = AssessmentModel(model_cfg, dataset.topology, seed=config.seed)
    weights = LossWeights()
    _restore(model, weights, best[2])
    result = FitResult(model, weights, best[1], runs)
    if save:
        out = Path(config.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out / "best.npz"
        save_checkpoint(result.checkpoint, model, weights.named_parameters(),
                        {"lr": best[1], "train_config": config.to_dict(),
                         "classes": [c.name for c in dataset.classes]})
        (out / "history.json").write_text(json.dumps(result.history_dict(), indent=1) + "\n")
    return result


# -- evaluation and prediction ------------------------------------------------------------------
@dataclass
class Prediction:
    video_id: str
    probs: np.ndarray | None   # (T, Cl)
    labels: np.ndarray | None  # (T,)
    risk: np.ndarray | None    # (T,)


def predict(model: AssessmentModel, sequences) -> list[Prediction]:
    """Per-frame outputs for sequences of any length (each forwarded on its own)."""
    model.eval()
    out = []
    with no_grad():
        for seq in sequences:
            res = model(seq.model_input())
            probs = labels = risk = None
            if res.logits is not None:
                probs = softmax_np(res.logits.data[0], axis=-1)
                labels = probs.argmax(-1)
            if res.risk is not None:
                risk = res.risk.data[0].copy()
            out.append(Prediction(seq.video_id, probs, labels, risk))
    return out


def evaluate(checkpoint, dataset: Dataset, split: str | None = "val") -> MetricsReport:
    """Metrics for every video in ``split`` (``None`` = all videos)."""
    model = checkpoint.model if isinstance(checkpoint, Checkpoint) else checkpoint
    if isinstance(checkpoint, (str, Path)):
        model = load_checkpoint(checkpoint).model
    if model.topology.hash != dataset.topology.hash:
        raise ValueError(f"topology mismatch: checkpoint {model.topology.hash}, "
                         f"dataset {dataset.topology.hash}")
    if model.config.num_classes != dataset.num_classes and model.variant.has_segmentation:
        raise ValueError(f"checkpoint has {model.config.num_classes} classes, "
                         f"dataset {dataset.num_classes}")
    seqs = dataset.sequences if split is None else dataset.split(split)
    if not seqs:
        raise ValueError(f"split {split!r} has no videos")
    preds = predict(model, seqs)
    videos = []
    cm = None
    if model.variant.has_segmentation:
        cm = np.zeros((dataset.num_classes, dataset.num_classes), dtype=np.int64)
    for seq, p in zip(seqs, preds):
        if model.variant.has_risk and seq.reba_smooth is None:
            raise ValueError(f"{seq.video_id}: no REBA targets to score against")
        videos.append(video_metrics(
            seq.video_id,
            labels=seq.labels if p.probs is not None else None, probs=p.probs,
            target=seq.reba_smooth if p.risk is not None else None, risk=p.risk))
        if cm is not None:
            cm += confusion_matrix(p.labels, seq.labels, dataset.num_classes)
    return MetricsReport(model.variant.value, videos, cm)
