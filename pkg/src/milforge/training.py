"""AdamW + cosine annealing with gradient accumulation, early stopping and CFSD regimes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .cfsd import ThresholdSchedule, instance_loss, select_top_p
from .data import Bag, ConfigurationError
from .metrics import EvalReport, evaluate
from .model import MILModel, forward, instance_probs, save_checkpoint

logger = logging.getLogger(__name__)

CFSD_MODES = ("off", "parallel", "finetune")
HISTORY_COLUMNS = (
    "epoch", "lr", "bag_loss", "inst_loss", "val_bag_auc", "val_bag_f1", "val_inst_auc", "val_inst_f1", "p_threshold",
)


class NumericalError(FloatingPointError):
    """Training hit a NaN/Inf loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-2
    accumulation: int = 32
    max_epochs: int = 150
    patience: int = 15
    cfsd: str = "off"
    warmup: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.cfsd not in CFSD_MODES:
            raise ConfigurationError(f"unknown cfsd mode {self.cfsd!r}")
        if self.accumulation < 1:
            raise ConfigurationError("accumulation must be >= 1")
        if self.patience >= self.max_epochs:
            raise ConfigurationError("patience must be smaller than max_epochs")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adamw_step(
    params: dict[str, T.Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 1e-2,
) -> OptimizerState:
    """One AdamW update with bias-corrected moments and decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        theta = p.data
        p.data = (theta - lr * update - lr * weight_decay * theta).astype(theta.dtype, copy=False)
    return state


def cosine_lr(epoch: int, max_epochs: int, lr_max: float) -> float:
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    return lr_max * (1 + math.cos(math.pi * epoch / max_epochs)) / 2


@dataclass
class EarlyStopping:
    patience: int
    best: float = -math.inf
    best_epoch: int = 0
    counter: int = 0

    def update(self, metric: float, epoch: int) -> bool:
        """Record ``metric`` for ``epoch``; True when training should stop."""
        if metric > self.best:
            self.best, self.best_epoch, self.counter = metric, epoch, 0
            return False
        self.counter += 1
        return self.counter >= self.patience


@dataclass
class EpochReport:
    epoch: int
    lr: float
    bag_loss: float
    inst_loss: float
    n_selected: int
    val: EvalReport | None = None
    p_threshold: float = float("nan")

    def row(self) -> dict:
        val = self.val
        return {
            "epoch": self.epoch,
            "lr": self.lr,
            "bag_loss": self.bag_loss,
            "inst_loss": self.inst_loss,
            "val_bag_auc": val.bag_auc if val else float("nan"),
            "val_bag_f1": val.bag_f1 if val else float("nan"),
            "val_inst_auc": val.inst_auc if val else float("nan"),
            "val_inst_f1": val.inst_f1 if val else float("nan"),
            "p_threshold": self.p_threshold,
        }


def bag_loss_terms(model: MILModel, bag: Bag, p: float | None):
    """Forward one bag and build (total, bag loss, instance loss or None, selection size)."""
    out = forward(model, bag.features, bag.coords)
    l_bag = T.cross_entropy(out.logits, bag.label)
    if p is None:
        return l_bag, l_bag, None, 0
    if out.scores is None:
        raise ConfigurationError(f"{model.config.kind} has no attention network for CFSD")
    s = out.scores.s
    idx, pseudo = select_top_p(bag.label, s.data, p)
    l_inst = instance_loss(instance_probs(T.take_rows(s, idx)), pseudo)
    return T.add(l_bag, l_inst), l_bag, l_inst, int(idx.size)


def train_epoch(
    model: MILModel,
    bags: Sequence[Bag],
    config: TrainConfig,
    state: OptimizerState,
    epoch: int,
    lr: float,
    p: float | None = None,
    stream: int = 0,
) -> EpochReport:
    """One pass over ``bags`` in a seeded shuffle, stepping every ``accumulation`` bags.

    ``p`` is the CFSD selection fraction, or None when instance supervision is off.
    """
    order = np.random.default_rng([config.seed, stream, epoch]).permutation(len(bags))
    model.zero_grad()
    pending = 0
    bag_total = inst_total = 0.0
    selected = 0
    for pos, i in enumerate(order):
        bag = bags[i]
        try:
            with T.Tape() as tape:
                loss, l_bag, l_inst, n_sel = bag_loss_terms(model, bag, p)
            tape.backward(loss)
        except T.NonFiniteError as exc:
            raise NumericalError(f"bag {bag.id}: {exc}") from exc
        bag_total += float(l_bag.data)
        if l_inst is not None:
            inst_total += float(l_inst.data)
        selected += n_sel
        pending += 1
        if pending == config.accumulation or pos == len(order) - 1:
            _step(model, state, lr, config.weight_decay, pending)
            pending = 0
    n = max(len(bags), 1)
    return EpochReport(epoch, lr, bag_total / n, inst_total / n, selected, p_threshold=p if p is not None else float("nan"))


def _step(model: MILModel, state: OptimizerState, lr: float, wd: float, count: int) -> None:
    grads = {}
    for name, prm in model.params.items():
        if prm.grad is not None:
            grads[name] = prm.grad / prm.grad.dtype.type(count)
    adamw_step(model.params, grads, state, lr, wd)
    model.zero_grad()


@dataclass
class PhaseResult:
    name: str
    history: list[EpochReport]
    best_epoch: int
    best_metric: float
    best_state: dict[str, np.ndarray]
    stopped_early: bool


@dataclass
class FitResult:
    phases: list[PhaseResult]
    model: MILModel
    report: EvalReport | None = None

    @property
    def best(self) -> PhaseResult:
        return self.phases[-1]

    @property
    def history(self) -> list[EpochReport]:
        return [r for ph in self.phases for r in ph.history]


def run_phase(
    model: MILModel,
    train: Sequence[Bag],
    val: Sequence[Bag],
    config: TrainConfig,
    cfsd_from: int | None,
    name: str,
    stream: int,
    on_epoch=None,
) -> PhaseResult:
    """Train until early stop or ``max_epochs``; CFSD is active from epoch ``cfsd_from`` (1-based) on."""
    state = OptimizerState()
    stopper = EarlyStopping(config.patience)
    schedule = ThresholdSchedule()
    history: list[EpochReport] = []
    best_state = model.state()
    stopped = False
    logger.info("phase %s: %d train / %d val bags", name, len(train), len(val))
    for epoch in range(1, config.max_epochs + 1):
        lr = cosine_lr(epoch - 1, config.max_epochs, config.lr)
        active = cfsd_from is not None and epoch >= cfsd_from
        rep = train_epoch(model, train, config, state, epoch, lr, schedule.p if active else None, stream)
        rep.val = evaluate(model, val)
        metric = rep.val.bag_auc
        if not math.isfinite(metric):
            raise NumericalError(f"validation metric is not finite at epoch {epoch}")
        if active:
            schedule.step_epoch(metric)
        history.append(rep)
        improved = metric > stopper.best
        stop = stopper.update(metric, epoch)
        if improved:
            best_state = model.state()
        logger.info(
            "phase %s epoch %d lr=%.2e bag_loss=%.4f inst_loss=%.4f val_bag_auc=%.4f val_inst_auc=%.4f p=%s",
            name, epoch, lr, rep.bag_loss, rep.inst_loss, metric, rep.val.inst_auc,
            f"{rep.p_threshold:.2f}" if active else "-",
        )
        if on_epoch is not None:
            on_epoch(rep)
        if stop:
            stopped = True
            break
    return PhaseResult(name, history, stopper.best_epoch, stopper.best, best_state, stopped)


def fit_holdout(
    model: MILModel,
    train: Sequence[Bag],
    val: Sequence[Bag],
    config: TrainConfig,
    on_epoch=None,
) -> FitResult:
    """Train ``model`` in place and leave it holding the selected best checkpoint."""
    if not train or not val:
        raise ConfigurationError("empty training or validation fold")
    for bag in list(train) + list(val):
        if bag.features.shape[1] != model.config.feature_dim:
            raise T.DimensionError(f"bag {bag.id} feature dim {bag.features.shape[1]} != {model.config.feature_dim}")
    if config.cfsd != "off" and not model.config.has_attention:
        raise ConfigurationError(f"CFSD needs an attention model, got {model.config.kind}")
    phases = []
    if config.cfsd == "finetune":
        first = run_phase(model, train, val, config, None, "A", 0, on_epoch)
        phases.append(first)
        model.load_state(first.best_state)
        phases.append(run_phase(model, train, val, config, 1, "B", 1, on_epoch))
    else:
        cfsd_from = config.warmup + 1 if config.cfsd == "parallel" else None
        phases.append(run_phase(model, train, val, config, cfsd_from, "main", 0, on_epoch))
    model.load_state(phases[-1].best_state)
    return FitResult(phases, model, evaluate(model, val))


def fit(
    model_factory,
    bags: Sequence[Bag],
    folds: list[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    run_dir: Path | None = None,
) -> list[FitResult]:
    """Train one fresh model per (train, val) index pair, writing artifacts under ``run_dir``."""
    results = []
    for f, (tr, va) in enumerate(folds):
        if len(tr) == 0 or len(va) == 0:
            raise ConfigurationError(f"fold {f} is empty")
        model = model_factory()
        fold_dir = None
        writer = None
        if run_dir is not None:
            fold_dir = Path(run_dir) / (f"fold{f}" if len(folds) > 1 else "")
            fold_dir.mkdir(parents=True, exist_ok=True)
            writer = HistoryWriter(fold_dir / "history.csv")
        res = fit_holdout(model, [bags[i] for i in tr], [bags[i] for i in va], config, writer)
        if fold_dir is not None:
            save_checkpoint(fold_dir / "best.milw", res.model)
            append_results(Path(run_dir) / "results.csv", res.report, fold=f)
        results.append(res)
    return results


class HistoryWriter:
    """Callable that appends one CSV row per epoch report."""

    def __init__(self, path: Path):
        self.path = Path(path)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(HISTORY_COLUMNS)

    def __call__(self, rep: EpochReport) -> None:
        row = rep.row()
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_csv_value(row[c]) for c in HISTORY_COLUMNS])


def _csv_value(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


RESULT_COLUMNS = ("fold", "bag_auc", "bag_f1", "inst_auc", "inst_f1", "bag_count", "inst_count")


def append_results(path: Path, report: EvalReport, fold: int = 0) -> None:
    path = Path(path)
    new = not path.exists()
    flat = report.flat()
    flat["fold"] = fold
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        w.writerow([_csv_value(flat[c]) for c in RESULT_COLUMNS])
