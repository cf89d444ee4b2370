"""ROC AUC, F1 and bag/instance evaluation."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax
from scipy.stats import rankdata

from .data import ConfigurationError

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """AUC requested for labels containing a single class."""


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for tied scores."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_per_class(pred, truth, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.size != truth.size:
        raise ValueError(f"{pred.size} predictions vs {truth.size} labels")
    out = np.zeros(num_classes)
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        if tp + fp + fn == 0:
            warnings.warn(f"class {c} absent from predictions and truth; F1 counted as 0", stacklevel=3)
            continue
        out[c] = 2 * tp / (2 * tp + fp + fn)
    return out


def f1_macro(pred, truth, num_classes: int) -> float:
    return float(f1_per_class(pred, truth, num_classes).mean())


def ovr_auc(scores: np.ndarray, truth, num_classes: int) -> tuple[float, np.ndarray]:
    """Macro one-vs-rest AUC; classes without both outcomes are NaN and skipped.

    With softmax bag scores the binary macro value equals the positive-class AUC.
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth).reshape(-1)
    per = np.full(num_classes, np.nan)
    for c in range(num_classes):
        try:
            per[c] = roc_auc(scores[:, c], truth == c)
        except UndefinedMetricError:
            logger.debug("class %d has a single outcome; AUC skipped", c)
    valid = per[~np.isnan(per)]
    return (float(valid.mean()) if valid.size else float("nan")), per


@dataclass
class LevelReport:
    auc: float
    f1: float
    per_class_auc: list[float] = field(default_factory=list)
    per_class_f1: list[float] = field(default_factory=list)
    count: int = 0


@dataclass
class EvalReport:
    bag: LevelReport
    instance: LevelReport | None = None

    @property
    def bag_auc(self) -> float:
        return self.bag.auc

    @property
    def bag_f1(self) -> float:
        return self.bag.f1

    @property
    def inst_auc(self) -> float:
        return self.instance.auc if self.instance else float("nan")

    @property
    def inst_f1(self) -> float:
        return self.instance.f1 if self.instance else float("nan")

    def flat(self) -> dict[str, float]:
        out = {"bag_auc": self.bag_auc, "bag_f1": self.bag_f1, "inst_auc": self.inst_auc, "inst_f1": self.inst_f1}
        out["bag_count"] = self.bag.count
        out["inst_count"] = self.instance.count if self.instance else 0
        for name, level in (("bag", self.bag), ("inst", self.instance)):
            if level is None:
                continue
            for c, v in enumerate(level.per_class_auc):
                out[f"{name}_auc_c{c}"] = v
            for c, v in enumerate(level.per_class_f1):
                out[f"{name}_f1_c{c}"] = v
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k}: {_fmt(v)}" for k, v in self.flat().items())


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6f}"


def level_report(scores: np.ndarray, truth, num_classes: int) -> LevelReport:
    truth = np.asarray(truth).reshape(-1)
    auc, per_auc = ovr_auc(scores, truth, num_classes)
    pred = np.asarray(scores).argmax(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        per_f1 = f1_per_class(pred, truth, num_classes)
    return LevelReport(auc, float(per_f1.mean()), per_auc.tolist(), per_f1.tolist(), int(truth.size))


def predict_bags(model, bags):
    """Softmax bag probabilities and (when the model has attention) instance probabilities per bag."""
    from .model import forward

    bag_probs, inst_probs = [], []
    for bag in bags:
        out = forward(model, bag.features, bag.coords)
        bag_probs.append(softmax(out.logits.data.astype(np.float64)))
        if out.scores is not None:
            s = out.scores.s.data.astype(np.float64)
            inst_probs.append(expit(s))
        else:
            inst_probs.append(None)
    return np.array(bag_probs), inst_probs


def evaluate(model, bags, level: str = "both") -> EvalReport:
    """Bag-level report, plus the pooled instance-level report when requested and possible.

    ``level`` is ``"bag"``, ``"instance"`` (which raises when truth or attention
    is missing) or ``"both"`` (instance report only when available).
    """
    c = model.config.num_classes
    bag_probs, inst = predict_bags(model, bags)
    report = EvalReport(bag=level_report(bag_probs, [b.label for b in bags], c))
    if level == "bag":
        return report
    available = all(b.instance_truth is not None for b in bags) and all(p is not None for p in inst)
    if not available:
        if level == "instance":
            raise ConfigurationError("instance-level evaluation needs instance_truth and an attention model")
        return report
    scores = np.concatenate(inst, axis=0)
    truth = np.concatenate([b.instance_truth for b in bags])
    report.instance = level_report(scores, truth, c)
    return report
