"""ROC/AUC scoring and probability-averaging ensembles.

AUC uses the rank statistic with midranks for tied scores:

    AUC = (R_pos - P(P+1)/2) / (P * N)

where R_pos sums the (mid)ranks of the positive scores. This equals the
pairwise win rate (ties at half weight), and the trapezoidal area under the
reported ROC points reproduces it exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import features as features_mod
from . import net
from .errors import DataError, MetricError
from .fileio import atomic_write_text


@dataclass(frozen=True)
class Prediction:
    clip_id: str
    probability: float

    def __post_init__(self) -> None:
        if not np.isfinite(self.probability) or not (0.0 <= self.probability <= 1.0):
            raise DataError(f"clip {self.clip_id!r}: probability {self.probability} outside [0, 1]")


@dataclass
class EvalReport:
    auc: float
    roc_points: list[tuple[float, float]]  # (false-positive rate, true-positive rate)
    n_pos: int
    n_neg: int


def _midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied scores sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(predictions: Sequence[Prediction], labels: Mapping[str, int]) -> EvalReport:
    """Rank-statistic AUC plus the ROC curve over all unique thresholds."""
    if not predictions:
        raise MetricError("no predictions to evaluate")
    missing = [p.clip_id for p in predictions if p.clip_id not in labels]
    if missing:
        raise DataError(f"predictions reference unlabeled clips: {sorted(missing)[:5]}")
    scores = np.array([p.probability for p in predictions], dtype=np.float64)
    y = np.array([labels[p.clip_id] for p in predictions], dtype=np.int64)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError(f"AUC undefined: {n_pos} positives, {n_neg} negatives")

    ranks = _midranks(scores)
    rank_sum = float(ranks[y == 1].sum())
    auc_value = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # ROC from unique thresholds, descending; ties produce diagonal segments.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_y = y[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    cuts = np.concatenate([boundaries, [y.size]])
    tp = np.cumsum(sorted_y)[cuts - 1]
    fp = cuts - tp
    roc = [(0.0, 0.0)] + [(f / n_neg, t / n_pos) for f, t in zip(fp, tp)]
    return EvalReport(auc=float(auc_value), roc_points=roc, n_pos=n_pos, n_neg=n_neg)


def ensemble_average(prediction_sets: Sequence[Sequence[Prediction]]) -> list[Prediction]:
    """Per-clip arithmetic mean of probabilities across prediction sets.

    The mean is computed relative to the first set's value so that averaging
    identical sets returns those probabilities bit-exactly.
    """
    if not prediction_sets:
        raise DataError("no prediction sets to ensemble")
    base = {p.clip_id: p.probability for p in prediction_sets[0]}
    ids = set(base)
    deltas = {clip_id: 0.0 for clip_id in ids}
    for k, preds in enumerate(prediction_sets[1:], start=2):
        seen = {p.clip_id for p in preds}
        if seen != ids:
            raise DataError(f"prediction set {k} covers different clips than set 1")
        for p in preds:
            deltas[p.clip_id] += p.probability - base[p.clip_id]
    n = len(prediction_sets)
    return [
        Prediction(clip_id=clip_id, probability=base[clip_id] + deltas[clip_id] / n)
        for clip_id in sorted(ids)
    ]


# --- batch orchestration ---------------------------------------------------------


def predict_features(
    model: net.CrnnModel,
    feature_list: Iterable[features_mod.FeatureMatrix],
    stats: features_mod.NormStats | None = None,
) -> list[Prediction]:
    out = []
    for fm in feature_list:
        if stats is not None:
            fm = features_mod.normalize(fm, stats)
        p, _ = net.forward(model, fm.values, mode="infer")
        out.append(Prediction(clip_id=fm.clip_id, probability=p))
    return sorted(out, key=lambda p: p.clip_id)


def save_predictions(predictions: Sequence[Prediction], path: Path | str) -> None:
    lines = ["itemid,probability"]
    lines += [f"{p.clip_id},{p.probability:.9g}" for p in predictions]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def load_predictions(path: Path | str) -> list[Prediction]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip().lower() != "itemid,probability":
        raise DataError(f"{path}: expected 'itemid,probability' header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: malformed row {line!r}")
        try:
            out.append(Prediction(clip_id=parts[0].strip(), probability=float(parts[1])))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad probability ({exc})") from exc
    return out


def save_report(report: EvalReport, path: Path | str) -> None:
    doc = {
        "auc": report.auc,
        "n_pos": report.n_pos,
        "n_neg": report.n_neg,
        "roc": [[fpr, tpr] for fpr, tpr in report.roc_points],
    }
    atomic_write_text(Path(path), json.dumps(doc) + "\n")


def evaluate_files(
    model_paths: Sequence[Path | str],
    feature_paths: Sequence[Path | str],
    labels: Mapping[str, int],
    out_dir: Path | str,
    stats: features_mod.NormStats | None = None,
) -> EvalReport:
    """Run inference per model, ensemble, and write predictions + report files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feature_list = [features_mod.load_features(p) for p in feature_paths]
    prediction_sets = []
    for model_path in model_paths:
        model, _ = net.load_model(model_path)
        prediction_sets.append(predict_features(model, feature_list, stats))
    merged = ensemble_average(prediction_sets) if len(prediction_sets) > 1 else prediction_sets[0]
    report = auc(merged, labels)
    save_predictions(merged, out_dir / "predictions.csv")
    save_report(report, out_dir / "report.json")
    return report
