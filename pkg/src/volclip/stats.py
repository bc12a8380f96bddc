"""Classification metrics, ROC thresholding, bootstrap dispersion, paired
permutation tests, and embedding export for external t-SNE tooling.

Conventions (documented next to every output): precision and F1 are 0 when
their denominator is 0; bootstrap resamples that lose a class are redrawn
(capped); permutation p-values use +1/+1 smoothing so identical models give
exactly 1.0.
"""

from __future__ import annotations

import csv
import json
import math
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from .errors import MetricsError

RocPoint = namedtuple("RocPoint", ["fpr", "tpr", "threshold"])
ClassificationMetrics = namedtuple(
    "ClassificationMetrics", ["f1", "accuracy", "precision", "recall"]
)

MEAN_METRICS = ("auroc", "f1", "accuracy", "precision")


@dataclass
class ScoredPredictions:
    """Per-abnormality score/truth arrays over one validation set.

    scores and truths are (V, n): one row per abnormality, one column per
    evaluated study, in a shared study order.
    """

    abnormalities: tuple
    scores: np.ndarray
    truths: np.ndarray
    model_tag: str = ""

    def __post_init__(self):
        self.abnormalities = tuple(self.abnormalities)
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.truths = np.atleast_2d(np.asarray(self.truths, dtype=np.float64))
        if self.scores.shape != self.truths.shape:
            raise MetricsError(
                f"scores {self.scores.shape} and truths {self.truths.shape} differ"
            )
        if self.scores.shape[0] != len(self.abnormalities):
            raise MetricsError("one score row per abnormality required")
        if not np.isin(self.truths, (0.0, 1.0)).all():
            raise MetricsError("truths must be binary")

    @property
    def n_items(self) -> int:
        return self.scores.shape[1]

    def take_items(self, indices) -> "ScoredPredictions":
        idx = np.asarray(indices)
        return ScoredPredictions(
            self.abnormalities, self.scores[:, idx], self.truths[:, idx], self.model_tag
        )


def _validate_binary(truths: np.ndarray) -> np.ndarray:
    truths = np.asarray(truths, dtype=np.float64).reshape(-1)
    if not np.isin(truths, (0.0, 1.0)).all():
        raise MetricsError("truths must be binary 0/1")
    return truths


def roc_curve(scores, truths) -> list:
    """ROC points over all unique score thresholds, (0,0) to (1,1).

    Binarization convention: predicted positive iff score >= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truths = _validate_binary(truths)
    if scores.shape != truths.shape:
        raise MetricsError("scores and truths lengths differ")
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC undefined: both classes must be present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    points = [RocPoint(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            tp += int(sorted_truths[j])
            fp += int(1 - sorted_truths[j])
            j += 1
        points.append(RocPoint(fp / n_neg, tp / n_pos, float(sorted_scores[i])))
        i = j
    return points


def auroc(scores, truths) -> float:
    """Trapezoidal area under the ROC curve."""
    points = roc_curve(scores, truths)
    area = 0.0
    for a, b in zip(points, points[1:]):
        area += (b.fpr - a.fpr) * (a.tpr + b.tpr) / 2.0
    return area


def optimal_threshold(roc: Sequence[RocPoint], method: str = "corner") -> float:
    """Operating threshold from the ROC.

    "corner" picks the point nearest (fpr=0, tpr=1); "youden" maximizes
    tpr - fpr. Ties break toward higher tpr, then lower threshold.
    """
    if not roc:
        raise MetricsError("empty ROC")
    if method == "corner":
        key = lambda p: (math.hypot(p.fpr, 1.0 - p.tpr), -p.tpr, p.threshold)
    elif method == "youden":
        key = lambda p: (-(p.tpr - p.fpr), -p.tpr, p.threshold)
    else:
        raise MetricsError(f"unknown threshold method {method!r}")
    return min(roc, key=key).threshold


def classification_metrics(scores, truths, threshold: float) -> ClassificationMetrics:
    """Binarize at score >= threshold; 0/0 precision and F1 default to 0."""
    if not math.isfinite(threshold):
        # math.inf from the ROC origin point means "predict nothing positive"
        if threshold != math.inf:
            raise MetricsError(f"threshold must be finite or +inf, got {threshold}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    truths = _validate_binary(truths)
    pred = scores >= threshold
    tp = int(np.sum(pred & (truths == 1)))
    fp = int(np.sum(pred & (truths == 0)))
    fn = int(np.sum(~pred & (truths == 1)))
    tn = int(np.sum(~pred & (truths == 0)))
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) > 0 else 0.0
    accuracy = (tp + tn) / len(truths) if len(truths) else 0.0
    return ClassificationMetrics(f1, accuracy, precision, recall)


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    # partitioned stream: each iteration draws from its own child seed
    return np.random.default_rng([seed, iteration])


MetricFn = Callable[[ScoredPredictions], float]


def mean_auroc(pred: ScoredPredictions) -> float:
    return float(np.mean([auroc(s, t) for s, t in zip(pred.scores, pred.truths)]))


def make_threshold_metric(kind: str, thresholds: Sequence[float]) -> MetricFn:
    """Mean accuracy/f1/precision/recall at fixed per-abnormality thresholds."""
    idx = ClassificationMetrics._fields.index(kind)

    def metric(pred: ScoredPredictions) -> float:
        vals = [
            classification_metrics(s, t, thr)[idx]
            for s, t, thr in zip(pred.scores, pred.truths, thresholds)
        ]
        return float(np.mean(vals))

    return metric


def resolve_metric(metric: Union[str, MetricFn],
                   threshold_method: str = "corner") -> MetricFn:
    """Accepts a callable or a name. Named threshold metrics refit the
    ROC-optimal threshold on whatever sample they are handed, so bootstrap
    and permutation evaluations measure the whole operating procedure."""
    if callable(metric):
        return metric
    if metric == "auroc":
        return mean_auroc
    if metric in ("f1", "accuracy", "precision", "recall"):
        idx = ClassificationMetrics._fields.index(metric)

        def self_thresholding(pred: ScoredPredictions) -> float:
            vals = []
            for s, t in zip(pred.scores, pred.truths):
                thr = optimal_threshold(roc_curve(s, t), threshold_method)
                vals.append(classification_metrics(s, t, thr)[idx])
            return float(np.mean(vals))

        return self_thresholding
    raise MetricsError(f"unknown metric {metric!r}")


def bootstrap_std(predictions: ScoredPredictions, metric: Union[str, MetricFn],
                  iterations: int = 500, seed: int = 0,
                  max_retries: int = 100):
    """Resample n items with replacement per iteration; return (mean, std)
    of the bootstrap metric distribution.

    Resamples on which the metric is undefined (e.g. a single-class AUROC
    draw) are redrawn, up to max_retries per iteration, so the distribution
    always holds exactly `iterations` values.
    """
    n = predictions.n_items
    if n < 2:
        raise MetricsError("bootstrap needs n >= 2")
    metric_fn = resolve_metric(metric)
    values = np.empty(iterations, dtype=np.float64)
    for it in range(iterations):
        rng = _iteration_rng(seed, it)
        for attempt in range(max_retries + 1):
            indices = rng.integers(0, n, size=n)
            try:
                values[it] = metric_fn(predictions.take_items(indices))
                break
            except MetricsError:
                if attempt == max_retries:
                    raise MetricsError(
                        f"bootstrap iteration {it}: metric undefined after "
                        f"{max_retries} redraws"
                    )
    return float(values.mean()), float(values.std())


def paired_permutation_test(a: ScoredPredictions, b: ScoredPredictions,
                            metric: Union[str, MetricFn],
                            permutations: int = 1000, seed: int = 0) -> float:
    """Two-sided paired permutation test on a metric difference.

    Each permutation swaps whole items between the two models with
    probability 1/2 and recomputes the difference; the p-value uses +1/+1
    smoothing, so identical models give exactly 1.0.
    """
    if a.scores.shape != b.scores.shape:
        raise MetricsError("paired test requires identically-shaped predictions")
    if a.abnormalities != b.abnormalities:
        raise MetricsError("paired test requires the same abnormality order")
    if not np.array_equal(a.truths, b.truths):
        raise MetricsError("paired test requires identical items (truths differ)")
    metric_fn = resolve_metric(metric)
    observed = metric_fn(a) - metric_fn(b)
    n = a.n_items
    hits = 0
    for it in range(permutations):
        rng = _iteration_rng(seed, it)
        swap = rng.random(n) < 0.5
        a_scores = np.where(swap, b.scores, a.scores)
        b_scores = np.where(swap, a.scores, b.scores)
        a_perm = ScoredPredictions(a.abnormalities, a_scores, a.truths)
        b_perm = ScoredPredictions(b.abnormalities, b_scores, b.truths)
        delta = metric_fn(a_perm) - metric_fn(b_perm)
        if abs(delta) >= abs(observed):
            hits += 1
    return (hits + 1) / (permutations + 1)


@dataclass
class MetricsReport:
    """Per-abnormality and mean AUROC/F1/accuracy/precision with bootstrap
    spread and optional pairwise p-values."""

    model_tag: str
    abnormalities: tuple
    per_abnormality: Dict[str, Dict[str, float]]
    means: Dict[str, float]
    bootstrap: Dict[str, Dict[str, float]] = field(default_factory=dict)
    p_values: Dict[str, Dict[str, float]] = field(default_factory=dict)
    conventions: Dict[str, str] = field(default_factory=lambda: {
        "precision_0_over_0": "0",
        "f1_0_over_0": "0",
        "binarization": "score >= threshold",
        "threshold": "ROC point nearest (fpr=0, tpr=1)",
    })

    def as_dict(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "abnormalities": list(self.abnormalities),
            "per_abnormality": self.per_abnormality,
            "means": self.means,
            "bootstrap": self.bootstrap,
            "p_values": self.p_values,
            "conventions": self.conventions,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2) + "\n")

    def to_csv(self, path) -> None:
        fields = ["abnormality", "auroc", "f1", "accuracy", "precision", "recall", "threshold"]
        with Path(path).open("w", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields)
            writer.writeheader()
            for name in self.abnormalities:
                row = {"abnormality": name}
                row.update({k: self.per_abnormality[name][k] for k in fields[1:]})
                writer.writerow(row)
            mean_row = {"abnormality": "MEAN"}
            mean_row.update({k: self.means.get(k, "") for k in fields[1:]})
            writer.writerow(mean_row)


def compute_report(predictions: ScoredPredictions,
                   bootstrap_iterations: int = 500,
                   permutations: int = 1000,
                   seed: int = 0,
                   threshold_method: str = "corner",
                   baselines: Optional[Dict[str, ScoredPredictions]] = None) -> MetricsReport:
    """Full evaluation: thresholds, four metrics, bootstrap spread, and
    pairwise permutation p-values against any baseline predictions."""
    per_abn = {}
    for name, scores, truths in zip(predictions.abnormalities, predictions.scores,
                                    predictions.truths):
        curve = roc_curve(scores, truths)
        thr = optimal_threshold(curve, threshold_method)
        cm = classification_metrics(scores, truths, thr)
        per_abn[name] = {
            "auroc": auroc(scores, truths),
            "f1": cm.f1,
            "accuracy": cm.accuracy,
            "precision": cm.precision,
            "recall": cm.recall,
            "threshold": thr,
        }
    means = {
        m: float(np.mean([per_abn[n][m] for n in predictions.abnormalities]))
        for m in MEAN_METRICS
    }
    report = MetricsReport(
        model_tag=predictions.model_tag,
        abnormalities=predictions.abnormalities,
        per_abnormality=per_abn,
        means=means,
    )
    if bootstrap_iterations > 0:
        for m in MEAN_METRICS:
            bmean, bstd = bootstrap_std(predictions, m, bootstrap_iterations, seed)
            report.bootstrap[m] = {"mean": bmean, "std": bstd}
    for tag, other in (baselines or {}).items():
        report.p_values[tag] = {
            m: paired_permutation_test(predictions, other, m, permutations, seed)
            for m in MEAN_METRICS
        }
    return report


def merge_scored_labels(pred: ScoredPredictions,
                        merge_map: Dict[str, Sequence[str]],
                        drop: Sequence[str] = ()) -> ScoredPredictions:
    """Map predictions onto an external label schema.

    Each merged target takes the element-wise max of its source rows (for
    scores and truths alike); names in `drop` are removed.
    """
    index = {n: i for i, n in enumerate(pred.abnormalities)}
    consumed = set(drop)
    for sources in merge_map.values():
        for s in sources:
            if s not in index:
                raise MetricsError(f"merge source {s!r} not among predictions")
            consumed.add(s)
    names, scores, truths = [], [], []
    for target, sources in merge_map.items():
        rows = [index[s] for s in sources]
        names.append(target)
        scores.append(pred.scores[rows].max(axis=0))
        truths.append(pred.truths[rows].max(axis=0))
    for name in pred.abnormalities:
        if name in consumed:
            continue
        names.append(name)
        scores.append(pred.scores[index[name]])
        truths.append(pred.truths[index[name]])
    return ScoredPredictions(tuple(names), np.array(scores), np.array(truths),
                             pred.model_tag)


def export_embeddings(corpus, model, tokenizer, geometry, out_path,
                      text_mode: str = "both") -> int:
    """Write volume and report embeddings (with labels and abnormality
    counts) as CSV plus a JSON sidecar describing the columns.

    Returns the number of rows written. t-SNE itself is left to external
    tools; this is the export they consume.
    """
    import torch

    from .training import build_pair_dataset

    dataset = build_pair_dataset(corpus, tokenizer, geometry, text_mode,
                                 model.text.cfg.max_len)
    model.eval()
    with torch.no_grad():
        v_emb = model.embed_volumes(torch.from_numpy(dataset.volumes)).numpy()
        t_emb = model.embed_texts(torch.from_numpy(dataset.token_ids),
                                  torch.from_numpy(dataset.masks)).numpy()
    dim = v_emb.shape[1]
    out_path = Path(out_path)
    rows = 0
    with out_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        header = ["study_id", "kind"] + [f"e_{i}" for i in range(dim)]
        header += ["labels", "abnormality_count"]
        writer.writerow(header)
        for kind, emb in (("volume", v_emb), ("report", t_emb)):
            for i, study_id in enumerate(dataset.study_ids):
                labels = dataset.labels[i] if dataset.labels is not None else None
                label_str = ",".join(str(int(v)) for v in labels) if labels is not None else ""
                count = int(labels.sum()) if labels is not None else ""
                writer.writerow([study_id, kind] + [repr(float(x)) for x in emb[i]]
                                + [label_str, count])
                rows += 1
    sidecar = {
        "columns": {
            "study_id": "study identifier",
            "kind": "volume or report embedding",
            "e_i": f"embedding coordinates, i in 0..{dim - 1}",
            "labels": "comma-separated binary labels in vocabulary order (may be empty)",
            "abnormality_count": "sum of the label vector (may be empty)",
        },
        "dim": dim,
        "rows": rows,
    }
    out_path.with_suffix(out_path.suffix + ".meta.json").write_text(
        json.dumps(sidecar, indent=2) + "\n"
    )
    return rows
