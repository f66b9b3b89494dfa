"""Binary classification metrics, ROC/PR curves, confidence histograms,
2-D PCA of fusion features and the perturbation robustness sweep."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateRank, EmptySet, LengthMismatch, NoPositives, SingleClass

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __init__(self, scores, labels):
        s = np.asarray(scores, dtype=np.float64).reshape(-1)
        y = np.asarray(labels).reshape(-1)
        if s.size != y.size:
            raise LengthMismatch(f"{s.size} scores but {y.size} labels")
        if s.size == 0:
            raise EmptySet("scored set is empty")
        if not np.all(np.isin(y, (0, 1))):
            raise ValueError("labels must be 0 or 1")
        if not np.all((s >= 0) & (s <= 1)):
            raise ValueError("scores must lie in [0, 1]")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.int64))

    def __len__(self):
        return self.scores.size

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_at(scored: ScoredSet, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Counts with "synthetic" predicted iff ``score >= threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    pred = scored.scores >= threshold
    pos = scored.labels == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


@dataclass(frozen=True)
class BasicMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    undefined: tuple[str, ...] = ()


def _ratio(num: int, den: int, name: str, undefined: list) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def basic_metrics(cm: ConfusionMatrix) -> BasicMetrics:
    """Accuracy, precision, recall and F1; any 0/0 is reported as 0 and
    its name listed in ``undefined``."""
    if cm.n < 1:
        raise EmptySet("confusion matrix has no samples")
    undefined: list[str] = []
    acc = (cm.tp + cm.tn) / cm.n
    prec = _ratio(cm.tp, cm.tp + cm.fp, "precision", undefined)
    rec = _ratio(cm.tp, cm.tp + cm.fn, "recall", undefined)
    if "precision" in undefined or "recall" in undefined or prec + rec == 0:
        undefined.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * prec * rec / (prec + rec)
    return BasicMetrics(acc, prec, rec, f1, tuple(undefined))


def _score_groups(scored: ScoredSet):
    """Cumulative (tp, fp) after each distinct score, highest score first."""
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(1 - y)[last]
    return s[last], tps, fps


def roc_auc(scored: ScoredSet) -> tuple[float, list[tuple[float, float, float]]]:
    """Trapezoid AUC over (fpr, tpr, threshold) points, ties grouped.

    The first point is ``(0, 0, inf)``; the last is always ``(1, 1, min score)``.
    """
    P, N = scored.n_pos, scored.n_neg
    if P == 0 or N == 0:
        raise SingleClass(f"ROC needs both classes (positives={P}, negatives={N})")
    thr, tps, fps = _score_groups(scored)
    tpr = np.r_[0.0, tps / P]
    fpr = np.r_[0.0, fps / N]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    points = [(float(a), float(b), float(t)) for a, b, t in zip(fpr, tpr, np.r_[np.inf, thr])]
    return auc, points


def pr_auc(scored: ScoredSet) -> tuple[float, list[tuple[float, float, float]]]:
    """Step-rule AUC over (recall, precision, threshold) points.

    The recall-0 anchor carries the precision of the highest-score group.
    """
    P = scored.n_pos
    if P == 0:
        raise NoPositives("precision-recall needs at least one positive")
    thr, tps, fps = _score_groups(scored)
    recall = tps / P
    precision = tps / (tps + fps)
    auc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    points = [(0.0, float(precision[0]), math.inf)]
    points += [(float(r), float(p), float(t)) for r, p, t in zip(recall, precision, thr)]
    return auc, points


@dataclass(frozen=True)
class ConfidenceHistogram:
    edges: np.ndarray
    correct: np.ndarray
    incorrect: np.ndarray

    def rows(self):
        for k in range(self.correct.size):
            yield k, float(self.edges[k]), float(self.edges[k + 1]), int(self.correct[k]), int(self.incorrect[k])


def confidence_histogram(scored: ScoredSet, bins: int = 10, threshold: float = DEFAULT_THRESHOLD) -> ConfidenceHistogram:
    """Uniform bins over [0, 1]; a score of exactly 1 falls in the last bin."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    idx = np.minimum(np.floor(scored.scores * bins).astype(np.int64), bins - 1)
    correct = (scored.scores >= threshold) == (scored.labels == 1)
    return ConfidenceHistogram(
        np.linspace(0.0, 1.0, bins + 1),
        np.bincount(idx[correct], minlength=bins),
        np.bincount(idx[~correct], minlength=bins),
    )


# ---------------------------------------------------------------------------
# PCA


@dataclass(frozen=True)
class PCAResult:
    coords: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, D)
    explained: np.ndarray  # fraction of total variance per component
    mean: np.ndarray


def _fix_sign(v: np.ndarray) -> np.ndarray:
    return -v if v[np.argmax(np.abs(v))] < 0 else v


def _start_vectors(d: int):
    yield np.ones(d) / math.sqrt(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        yield e


def _power(cov: np.ndarray, basis: list, max_iter: int, tol: float) -> np.ndarray | None:
    def project(v):
        for b in basis:
            v = v - (b @ v) * b
        return v

    scale = max(float(np.abs(cov).max()), 1e-300)
    for v in _start_vectors(cov.shape[0]):
        v = project(v)
        w = project(cov @ v)
        if np.linalg.norm(v) < 1e-8 or np.linalg.norm(w) <= 1e-12 * scale:
            continue
        v = w / np.linalg.norm(w)
        for _ in range(max_iter):
            w = project(cov @ v)
            nw = np.linalg.norm(w)
            if nw <= 1e-12 * scale:
                break
            w /= nw
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        return v
    return None


def pca2(features, max_iter: int = 1000, tol: float = 1e-10) -> PCAResult:
    """Project onto the top two covariance eigenvectors found by power
    iteration with deflation. Each component is signed so its
    largest-magnitude coordinate is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ValueError(f"pca2 needs at least 3 vectors of dimension >= 2, got shape {x.shape}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / x.shape[0]
    total = float(np.trace(cov))
    if total <= 0.0 or not np.any(xc):
        raise DegenerateRank("all feature vectors are identical")
    comps = []
    for _ in range(2):
        v = _power(cov, comps, max_iter, tol)
        if v is None:
            # remaining variance is zero; any orthogonal unit vector will do
            v = next(u for u in (_orth(e, comps) for e in _start_vectors(x.shape[1])) if u is not None)
        comps.append(_fix_sign(v))
    comps_arr = np.stack(comps)
    var = np.array([float(c @ cov @ c) for c in comps_arr])
    return PCAResult(xc @ comps_arr.T, comps_arr, np.maximum(var, 0.0) / total, mean)


def _orth(v, basis):
    for b in basis:
        v = v - (b @ v) * b
    n = np.linalg.norm(v)
    return v / n if n > 1e-8 else None


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    threshold: float
    confusion: ConfusionMatrix
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc_roc: float | None
    auc_pr: float | None
    roc_points: list = field(default_factory=list, repr=False)
    pr_points: list = field(default_factory=list, repr=False)
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        cm = self.confusion
        return {
            "n": cm.n,
            "threshold": self.threshold,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "confusion": {"tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn},
            "undefined": list(self.undefined),
        }


def metrics_report(scored: ScoredSet, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """All scalar metrics plus curves; AUCs that need a missing class are None."""
    cm = confusion_at(scored, threshold)
    bm = basic_metrics(cm)
    undefined = list(bm.undefined)
    try:
        auc_roc, roc_pts = roc_auc(scored)
    except SingleClass:
        auc_roc, roc_pts = None, []
        undefined.append("auc_roc")
    try:
        auc_pr, pr_pts = pr_auc(scored)
    except NoPositives:
        auc_pr, pr_pts = None, []
        undefined.append("auc_pr")
    return MetricsReport(threshold, cm, bm.accuracy, bm.precision, bm.recall, bm.f1,
                         auc_roc, auc_pr, roc_pts, pr_pts, tuple(undefined))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_metrics_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_roc_csv(path, points):
    _write_csv(path, ["fpr", "tpr", "threshold"], points)


def write_pr_csv(path, points):
    _write_csv(path, ["recall", "precision", "threshold"], points)


def write_confusion_csv(path, cm: ConfusionMatrix):
    _write_csv(path, ["actual", "predicted_real", "predicted_synthetic"],
               [("real", cm.tn, cm.fp), ("synthetic", cm.fn, cm.tp)])


def write_histogram_csv(path, hist: ConfidenceHistogram):
    _write_csv(path, ["bin", "lo", "hi", "correct", "incorrect"], hist.rows())


def write_pca_csv(path, pca: PCAResult, labels):
    _write_csv(path, ["x", "y", "label"],
               ((float(a), float(b), int(y)) for (a, b), y in zip(pca.coords, labels)))


def write_eval_outputs(out_dir, scored: ScoredSet, report: MetricsReport, features=None, bins: int = 10) -> dict:
    """Write metrics.json and every evaluation CSV into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", report.to_dict())
    write_roc_csv(out / "roc.csv", report.roc_points)
    write_pr_csv(out / "pr.csv", report.pr_points)
    write_confusion_csv(out / "confusion.csv", report.confusion)
    write_histogram_csv(out / "confidence_hist.csv", confidence_histogram(scored, bins, report.threshold))
    written = {"pca": False}
    if features is not None:
        try:
            write_pca_csv(out / "pca.csv", pca2(features), scored.labels)
            written["pca"] = True
        except (DegenerateRank, ValueError):
            pass
    return written


# ---------------------------------------------------------------------------
# robustness


@dataclass(frozen=True)
class RobustnessRow:
    name: str
    accuracy: float
    drop: float


def robustness_sweep(model, manifest, specs, seed: int = 0, split: str = "test", batch_size: int = 32, workers: int = 1):
    """Accuracy on ``split`` after each perturbation, with drop = clean - perturbed.

    The first row is the unperturbed ``original``; the rest follow ``specs``.
    Noise perturbations draw from per-sample streams derived from ``seed``.
    """
    from .datapipe import SampleSource
    from .trainer import score_split

    source = SampleSource(manifest, model.config.input_side, model.config.radial_bins, workers)
    clean = confusion_at(score_split(model, source, split, batch_size).scored)
    clean_acc = (clean.tp + clean.tn) / clean.n
    rows = [RobustnessRow("original", clean_acc, 0.0)]
    for spec in specs:
        cm = confusion_at(score_split(model, source, split, batch_size, perturb=spec, seed=seed).scored)
        acc = (cm.tp + cm.tn) / cm.n
        rows.append(RobustnessRow(spec.name, acc, clean_acc - acc))
    return rows


def write_robustness_csv(path, rows):
    _write_csv(path, ["name", "accuracy", "drop"], ((r.name, r.accuracy, r.drop) for r in rows))
