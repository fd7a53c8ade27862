"""Tertile CTR bucketing, macro-F1 evaluation, and the kNN baseline."""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .domain import CLASS_ORDER, CtrClass, FeatureBundle, TrainingRow

CONVERSION_OBJECTIVE = "Conversion"


class TooFewValues(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class EmptyTestSet(ValueError):
    pass


class EmptyTrainSet(ValueError):
    pass


@dataclass(frozen=True)
class BucketThresholds:
    """Tertile cut points of the observed CTR distribution."""

    t1: float
    t2: float
    fitted_on: str = ""
    n_fitted: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.t1) and np.isfinite(self.t2)):
            raise ValueError("thresholds must be finite")
        if self.t1 > self.t2:
            raise ValueError(f"t1 ({self.t1}) must be <= t2 ({self.t2})")

    def to_dict(self) -> dict:
        return {"t1": self.t1, "t2": self.t2, "fitted_on": self.fitted_on, "n_fitted": self.n_fitted}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BucketThresholds":
        return cls(t1=d["t1"], t2=d["t2"], fitted_on=d.get("fitted_on", ""), n_fitted=d.get("n_fitted", 0))


def fit_thresholds(ctr_values: Sequence[float], fitted_on: str = "") -> BucketThresholds:
    """Fit tertile thresholds at the 1/3 and 2/3 empirical quantiles.

    Quantiles interpolate linearly between order statistics:
    q(p) = x[floor(h)] + (h - floor(h)) * (x[ceil(h)] - x[floor(h)]), h = (n-1)p.
    """
    values = np.asarray(list(ctr_values), dtype=np.float64)
    if values.size < 3:
        raise TooFewValues(f"need at least 3 CTR values to fit tertiles, got {values.size}")
    if np.any(~np.isfinite(values)) or np.any(values < 0) or np.any(values > 1):
        raise ValueError("CTR values must all lie in [0, 1]")
    t1, t2 = np.quantile(values, [1.0 / 3.0, 2.0 / 3.0], method="linear")
    return BucketThresholds(t1=float(t1), t2=float(t2), fitted_on=fitted_on, n_fitted=int(values.size))


def bucketize(value: float, thresholds: BucketThresholds) -> CtrClass:
    """Map a CTR value to its class: < t1 below, [t1, t2) average, >= t2 above.

    A degenerate corpus with t1 == t2 maps every value to Average.
    """
    if thresholds.t1 == thresholds.t2:
        return CtrClass.AVERAGE
    if value < thresholds.t1:
        return CtrClass.BELOW_AVERAGE
    if value < thresholds.t2:
        return CtrClass.AVERAGE
    return CtrClass.ABOVE_AVERAGE


def confusion_matrix(y_true: Sequence[CtrClass], y_pred: Sequence[CtrClass]) -> np.ndarray:
    """3x3 count matrix, rows = true class, columns = predicted class."""
    if len(y_true) != len(y_pred):
        raise LengthMismatch(f"y_true has {len(y_true)} entries, y_pred has {len(y_pred)}")
    if len(y_true) == 0:
        raise LengthMismatch("inputs must be non-empty")
    cm = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        cm[int(t), int(p)] += 1
    return cm


def per_class_scores(cm: np.ndarray) -> dict[str, list[float]]:
    """Precision, recall, and F1 per class; zero-support cases score 0."""
    precision, recall, f1 = [], [], []
    for c in range(3):
        tp = float(cm[c, c])
        fp = float(cm[:, c].sum() - tp)
        fn = float(cm[c, :].sum() - tp)
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
    return {"precision": precision, "recall": recall, "f1": f1}


def macro_f1(y_true: Sequence[CtrClass], y_pred: Sequence[CtrClass]) -> float:
    """Unweighted mean of per-class F1 over all 3 classes.

    Classes absent from both lists contribute 0 (penalizes degenerate predictors).
    """
    cm = confusion_matrix(y_true, y_pred)
    return float(np.mean(per_class_scores(cm)["f1"]))


@dataclass(frozen=True)
class EvalReport:
    macro_f1_all: float
    macro_f1_conversion: float | None
    per_class: dict[str, list[float]]
    confusion: list[list[int]]  # row-major, class order Below, Average, Above
    n_eval: int

    def to_dict(self) -> dict:
        return {
            "macro_f1_all": self.macro_f1_all,
            "macro_f1_conversion": self.macro_f1_conversion,
            "per_class": self.per_class,
            "confusion": self.confusion,
            "class_order": [c.label for c in CLASS_ORDER],
            "n_eval": self.n_eval,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


class ProbPredictor(Protocol):
    def predict_proba(self, bundle: FeatureBundle) -> np.ndarray: ...


def evaluate_model(
    model: ProbPredictor,
    test_rows: Sequence[TrainingRow],
    thresholds: BucketThresholds,
    objectives: Mapping[str, str] | None = None,
) -> EvalReport:
    """Per-ad evaluation: frame-level probabilities are averaged before argmax.

    macro_f1_conversion covers the subset with objective == "Conversion" and is
    None when that subset is empty or no objective map is supplied. thresholds
    ride along for report provenance only; labels come from the rows.
    """
    if not test_rows:
        raise EmptyTestSet("cannot evaluate on an empty test set")

    by_ad: dict[str, list[TrainingRow]] = defaultdict(list)
    order: list[str] = []
    for row in test_rows:
        if row.source_ad_id not in by_ad:
            order.append(row.source_ad_id)
        by_ad[row.source_ad_id].append(row)

    batch = getattr(model, "predict_proba_many", None)
    y_true: list[CtrClass] = []
    y_pred: list[CtrClass] = []
    for ad_id in order:
        rows = by_ad[ad_id]
        if batch is not None:
            probs = np.asarray(batch([r.bundle for r in rows]))
        else:
            probs = np.stack([np.asarray(model.predict_proba(r.bundle)) for r in rows])
        mean_probs = probs.mean(axis=0)
        y_true.append(rows[0].label)
        y_pred.append(CtrClass(int(np.argmax(mean_probs))))

    cm = confusion_matrix(y_true, y_pred)
    f1_all = float(np.mean(per_class_scores(cm)["f1"]))

    f1_conv: float | None = None
    if objectives is not None:
        conv_idx = [i for i, ad_id in enumerate(order) if objectives.get(ad_id) == CONVERSION_OBJECTIVE]
        if conv_idx:
            f1_conv = macro_f1([y_true[i] for i in conv_idx], [y_pred[i] for i in conv_idx])

    return EvalReport(
        macro_f1_all=f1_all,
        macro_f1_conversion=f1_conv,
        per_class=per_class_scores(cm),
        confusion=cm.tolist(),
        n_eval=len(order),
    )


# --- kNN baseline over flattened low-level features ---------------------


def flatten_features(
    bundle: FeatureBundle,
    cont_mean: np.ndarray,
    cont_std: np.ndarray,
    cat_sizes: Sequence[int],
    vocab_size: int,
) -> np.ndarray:
    """Standardized continuous + one-hot categoricals + token counts over the
    vocabulary + an 8-bin-per-channel image histogram (fraction of pixels)."""
    cont = (np.asarray(bundle.continuous, dtype=np.float64) - cont_mean) / cont_std

    onehots = []
    for i, size in enumerate(cat_sizes):
        oh = np.zeros(size, dtype=np.float64)
        cid = int(bundle.categorical_ids[i])
        if 0 <= cid < size:
            oh[cid] = 1.0
        onehots.append(oh)
    cats = np.concatenate(onehots) if onehots else np.zeros(0)

    counts = np.bincount(np.asarray(bundle.token_ids, dtype=np.int64), minlength=vocab_size).astype(
        np.float64
    )[:vocab_size]

    px = bundle.image.pixels
    n_px = px.shape[0] * px.shape[1]
    hist = np.concatenate(
        [np.bincount(px[:, :, c].ravel() >> 5, minlength=8)[:8] for c in range(3)]
    ).astype(np.float64) / n_px

    return np.concatenate([cont, cats, counts, hist])


class KnnIndex:
    """Precomputed feature matrix for the kNN baseline."""

    def __init__(self, train_rows: Sequence[TrainingRow], cat_sizes: Sequence[int], vocab_size: int):
        if not train_rows:
            raise EmptyTrainSet("kNN needs at least one training row")
        self.cat_sizes = list(cat_sizes)
        self.vocab_size = vocab_size
        cont = np.stack([np.asarray(r.bundle.continuous, dtype=np.float64) for r in train_rows])
        self.cont_mean = cont.mean(axis=0) if cont.shape[1] else np.zeros(0)
        std = cont.std(axis=0) if cont.shape[1] else np.zeros(0)
        self.cont_std = np.where(std > 0, std, 1.0)
        self.labels = [r.label for r in train_rows]
        self.matrix = np.stack([self._vec(r.bundle) for r in train_rows])

    def _vec(self, bundle: FeatureBundle) -> np.ndarray:
        return flatten_features(bundle, self.cont_mean, self.cont_std, self.cat_sizes, self.vocab_size)

    def predict(self, bundle: FeatureBundle, k: int) -> CtrClass:
        if k < 1 or k > len(self.labels):
            raise ValueError(f"k must be in [1, {len(self.labels)}], got {k}")
        q = self._vec(bundle)
        dists = np.sqrt(((self.matrix - q) ** 2).sum(axis=1))
        # distance ties resolve to the lower row index: stable sort on distance
        nearest = np.argsort(dists, kind="stable")[:k]
        votes = Counter(self.labels[i] for i in nearest)
        top = votes.most_common()
        if len(top) > 1 and top[0][1] == top[1][1]:
            return self.labels[nearest[0]]  # vote tie: the single nearest decides
        return top[0][0]


def knn_predict(
    train_rows: Sequence[TrainingRow],
    query_bundle: FeatureBundle,
    k: int,
    cat_sizes: Sequence[int] | None = None,
    vocab_size: int | None = None,
) -> CtrClass:
    """Majority vote among the k nearest training rows in flattened-feature space.

    Vocabulary and per-field category sizes are inferred from the data when not
    given; distances only depend on observed ids so inference is lossless.
    """
    if not train_rows:
        raise EmptyTrainSet("kNN needs at least one training row")
    if cat_sizes is None:
        n_fields = len(train_rows[0].bundle.categorical_ids)
        cat_sizes = [
            int(
                max(
                    [r.bundle.categorical_ids[i] for r in train_rows]
                    + [query_bundle.categorical_ids[i]]
                )
            )
            + 1
            for i in range(n_fields)
        ]
    if vocab_size is None:
        vocab_size = (
            int(
                max(
                    max((int(r.bundle.token_ids.max()) for r in train_rows), default=0),
                    int(query_bundle.token_ids.max()) if query_bundle.token_ids.size else 0,
                )
            )
            + 1
        )
    index = KnnIndex(train_rows, cat_sizes=cat_sizes, vocab_size=vocab_size)
    return index.predict(query_bundle, k)
