"""Random-forest classifier/regressor pair and recursive feature elimination.

Two models drive the sequencing policy: a classifier for the probability of
answering correctly at the first attempt (CFA) and a regressor for the time
to success (TTS). Both are random forests built here rather than borrowed,
because the file format, per-leaf payloads (class-vote counts for CFA, mean
and count of targets for TTS) and bit-level training determinism are all
part of the model contract.

Split search is histogram-based: each feature is pre-binned into at most
``max_bins`` quantile thresholds, and candidate splits are evaluated on bin
boundaries. Thresholds stored in the tree are real feature values, so
prediction never needs the bins. The left-branch rule is ``x <= threshold``.

TTS targets are optionally trained in log space (the default): observed
solve times are heavy-tailed, and log-space leaf means are far more stable.
The transform is recorded in the model file, so a loaded model is
self-describing.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

TASK_CFA = "cfa"
TASK_TTS = "tts"

MODEL_FORMAT = "zpdseq-forest"
MODEL_FORMAT_VERSION = 1

MIN_TTS_PREDICTION = 1.0  # seconds


class ModelIOError(ValueError):
    """Unreadable, truncated, or version-mismatched model file."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 5
    features_per_split: Optional[int] = None  # None: ceil(sqrt(n_features))
    max_bins: int = 64
    bootstrap_seed: int = 0  # filled in at training time

    def resolved_features_per_split(self, n_features: int) -> int:
        if self.features_per_split is not None:
            return min(self.features_per_split, n_features)
        return min(int(math.ceil(math.sqrt(n_features))), n_features)


@dataclass
class TrainingSet:
    """Feature matrix with labels and per-row student ids.

    ``feature_indices`` names the grid descriptor behind each column; the
    student ids exist so cross-validation folds can be student-disjoint
    (per-student rolling features leak across rows of one student).
    """

    X: np.ndarray
    y: np.ndarray
    student_ids: np.ndarray
    feature_indices: tuple[int, ...]
    task: str

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.student_ids = np.asarray(self.student_ids, dtype=object)
        if self.X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        if len(self.X) != len(self.y) or len(self.X) != len(self.student_ids):
            raise ValueError("X, y and student_ids must have equal length")
        if self.X.shape[1] != len(self.feature_indices):
            raise ValueError("feature_indices must name every column")
        if np.any(~np.isfinite(self.y)):
            raise ValueError("labels must be finite")

    def select_columns(self, indices: Sequence[int]) -> "TrainingSet":
        cols = [self.feature_indices.index(i) for i in indices]
        return TrainingSet(
            X=self.X[:, cols],
            y=self.y,
            student_ids=self.student_ids,
            feature_indices=tuple(indices),
            task=self.task,
        )


@dataclass
class DecisionTree:
    """Flat-array binary tree. ``feature[i] == -1`` marks a leaf.

    Leaf payload: for CFA, ``leaf_stat`` is the positive-class vote count
    and ``leaf_n`` the total votes; for TTS, ``leaf_stat`` is the mean of
    (possibly transformed) targets and ``leaf_n`` the sample count.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_stat: np.ndarray
    leaf_n: np.ndarray

    def predict_value(self, x: np.ndarray, task: str) -> float:
        i = 0
        feature = self.feature
        while feature[i] >= 0:
            i = self.left[i] if x[feature[i]] <= self.threshold[i] else self.right[i]
        if task == TASK_CFA:
            return self.leaf_stat[i] / self.leaf_n[i]
        return float(self.leaf_stat[i])

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass
class ForestModel:
    task: str
    trees: list[DecisionTree]
    selected_features: tuple[int, ...]
    params: ForestParams
    target_transform: str  # "identity" | "log"
    degenerate: bool = False
    training_meta: dict = field(default_factory=dict)
    feature_importances: Optional[np.ndarray] = None

    def tree_predictions(self, fv: np.ndarray) -> np.ndarray:
        """One prediction per tree, already in target units."""
        x = np.asarray(fv, dtype=np.float64)
        if x.shape != (len(self.selected_features),):
            raise ValueError(
                f"feature vector length {x.shape} does not match the model's "
                f"{len(self.selected_features)} selected features"
            )
        preds = np.array([t.predict_value(x, self.task) for t in self.trees])
        if self.task == TASK_TTS and self.target_transform == "log":
            preds = np.exp(preds)
        return preds


def predict_cfa(model: ForestModel, fv) -> float:
    """Probability of first-attempt success: mean over trees of the leaf
    positive-vote fraction. Always in [0, 1]."""
    if model.task != TASK_CFA:
        raise ValueError(f"model task is {model.task!r}, expected {TASK_CFA!r}")
    values = getattr(fv, "values", fv)
    return float(np.mean(model.tree_predictions(values)))


def predict_tts(model: ForestModel, fv) -> float:
    """Predicted seconds to success: mean over trees of the leaf target
    mean, floored at one second."""
    if model.task != TASK_TTS:
        raise ValueError(f"model task is {model.task!r}, expected {TASK_TTS!r}")
    values = getattr(fv, "values", fv)
    return max(float(np.mean(model.tree_predictions(values))), MIN_TTS_PREDICTION)


# ---------------------------------------------------------------------------
# Training


def _bin_columns(X: np.ndarray, max_bins: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Quantile-bin every column.

    Returns integer codes and, per column, the sorted real thresholds such
    that ``code <= t`` is exactly ``x <= thresholds[t]``.
    """
    n, f = X.shape
    codes = np.zeros((n, f), dtype=np.int16)
    thresholds: list[np.ndarray] = []
    qs = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
    for j in range(f):
        col = X[:, j]
        cand = np.unique(np.quantile(col, qs)) if n else np.array([])
        cand = cand[cand < col.max()] if n else cand
        thresholds.append(cand)
        if len(cand):
            codes[:, j] = np.searchsorted(cand, col, side="left")
    return codes, thresholds


def _leaf_payload(y: np.ndarray, task: str) -> tuple[float, float]:
    if task == TASK_CFA:
        return float(y.sum()), float(len(y))
    return float(y.mean()), float(len(y))


def _node_impurity_sum(y: np.ndarray, task: str) -> float:
    # Gini or SSE, scaled by node size (so decreases add up across nodes).
    n = len(y)
    if task == TASK_CFA:
        pos = y.sum()
        return n - (pos * pos + (n - pos) * (n - pos)) / n
    return float(np.sum(y * y) - (y.sum() ** 2) / n)


class _TreeBuilder:
    def __init__(
        self,
        codes: np.ndarray,
        thresholds: list[np.ndarray],
        y: np.ndarray,
        task: str,
        params: ForestParams,
        rng: np.random.Generator,
        importances: np.ndarray,
    ) -> None:
        self.codes = codes
        self.thresholds = thresholds
        self.y = y
        self.task = task
        self.params = params
        self.rng = rng
        self.importances = importances
        self.n_candidates = params.resolved_features_per_split(codes.shape[1])
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_stat: list[float] = []
        self.leaf_n: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaf_stat.append(0.0)
        self.leaf_n.append(0.0)
        return len(self.feature) - 1

    def build(self, idx: np.ndarray) -> DecisionTree:
        root = self._new_node()
        self._grow(root, idx, depth=0)
        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            leaf_stat=np.asarray(self.leaf_stat, dtype=np.float64),
            leaf_n=np.asarray(self.leaf_n, dtype=np.float64),
        )

    def _make_leaf(self, node: int, y_node: np.ndarray) -> None:
        stat, n = _leaf_payload(y_node, self.task)
        self.leaf_stat[node] = stat
        self.leaf_n[node] = n

    def _grow(self, node: int, idx: np.ndarray, depth: int) -> None:
        y_node = self.y[idx]
        n = len(idx)
        parent_imp = _node_impurity_sum(y_node, self.task)
        if (
            depth >= self.params.max_depth
            or n < 2 * self.params.min_samples_leaf
            or parent_imp <= 1e-12
        ):
            self._make_leaf(node, y_node)
            return
        split = self._best_split(idx, y_node, parent_imp)
        if split is None:
            self._make_leaf(node, y_node)
            return
        feat, bin_t, gain = split
        self.importances[feat] += gain
        go_left = self.codes[idx, feat] <= bin_t
        self.feature[node] = feat
        self.threshold[node] = float(self.thresholds[feat][bin_t])
        left_child = self._new_node()
        right_child = self._new_node()
        self.left[node] = left_child
        self.right[node] = right_child
        self._grow(left_child, idx[go_left], depth + 1)
        self._grow(right_child, idx[~go_left], depth + 1)

    def _best_split(
        self, idx: np.ndarray, y_node: np.ndarray, parent_imp: float
    ) -> Optional[tuple[int, int, float]]:
        n = len(idx)
        min_leaf = self.params.min_samples_leaf
        candidates = self.rng.choice(
            self.codes.shape[1], size=self.n_candidates, replace=False
        )
        best: Optional[tuple[int, int, float]] = None
        total_sum = float(y_node.sum())
        total_sq = float(np.sum(y_node * y_node)) if self.task == TASK_TTS else 0.0
        for feat in candidates:
            n_bins = len(self.thresholds[feat]) + 1
            if n_bins < 2:
                continue
            c = self.codes[idx, feat]
            counts = np.bincount(c, minlength=n_bins)
            sums = np.bincount(c, weights=y_node, minlength=n_bins)
            n_left = np.cumsum(counts)[:-1]
            s_left = np.cumsum(sums)[:-1]
            n_right = n - n_left
            valid = (n_left >= min_leaf) & (n_right >= min_leaf)
            if not valid.any():
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                if self.task == TASK_CFA:
                    s_right = total_sum - s_left
                    child_imp = (
                        n_left
                        - (s_left * s_left + (n_left - s_left) ** 2) / n_left
                        + n_right
                        - (s_right * s_right + (n_right - s_right) ** 2) / n_right
                    )
                else:
                    sq = np.bincount(c, weights=y_node * y_node, minlength=n_bins)
                    sq_left = np.cumsum(sq)[:-1]
                    s_right = total_sum - s_left
                    sq_right = total_sq - sq_left
                    child_imp = (
                        sq_left
                        - (s_left * s_left) / n_left
                        + sq_right
                        - (s_right * s_right) / n_right
                    )
            child_imp = np.where(valid, child_imp, np.inf)
            t = int(np.argmin(child_imp))
            gain = parent_imp - float(child_imp[t])
            if gain > 1e-12 and (best is None or gain > best[2]):
                best = (int(feat), t, gain)
        return best


def train_forest(
    data: TrainingSet,
    params: ForestParams,
    task: str,
    rng_seed: int,
    target_transform: Optional[str] = None,
) -> ForestModel:
    """Grow a seeded forest: each tree gets a bootstrap resample and a
    per-split random feature subset. Deterministic for a fixed seed."""
    if task not in (TASK_CFA, TASK_TTS):
        raise ValueError(f"unknown task {task!r}")
    n = len(data.X)
    if n < 2 * params.min_samples_leaf:
        raise ValueError(
            f"need at least {2 * params.min_samples_leaf} rows, got {n}"
        )
    if task == TASK_CFA and not set(np.unique(data.y)) <= {0.0, 1.0}:
        raise ValueError("CFA labels must be 0/1")
    if target_transform is None:
        target_transform = "log" if task == TASK_TTS else "identity"
    if task == TASK_TTS and target_transform == "log" and np.any(data.y <= 0):
        raise ValueError("log transform requires positive targets")

    y = np.log(data.y) if (task == TASK_TTS and target_transform == "log") else data.y
    params = replace(params, bootstrap_seed=rng_seed)
    degenerate = len(np.unique(y)) < 2

    importances = np.zeros(data.X.shape[1])
    trees: list[DecisionTree] = []
    if degenerate:
        stat, count = _leaf_payload(y, task)
        trees.append(
            DecisionTree(
                feature=np.array([-1], dtype=np.int32),
                threshold=np.zeros(1),
                left=np.array([-1], dtype=np.int32),
                right=np.array([-1], dtype=np.int32),
                leaf_stat=np.array([stat]),
                leaf_n=np.array([count]),
            )
        )
    else:
        codes, thresholds = _bin_columns(data.X, params.max_bins)
        seeds = np.random.SeedSequence(rng_seed).spawn(params.n_trees)
        for seq in seeds:
            rng = np.random.default_rng(seq)
            idx = rng.choice(n, size=n, replace=True)
            builder = _TreeBuilder(codes, thresholds, y, task, params, rng, importances)
            trees.append(builder.build(idx))
        total = importances.sum()
        if total > 0:
            importances = importances / total

    return ForestModel(
        task=task,
        trees=trees,
        selected_features=data.feature_indices,
        params=params,
        target_transform=target_transform,
        degenerate=degenerate,
        training_meta={
            "n_rows": int(n),
            "students": sorted({str(s) for s in data.student_ids}),
        },
        feature_importances=importances,
    )


def predict_batch(model: ForestModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = np.empty(len(X))
    fn = predict_cfa if model.task == TASK_CFA else predict_tts
    for i in range(len(X)):
        out[i] = fn(model, X[i])
    return out


# ---------------------------------------------------------------------------
# Evaluation


def auc_score(labels: np.ndarray, scores: np.ndarray) -> float:
    """Area under the ROC curve via the rank formula (ties get half credit).

    Equivalent to the fraction of (positive, negative) pairs the scores
    order correctly.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    rank = 1.0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        mid = (rank + rank + (j - i)) / 2.0
        ranks[order[i : j + 1]] = mid
        rank += j - i + 1
        i = j + 1
    rank_sum_pos = ranks[pos].sum()
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_model(model: ForestModel, holdout: TrainingSet) -> dict:
    """Holdout metrics; refuses evaluation rows from training students."""
    if len(holdout.X) == 0:
        raise ValueError("empty holdout")
    train_students = set(model.training_meta.get("students", []))
    overlap = train_students & {str(s) for s in holdout.student_ids}
    if overlap:
        raise ValueError(
            f"holdout shares {len(overlap)} students with the training set"
        )
    preds = predict_batch(model, holdout.X)
    if model.task == TASK_CFA:
        acc = float(np.mean((preds >= 0.5) == (holdout.y == 1.0)))
        return {"accuracy": acc, "auc": float(auc_score(holdout.y, preds))}
    err = preds - holdout.y
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": float(math.sqrt(np.mean(err * err))),
    }


# ---------------------------------------------------------------------------
# Recursive feature elimination


@dataclass
class RfeResult:
    task: str
    trace: list[tuple[tuple[int, ...], float]]
    selected: tuple[int, ...]
    fold_students: list[list[str]]


def _student_folds(
    student_ids: np.ndarray, folds: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Row-index folds that never split one student across folds."""
    students = sorted({str(s) for s in student_ids})
    order = rng.permutation(len(students))
    assignment = {students[i]: k % folds for k, i in enumerate(order)}
    ids = np.array([assignment[str(s)] for s in student_ids])
    return [np.flatnonzero(ids == k) for k in range(folds)]


def _cv_pass(
    data: TrainingSet,
    columns: list[int],
    fold_rows: list[np.ndarray],
    params: ForestParams,
    rng_seed: int,
) -> tuple[float, np.ndarray]:
    """Mean CV score (AUC for CFA, negative MAE for TTS) and mean
    importances over the fold models."""
    scores: list[float] = []
    importances = np.zeros(len(columns))
    all_rows = np.arange(len(data.X))
    for k, rows in enumerate(fold_rows):
        train_rows = np.setdiff1d(all_rows, rows)
        subset = TrainingSet(
            X=data.X[np.ix_(train_rows, columns)],
            y=data.y[train_rows],
            student_ids=data.student_ids[train_rows],
            feature_indices=tuple(data.feature_indices[c] for c in columns),
            task=data.task,
        )
        model = train_forest(subset, params, data.task, rng_seed + k)
        preds = predict_batch(model, data.X[np.ix_(rows, columns)])
        if data.task == TASK_CFA:
            scores.append(auc_score(data.y[rows], preds))
        else:
            scores.append(-float(np.mean(np.abs(preds - data.y[rows]))))
        if model.feature_importances is not None:
            importances += model.feature_importances
    return float(np.mean(scores)), importances / len(fold_rows)


def rfe_select(
    data: TrainingSet,
    target_count: int = 20,
    folds: int = 5,
    step: float = 0.10,
    rng_seed: int = 0,
    params: Optional[ForestParams] = None,
) -> RfeResult:
    """Recursive feature elimination with student-disjoint cross-validation.

    Each stage scores the remaining feature set by K-fold CV, averages the
    fold models' impurity-decrease importances, and drops the lowest
    ``step`` fraction (at least one feature, never overshooting the target).
    The trace records every stage, ending with the final selection.
    """
    if params is None:
        params = ForestParams(n_trees=30, max_depth=8)
    n_features = len(data.feature_indices)
    if target_count >= n_features:
        warnings.warn(
            f"target_count {target_count} >= available features {n_features}; "
            "returning the input feature set unchanged"
        )
        return RfeResult(
            task=data.task,
            trace=[(tuple(data.feature_indices), float("nan"))],
            selected=tuple(data.feature_indices),
            fold_students=[],
        )
    rng = np.random.default_rng(rng_seed)
    fold_rows = _student_folds(data.student_ids, folds, rng)
    fold_students = [
        sorted({str(data.student_ids[i]) for i in rows}) for rows in fold_rows
    ]
    columns = list(range(n_features))
    trace: list[tuple[tuple[int, ...], float]] = []
    while True:
        score, importances = _cv_pass(data, columns, fold_rows, params, rng_seed)
        trace.append((tuple(data.feature_indices[c] for c in columns), score))
        if len(columns) <= target_count:
            break
        drop = max(1, int(round(step * len(columns))))
        drop = min(drop, len(columns) - target_count)
        order = np.argsort(importances, kind="stable")
        dropped = set(order[:drop].tolist())
        columns = [c for i, c in enumerate(columns) if i not in dropped]
    return RfeResult(
        task=data.task,
        trace=trace,
        selected=trace[-1][0],
        fold_students=fold_students,
    )


# ---------------------------------------------------------------------------
# Persistence


def _tree_to_dict(tree: DecisionTree) -> dict:
    return {
        "feature": tree.feature.tolist(),
        "threshold": tree.threshold.tolist(),
        "left": tree.left.tolist(),
        "right": tree.right.tolist(),
        "leaf_stat": tree.leaf_stat.tolist(),
        "leaf_n": tree.leaf_n.tolist(),
    }


def _tree_from_dict(d: dict) -> DecisionTree:
    return DecisionTree(
        feature=np.asarray(d["feature"], dtype=np.int32),
        threshold=np.asarray(d["threshold"], dtype=np.float64),
        left=np.asarray(d["left"], dtype=np.int32),
        right=np.asarray(d["right"], dtype=np.int32),
        leaf_stat=np.asarray(d["leaf_stat"], dtype=np.float64),
        leaf_n=np.asarray(d["leaf_n"], dtype=np.float64),
    )


def model_to_json(model: ForestModel) -> str:
    doc = {
        "format": MODEL_FORMAT,
        "format_version": MODEL_FORMAT_VERSION,
        "task": model.task,
        "target_transform": model.target_transform,
        "degenerate": model.degenerate,
        "selected_features": list(model.selected_features),
        "params": {
            "n_trees": model.params.n_trees,
            "max_depth": model.params.max_depth,
            "min_samples_leaf": model.params.min_samples_leaf,
            "features_per_split": model.params.features_per_split,
            "max_bins": model.params.max_bins,
            "bootstrap_seed": model.params.bootstrap_seed,
        },
        "training_meta": model.training_meta,
        "trees": [_tree_to_dict(t) for t in model.trees],
    }
    return json.dumps(doc, sort_keys=True)


def model_from_json(text: str) -> ForestModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelIOError(f"unreadable model file: {exc.msg}") from None
    if doc.get("format") != MODEL_FORMAT:
        raise ModelIOError(f"not a {MODEL_FORMAT} file")
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise ModelIOError(
            f"unsupported model format version {doc.get('format_version')!r} "
            f"(supported: {MODEL_FORMAT_VERSION})"
        )
    p = doc["params"]
    return ForestModel(
        task=doc["task"],
        trees=[_tree_from_dict(t) for t in doc["trees"]],
        selected_features=tuple(doc["selected_features"]),
        params=ForestParams(
            n_trees=p["n_trees"],
            max_depth=p["max_depth"],
            min_samples_leaf=p["min_samples_leaf"],
            features_per_split=p["features_per_split"],
            max_bins=p["max_bins"],
            bootstrap_seed=p["bootstrap_seed"],
        ),
        target_transform=doc["target_transform"],
        degenerate=doc["degenerate"],
        training_meta=doc["training_meta"],
    )


def save_model(model: ForestModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model_to_json(model))


def load_model(path) -> ForestModel:
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_json(fh.read())
