"""LOOCV / holdout evaluation, the d sweep, confusion metrics and error bars."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from .classify import SelectionResult, lda_fit, sfs_select, stack_features, ClassifierError
from .grid import NeighborhoodSpec
from .lle import LleOptions, local_spectra, reconstruct_scan
from .pca import fit_pca

log = logging.getLogger(__name__)

METHODS = ("lle", "pca", "original")
METRICS = ("specificity", "sensitivity", "precision", "accuracy")
Z95 = 1.96


class InvalidFoldError(ValueError):
    """A LOOCV fold had a single-class training set."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


def d_grid(T: int, n_points: int = 12) -> list[int]:
    """Log-spaced integer grid from 1 to ``T`` inclusive, deduplicated."""
    if T < 1 or n_points < 1:
        raise ValueError(f"need T >= 1 and n_points >= 1, got {T}, {n_points}")
    if T == 1:
        return [1]
    pts = np.exp(np.linspace(0.0, math.log(T), max(n_points, 2)))
    grid = {int(math.floor(p + 0.5)) for p in pts}
    grid.update((1, T))
    return sorted(g for g in grid if 1 <= g <= T)


@dataclass
class LoocvResult:
    predictions: np.ndarray
    labels: np.ndarray
    invalid_folds: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def correct(self) -> int:
        return int((self.predictions == self.labels).sum())

    @property
    def accuracy(self) -> float:
        return self.correct / self.n


def loocv(features, labels, trainer=lda_fit, predictor=None) -> LoocvResult:
    """Leave-one-out predictions for every subject.

    ``predictor(model, X)`` defaults to ``model.predict(X)``. Folds whose
    training part holds one class only are marked with prediction ``-1`` and
    reported via :class:`InvalidFoldError`.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels).astype(int)
    n = y.size
    if n < 2:
        raise ValueError("LOOCV needs at least two subjects")
    if predictor is None:
        predictor = lambda model, Z: model.predict(Z)  # noqa: E731
    preds = np.full(n, -1)
    invalid = []
    mask = np.ones(n, dtype=bool)
    for k in range(n):
        mask[k] = False
        if np.unique(y[mask]).size < 2:
            invalid.append(k)
        else:
            model = trainer(X[mask], y[mask])
            preds[k] = int(np.asarray(predictor(model, X[k:k + 1])).ravel()[0])
        mask[k] = True
    result = LoocvResult(preds, y, invalid)
    if invalid:
        raise InvalidFoldError(
            f"{len(invalid)} LOOCV fold(s) have a single-class training set: {invalid}",
            result,
        )
    return result


def loocv_accuracy(features, labels) -> float:
    return loocv(features, labels).accuracy


def binomial_error(p: float, n: int) -> float:
    """95% normal-approximation half-width of a binomial proportion."""
    if not 0.0 <= p <= 1.0 or n < 1:
        raise ValueError(f"need 0 <= p <= 1 and n >= 1, got p={p}, n={n}")
    return Z95 * math.sqrt(p * (1.0 - p) / n)


def chance_baseline(labels) -> float:
    y = np.asarray(labels).astype(int)
    if y.size == 0:
        raise ValueError("chance baseline of an empty label set")
    n1 = int(y.sum())
    return max(n1, y.size - n1) / y.size


def majority_class(labels) -> int:
    """Majority label; ties go to controls (0)."""
    y = np.asarray(labels).astype(int)
    return 1 if 2 * int(y.sum()) > y.size else 0


def _ratio(a, b):
    return a / b if b else None


@dataclass
class EvaluationReport:
    partition: str
    tp: int
    fp: int
    tn: int
    fn: int
    chance: float
    half_widths: dict | None = None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self):
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def accuracy(self):
        return _ratio(self.tp + self.tn, self.n)

    def metric(self, name):
        return getattr(self, name)

    def to_text(self) -> str:
        lines = [f"report v1 {self.partition}",
                 f"counts TP={self.tp} FP={self.fp} TN={self.tn} FN={self.fn}",
                 f"chance {self.chance!r}"]
        for m in METRICS:
            value = self.metric(m)
            hw = None if self.half_widths is None else self.half_widths.get(m)
            lines.append(f"{m} {'N/A' if value is None else repr(value)}"
                         + ("" if hw is None else f" +- {hw!r}"))
        return "\n".join(lines) + "\n"


def confusion_metrics(predictions, labels, partition: str = "training",
                      half_widths: bool | None = None) -> EvaluationReport:
    """Confusion counts with patients (1) as the positive class.

    Half-widths default to on for the training partition only; each uses
    the total subject count as ``n``.
    """
    p = np.asarray(predictions).astype(int)
    y = np.asarray(labels).astype(int)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions for {y.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ValueError("predictions and labels must be binary")
    report = EvaluationReport(
        partition,
        tp=int(((p == 1) & (y == 1)).sum()),
        fp=int(((p == 1) & (y == 0)).sum()),
        tn=int(((p == 0) & (y == 0)).sum()),
        fn=int(((p == 0) & (y == 1)).sum()),
        chance=chance_baseline(y) if y.size else float("nan"),
    )
    if half_widths is None:
        half_widths = partition == "training"
    if half_widths:
        report.half_widths = {
            m: binomial_error(v, report.n)
            for m in METRICS if (v := report.metric(m)) is not None
        }
    return report


def chance_report(labels, partition: str = "training") -> EvaluationReport:
    """Metrics of the classifier that always predicts the majority class."""
    y = np.asarray(labels).astype(int)
    return confusion_metrics(np.full(y.size, majority_class(y)), y, partition)


class ModeCache:
    """Per-subject reconstructions, memoised across the ``d`` grid.

    For LLE the local Gram spectra of each subject are computed once and
    reused for every ``d``; for PCA the full rotation is fitted once.
    """

    def __init__(self, scans, method: str, r: int = 2, options: LleOptions | None = None,
                 threads: int = 1):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.scans = list(scans)
        self.method = method
        self.r = r
        self.options = options or LleOptions()
        self.threads = max(1, int(threads))
        self._prep = None
        self._nbhd = None
        self._stacks = {}

    @property
    def T(self) -> int:
        return self.scans[0].dims.T

    def _map(self, fn, items):
        if self.threads == 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.threads) as pool:
            return list(pool.map(fn, items))

    def _prepare(self):
        if self._prep is not None:
            return
        if self.method == "lle":
            self._nbhd = NeighborhoodSpec.build(self.scans[0].dims, self.r)
            self._prep = self._map(
                lambda s: local_spectra(s, self._nbhd, self.options.xi), self.scans)
        elif self.method == "pca":
            self._prep = self._map(lambda s: fit_pca(s.data), self.scans)
        else:
            self._prep = [None] * len(self.scans)

    def stack(self, d: int) -> np.ndarray:
        """``(n, V, d)`` modes of every subject."""
        d = int(d)
        if d not in self._stacks:
            self._stacks[d] = self._compute(d)
        return self._stacks[d]

    def _compute(self, d):
        if self.method == "original":
            if d != self.T:
                raise ValueError(f"method 'original' passes data through with d=T={self.T}")
            return np.stack([s.data for s in self.scans])
        self._prepare()
        if self.method == "pca":
            return np.stack([m.scores(s.data, d) for s, m in zip(self.scans, self._prep)])

        def one(k):
            return reconstruct_scan(
                self.scans[k], self.r, d, options=self.options,
                neighborhoods=self._nbhd, spectra=self._prep[k],
            ).modes

        return np.stack(self._map(one, range(len(self.scans))))


@dataclass
class SweepResult:
    method: str
    grid: list
    accuracies: dict
    selections: dict
    errors: dict
    chosen_d: int

    @property
    def selection(self) -> SelectionResult:
        return self.selections[self.chosen_d]

    def to_text(self) -> str:
        rows = [f"# sweep v1 method={self.method} chosen_d={self.chosen_d}",
                "d\taccuracy\tvolumes\tstatus"]
        for d in self.grid:
            if d in self.errors:
                rows.append(f"{d}\tnan\t\tERROR: {self.errors[d]}")
            else:
                sel = self.selections[d]
                rows.append(f"{d}\t{self.accuracies[d]!r}\t"
                            f"{','.join(map(str, sel.volumes))}\tok")
        return "\n".join(rows) + "\n"


def sweep(train_scans, method: str, r: int = 2, grid=None, options=None,
          n_points: int = 12, threads: int = 1, cache: ModeCache | None = None) -> SweepResult:
    """Pick ``d`` and the diagnostic volumes from the training partition only.

    For every ``d`` in the grid the subjects are reconstructed and SFS is run
    under LOOCV; the best accuracy wins, ties going to the smaller ``d``.
    Failures at one grid point are recorded and the sweep carries on.
    """
    scans = list(train_scans)
    labels = np.array([s.label for s in scans])
    if any(lab is None for lab in labels):
        raise ValueError("every training scan needs a label")
    labels = labels.astype(int)
    T = scans[0].dims.T
    if method == "original":
        grid = [T]
    elif grid is None:
        grid = d_grid(T, n_points)
    grid = sorted(set(int(g) for g in grid))
    cache = cache or ModeCache(scans, method, r, options, threads)
    accuracies, selections, errors = {}, {}, {}
    for d in grid:
        try:
            stack = cache.stack(d)
            sel = sfs_select(stack, labels)
        except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.warning("sweep: d=%d failed: %s", d, exc)
            errors[d] = str(exc).replace("\n", " ")
            continue
        selections[d] = sel
        accuracies[d] = sel.accuracy
        log.info("sweep: method=%s d=%d accuracy=%.4f volumes=%s",
                 method, d, sel.accuracy, sel.volumes)
    if not accuracies:
        raise RuntimeError(f"every grid point failed: {errors}")
    best = max(accuracies.values())
    chosen = min(d for d, a in accuracies.items() if a >= best - 0.5 / len(labels))
    return SweepResult(method, grid, accuracies, selections, errors, chosen)


def training_report(train_scans, d: int, volumes, method: str, r: int = 2,
                    options=None, cache: ModeCache | None = None) -> EvaluationReport:
    """LOOCV confusion metrics at fixed ``(d, volumes)``, with half-widths."""
    scans = list(train_scans)
    y = np.array([s.label for s in scans]).astype(int)
    cache = cache or ModeCache(scans, method, r, options)
    res = loocv(stack_features(cache.stack(d), volumes), y)
    return confusion_metrics(res.predictions, y, "training")


def holdout_evaluate(train_scans, holdout_scans, d: int, volumes, method: str,
                     r: int = 2, options=None, threads: int = 1,
                     train_cache: ModeCache | None = None,
                     holdout_cache: ModeCache | None = None):
    """Fit on the training subjects, predict each holdout subject once.

    Returns ``(report, predictions)``; the report carries no half-widths.
    """
    holdout = list(holdout_scans)
    if not holdout:
        raise ValueError("holdout partition is empty")
    train = list(train_scans)
    y_train = np.array([s.label for s in train]).astype(int)
    train_cache = train_cache or ModeCache(train, method, r, options, threads)
    model = lda_fit(stack_features(train_cache.stack(d), volumes), y_train)
    hold_cache = holdout_cache or ModeCache(holdout, method, r, options, threads)
    preds = model.predict(stack_features(hold_cache.stack(d), volumes))
    y_hold = np.array([s.label for s in holdout]).astype(int)
    return confusion_metrics(preds, y_hold, "holdout"), preds


def stratified_split(labels, n_holdout: int = 10, seed: int = 0):
    """Deterministic training/holdout split keeping class proportions close.

    Returns ``(train_idx, holdout_idx)`` as sorted index arrays.
    """
    y = np.asarray(labels).astype(int)
    n = y.size
    if not 0 < n_holdout < n:
        raise ValueError(f"holdout size must lie in (0, {n}), got {n_holdout}")
    rng = np.random.default_rng(seed)
    hold = []
    n1 = int(y.sum())
    want1 = int(round(n_holdout * n1 / n))
    for cls, want in ((1, want1), (0, n_holdout - want1)):
        idx = np.flatnonzero(y == cls)
        want = min(want, idx.size)
        hold.extend(rng.permutation(idx)[:want].tolist())
    hold = np.array(sorted(hold), dtype=int)
    train = np.setdiff1d(np.arange(n), hold)
    if np.unique(y[train]).size < 2:
        raise ClassifierError("split leaves a single class in training")
    return train, hold


def _fmt_pct(value, hw=None):
    if value is None:
        return "N/A"
    text = f"{100 * value:.1f}%"
    if hw is not None:
        text += f" ± {100 * hw:.1f}%"
    return text


def metrics_table(dataset: str, reports: dict) -> str:
    """Tab-separated table shaped like the published results table.

    ``reports`` maps partition -> {column -> EvaluationReport}, where columns
    are ``chance`` and any of the methods; missing columns print ``-``.
    """
    columns = ("chance", "original", "lle", "pca")
    header = ["dataset", "partition"] + [f"{m}_{c}" for m in METRICS for c in columns]
    rows = ["\t".join(header)]
    for partition in ("training", "holdout"):
        if partition not in reports:
            continue
        cells = [dataset, partition]
        for m in METRICS:
            for c in columns:
                rep = reports[partition].get(c)
                if rep is None:
                    cells.append("-")
                    continue
                value = rep.metric(m)
                hw = None if not rep.half_widths else rep.half_widths.get(m)
                cells.append(_fmt_pct(value, hw))
        rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"
