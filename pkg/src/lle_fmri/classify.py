"""Diagonal-covariance linear discriminant and greedy forward selection of volumes."""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

VAR_FLOOR = 1e-12
TIE_GAP = 1e-12


class ClassifierError(ValueError):
    pass


def flatten_volumes(modes, volumes) -> np.ndarray:
    """Concatenate the selected mode volumes of one subject.

    ``modes`` is ``(V, d)``; volumes are taken in ascending order and each
    contributes its ``V`` voxel values as one contiguous block.
    """
    modes = np.asarray(getattr(modes, "modes", modes), dtype=np.float64)
    vols = [int(v) for v in volumes]
    if len(set(vols)) != len(vols):
        raise ClassifierError(f"duplicate volume index in {vols}")
    d = modes.shape[1]
    for v in vols:
        if not 0 <= v < d:
            raise ClassifierError(f"volume index {v} outside [0, {d})")
    return modes[:, sorted(vols)].ravel(order="F")


def stack_features(mode_stack, volumes) -> np.ndarray:
    """``(n, V, d)`` subject stack -> ``(n, V * c)`` feature matrix."""
    mode_stack = np.asarray(mode_stack, dtype=np.float64)
    vols = sorted(int(v) for v in volumes)
    sel = mode_stack[:, :, vols]  # (n, V, c)
    return sel.transpose(0, 2, 1).reshape(len(mode_stack), -1)


@dataclass(frozen=True)
class LdaModel:
    means: np.ndarray  # (2, F)
    variances: np.ndarray  # (F,)
    priors: np.ndarray  # (2,)

    @property
    def n_features(self) -> int:
        return self.variances.size

    def gap(self, Z) -> np.ndarray:
        """Log-posterior gap (class 1 minus class 0) for each row of ``Z``."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.n_features:
            raise ClassifierError(
                f"feature length {Z.shape[1]} != model dimension {self.n_features}"
            )
        inv = 1.0 / self.variances
        q0 = ((Z - self.means[0]) ** 2 * inv).sum(axis=1)
        q1 = ((Z - self.means[1]) ** 2 * inv).sum(axis=1)
        return (math.log(self.priors[1]) - math.log(self.priors[0])) - 0.5 * (q1 - q0)

    def predict(self, Z) -> np.ndarray:
        return (self.gap(Z) > TIE_GAP).astype(int)


def lda_fit(features, labels) -> LdaModel:
    """Class means, pooled per-feature variance (``n - 2`` denominator), priors."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y = np.asarray(labels).astype(int)
    if X.shape[0] != y.size:
        raise ClassifierError(f"{X.shape[0]} feature rows for {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ClassifierError("labels must be 0 or 1")
    n1 = int(y.sum())
    n0 = y.size - n1
    if n0 == 0 or n1 == 0:
        raise ClassifierError("both classes must be present to fit")
    mu0 = X[y == 0].mean(axis=0)
    mu1 = X[y == 1].mean(axis=0)
    ss = ((X[y == 0] - mu0) ** 2).sum(axis=0) + ((X[y == 1] - mu1) ** 2).sum(axis=0)
    var = np.maximum(ss / max(y.size - 2, 1), VAR_FLOOR)
    priors = np.array([n0, n1], dtype=np.float64) / y.size
    return LdaModel(np.stack([mu0, mu1]), var, priors)


def lda_predict(model: LdaModel, z):
    """Label and log-posterior gap for a single feature vector.

    Gaps within ``1e-12`` of zero go to class 0.
    """
    g = float(model.gap(np.asarray(z, dtype=np.float64)[None, :])[0])
    return (1 if g > TIE_GAP else 0), g


@dataclass
class SelectionResult:
    volumes: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    d: int | None = None

    @property
    def accuracy(self) -> float:
        return self.trace[-1] if self.trace else float("nan")

    def to_text(self) -> str:
        return (
            "selection v1\n"
            + ("" if self.d is None else f"d {self.d}\n")
            + f"volumes {' '.join(str(v) for v in self.volumes)}\n"
            f"trace {' '.join(repr(float(a)) for a in self.trace)}\n"
            f"accuracy {float(self.accuracy)!r}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "SelectionResult":
        lines = dict(
            (ln.split(" ", 1) + [""])[:2] for ln in text.splitlines() if ln.strip()
        )
        if "selection" not in lines:
            raise ValueError("not a selection v1 document")
        return cls(
            [int(v) for v in lines.get("volumes", "").split()],
            [float(a) for a in lines.get("trace", "").split()],
            int(lines["d"]) if lines.get("d") else None,
        )


def sfs_select(mode_stack, labels, evaluator=None, candidates=None) -> SelectionResult:
    """Greedy sequential forward selection of mode volumes.

    Each round adds the volume whose inclusion gives the highest score from
    ``evaluator(features, labels)`` (LOOCV accuracy of the diagonal LDA by
    default). Ties go to the lowest index. A round is accepted only if it
    gains at least one more correctly classified subject; the first round is
    always accepted.
    """
    if evaluator is None:
        from .evaluation import loocv_accuracy as evaluator
    mode_stack = np.asarray(mode_stack, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    n, _, d = mode_stack.shape
    pool = list(range(d)) if candidates is None else sorted(int(c) for c in candidates)
    step = 0.5 / n  # accuracies are multiples of 1/n
    chosen, trace = [], []
    best = -math.inf
    while True:
        round_best, round_vol = -math.inf, None
        for v in pool:
            if v in chosen:
                continue
            acc = evaluator(stack_features(mode_stack, chosen + [v]), y)
            if round_vol is None or acc > round_best + step:
                round_best, round_vol = acc, v
        if round_vol is None or not round_best > best + step:
            break
        chosen.append(round_vol)
        trace.append(float(round_best))
        best = round_best
    return SelectionResult(chosen, trace, d)
