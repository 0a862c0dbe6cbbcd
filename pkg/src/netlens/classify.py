"""ICDR grades, referable-DR binarisation and rank-based AUC."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from netlens.errors import ContractError, NumericError

GRADES = (0, 1, 2, 3, 4)
HEALTHY_GRADES = (0, 1, 2)
SIMPLEX_TOL = 1e-6


@dataclass
class PredictionRecord:
    image_id: str
    probs: np.ndarray
    grade: int | None = None

    @property
    def disease_score(self) -> float:
        return disease_score(self.probs)


def _check_grade(grade) -> int:
    if isinstance(grade, bool) or int(grade) != grade or int(grade) not in GRADES:
        raise ContractError(f"grade {grade!r} outside the ICDR scale 0..4")
    return int(grade)


def to_referable(grade, healthy_grades=HEALTHY_GRADES) -> int:
    """1 for referable disease (grades 3-4 by default), 0 for healthy."""
    return 0 if _check_grade(grade) in healthy_grades else 1


def default_disease_classes(classes: int, healthy_grades=HEALTHY_GRADES) -> tuple[int, ...]:
    if classes == len(GRADES):
        return tuple(g for g in GRADES if g not in healthy_grades)
    if classes == 2:
        return (1,)
    raise ContractError(f"no default disease classes for a {classes}-class head; pass them explicitly")


def disease_score(probs, healthy_grades=HEALTHY_GRADES) -> float:
    """Summed probability of the disease grades (``p3 + p4`` by default)."""
    p = np.asarray(probs, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError(f"non-finite probabilities {p.tolist()}")
    if p.shape != (len(GRADES),) or np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ContractError(f"probabilities {p.tolist()} are not a 5-class simplex")
    return float(sum(p[g] for g in GRADES if g not in healthy_grades))


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(xs.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with tied pairs counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    if np.isnan(s).any():
        raise NumericError("NaN score")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC undefined: labels contain a single class")
    u = midranks(s)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def read_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    """Read ``image_id,p0..p4,grade`` rows; an empty grade cell means unknown."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing predictions file {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = ["image_id"] + [f"p{g}" for g in GRADES]
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in need):
            raise ContractError(f"{path}: header must contain {need + ['grade']}")
        records = []
        for row in reader:
            try:
                probs = np.array([float(row[f"p{g}"]) for g in GRADES])
            except ValueError as exc:
                raise ContractError(f"{path}: bad probability in row {row['image_id']}") from exc
            grade = row.get("grade", "")
            records.append(PredictionRecord(row["image_id"], probs, _check_grade(int(grade)) if grade else None))
    return records


def evaluate(records: list[PredictionRecord], healthy_grades=HEALTHY_GRADES) -> dict:
    labelled = [r for r in records if r.grade is not None]
    scores = [disease_score(r.probs, healthy_grades) for r in labelled]
    labels = [to_referable(r.grade, healthy_grades) for r in labelled]
    value = auc(scores, labels)
    n_pos = int(sum(labels))
    return {"auc": value, "n_pos": n_pos, "n_neg": len(labels) - n_pos}
