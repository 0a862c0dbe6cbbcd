"""Scoring explanation heatmaps against lesion segmentation masks.

The rank-accuracy top set has ``K = |S|`` pixels (ties broken by ascending
flat index). Under this reading a random heatmap scores about
``|S| / (H * W)`` on both metrics.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from netlens.errors import AlignmentError, ContractError, UndefinedScoreError
from netlens.npyio import read_npy
from netlens.prng import SplitMix64, derive_seed

POOLINGS = ("sum_pos", "l2_norm_sq")
LESIONS = ("microaneurysms", "haemorrhages", "hard_exudates", "total")
METRICS = ("RMA", "RRA")


def pool(relevance: np.ndarray, mode: str) -> np.ndarray:
    """Collapse a (C, H, W) relevance tensor to a non-negative (H, W) heatmap."""
    r = np.asarray(relevance, dtype=np.float64)
    if r.ndim == 2:
        r = r[None]
    if r.ndim != 3 or r.shape[0] < 1:
        raise ContractError(f"relevance must be (C, H, W), got shape {r.shape}")
    if mode == "sum_pos":
        return np.maximum(r.sum(axis=0), 0.0)
    if mode == "l2_norm_sq":
        return (r * r).sum(axis=0)
    raise ContractError(f"unknown pooling {mode!r}; expected one of {POOLINGS}")


def _check(heat: np.ndarray, mask: np.ndarray):
    heat = np.asarray(heat, dtype=np.float64)
    mask = np.asarray(mask)
    if heat.shape != mask.shape:
        raise ContractError(f"heatmap {heat.shape} and mask {mask.shape} differ in shape")
    return heat, mask != 0


def rma(heat: np.ndarray, mask: np.ndarray) -> float:
    """Relevance mass accuracy: share of total relevance inside the mask."""
    heat, inside = _check(heat, mask)
    total = heat.sum()
    if not total > 0.0:
        raise UndefinedScoreError("heatmap has no positive mass")
    return float(heat[inside].sum() / total)


def rra(heat: np.ndarray, mask: np.ndarray) -> float:
    """Relevance rank accuracy: fraction of the top-|S| pixels that fall inside the mask."""
    heat, inside = _check(heat, mask)
    k = int(inside.sum())
    if k == 0:
        raise ContractError("mask is empty")
    top = np.argsort(-heat.ravel(), kind="stable")[:k]
    return float(np.count_nonzero(inside.ravel()[top]) / k)


METRIC_FUNCS = {"RMA": rma, "RRA": rra}


def total_mask(masks: dict[str, np.ndarray]) -> np.ndarray:
    """Pixelwise OR of all lesion masks."""
    lesion = [np.asarray(m) != 0 for k, m in masks.items() if k != "total"]
    if not lesion:
        raise ContractError("no lesion masks to combine")
    return np.logical_or.reduce(lesion).astype(np.float32)


def random_baseline(mask: np.ndarray, pooling: str, trials: int, seed: int, channels: int = 3) -> dict:
    """Score i.i.d. standard-normal heatmaps against ``mask``.

    Trial ``t`` draws a (channels, H, W) tensor from the stream seeded with
    ``derive_seed(seed, t)``. Returns ``{metric: {"mean", "median", "scores"}}``.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1")
    mask = np.asarray(mask)
    h, w = mask.shape
    scores = {m: [] for m in METRICS}
    for t in range(trials):
        noise = SplitMix64(derive_seed(seed, t)).normal(channels * h * w).reshape(channels, h, w)
        heat = pool(noise, pooling)
        for m in METRICS:
            scores[m].append(METRIC_FUNCS[m](heat, mask))
    return {
        m: {"mean": float(np.mean(v)), "median": float(np.median(v)), "scores": np.asarray(v)}
        for m, v in scores.items()
    }


# ---------------------------------------------------------------- tables

@dataclass
class ScoreRow:
    lesion: str
    method: str
    pooling: str
    metric: str
    mean: float | None
    median: float | None
    n: int
    excluded: int


@dataclass
class XaiScoreTable:
    rows: list[ScoreRow] = field(default_factory=list)

    def get(self, lesion, method, pooling, metric) -> ScoreRow:
        for row in self.rows:
            if (row.lesion, row.method, row.pooling, row.metric) == (lesion, method, pooling, metric):
                return row
        raise KeyError((lesion, method, pooling, metric))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["lesion", "method", "pooling", "metric", "mean", "median"])
        for r in self.rows:
            writer.writerow([r.lesion, r.method, r.pooling, r.metric, _fmt(r.mean), _fmt(r.median)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True) + "\n"


def _fmt(v):
    return "" if v is None else repr(float(v))


def score_set(
    heatmaps: dict[str, np.ndarray],
    masks: dict[str, dict[str, np.ndarray]],
    poolings=POOLINGS,
    lesions=LESIONS,
    method: str = "LRP-a1b0",
) -> XaiScoreTable:
    """Mean and median RMA/RRA per lesion x pooling over an image set.

    ``heatmaps`` maps image id to channel-resolved relevance (C, H, W);
    ``masks`` maps the same ids to ``{lesion: (H, W) mask}``. A missing
    ``total`` mask is built as the OR of the others. Images whose lesion mask
    is absent or empty, or whose pooled heatmap has no mass, are excluded and
    counted, never scored as zero. Aggregation runs in sorted id order.
    """
    if set(heatmaps) != set(masks):
        only_h = sorted(set(heatmaps) - set(masks))
        only_m = sorted(set(masks) - set(heatmaps))
        raise AlignmentError(f"image ids differ: heatmaps only {only_h}, masks only {only_m}")
    ids = sorted(heatmaps)
    table = XaiScoreTable()
    for lesion in lesions:
        for pooling in poolings:
            per = {m: [] for m in METRICS}
            excluded = {m: 0 for m in METRICS}
            for image_id in ids:
                image_masks = dict(masks[image_id])
                if lesion == "total" and "total" not in image_masks:
                    image_masks["total"] = total_mask(image_masks)
                mask = image_masks.get(lesion)
                heat = pool(heatmaps[image_id], pooling)
                for m in METRICS:
                    if mask is None or not np.any(mask):
                        excluded[m] += 1
                        continue
                    try:
                        per[m].append(METRIC_FUNCS[m](heat, mask))
                    except UndefinedScoreError:
                        excluded[m] += 1
            for m in METRICS:
                v = per[m]
                table.rows.append(ScoreRow(
                    lesion, method, pooling, m,
                    float(np.mean(v)) if v else None,
                    float(np.median(v)) if v else None,
                    len(v), excluded[m],
                ))
    return table


def random_table(masks: dict[str, dict[str, np.ndarray]], poolings, lesions, trials: int, seed: int,
                 channels: int = 3) -> XaiScoreTable:
    """Random-heatmap control rows (method ``"Random"``), one trial set per image."""
    ids = sorted(masks)
    table = XaiScoreTable()
    for lesion in lesions:
        for pooling in poolings:
            per = {m: [] for m in METRICS}
            excluded = {m: 0 for m in METRICS}
            for idx, image_id in enumerate(ids):
                image_masks = dict(masks[image_id])
                if lesion == "total" and "total" not in image_masks:
                    image_masks["total"] = total_mask(image_masks)
                mask = image_masks.get(lesion)
                if mask is None or not np.any(mask):
                    for m in METRICS:
                        excluded[m] += 1
                    continue
                res = random_baseline(mask, pooling, trials, derive_seed(seed, image_id, lesion, pooling), channels)
                for m in METRICS:
                    per[m].append(res[m]["mean"])
            for m in METRICS:
                v = per[m]
                table.rows.append(ScoreRow(
                    lesion, "Random", pooling, m,
                    float(np.mean(v)) if v else None,
                    float(np.median(v)) if v else None,
                    len(v), excluded[m],
                ))
    return table


def load_mask_index(index_path: str | os.PathLike) -> dict[str, dict[str, np.ndarray]]:
    """Read ``{image_id: {lesion: "file.npy"}}`` with paths relative to the index."""
    index_path = Path(index_path)
    if not index_path.is_file():
        raise FileNotFoundError(f"missing mask index {index_path}")
    try:
        doc = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{index_path}: invalid JSON ({exc})") from exc
    out = {}
    for image_id, lesions in doc.items():
        out[image_id] = {}
        for lesion, ref in lesions.items():
            m = read_npy(index_path.parent / ref)
            if not np.all((m == 0) | (m == 1)):
                raise ContractError(f"{ref}: mask entries must be 0 or 1")
            out[image_id][lesion] = m
    return out
