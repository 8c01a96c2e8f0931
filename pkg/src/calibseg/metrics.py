"""Sample-quality and calibration metrics.

* ``iou_distance``: 1 - IoU, with two empty masks at distance 0.
* ``ged_squared``: generalised energy distance with IoU distance, every
  expectation estimated over all ordered pairs (diagonal included).
* ``ncc``: normalised cross-correlation of two maps with population
  standard deviations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ValidationError
from .uncertainty import binarize_samples, decompose, draw_samples


def _as_mask_stack(masks) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValidationError(f"expected a list of 2-D masks, got array of shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("masks must be binary")
    return arr.astype(bool)


def iou_distance(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(a & b) / union


def pairwise_iou_distance(a, b) -> np.ndarray:
    """Matrix ``d[i, j] = iou_distance(a[i], b[j])`` for two stacks of masks."""
    a = _as_mask_stack(a)
    b = _as_mask_stack(b)
    if a.shape[1:] != b.shape[1:]:
        raise ValidationError(f"mask shapes differ: {a.shape[1:]} vs {b.shape[1:]}")
    fa = a.reshape(len(a), -1).astype(np.int64)
    fb = b.reshape(len(b), -1).astype(np.int64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    d = np.zeros(inter.shape, dtype=np.float64)
    nz = union > 0
    d[nz] = 1.0 - inter[nz] / union[nz]
    return d


def _mean(values: np.ndarray) -> float:
    # correctly rounded sum: result does not depend on pair order
    return math.fsum(values.ravel().tolist()) / values.size


def ged_squared(samples, annotations) -> float:
    """2 E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')] over all ordered pairs."""
    if len(samples) == 0 or len(annotations) == 0:
        raise ValidationError("ged_squared needs at least one sample and one annotation")
    cross = _mean(pairwise_iou_distance(samples, annotations))
    within_s = _mean(pairwise_iou_distance(samples, samples))
    within_y = _mean(pairwise_iou_distance(annotations, annotations))
    return 2.0 * cross - within_s - within_y


def ncc_checked(a, b) -> tuple[float, bool]:
    """NCC plus a flag that is True when either map is constant (value then 0)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"map shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0, True
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.mean(da ** 2))
    sb = np.sqrt(np.mean(db ** 2))
    value = float(np.sum(da * db) / (a.size * sa * sb))
    return float(np.clip(value, -1.0, 1.0)), False


def ncc(a, b) -> float:
    return ncc_checked(a, b)[0]


@dataclass
class MetricsReport:
    """Per-image GED^2 / NCC rows for one model, across evaluation seeds."""

    name: str
    rows: list[dict] = field(default_factory=list)
    split: str = "test"
    samples: int = 50

    METRICS = ("ged_squared", "ncc")

    @property
    def seeds(self) -> list[int]:
        return sorted({r["seed"] for r in self.rows})

    def per_seed_means(self, metric: str) -> dict[int, float]:
        out = {}
        for seed in self.seeds:
            vals = [r[metric] for r in self.rows if r["seed"] == seed]
            out[seed] = float(np.mean(vals))
        return out

    @property
    def aggregate(self) -> dict:
        """Mean and population std of the per-seed image means, per metric."""
        agg = {}
        for metric in self.METRICS:
            means = np.array(list(self.per_seed_means(metric).values()))
            agg[metric] = {"mean": float(means.mean()), "std": float(means.std())}
        agg["ncc_degenerate"] = int(sum(bool(r.get("ncc_degenerate")) for r in self.rows))
        return agg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "split": self.split,
            "samples": self.samples,
            "seeds": self.seeds,
            "per_image": self.rows,
            "per_seed": {m: {str(k): v for k, v in self.per_seed_means(m).items()} for m in self.METRICS},
            "aggregate": self.aggregate,
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "ged_squared", "ncc", "seed"])
            for r in self.rows:
                writer.writerow([r["id"], repr(r["ged_squared"]), repr(r["ncc"]), r["seed"]])
        return path

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        data = json.loads(Path(path).read_text())
        return cls(name=data["name"], rows=data["per_image"], split=data.get("split", "test"),
                   samples=data.get("samples", 50))


def evaluate_model(model, items: Sequence, samples: int = 50, seeds: Sequence[int] = (0,),
                   name: str = "model", split: str = "test") -> MetricsReport:
    """Score ``model`` on dataset items.

    Per image and seed: draw ``samples`` predictive maps, threshold them for
    GED^2 against the grader masks, and correlate the aleatoric map with the
    grader variance map.
    """
    report = MetricsReport(name=name, split=split, samples=samples)
    config = getattr(model, "config", None)
    for it in items:
        if config is not None and it.image.shape != (config.height, config.width):
            raise ValidationError(f"item {it.id!r} is {it.image.shape}; model expects "
                                  f"{(config.height, config.width)}")
    for seed in seeds:
        generator = torch.Generator().manual_seed(int(seed))
        for it in items:
            sample_set = draw_samples(model, it.image.pixels, samples, generator)
            ged = ged_squared(binarize_samples(sample_set), it.annotations.masks)
            value, degenerate = ncc_checked(decompose(sample_set).aleatoric, it.stats.variance_map)
            report.rows.append({"id": it.id, "seed": int(seed), "ged_squared": ged, "ncc": value,
                                "ncc_degenerate": degenerate})
    return report
