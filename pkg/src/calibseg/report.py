"""Figures and tables: sample grids, uncertainty panels, metric summaries."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ValidationError
from .metrics import MetricsReport

CLIP_PERCENTILE = 99.0


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save(array: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")
    return path


def render_sample_grid(x, annotations: Sequence, samples: Sequence, path) -> Path:
    """Input patch in the top-left cell; graders along row 0, model samples along row 1."""
    if len(samples) < 1:
        raise ValidationError("render_sample_grid needs at least one sample")
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape
    for m in list(annotations) + list(samples):
        if np.shape(m) != (h, w):
            raise ValidationError(f"mask of shape {np.shape(m)} does not match image {x.shape}")
    cols = 1 + max(len(annotations), len(samples))
    grid = np.zeros((2 * h, cols * w), dtype=np.uint8)
    grid[:h, :w] = _to_uint8(x)
    for row, masks in enumerate((annotations, samples)):
        for j, m in enumerate(masks, start=1):
            grid[row * h:(row + 1) * h, j * w:(j + 1) * w] = np.where(np.asarray(m) > 0, 255, 0)
    return _save(grid, path)


def clip_threshold(*maps: np.ndarray, percentile: float = CLIP_PERCENTILE) -> float:
    """Shared display ceiling: the given percentile of all values pooled."""
    return float(np.percentile(np.concatenate([np.ravel(m) for m in maps]), percentile))


def _scale(values: np.ndarray, ceiling: float) -> np.ndarray:
    if ceiling <= 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return _to_uint8(np.minimum(values, ceiling) / ceiling)


def render_uncertainty_panel(x, gt_variance, aleatoric, epistemic, path) -> Path:
    """Four panels left to right: input, grader variance, predicted aleatoric, epistemic.

    The two data-uncertainty panels share one ceiling so they can be compared
    directly; epistemic gets its own. Values above a ceiling saturate.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in (x, gt_variance, aleatoric, epistemic)]
    if len({m.shape for m in maps}) != 1:
        raise ValidationError(f"panel maps differ in shape: {[m.shape for m in maps]}")
    x, gt, al, ep = maps
    shared = clip_threshold(gt, al)
    panels = [_to_uint8(x), _scale(gt, shared), _scale(al, shared), _scale(ep, clip_threshold(ep))]
    return _save(np.concatenate(panels, axis=1), path)


def emit_tables(reports: Sequence[MetricsReport], path) -> tuple[Path, Path]:
    """Write ``<path>.csv`` and ``<path>.json`` with one mean/std row per report."""
    if not reports:
        raise ValidationError("emit_tables needs at least one report")
    rows = []
    for r in reports:
        for row in r.rows:
            missing = {"id", "seed", *MetricsReport.METRICS} - set(row)
            if missing:
                raise ValidationError(f"report {r.name!r} rows lack fields {sorted(missing)}")
        agg = r.aggregate
        rows.append({
            "model": r.name,
            "split": r.split,
            "seeds": len(r.seeds),
            "ged_squared_mean": agg["ged_squared"]["mean"],
            "ged_squared_std": agg["ged_squared"]["std"],
            "ncc_mean": agg["ncc"]["mean"],
            "ncc_std": agg["ncc"]["std"],
        })
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    json_path.write_text(json.dumps(rows, indent=1))
    return csv_path, json_path


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Plain-text "mean ± std" table for terminals."""
    lines = [f"{'model':<24} {'GED^2':>18} {'NCC':>18}"]
    for r in reports:
        a = r.aggregate
        lines.append(f"{r.name:<24} {a['ged_squared']['mean']:>9.3f} ± {a['ged_squared']['std']:<6.3f}"
                     f" {a['ncc']['mean']:>9.3f} ± {a['ncc']['std']:<6.3f}")
    return "\n".join(lines)
