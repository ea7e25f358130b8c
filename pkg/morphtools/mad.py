"""
Morphing attack detection metrics over detector score files.

Higher scores are more attack-like. A sample is classified as an attack when
its score is strictly greater than θ; ties fall to bona fide.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import itertools
import json
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy.ndimage import median_filter

from morphtools.charts import det_curve_chart
from morphtools.errors import DataError
from morphtools.variable_names import apply_display_formatting

MAD_COLUMNS = ["class", "score", "generation_method", "medium", "split"]
CLASSES = ("attack", "bonafide")
APCER_TARGETS = {"bpcer_apcer5": 0.05, "bpcer_apcer10": 0.10}
GRID_METRICS = ["d_eer", "bpcer_apcer5", "bpcer_apcer10"]
ABSENT = "ABSENT"
TIE_RULE = "score > theta is attack; ties classified bona fide"


@dataclass
class MadScoreSet:
    attack: np.ndarray
    bonafide: np.ndarray
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.attack = np.asarray(self.attack, dtype=np.float64).ravel()
        self.bonafide = np.asarray(self.bonafide, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.attack)) and np.all(np.isfinite(self.bonafide))):
            raise DataError("non-finite detector score")

    @property
    def evaluable(self):
        return self.attack.size > 0 and self.bonafide.size > 0

    def require_both(self):
        if not self.evaluable:
            raise DataError(f"need attack and bona fide scores, got {self.attack.size} and {self.bonafide.size}")


@dataclass
class MadReport:
    cells: pd.DataFrame
    curves: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def grid(self):
        """Training method × testing method rows, medium × metric columns."""
        frame = self.cells.copy()
        grid = frame.pivot(index=["train", "test"], columns="medium", values=GRID_METRICS)
        grid = grid.reorder_levels([1, 0], axis=1)
        mediums = sorted(frame["medium"].unique())
        grid = grid.reindex(columns=[(m, k) for m in mediums for k in GRID_METRICS])
        grid.columns = [f"{m}|{k}" for m, k in grid.columns]
        return grid

    def to_dict(self):
        return {
            "tie_rule": TIE_RULE,
            "apcer_targets": APCER_TARGETS,
            "eer_interpolation": "linear between adjacent operating points; plateau midpoint",
            "warnings": self.warnings,
            "cells": json.loads(self.cells.to_json(orient="records")),
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.cells.to_csv(out_dir / "mad_report.csv", index=False, na_rep=ABSENT)
        apply_display_formatting(self.grid(), missing=ABSENT).to_csv(out_dir / "mad_grid.csv")
        with open(out_dir / "mad_report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        if self.curves:
            long = pd.concat([c.assign(cell=label) for label, c in self.curves.items()], ignore_index=True)
            long.to_csv(out_dir / "det_curves.csv", index=False)
            html = det_curve_chart(self.curves, bottom_text=TIE_RULE)
            (out_dir / "det_curves.html").write_text(html, encoding="utf-8")
        return out_dir


# --- operating points ---

def _operating_points(scores):
    """Candidate thresholds (−inf then every distinct score) with their APCER and BPCER."""
    scores.require_both()
    attack, bonafide = np.sort(scores.attack), np.sort(scores.bonafide)
    thresholds = np.concatenate([[-np.inf], np.unique(np.concatenate([attack, bonafide]))])
    apcer = np.searchsorted(attack, thresholds, side="right") / attack.size
    bpcer = (bonafide.size - np.searchsorted(bonafide, thresholds, side="right")) / bonafide.size
    return thresholds, apcer, bpcer


def apcer_bpcer_at(scores, theta):
    scores.require_both()
    return float(np.mean(scores.attack <= theta)), float(np.mean(scores.bonafide > theta))


def det_curve(scores):
    thresholds, apcer, bpcer = _operating_points(scores)
    return pd.DataFrame({"threshold": thresholds, "apcer": apcer, "bpcer": bpcer})


def d_eer(scores):
    """Equal error rate and its threshold, interpolated where APCER − BPCER changes sign."""
    thresholds, apcer, bpcer = _operating_points(scores)
    diff = apcer - bpcer
    # diff is -1 at -inf and +1 at the largest score
    i = int(np.argmax(diff >= 0))
    if diff[i] == 0:
        j = i
        while j + 1 < diff.size and diff[j + 1] == 0:
            j += 1
        return float(apcer[i]), float((thresholds[i] + thresholds[j]) / 2.0)
    t = -diff[i - 1] / (diff[i] - diff[i - 1])
    eer = apcer[i - 1] + t * (apcer[i] - apcer[i - 1])
    if np.isinf(thresholds[i - 1]):
        theta = thresholds[i]
    else:
        theta = thresholds[i - 1] + t * (thresholds[i] - thresholds[i - 1])
    return float(eer), float(theta)


def bpcer_at_apcer(scores, target):
    if not (0 < target < 1):
        raise ValueError(f"APCER target must lie in (0, 1), got {target}")
    thresholds, apcer, bpcer = _operating_points(scores)
    feasible = np.nonzero(apcer <= target + 1e-12)[0]
    if feasible.size == 0:
        raise DataError(f"no threshold reaches APCER <= {target}")
    # bpcer is non-increasing, so the largest feasible threshold is optimal
    return float(bpcer[feasible[-1]])


# --- score files and grids ---

def load_mad_csv(path):
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read MAD score file {path}: {exc}") from exc
    missing = [c for c in MAD_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    frame = frame[MAD_COLUMNS].apply(lambda col: col.str.strip())
    unknown = sorted(set(frame["class"]) - set(CLASSES))
    if unknown:
        raise DataError(f"{path}: unknown class values {unknown}")
    frame["score"] = pd.to_numeric(frame["score"], errors="coerce")
    if not np.all(np.isfinite(frame["score"].to_numpy(dtype=np.float64))):
        raise DataError(f"{path}: non-numeric or non-finite scores")
    if (frame.loc[frame["class"] == "attack", "generation_method"] == "").any():
        raise DataError(f"{path}: attack rows need a generation_method")
    logger.info("{}: {} attack, {} bona fide scores", path.name,
                int((frame["class"] == "attack").sum()), int((frame["class"] == "bonafide").sum()))
    return frame


def mad_cells(frame):
    """One score set per (train split, test method, medium), covering the full grid.

    Bona fide rows without a generation method are shared by every cell with
    the same split and medium.
    """
    trains = sorted(v for v in frame["split"].unique() if v)
    tests = sorted(v for v in frame.loc[frame["class"] == "attack", "generation_method"].unique())
    mediums = sorted(frame["medium"].unique())
    cells = []
    for train, test, medium in itertools.product(trains, tests, mediums):
        here = frame[(frame["split"] == train) & (frame["medium"] == medium)]
        attack = here.loc[(here["class"] == "attack") & (here["generation_method"] == test), "score"]
        bonafide = here.loc[(here["class"] == "bonafide")
                            & here["generation_method"].isin(["", test]), "score"]
        cells.append(MadScoreSet(attack.to_numpy(), bonafide.to_numpy(),
                                 {"train": train, "test": test, "medium": medium}))
    return cells


def _evaluate_cell(cell):
    row = {**cell.tags, "status": "ok", "n_attack": int(cell.attack.size), "n_bonafide": int(cell.bonafide.size)}
    if not cell.evaluable:
        row["status"] = ABSENT
        return row, None
    row["d_eer"], row["theta_eer"] = d_eer(cell)
    for name, target in APCER_TARGETS.items():
        row[name] = bpcer_at_apcer(cell, target)
    return row, det_curve(cell)


def mad_grid_report(cells, jobs=1):
    """Metrics for every cell; a cell missing either class is reported absent, never as zero."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(_evaluate_cell, cells))
    warnings, curves, rows = [], {}, []
    for cell, (row, curve) in zip(cells, results):
        label = f"{cell.tags.get('train', '')} / {cell.tags.get('test', '')} / {cell.tags.get('medium', '')}"
        if curve is None:
            message = f"cell {label}: {row['n_attack']} attack / {row['n_bonafide']} bona fide scores, absent"
            logger.warning(message)
            warnings.append(message)
        else:
            curves[label] = curve
            logger.info("cell {}: D-EER {:.4f}", label, row["d_eer"])
        rows.append(row)
    columns = ["train", "test", "medium", "status", "d_eer", "theta_eer", *APCER_TARGETS, "n_attack", "n_bonafide"]
    return MadReport(pd.DataFrame(rows, columns=columns), curves, warnings)


def baseline_attack_score(image):
    """Mean absolute residual after 3×3 median filtering of each channel."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected h×w or c×h×w image, got {image.shape}")
    return float(np.mean(np.abs(image - median_filter(image, size=(1, 3, 3), mode="reflect"))))
