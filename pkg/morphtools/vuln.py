"""
Vulnerability of a face recognition system to morphs.

Scores are similarity-oriented (higher is a stronger match) and a comparison
matches when its score is strictly greater than the threshold.
"""
from dataclasses import dataclass, field
import itertools
import json
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from morphtools.errors import DataError
from morphtools.variable_names import apply_display_formatting

SCORE_COLUMNS = ["kind", "morph_id", "subject_index", "attempt_index", "score"]
KINDS = ("mated_morph", "genuine", "impostor")
COMBINED = "combined"
RATE_COLUMNS = ["mmpmr", "fmmpmr", "rmmr_mmpmr", "rmmr_fmmpmr"]
POLICIES = {
    "match_rule": "score > tau",
    "mmpmr": "min over subjects of max over attempts > tau",
    "fmmpmr_normalisation": "total (morph, attempt) pairs",
    "unequal_attempts": "truncate to the common attempt count for fmmpmr",
}


@dataclass
class ScoreSet:
    """mated[morph_id] holds one attempt list per contributing subject, ordered by attempt index."""

    mated: dict
    genuine: np.ndarray
    impostor: np.ndarray
    tags: dict = field(default_factory=dict)
    polarity: str = "similarity"

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64)
        self.impostor = np.asarray(self.impostor, dtype=np.float64)
        for morph_id, subjects in self.mated.items():
            if len(subjects) < 2:
                raise DataError(f"morph {morph_id}: needs at least 2 subjects, got {len(subjects)}")
            if not all(np.all(np.isfinite(a)) for a in subjects):
                raise DataError(f"morph {morph_id}: non-finite score")
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise DataError("non-finite genuine or impostor score")

    def subset(self, morph_ids):
        return ScoreSet({m: self.mated[m] for m in morph_ids}, self.genuine, self.impostor,
                        {m: self.tags.get(m, {}) for m in morph_ids}, self.polarity)


@dataclass
class VulnReport:
    tau: float
    fmr_target: float
    fnmr: float
    threshold_source: str
    group_by: tuple
    groups: pd.DataFrame
    warnings: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_frame(self):
        return self.groups.copy()

    def grid(self):
        """Table layout: first grouping key as rows, remaining keys × metric as columns."""
        frame = self.groups
        if not self.group_by:
            return frame[RATE_COLUMNS].rename(index={0: COMBINED})
        keys = list(self.group_by)
        if len(keys) == 1:
            return frame.set_index(keys[0])[RATE_COLUMNS]
        grid = frame.pivot(index=keys[0], columns=keys[1:], values=RATE_COLUMNS)
        grid = grid.reorder_levels(list(range(1, len(keys))) + [0], axis=1)
        grid.columns = ["|".join(map(str, c)) for c in grid.columns]
        ordered = [c for c in _column_order(frame, keys[1:]) if c in grid.columns]
        return grid.reindex(index=_ordered_values(frame[keys[0]]), columns=ordered)

    def to_dict(self):
        return {
            "tau": self.tau,
            "fmr_target": self.fmr_target,
            "fnmr": self.fnmr,
            "threshold_source": self.threshold_source,
            "group_by": list(self.group_by),
            "policies": POLICIES,
            "counts": self.counts,
            "warnings": self.warnings,
            "groups": self.groups.to_dict(orient="records"),
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.groups.to_csv(out_dir / "vuln_report.csv", index=False)
        grid = self.grid()
        apply_display_formatting(grid).to_csv(out_dir / "vuln_grid.csv")
        with open(out_dir / "vuln_report.json", "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        return out_dir


def _ordered_values(series):
    values = sorted(v for v in series.unique() if v != COMBINED)
    return values + ([COMBINED] if COMBINED in set(series) else [])


def _column_order(frame, keys):
    levels = [_ordered_values(frame[k]) for k in keys]
    return ["|".join(map(str, combo + (metric,)))
            for combo in itertools.product(*levels) for metric in RATE_COLUMNS]


# --- loading ---

def read_polarity(path):
    """Polarity declared on an optional `# polarity=` first line."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first.startswith("#"):
        return "similarity", 0
    key, _, value = first.lstrip("#").strip().partition("=")
    if key.strip() != "polarity" or value.strip() not in ("similarity", "distance"):
        raise DataError(f"{path}: bad header line '{first}'")
    return value.strip(), 1


def load_score_csv(path):
    path = Path(path)
    try:
        polarity, skip = read_polarity(path)
        frame = pd.read_csv(path, skiprows=skip, dtype={"kind": str, "morph_id": str}, keep_default_na=False)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read score file {path}: {exc}") from exc
    missing = [c for c in SCORE_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    unknown = sorted(set(frame["kind"]) - set(KINDS))
    if unknown:
        raise DataError(f"{path}: unknown kind values {unknown}")
    scores = pd.to_numeric(frame["score"], errors="coerce").to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise DataError(f"{path}: non-numeric or non-finite scores")
    if polarity == "distance":
        scores = -scores
    frame = frame.assign(score=scores)
    group_columns = [c for c in frame.columns if c.startswith("group_")]

    mated_rows = frame[frame["kind"] == "mated_morph"].copy()
    try:
        mated_rows["subject_index"] = mated_rows["subject_index"].astype(int)
        mated_rows["attempt_index"] = mated_rows["attempt_index"].astype(int)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: mated_morph rows need integer subject and attempt indices") from exc
    if mated_rows.duplicated(["morph_id", "subject_index", "attempt_index"]).any():
        raise DataError(f"{path}: duplicate (morph_id, subject_index, attempt_index) rows")

    mated, tags = {}, {}
    for morph_id, rows in mated_rows.sort_values(["morph_id", "subject_index", "attempt_index"]).groupby(
            "morph_id", sort=True):
        mated[morph_id] = [g["score"].to_numpy() for _, g in rows.groupby("subject_index", sort=True)]
        tags[morph_id] = {c[len("group_"):]: str(rows[c].iloc[0]) for c in group_columns}
    genuine = frame.loc[frame["kind"] == "genuine", "score"].to_numpy()
    impostor = frame.loc[frame["kind"] == "impostor", "score"].to_numpy()
    logger.info("{}: {} morphs, {} genuine, {} impostor scores ({})",
                path.name, len(mated), len(genuine), len(impostor), polarity)
    return ScoreSet(mated, genuine, impostor, tags, polarity)


# --- rates ---

def threshold_at_fmr(impostor, fmr):
    """Smallest impostor score τ with at most a `fmr` fraction of impostor scores above it."""
    scores = np.sort(np.asarray(impostor, dtype=np.float64))
    if scores.size == 0:
        raise DataError("empty impostor score list")
    if not (0 < fmr < 1):
        raise ValueError(f"fmr must lie in (0, 1), got {fmr}")
    above = scores.size - np.searchsorted(scores, scores, side="right")
    feasible = np.nonzero(above / scores.size <= fmr + 1e-12)[0]
    return float(scores[feasible[0]])


def fnmr_at(genuine, tau):
    genuine = np.asarray(genuine, dtype=np.float64)
    if genuine.size == 0:
        raise DataError("empty genuine score list")
    return float(np.mean(genuine <= tau))


def mmpmr(scores, tau):
    if not scores.mated:
        raise DataError("no mated morph scores")
    hits = 0
    for morph_id, subjects in scores.mated.items():
        if any(len(a) == 0 for a in subjects):
            raise DataError(f"morph {morph_id}: subject without attempts")
        hits += min(np.max(a) for a in subjects) > tau
    return hits / len(scores.mated)


def fmmpmr(scores, tau, warnings=None):
    """Fraction of (morph, attempt) pairs where every subject's attempt matches."""
    if not scores.mated:
        raise DataError("no mated morph scores")
    hits = pairs = 0
    for morph_id, subjects in scores.mated.items():
        counts = [len(a) for a in subjects]
        common = min(counts)
        if common == 0:
            raise DataError(f"morph {morph_id}: no common attempts across subjects")
        if len(set(counts)) > 1:
            message = f"morph {morph_id}: attempt counts {counts} truncated to {common}"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
        aligned = np.stack([np.asarray(a[:common]) for a in subjects])
        hits += int(np.sum(np.all(aligned > tau, axis=0)))
        pairs += common
    return hits / pairs


def rmmr(rate, fnmr):
    for name, value in (("rate", rate), ("fnmr", fnmr)):
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1], got {value}")
    # 1 + rate - (1 - fnmr), kept exact
    return rate + fnmr


def _group_rows(scores, group_by):
    """Every combination of tag values plus `combined` per key; yields (labels, morph ids)."""
    morph_ids = sorted(scores.mated)
    levels = []
    for key in group_by:
        values = sorted({scores.tags.get(m, {}).get(key, "") for m in morph_ids})
        levels.append(values + [COMBINED])
    for combo in itertools.product(*levels):
        members = [m for m in morph_ids
                   if all(v == COMBINED or scores.tags.get(m, {}).get(k, "") == v
                          for k, v in zip(group_by, combo))]
        yield dict(zip(group_by, combo)), members


def vulnerability_report(scores, fmr_target=0.001, group_by=("gender", "medium"), threshold=None):
    group_by = tuple(group_by)
    known = {k for t in scores.tags.values() for k in t}
    absent = [k for k in group_by if k not in known]
    if absent:
        raise DataError(f"score file has no group columns for {absent}")
    if threshold is None:
        tau = threshold_at_fmr(scores.impostor, fmr_target)
        source = "empirical"
    else:
        tau = float(threshold)
        source = "vendor"
    fnmr = fnmr_at(scores.genuine, tau)
    empirical_fmr = float(np.mean(scores.impostor > tau)) if scores.impostor.size else None

    warnings, rows = [], []
    for labels, members in _group_rows(scores, group_by):
        name = ", ".join(f"{k}={v}" for k, v in labels.items()) or COMBINED
        if not members:
            message = f"group {name}: no morphs, omitted"
            logger.warning(message)
            warnings.append(message)
            continue
        subset = scores.subset(members)
        group_mmpmr = mmpmr(subset, tau)
        group_fmmpmr = fmmpmr(subset, tau, warnings if all(v == COMBINED for v in labels.values()) else None)
        if group_fmmpmr > group_mmpmr:
            message = f"group {name}: fmmpmr {group_fmmpmr:.6f} exceeds mmpmr {group_mmpmr:.6f} (uneven attempts)"
            logger.warning(message)
            warnings.append(message)
        rows.append({
            **labels,
            "mmpmr": group_mmpmr,
            "fmmpmr": group_fmmpmr,
            "rmmr_mmpmr": rmmr(group_mmpmr, fnmr),
            "rmmr_fmmpmr": rmmr(group_fmmpmr, fnmr),
            "n_morphs": len(members),
            "n_pairs": sum(min(len(a) for a in subset.mated[m]) for m in members),
        })
    groups = pd.DataFrame(rows, columns=list(group_by) + RATE_COLUMNS + ["n_morphs", "n_pairs"])
    counts = {
        "morphs": len(scores.mated),
        "genuine": int(scores.genuine.size),
        "impostor": int(scores.impostor.size),
        "empirical_fmr": empirical_fmr,
    }
    logger.info("tau={:.6g} ({}) fnmr={:.4f} over {} groups", tau, source, fnmr, len(rows))
    return VulnReport(tau, fmr_target, fnmr, source, group_by, groups, warnings, counts)
