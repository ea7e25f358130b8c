import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from morphtools.errors import DataError
from morphtools.vuln import (
    COMBINED,
    RATE_COLUMNS,
    ScoreSet,
    fmmpmr,
    fnmr_at,
    load_score_csv,
    mmpmr,
    rmmr,
    threshold_at_fmr,
    vulnerability_report,
)


def _scores(mated, genuine=(10.0, 11.0), impostor=(0.0, 1.0), tags=None):
    mated = {m: [np.asarray(a, dtype=float) for a in subjects] for m, subjects in mated.items()}
    return ScoreSet(mated, np.asarray(genuine), np.asarray(impostor), tags or {})


@pytest.fixture
def random_scores():
    """500 morphs, two subjects, three attempts each, tagged by gender and medium."""
    rng = np.random.default_rng(500)
    mated, tags = {}, {}
    for i in range(500):
        morph_id = f"m{i:03d}"
        mated[morph_id] = [rng.normal(0.6, 0.2, 3), rng.normal(0.5, 0.25, 3)]
        tags[morph_id] = {"gender": rng.choice(["female", "male"]), "medium": rng.choice(["digital", "print"])}
    return ScoreSet(mated, rng.normal(0.9, 0.1, 400), rng.normal(0.2, 0.15, 2000), tags)


def _oracle_rates(scores, members, tau):
    morph_hits = pair_hits = pairs = 0
    for m in members:
        s1, s2 = scores.mated[m]
        morph_hits += int(max(s1) > tau and max(s2) > tau)
        for a in range(len(s1)):
            pair_hits += int(s1[a] > tau and s2[a] > tau)
            pairs += 1
    return morph_hits / len(members), pair_hits / pairs


# --- thresholds ---

def test_threshold_examples():
    assert threshold_at_fmr(np.arange(1, 1001), 0.001) == 999.0
    assert threshold_at_fmr([0.0, 1.0], 0.5) == 0.0
    assert threshold_at_fmr([0.4, 0.4, 0.4], 0.01) == 0.4


def test_threshold_respects_target(rng):
    impostor = rng.standard_normal(5000)
    for fmr in (0.001, 0.01, 0.1):
        tau = threshold_at_fmr(impostor, fmr)
        assert np.mean(impostor > tau) <= fmr


def test_threshold_rejects_bad_input():
    with pytest.raises(DataError):
        threshold_at_fmr([], 0.01)
    with pytest.raises(ValueError):
        threshold_at_fmr([1.0], 1.5)


def test_fnmr_examples():
    assert fnmr_at([5.0, 6.0], 1.0) == 0.0
    assert fnmr_at([0.5, 1.0], 1.0) == 1.0
    assert fnmr_at([1.0, 2.0, 3.0, 4.0], 2.0) == 0.5


# --- morph match rates ---

def test_fmmpmr_pairs_attempts():
    assert fmmpmr(_scores({"m": [[5, 5], [5, 1]]}), 3.0) == 0.5
    assert fmmpmr(_scores({"m": [[5, 6], [7, 8]]}), 3.0) == 1.0
    assert fmmpmr(_scores({"m": [[5, 6], [1, 2]]}), 3.0) == 0.0


def test_mmpmr_weakest_subject_decides():
    assert mmpmr(_scores({"m": [[9, 1], [7]]}), 6.0) == 1.0
    assert mmpmr(_scores({"m": [[9], [2, 1]]}), 6.0) == 0.0


def test_rates_match_nested_loop_recount(random_scores):
    members = sorted(random_scores.mated)[:200]
    subset = random_scores.subset(members)
    for tau in (0.3, 0.5, 0.7):
        expected_mmpmr, expected_fmmpmr = _oracle_rates(random_scores, members, tau)
        assert mmpmr(subset, tau) == pytest.approx(expected_mmpmr, abs=1e-15)
        assert fmmpmr(subset, tau) == pytest.approx(expected_fmmpmr, abs=1e-15)


def test_rate_properties(random_scores):
    taus = np.linspace(-0.5, 1.5, 21)
    mm = [mmpmr(random_scores, t) for t in taus]
    fm = [fmmpmr(random_scores, t) for t in taus]
    assert all(f <= m for f, m in zip(fm, mm))
    assert all(a >= b for a, b in zip(mm, mm[1:]))
    assert all(a >= b for a, b in zip(fm, fm[1:]))


def test_failing_morph_never_raises_rates(random_scores):
    tau = 0.5
    members = sorted(random_scores.mated)[:50]
    subset = random_scores.subset(members)
    grown = dict(subset.mated)
    grown["weak"] = [np.full(3, 0.1), np.full(3, 0.1)]
    bigger = ScoreSet(grown, subset.genuine, subset.impostor)
    assert mmpmr(bigger, tau) <= mmpmr(subset, tau)
    assert fmmpmr(bigger, tau) <= fmmpmr(subset, tau)


def test_uneven_attempts_are_truncated_with_warning():
    warnings = []
    rate = fmmpmr(_scores({"m": [[5, 5, 5], [5, 1]]}), 3.0, warnings)
    assert rate == 0.5
    assert len(warnings) == 1 and "truncated to 2" in warnings[0]


def test_rmmr_examples():
    assert rmmr(0.9436, 0.0) == 0.9436
    assert rmmr(0.0, 1.0) == 1.0
    assert rmmr(0.25, 0.5) == 0.75
    with pytest.raises(ValueError):
        rmmr(1.2, 0.0)


def test_score_set_validation():
    with pytest.raises(DataError):
        _scores({"m": [[1.0]]})
    with pytest.raises(DataError):
        _scores({"m": [[1.0], [np.nan]]})


# --- report ---

def test_single_group_equals_combined():
    tags = {"a": {"gender": "female"}, "b": {"gender": "female"}}
    report = vulnerability_report(_scores({"a": [[5], [5]], "b": [[5], [1]]}, tags=tags), 0.5, ["gender"])
    frame = report.to_frame().set_index("gender")
    assert list(frame.index) == ["female", COMBINED]
    assert frame.loc["female", RATE_COLUMNS].tolist() == frame.loc[COMBINED, RATE_COLUMNS].tolist()


def test_all_pass_fixture():
    scores = _scores({"a": [[5, 6], [7, 8]], "b": [[9], [9]]},
                     genuine=[-1.0, 10.0], tags={"a": {"gender": "f"}, "b": {"gender": "m"}})
    report = vulnerability_report(scores, 0.5, ["gender"])
    assert report.tau == 0.0
    assert report.fnmr == 0.5
    assert (report.groups[["mmpmr", "fmmpmr"]] == 1.0).all().all()
    assert (report.groups[["rmmr_mmpmr", "rmmr_fmmpmr"]] == 1.5).all().all()


def test_zero_fnmr_makes_rmmr_equal_rates(random_scores):
    report = vulnerability_report(random_scores, 0.001, threshold=0.3)
    assert report.threshold_source == "vendor"
    assert report.fnmr == 0.0
    groups = report.groups
    assert groups["rmmr_mmpmr"].tolist() == groups["mmpmr"].tolist()
    assert groups["rmmr_fmmpmr"].tolist() == groups["fmmpmr"].tolist()


def test_group_rates_match_recount(random_scores):
    report = vulnerability_report(random_scores, 0.01)
    assert report.threshold_source == "empirical"
    assert report.counts["empirical_fmr"] <= 0.01
    assert len(report.groups) == 9
    for _, row in report.groups.iterrows():
        members = [m for m, t in random_scores.tags.items()
                   if row["gender"] in (COMBINED, t["gender"]) and row["medium"] in (COMBINED, t["medium"])]
        expected_mmpmr, expected_fmmpmr = _oracle_rates(random_scores, members, report.tau)
        assert row["n_morphs"] == len(members)
        assert row["n_pairs"] == 3 * len(members)
        assert row["mmpmr"] == pytest.approx(expected_mmpmr, abs=1e-15)
        assert row["fmmpmr"] == pytest.approx(expected_fmmpmr, abs=1e-15)


def test_empty_group_is_omitted_with_warning():
    tags = {"a": {"gender": "f", "medium": "digital"}, "b": {"gender": "m", "medium": "print"}}
    report = vulnerability_report(_scores({"a": [[5], [5]], "b": [[5], [1]]}, tags=tags), 0.5)
    assert len(report.groups) == 7
    assert sum("no morphs" in w for w in report.warnings) == 2


def test_unknown_group_key():
    with pytest.raises(DataError, match="age"):
        vulnerability_report(_scores({"a": [[5], [5]]}, tags={"a": {"gender": "f"}}), 0.5, ["age"])


def test_grid_layout(random_scores):
    grid = vulnerability_report(random_scores, 0.01).grid()
    assert list(grid.index) == ["female", "male", COMBINED]
    assert list(grid.columns[:4]) == [f"digital|{m}" for m in RATE_COLUMNS]
    assert grid.columns[-1] == f"{COMBINED}|rmmr_fmmpmr"


def test_report_files(tmp_path, random_scores):
    report = vulnerability_report(random_scores, 0.01)
    report.write(tmp_path)
    table = pd.read_csv(tmp_path / "vuln_report.csv")
    assert list(table.columns) == ["gender", "medium"] + RATE_COLUMNS + ["n_morphs", "n_pairs"]
    grid = pd.read_csv(tmp_path / "vuln_grid.csv", index_col=0)
    assert "digital | MMPMR (%)" in grid.columns
    with open(tmp_path / "vuln_report.json") as fh:
        meta = json.load(fh)
    assert meta["tau"] == report.tau
    assert meta["threshold_source"] == "empirical"
    assert "mmpmr" in meta["policies"]
    assert len(meta["groups"]) == 9


# --- score files ---

def _write_scores(path, header=None):
    rows = [
        "kind,morph_id,subject_index,attempt_index,score,group_gender,group_medium",
        "mated_morph,m1,1,1,0.2,female,digital",
        "mated_morph,m1,2,1,0.4,female,digital",
        "mated_morph,m1,1,2,0.1,female,digital",
        "mated_morph,m1,2,2,0.3,female,digital",
        "genuine,,,,0.05,,",
        "impostor,,,,0.9,,",
        "impostor,,,,0.8,,",
    ]
    path.write_text("\n".join(([header] if header else []) + rows) + "\n")
    return path


def test_load_distance_scores(tmp_path):
    scores = load_score_csv(_write_scores(tmp_path / "scores.csv", "# polarity=distance"))
    assert scores.polarity == "distance"
    assert [a.tolist() for a in scores.mated["m1"]] == [[-0.2, -0.1], [-0.4, -0.3]]
    assert scores.genuine.tolist() == [-0.05]
    assert sorted(scores.impostor.tolist()) == [-0.9, -0.8]
    assert scores.tags["m1"] == {"gender": "female", "medium": "digital"}


def test_load_similarity_scores_by_default(tmp_path):
    scores = load_score_csv(_write_scores(tmp_path / "scores.csv"))
    assert scores.polarity == "similarity"
    assert scores.mated["m1"][0].tolist() == [0.2, 0.1]


def test_bad_score_files(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("kind,morph_id,subject_index,attempt_index,score\nforged,m1,1,1,0.2\n")
    with pytest.raises(DataError, match="unknown kind"):
        load_score_csv(path)
    path.write_text("kind,morph_id,score\ngenuine,,0.2\n")
    with pytest.raises(DataError, match="missing columns"):
        load_score_csv(path)
    path.write_text("# polarity=sideways\nkind,morph_id,subject_index,attempt_index,score\n")
    with pytest.raises(DataError, match="header"):
        load_score_csv(path)


# --- randomized recounts ---

def test_threshold_is_the_loosest_feasible_operating_point():
    rng = np.random.default_rng(6)
    for _ in range(50):
        pool = np.round(rng.normal(0.0, 1.0, int(rng.integers(1000, 5000))), int(rng.integers(1, 4)))
        tau = threshold_at_fmr(pool, 0.001)
        achieved = np.mean(pool > tau)
        candidates = np.unique(pool)
        rates = (pool[None, :] > candidates[:, None]).mean(axis=1)
        feasible = rates <= 0.001
        assert achieved <= 0.001
        assert achieved == rates[feasible].max()
        assert tau == candidates[feasible].min()


def test_rates_match_recount_on_random_score_sets():
    rng = np.random.default_rng(55)
    for _ in range(50):
        n_morphs, attempts = int(rng.integers(1, 501)), int(rng.integers(1, 9))
        mated = {f"m{i:03d}": [rng.normal(0.6, 0.2, attempts), rng.normal(0.5, 0.25, attempts)]
                 for i in range(n_morphs)}
        scores = ScoreSet(mated, [0.9], [0.1])
        tau = float(rng.uniform(0.2, 0.8))
        expected_mmpmr, expected_fmmpmr = _oracle_rates(scores, sorted(mated), tau)
        got_mmpmr, got_fmmpmr = mmpmr(scores, tau), fmmpmr(scores, tau)
        assert (got_mmpmr, got_fmmpmr) == (expected_mmpmr, expected_fmmpmr)
        assert got_fmmpmr <= got_mmpmr
        assert rmmr(got_mmpmr, 0.0) == got_mmpmr
        assert rmmr(got_fmmpmr, 0.0) == got_fmmpmr


def test_uneven_attempt_counts_can_lift_fmmpmr_above_mmpmr(tmp_path):
    scores = _scores({"a": [[5.0] * 8, [5.0] * 8], "b": [[1.0], [1.0]]})
    report = vulnerability_report(scores, 0.5, group_by=(), threshold=3.0)
    row = report.groups.iloc[0]
    assert row["mmpmr"] == 0.5
    assert row["fmmpmr"] == pytest.approx(8 / 9)
    assert len(report.warnings) == 1
    assert "exceeds mmpmr" in report.warnings[0]
    report.write(tmp_path)
    with open(tmp_path / "vuln_report.json") as fh:
        assert json.load(fh)["warnings"] == report.warnings


# --- golden report ---

GOLDEN = Path(__file__).parent / "data" / "vuln_golden"
PASS, FAIL = "0.75", "0.125"
# per morph type, the four attempts of subject 1 and subject 2
ATTEMPT_PATTERNS = [
    ("PPPP", "PPPP"),
    ("PPPP", "PPFF"),
    ("PFFF", "FPFF"),
    ("PPPP", "FFFF"),
]


def _golden_score_file(path):
    """100 000 rows: 6 400 morphs × 2 subjects × 4 attempts, 8 800 genuine, 40 000 impostor."""
    rows = []
    for i in range(6400):
        gender = "female" if i % 2 == 0 else "male"
        medium = "digital" if (i // 2) % 2 == 0 else "print"
        for subject, pattern in enumerate(ATTEMPT_PATTERNS[(i // 4) % 4], start=1):
            for attempt, flag in enumerate(pattern, start=1):
                rows.append(("mated_morph", f"m{i:04d}", subject, attempt,
                             PASS if flag == "P" else FAIL, gender, medium))
    rows += [("genuine", "", "", "", "0.125", "", "")] * 2200
    rows += [("genuine", "", "", "", "0.875", "", "")] * 6600
    rows += [("impostor", "", "", "", "0.25", "", "")] * 39960
    rows += [("impostor", "", "", "", "0.75", "", "")] * 40
    frame = pd.DataFrame(rows, columns=["kind", "morph_id", "subject_index", "attempt_index", "score",
                                        "group_gender", "group_medium"])
    frame = frame.iloc[np.random.default_rng(2024).permutation(len(frame))]
    frame.to_csv(path, index=False)
    return path


def test_large_score_file_reproduces_golden_report(tmp_path):
    path = _golden_score_file(tmp_path / "scores.csv")
    assert len(pd.read_csv(path)) == 100_000
    report = vulnerability_report(load_score_csv(path), 0.001)
    out = report.write(tmp_path / "report")
    assert (out / "vuln_report.json").read_bytes() == (GOLDEN / "vuln_report.json").read_bytes()
    assert (out / "vuln_grid.csv").read_bytes() == (GOLDEN / "vuln_grid.csv").read_bytes()
