"""
Command line entry point.

Exit codes: 0 success, 1 partial success with warnings, 2 configuration
error, 3 model or data error, 4 computation error.
"""
import argparse
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
import json
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from morphtools import charts
from morphtools.config import (
    RUN_CONFIGS,
    SWEEP_PRESETS,
    read_manifest,
    setup_logging,
    write_manifest,
)
from morphtools.errors import DataError, MorphbenchError, OptimizationError
from morphtools.images import load_image, read_pairs, save_image
from morphtools.losses import compare_identity_gradients, identity_loss
from morphtools.mad import MAD_COLUMNS, baseline_attack_score, load_mad_csv, mad_cells, mad_grid_report
from morphtools.models import resolve_models
from morphtools.morph import optimize_morph
from morphtools.quality import QualityRecord, morph_quality, write_quality_report
from morphtools.tensor import grad_check
from morphtools.vuln import load_score_csv, vulnerability_report

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_DATA, EXIT_COMPUTE = 0, 1, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-5


# --- morph and sweep ---

def _morph_one(pair, models, opt_cfg, out_dir):
    morph_id = pair["morph_id"]
    side = models.image_shape[-1]
    row = {"morph_id": morph_id, "status": "ok", "error": ""}
    try:
        i1 = load_image(pair["subject1_image"], side=side)
        i2 = load_image(pair["subject2_image"], side=side)
        result = optimize_morph(i1, i2, models, opt_cfg)
    except OptimizationError as exc:
        logger.error("morph {}: {}", morph_id, exc)
        if exc.trace is not None:
            exc.trace.to_csv(out_dir / f"{morph_id}_trace.csv", index=False)
        return {**row, "status": "optimization_failed", "error": str(exc)}
    except DataError as exc:
        logger.error("morph {}: {}", morph_id, exc)
        return {**row, "status": "data_error", "error": str(exc)}

    save_image(result.image, out_dir / f"{morph_id}.png")
    result.trace.to_csv(out_dir / f"{morph_id}_trace.csv", index=False)
    html = charts.loss_trace_chart(result.trace, chart_title=f"Morph {morph_id}",
                                   bottom_text=f"{opt_cfg.iterations} iterations, lr0 {opt_cfg.lr0}")
    (out_dir / f"{morph_id}_trace.html").write_text(html, encoding="utf-8")
    logger.info("morph {}: total {:.6f}, cos ({:.4f}, {:.4f})", morph_id,
                result.final_losses["total"], result.final_losses["cos_1"], result.final_losses["cos_2"])
    return {**row, **{f"final_{k}": v for k, v in result.final_losses.items()}}


def run_morphs(pairs, models, opt_cfg, out_dir, jobs=1):
    """Morph every pair; rows come back in pair-list order whatever the scheduling."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = pairs.to_dict(orient="records")
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        rows = list(pool.map(lambda pair: _morph_one(pair, models, opt_cfg, out_dir), records))
    summary = pd.DataFrame(rows)
    summary.to_csv(out_dir / "morph_summary.csv", index=False)
    return summary


def _morph_exit_code(summary):
    if (summary["status"] == "ok").all():
        return EXIT_OK
    if (summary["status"] == "optimization_failed").any():
        return EXIT_COMPUTE
    return EXIT_PARTIAL if (summary["status"] == "ok").any() else EXIT_DATA


def _prepare_morph(cfg):
    pairs = read_pairs(cfg.pairs)
    models = resolve_models(cfg.models, image_side=cfg.image_side,
                            latent=tuple(cfg.latent_shape), embed_dim=cfg.embed_dim)
    return pairs, models


def cmd_morph(cfg):
    cfg.validate()
    pairs, models = _prepare_morph(cfg)
    write_manifest(cfg)
    summary = run_morphs(pairs, models, cfg.optimizer_config(), cfg.out, cfg.jobs)
    return _morph_exit_code(summary)


def cmd_sweep(cfg):
    cfg.validate()
    pairs, models = _prepare_morph(cfg)
    write_manifest(cfg)
    base = cfg.loss_weights()
    rows, codes = [], []
    for case, overrides in SWEEP_PRESETS[cfg.preset].items():
        weights = replace(base, **overrides)
        logger.info("sweep case {}: {}", case, weights.as_dict())
        summary = run_morphs(pairs, models, cfg.optimizer_config(weights), Path(cfg.out) / case, cfg.jobs)
        codes.append(_morph_exit_code(summary))
        ok = summary[summary["status"] == "ok"]
        finals = {c: float(ok[c].mean()) if len(ok) else None for c in summary.columns if c.startswith("final_")}
        rows.append({"case": case, **weights.as_dict(), "n_ok": len(ok),
                     **{k[len("final_"):]: v for k, v in finals.items()}})
    table = pd.DataFrame(rows)
    table.to_csv(Path(cfg.out) / "sweep_summary.csv", index=False)
    if {"cos_1", "cos_2"} <= set(table.columns):
        (Path(cfg.out) / "sweep_summary.html").write_text(
            charts.sweep_chart(table, chart_title=f"Sweep: {cfg.preset}"), encoding="utf-8")
    return max(codes)


# --- evaluation ---

def cmd_vuln(cfg):
    cfg.validate()
    scores = load_score_csv(cfg.scores)
    report = vulnerability_report(scores, cfg.fmr, tuple(cfg.group_by), cfg.threshold)
    write_manifest(cfg)
    report.write(cfg.out)
    return EXIT_PARTIAL if any("omitted" in w for w in report.warnings) else EXIT_OK


def _quality_one(row, morph_dir):
    morph_id = row["morph_id"]
    try:
        morph = load_image(Path(morph_dir) / f"{morph_id}.png")
        parents = [load_image(row[c], side=morph.shape[-1]) for c in ("subject1_image", "subject2_image")]
        return morph_quality(morph, *parents, morph_id=morph_id)
    except (DataError, ValueError) as exc:
        logger.warning("quality {}: {}", morph_id, exc)
        return QualityRecord(morph_id, error=str(exc))


def cmd_quality(cfg):
    cfg.validate()
    pairs = read_pairs(cfg.pairs)
    write_manifest(cfg)
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        records = list(pool.map(lambda row: _quality_one(row, cfg.morph_dir), pairs.to_dict(orient="records")))
    write_quality_report(records, cfg.out, cfg.ci_method)
    if records and not any(r.ok for r in records):
        return EXIT_DATA
    return EXIT_OK


def cmd_mad(cfg):
    cfg.validate()
    frame = load_mad_csv(cfg.scores)
    write_manifest(cfg)
    report = mad_grid_report(mad_cells(frame), jobs=cfg.jobs)
    report.write(cfg.out)
    return EXIT_PARTIAL if report.warnings else EXIT_OK


def cmd_mad_score(cfg):
    cfg.validate()
    try:
        listing = pd.read_csv(cfg.images, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read image list {cfg.images}: {exc}") from exc
    missing = [c for c in ["image"] + [c for c in MAD_COLUMNS if c != "score"] if c not in listing.columns]
    if missing:
        raise DataError(f"{cfg.images}: missing columns {missing}")
    base = Path(cfg.images).parent
    paths = [p if Path(p).is_absolute() else str(base / p) for p in listing["image"]]
    write_manifest(cfg)
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        scores = list(pool.map(lambda p: baseline_attack_score(load_image(p)), paths))
    out = listing.assign(score=scores)[["image"] + MAD_COLUMNS]
    out.to_csv(Path(cfg.out) / "mad_scores.csv", index=False)
    logger.info("scored {} images with the baseline detector", len(out))
    return EXIT_OK


def cmd_gradcheck(cfg):
    cfg.validate()
    write_manifest(cfg)
    rng = np.random.default_rng(cfg.seed)
    trials = []
    for _ in range(cfg.trials):
        v1, v2, vm = rng.standard_normal((3, cfg.dim))
        comparison = compare_identity_gradients(v1, v2, vm)
        fd_error = grad_check(lambda z: identity_loss(v1, v2, z), vm)
        trials.append({
            "autodiff_vs_finite_differences": fd_error,
            "autodiff_vs_exact": comparison["max_delta_autodiff_exact"],
            "closed_form_vs_autodiff": comparison["max_delta_closed_form_autodiff"],
        })
    frame = pd.DataFrame(trials)
    unit = compare_identity_gradients([1.0, 0.0], [1.0, 0.0], [1.0, 0.0])
    report = {
        "trials": cfg.trials,
        "dim": cfg.dim,
        "tolerance": GRADCHECK_TOLERANCE,
        "max": {c: float(frame[c].max()) for c in frame.columns},
        "unit_vectors_example": {k: np.asarray(v).tolist() for k, v in unit.items()},
        "per_trial": frame.to_dict(orient="records"),
    }
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    with open(Path(cfg.out) / "gradcheck.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    worst = report["max"]["autodiff_vs_finite_differences"]
    logger.info("gradcheck: autodiff vs finite differences {:.3g}, closed form vs autodiff {:.3g}",
                worst, report["max"]["closed_form_vs_autodiff"])
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_COMPUTE


COMMANDS = {
    "morph": cmd_morph,
    "sweep": cmd_sweep,
    "vuln": cmd_vuln,
    "quality": cmd_quality,
    "mad": cmd_mad,
    "mad-score": cmd_mad_score,
    "gradcheck": cmd_gradcheck,
}


def cmd_replay(manifest, out=None):
    cfg = read_manifest(manifest)
    if out is not None:
        cfg = cfg.with_out(out)
    logger.info("replaying {} from {}", cfg.command, manifest)
    return COMMANDS[cfg.command](cfg)


# --- argument parsing ---

def _latent_shape(text):
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected RxC, got '{text}'") from exc
    return [rows, cols]


def _add_morph_arguments(parser):
    parser.add_argument("--pairs", required=True, help="CSV morph_id,subject1_image,subject2_image")
    parser.add_argument("--models", default="", help="toy:<seed> or a weight container path (default toy:<seed>)")
    parser.add_argument("--lambda1", type=float, default=0.0002)
    parser.add_argument("--lambda2", type=float, default=10.0)
    parser.add_argument("--lambda3", type=float, default=1.0)
    parser.add_argument("--lambda4", type=float, default=1.0)
    parser.add_argument("--iterations", type=int, default=150)
    parser.add_argument("--lr0", type=float, default=0.03)
    parser.add_argument("--decay", type=float, default=0.95)
    parser.add_argument("--decay-every", type=int, default=6)
    parser.add_argument("--latent-shape", type=_latent_shape, default=[18, 512])
    parser.add_argument("--image-side", type=int, default=64)
    parser.add_argument("--embed-dim", type=int, default=64)
    parser.add_argument("--jobs", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="morphbench", description="Latent-space face morph generation and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        return p

    _add_morph_arguments(command("morph", "generate morphs for a pair list"))
    sweep = command("sweep", "rerun the morphs under a loss-weight preset")
    _add_morph_arguments(sweep)
    sweep.add_argument("--preset", choices=sorted(SWEEP_PRESETS), default="ablation")

    vuln = command("vuln", "vulnerability rates from comparison scores")
    vuln.add_argument("--scores", required=True)
    vuln.add_argument("--fmr", type=float, default=0.001)
    vuln.add_argument("--threshold", type=float, default=None, help="fixed operating threshold")
    vuln.add_argument("--group-by", nargs="*", default=["gender", "medium"])

    quality = command("quality", "PSNR and SSIM of morphs against their parents")
    quality.add_argument("--pairs", required=True)
    quality.add_argument("--morph-dir", required=True)
    quality.add_argument("--ci-method", choices=["normal", "t"], default="normal")
    quality.add_argument("--jobs", type=int, default=1)

    mad = command("mad", "detection error rates from MAD scores")
    mad.add_argument("--scores", required=True)
    mad.add_argument("--jobs", type=int, default=1)

    mad_score = command("mad-score", "score images with the baseline detector")
    mad_score.add_argument("--images", required=True, help="CSV image,class,generation_method,medium,split")
    mad_score.add_argument("--jobs", type=int, default=1)

    gradcheck = command("gradcheck", "compare identity loss gradients")
    gradcheck.add_argument("--trials", type=int, default=100)
    gradcheck.add_argument("--dim", type=int, default=64)

    replay = sub.add_parser("replay", help="rerun a manifest.json")
    replay.add_argument("--manifest", required=True)
    replay.add_argument("--out", default=None)
    return parser


def config_from_args(args):
    values = {k: v for k, v in vars(args).items() if k != "command"}
    return RUN_CONFIGS[args.command].from_dict(values)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    setup_logging()
    try:
        if args.command == "replay":
            return cmd_replay(args.manifest, args.out)
        return COMMANDS[args.command](config_from_args(args))
    except MorphbenchError as exc:
        logger.error("{}: {}", type(exc).__name__, exc)
        return exc.exit_code
    except ValueError as exc:
        logger.error("invalid input: {}", exc)
        return EXIT_CONFIG
