"""
Reference-based quality of morphs: PSNR and SSIM against both parents,
averaged, with confidence intervals over a set of morphs.
"""
from dataclasses import asdict, dataclass
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger
from scipy import stats

from morphtools.errors import DataError
from morphtools.losses import MsSsimParams, check_image_pair, contrast_structure_map, luminance_map, windowed_moments
from morphtools.tensor import as_tensor

INF_TOKEN = "INF"
NORMAL_Z = 1.96


@dataclass
class QualityRecord:
    morph_id: str
    psnr_avg: float = math.nan
    ssim_avg: float = math.nan
    error: str = ""

    @property
    def ok(self):
        return not self.error


@dataclass(frozen=True)
class CiSummary:
    mean: float
    halfwidth: float
    n: int
    method: str = "normal"
    level: float = 0.95

    @property
    def low(self):
        return self.mean - self.halfwidth

    @property
    def high(self):
        return self.mean + self.halfwidth

    def to_dict(self):
        return {**asdict(self), "low": self.low, "high": self.high}


def psnr(x, ref, peak=1.0):
    """Peak signal-to-noise ratio in dB; +inf when the images are identical."""
    x, ref = np.asarray(x, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_global(x, y, params=MsSsimParams()):
    """Single-scale SSIM: window mean of l·c·s, channel mean for colour images."""
    x, y = check_image_pair(x, y, params)
    channels = [(x, y)] if x.ndim == 2 else [(x[c], y[c]) for c in range(x.shape[0])]
    values = []
    for a, b in channels:
        mu_x, mu_y, var_x, var_y, cov = windowed_moments(a, b, params)
        ssim_map = luminance_map(mu_x, mu_y, params) * contrast_structure_map(var_x, var_y, cov, params)
        values.append(float(np.mean(ssim_map.data)))
    return float(np.mean(values))


def morph_quality(im, parent1, parent2, morph_id="", params=MsSsimParams()):
    im, parent1, parent2 = (as_tensor(a).data for a in (im, parent1, parent2))
    if not (im.shape == parent1.shape == parent2.shape):
        raise ValueError(f"image shapes differ: {im.shape}, {parent1.shape}, {parent2.shape}")
    psnr_avg = (psnr(im, parent1) + psnr(im, parent2)) / 2.0
    ssim_avg = (ssim_global(im, parent1, params) + ssim_global(im, parent2, params)) / 2.0
    return QualityRecord(morph_id, psnr_avg, ssim_avg)


def summarize_ci(values, method="normal", level=0.95):
    values = np.asarray(list(values), dtype=np.float64)
    if values.size < 2:
        raise DataError(f"need at least 2 values for a confidence interval, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise DataError("confidence interval over non-finite values")
    if method == "normal":
        if level != 0.95:
            factor = float(stats.norm.ppf(0.5 + level / 2.0))
        else:
            factor = NORMAL_Z
    elif method == "t":
        factor = float(stats.t.ppf(0.5 + level / 2.0, df=values.size - 1))
    else:
        raise ValueError(f"unknown interval method '{method}'")
    sd = float(np.std(values, ddof=1))
    return CiSummary(float(values.mean()), factor * sd / math.sqrt(values.size), int(values.size), method, level)


def quality_frame(records):
    """Per-morph table; infinite PSNR is written as the INF token."""
    frame = pd.DataFrame([asdict(r) for r in records], columns=["morph_id", "psnr_avg", "ssim_avg", "error"])
    frame["psnr_avg"] = [INF_TOKEN if math.isinf(v) else v for v in frame["psnr_avg"]]
    return frame


def quality_summary(records, method="normal"):
    ok = [r for r in records if r.ok]
    summary = {"n_records": len(records), "n_failed": len(records) - len(ok), "ci_method": method, "warnings": []}
    finite_psnr = [r.psnr_avg for r in ok if math.isfinite(r.psnr_avg)]
    summary["psnr_inf_count"] = len(ok) - len(finite_psnr)
    for name, values in (("psnr_avg", finite_psnr), ("ssim_avg", [r.ssim_avg for r in ok])):
        try:
            summary[name] = summarize_ci(values, method).to_dict()
        except DataError as exc:
            summary[name] = None
            summary["warnings"].append(f"{name}: {exc}")
    return summary


def write_quality_report(records, out_dir, method="normal"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    quality_frame(records).to_csv(out_dir / "quality.csv", index=False)
    summary = quality_summary(records, method)
    with open(out_dir / "quality_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for warning in summary["warnings"]:
        logger.warning(warning)
    return summary
