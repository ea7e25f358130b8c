import math

import pandas as pd


def get_report_display_names():
    display_names = {
        'mmpmr': 'MMPMR (%)',
        'fmmpmr': 'FMMPMR (%)',
        'rmmr_mmpmr': 'RMMR MMPMR (%)',
        'rmmr_fmmpmr': 'RMMR FMMPMR (%)',
        'd_eer': 'D-EER (%)',
        'bpcer_apcer5': 'BPCER @ APCER = 5%',
        'bpcer_apcer10': 'BPCER @ APCER = 10%',
        'psnr_avg': 'PSNR (dB)',
        'ssim_avg': 'SSIM',
        'total': 'Total loss',
        'perceptual': 'Perceptual loss',
        'identity': 'Identity loss',
        'ms_ssim': 'MS-SSIM loss',
        'id_diff': 'ID-Diff loss',
        'cos_1': 'cos(v1, vM)',
        'cos_2': 'cos(v2, vM)',
    }
    return display_names


def get_metric_formatting():
    # Rates stored in [0, 1] (RMMR up to 2), shown as percentages
    percentage = [
        'mmpmr',
        'fmmpmr',
        'rmmr_mmpmr',
        'rmmr_fmmpmr',
        'd_eer',
        'bpcer_apcer5',
        'bpcer_apcer10',
    ]

    four_decimals = [
        'ssim_avg',
        'total',
        'perceptual',
        'identity',
        'ms_ssim',
        'id_diff',
        'cos_1',
        'cos_2',
    ]

    decibel = [
        'psnr_avg',
    ]

    counts = [
        'n_morphs',
        'n_pairs',
        'n_attack',
        'n_bonafide',
    ]
    return percentage, four_decimals, decibel, counts


def format_metric_value(key, value, missing=""):
    percentage, four_decimals, decibel, counts = get_metric_formatting()
    if isinstance(value, str):
        return value
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return missing
    if key in percentage:
        return "{:.2f}".format(100.0 * value)
    elif key in four_decimals:
        return "{:.4f}".format(value)
    elif key in decibel:
        return "INF" if math.isinf(value) else "{:.4f}".format(value)
    elif key in counts:
        return "{:,.0f}".format(value)
    else:
        return value


def metric_of(column):
    """Grid columns are named `<level>|...|<metric>`; plain columns are their own metric."""
    return str(column).rsplit("|", 1)[-1]


def apply_display_formatting(frame, missing=""):
    display_names = get_report_display_names()
    formatted = pd.DataFrame(index=frame.index)
    for column in frame.columns:
        metric = metric_of(column)
        label = str(column).rsplit("|", 1)
        label[-1] = display_names.get(metric, metric)
        formatted[" | ".join(label)] = [format_metric_value(metric, v, missing) for v in frame[column]]
    return formatted
