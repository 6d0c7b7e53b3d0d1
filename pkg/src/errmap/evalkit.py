"""Threshold filtering, keep-ratio bookkeeping, the metric suite, and sweep
curves of metrics versus keep ratio.

Thresholds are millimeters at every external surface and meters internally.
Keep ratio is the fraction of valid predicted pixels that survive filtering;
metrics are computed over pixels valid in BOTH the (filtered) prediction and
the ground truth.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .depthio import DepthMap, ErrorMap
from .network import FilterSpec


@dataclass
class FilterReport:
    threshold_mm: float | None
    keep_ratio: float
    kept_count: int
    rmse_mm: float
    mae_mm: float
    delta1: float
    delta2: float
    delta3: float
    rel: float
    log10: float
    error_variance_mm2: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepCurve:
    points: list[tuple[float, FilterReport]]  # (threshold_mm, report), ascending

    def to_json(self) -> str:
        return json.dumps([report.to_dict() for _, report in self.points], indent=2)

    def to_text(self) -> str:
        """Aligned table, one row per threshold."""
        header = (f"{'T (mm)':>12} {'keep %':>8} {'kept':>9} {'RMSE mm':>10} "
                  f"{'MAE mm':>10} {'d1':>6} {'d2':>6} {'d3':>6} "
                  f"{'rel':>7} {'log10':>7} {'var mm2':>12}")
        rows = [header, "-" * len(header)]
        for t, r in self.points:
            t_str = "none" if t is None else f"{t:.1f}"
            rows.append(
                f"{t_str:>12} {100 * r.keep_ratio:>8.3f} {r.kept_count:>9d} "
                f"{r.rmse_mm:>10.2f} {r.mae_mm:>10.2f} {r.delta1:>6.3f} "
                f"{r.delta2:>6.3f} {r.delta3:>6.3f} {r.rel:>7.4f} "
                f"{r.log10:>7.4f} {r.error_variance_mm2:>12.2f}")
        return "\n".join(rows)


def meters_to_mm_threshold(threshold_m: float) -> float:
    """A millimeter threshold whose /1000 round trip is >= threshold_m.

    Guards the quantile contract: a pixel whose error equals the selected
    quantile value must survive filtering after the mm round trip.
    """
    t_mm = threshold_m * 1000.0
    while t_mm / 1000.0 < threshold_m:
        t_mm = np.nextafter(t_mm, np.inf)
    return float(t_mm)


def filter_by_threshold(pred: DepthMap, err: ErrorMap, spec: FilterSpec) -> DepthMap:
    """Keep a pixel iff it is valid and its predicted error <= threshold."""
    if pred.values.shape != err.values.shape:
        raise ValueError(f"prediction shape {pred.values.shape} != "
                         f"error shape {err.values.shape}")
    keep = (pred.values > 0) & (err.values <= spec.threshold_m)
    out = np.where(keep, pred.values, 0.0)
    return DepthMap(out, role="dense-prediction")


def keep_ratio_to_threshold(err: ErrorMap, target: float,
                            valid: np.ndarray | None = None) -> FilterSpec:
    """Smallest threshold whose keep ratio is >= target (error quantile).

    ``valid`` restricts the error population to pixels with a prediction;
    default is all pixels. Ties keep every pixel at the threshold value.
    """
    if not (0 < target <= 1):
        raise ValueError(f"target keep ratio must be in (0, 1], got {target}")
    if valid is None:
        pool = err.values.reshape(-1)
    else:
        if valid.shape != err.values.shape:
            raise ValueError(f"valid mask shape {valid.shape} != error shape "
                             f"{err.values.shape}")
        pool = err.values[valid > 0]
    if pool.size == 0:
        raise ValueError("no valid pixels to compute a threshold from")
    ordered = np.sort(pool)
    k = int(np.ceil(target * pool.size)) - 1
    return FilterSpec(threshold_mm=meters_to_mm_threshold(float(ordered[k])))


def metrics(pred: DepthMap, gt: DepthMap, threshold_mm: float | None = None,
            keep_denominator: int | None = None) -> FilterReport:
    """Metric suite over pixels valid in both maps.

    rmse/mae/variance are reported in millimeters; delta_k uses the threshold
    1.25^k on max(Y/gt, gt/Y); rel and log10 follow the usual definitions.
    ``keep_denominator`` sets the keep-ratio denominator (valid predictions
    before filtering); default is the evaluated pixel count itself.
    """
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"prediction shape {pred.values.shape} != "
                         f"ground-truth shape {gt.values.shape}")
    both = (pred.values > 0) & (gt.values > 0)
    n = int(both.sum())
    if n == 0:
        raise ValueError("no pixels valid in both prediction and ground truth")
    y = pred.values[both]
    t = gt.values[both]
    diff = y - t
    ratio = np.maximum(y / t, t / y)
    rmse_m = float(np.sqrt(np.mean(diff ** 2)))
    mae_m = float(np.mean(np.abs(diff)))
    denom = n if keep_denominator is None else keep_denominator
    return FilterReport(
        threshold_mm=threshold_mm,
        keep_ratio=n / denom if denom else 0.0,
        kept_count=n,
        rmse_mm=rmse_m * 1000.0,
        mae_mm=mae_m * 1000.0,
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        rel=float(np.mean(np.abs(diff) / t)),
        log10=float(np.mean(np.abs(np.log10(y) - np.log10(t)))),
        error_variance_mm2=float(np.var(diff * 1000.0)),
    )


def filtered_report(pred: DepthMap, err: ErrorMap, gt: DepthMap,
                    spec: FilterSpec) -> FilterReport:
    """Filter, then evaluate; keep ratio is relative to the unfiltered
    valid-prediction count."""
    kept = filter_by_threshold(pred, err, spec)
    report = metrics(kept, gt, threshold_mm=spec.threshold_mm)
    pre = int(((pred.values > 0) & (gt.values > 0)).sum())
    post = int(((kept.values > 0) & (gt.values > 0)).sum())
    report.keep_ratio = post / pre if pre else 0.0
    report.kept_count = post
    return report


def sweep(pred: DepthMap, err: ErrorMap, gt: DepthMap,
          thresholds_mm: list[float] | None = None,
          keep_ratios: list[float] | None = None) -> SweepCurve:
    """One FilterReport per grid point, ordered by ascending threshold.

    Exactly one of ``thresholds_mm`` (millimeters) or ``keep_ratios``
    (fractions in (0, 1]) must be given; keep-ratio targets are inverted to
    thresholds through the error quantile.
    """
    if (thresholds_mm is None) == (keep_ratios is None):
        raise ValueError("provide exactly one of thresholds_mm or keep_ratios")
    if keep_ratios is not None:
        if not keep_ratios:
            raise ValueError("keep_ratios grid is empty")
        valid = (pred.values > 0).astype(float)
        specs = [keep_ratio_to_threshold(err, kr, valid=valid) for kr in keep_ratios]
    else:
        if not thresholds_mm:
            raise ValueError("thresholds_mm grid is empty")
        specs = [FilterSpec(threshold_mm=t) for t in thresholds_mm]
    specs = sorted(specs, key=lambda s: s.threshold_mm)
    points = [(spec.threshold_mm, filtered_report(pred, err, gt, spec)) for spec in specs]
    return SweepCurve(points=points)


@dataclass
class DensificationReport:
    input_count: int
    kept_count: int
    full_count: int
    factor: float        # kept / input
    kept_vs_full: float  # kept / full

    def to_dict(self) -> dict:
        return asdict(self)


def densification_report(sparse_input: DepthMap, kept: DepthMap) -> DensificationReport:
    """How much denser the filtered prediction is than the sensor input."""
    if sparse_input.values.shape != kept.values.shape:
        raise ValueError(f"input shape {sparse_input.values.shape} != "
                         f"kept shape {kept.values.shape}")
    n_in = sparse_input.valid_count()
    n_kept = kept.valid_count()
    full = int(kept.values.size)
    return DensificationReport(
        input_count=n_in,
        kept_count=n_kept,
        full_count=full,
        factor=n_kept / n_in if n_in else float("inf"),
        kept_vs_full=n_kept / full if full else 0.0,
    )
