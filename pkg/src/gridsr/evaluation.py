"""Evaluation metrics (RMSE, PSNR, SSIM), conservation diagnostics, carbon
estimate, and the per-variable report.

PSNR uses the per-variable empirical data range of the test-set truth by
default. SSIM uses an 11x11 Gaussian window (sigma 1.5) with the usual
constants C1=(0.01 R)^2, C2=(0.03 R)^2, evaluated over valid (fully
interior) windows only. The carbon column is a transparent estimate:
wall time x configured device power x grid emission factor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

from .errors import ShapeError
from .fields import FieldStack, VariableId, coarsen_values

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    if pred.shape != truth.shape:
        raise ShapeError(f"rmse: shapes {pred.shape} and {truth.shape} differ")
    d = pred.astype(np.float64) - truth.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))


def psnr(pred: np.ndarray, truth: np.ndarray, data_range: float) -> float:
    """20 log10(range) - 10 log10(mse); identical fields give +inf."""
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    d = pred.astype(np.float64) - truth.astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(pred: np.ndarray, truth: np.ndarray, data_range: float) -> float:
    """Mean local structural similarity over valid 11x11 windows."""
    if pred.shape != truth.shape:
        raise ShapeError(f"ssim: shapes {pred.shape} and {truth.shape} differ")
    h, w = pred.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"ssim needs grids of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    win = _gaussian_window()

    def local(img):
        v = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", v, win)

    x = pred.astype(np.float64)
    y = truth.astype(np.float64)
    mu_x = local(x)
    mu_y = local(y)
    sxx = local(x * x) - mu_x * mu_x
    syy = local(y * y) - mu_y * mu_y
    sxy = local(x * y) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def conservation_gap(pred_fine: np.ndarray, input_coarse: np.ndarray) -> tuple[float, float]:
    """(local, global) conservation gaps in physical units.

    local: mean over coarse cells of |block mean of pred - input cell|;
    global: |mean(pred) - mean(input)|.
    """
    hf, wf = pred_fine.shape[-2:]
    h, w = input_coarse.shape[-2:]
    if hf % h or wf % w or hf // h != wf // w:
        raise ShapeError(
            f"conservation_gap: fine {pred_fine.shape} is not an integer "
            f"scale-up of coarse {input_coarse.shape}"
        )
    block = coarsen_values(pred_fine, hf // h)
    local = float(np.mean(np.abs(block - input_coarse)))
    glob = float(abs(pred_fine.mean() - input_coarse.mean()))
    return local, glob


@dataclass
class CarbonConfig:
    device_power_watts: float = 100.0
    emission_factor_kg_per_kwh: float = 0.7

    def __post_init__(self):
        if self.device_power_watts <= 0 or self.emission_factor_kg_per_kwh <= 0:
            raise ValueError("carbon config values must be > 0")


def estimate_carbon(wall_seconds: float, cfg: CarbonConfig) -> float:
    """kg CO2 = watts * seconds / 3.6e6 * factor.

    Evaluated in decimal arithmetic so round bookkeeping values (100 W for
    an hour at 0.7 kg/kWh -> 0.07 kg) come out exact.
    """
    if wall_seconds < 0:
        raise ValueError(f"wall_seconds must be >= 0, got {wall_seconds}")
    kg = (
        Decimal(repr(cfg.device_power_watts))
        * Decimal(repr(wall_seconds))
        / Decimal(3_600_000)
        * Decimal(repr(cfg.emission_factor_kg_per_kwh))
    )
    return float(kg)


# -- report -----------------------------------------------------------------------

REPORT_COLUMNS = (
    "model",
    "variable",
    "rmse",
    "psnr_db",
    "ssim",
    "cons_gap_local",
    "cons_gap_global",
    "carbon_kg",
)


@dataclass
class ReportRow:
    model: str
    variable: str
    rmse: float
    psnr_db: float
    ssim: float
    cons_gap_local: float
    cons_gap_global: float
    carbon_kg: float


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)


def evaluate(
    downscalers: dict[str, Callable[[np.ndarray], np.ndarray]],
    test_stacks: list[FieldStack],
    vars: tuple[VariableId, ...],
    carbon: CarbonConfig,
    scale: int = 2,
    meta: dict[str, str] | None = None,
) -> EvalReport:
    """Run each downscaler over (coarsen(fine), fine) pairs and aggregate
    per-variable metrics in physical units.

    `downscalers` maps a model name to a coarse->fine array function.
    """
    if not test_stacks:
        raise ValueError("empty test set")
    if not downscalers:
        raise ValueError("no downscalers given")
    fines = [s.to_array(vars) for s in test_stacks]
    shape = fines[0].shape
    for i, f in enumerate(fines):
        if f.shape != shape:
            raise ShapeError(f"test stack {i} has shape {f.shape}, expected {shape}")
    coarses = [coarsen_values(f, scale) for f in fines]

    # per-variable data range of the truth over the whole test set
    ranges = []
    for ci in range(len(vars)):
        lo = min(f[ci].min() for f in fines)
        hi = max(f[ci].max() for f in fines)
        ranges.append(max(hi - lo, np.finfo(np.float64).tiny))

    report = EvalReport(meta=dict(meta or {}))
    report.meta.setdefault("n_samples", str(len(fines)))
    report.meta.setdefault("fine_grid", f"{shape[1]}x{shape[2]}")
    report.meta.setdefault("coarse_grid", f"{shape[1] // scale}x{shape[2] // scale}")
    report.meta.setdefault("psnr_range", "per-variable empirical (truth max-min over test set)")
    report.meta.setdefault("ssim_window", f"{SSIM_WINDOW}x{SSIM_WINDOW} gaussian sigma {SSIM_SIGMA}")
    report.meta.setdefault("carbon_method", "estimate: wall_s x device_watts x factor")

    for name, fn in downscalers.items():
        t0 = time.perf_counter()
        preds = [fn(c) for c in coarses]
        wall = time.perf_counter() - t0
        kg = estimate_carbon(wall, carbon)
        report.meta[f"wall_seconds.{name}"] = repr(wall)
        for ci, v in enumerate(vars):
            pt = np.concatenate([p[ci].ravel() for p in preds])
            tt = np.concatenate([f[ci].ravel() for f in fines])
            ss = float(np.mean([ssim(p[ci], f[ci], ranges[ci]) for p, f in zip(preds, fines)]))
            gaps = [conservation_gap(p[ci], c[ci]) for p, c in zip(preds, coarses)]
            report.rows.append(
                ReportRow(
                    model=name,
                    variable=v.name,
                    rmse=rmse(pt, tt),
                    psnr_db=psnr(pt, tt, ranges[ci]),
                    ssim=ss,
                    cons_gap_local=float(np.mean([g[0] for g in gaps])),
                    cons_gap_global=float(np.mean([g[1] for g in gaps])),
                    carbon_kg=kg,
                )
            )
    return report


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def report_to_csv(report: EvalReport) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(
            ",".join(
                [
                    r.model,
                    r.variable,
                    _fmt(r.rmse),
                    _fmt(r.psnr_db),
                    _fmt(r.ssim),
                    _fmt(r.cons_gap_local),
                    _fmt(r.cons_gap_global),
                    _fmt(r.carbon_kg),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> EvalReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != ",".join(REPORT_COLUMNS):
        raise ValueError("unrecognized report CSV header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        rows.append(
            ReportRow(
                model=parts[0],
                variable=parts[1],
                rmse=float(parts[2]),
                psnr_db=float(parts[3]),
                ssim=float(parts[4]),
                cons_gap_local=float(parts[5]),
                cons_gap_global=float(parts[6]),
                carbon_kg=float(parts[7]),
            )
        )
    return EvalReport(rows=rows)


def render_report_text(report: EvalReport) -> str:
    """Fixed-width table with the run metadata as a header block."""
    out = []
    for k in sorted(report.meta):
        out.append(f"# {k} = {report.meta[k]}")
    widths = [14, 8, 12, 10, 8, 14, 15, 12]
    header = ["model", "variable", "rmse", "psnr_db", "ssim", "cons_gap_local",
              "cons_gap_global", "carbon_kg"]
    out.append("  ".join(h.ljust(w) for h, w in zip(header, widths)))

    def num(x):
        return "inf" if math.isinf(x) else f"{x:.6g}"

    for r in report.rows:
        cells = [r.model, r.variable, num(r.rmse), num(r.psnr_db), num(r.ssim),
                 num(r.cons_gap_local), num(r.cons_gap_global), num(r.carbon_kg)]
        out.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(out) + "\n"
