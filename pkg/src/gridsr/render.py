"""Heatmap and figure rendering for evaluation runs.

Heatmaps are binary PPM (P6, 8-bit) using a fixed 256-entry color ramp
interpolated linearly between five anchor colors (dark blue -> purple ->
magenta -> orange -> yellow), low to high. Values are mapped linearly
from [vmin, vmax] onto the ramp; the vmin/vmax used are recorded in a
plain-text sidecar next to the image. Matplotlib PNG figures (triptych,
loss curve, RMSE bars) are rendered alongside the delimited outputs.
"""

from __future__ import annotations

import numpy as np

from .evaluation import EvalReport

RAMP_ANCHORS = (
    (13, 8, 135),
    (126, 3, 168),
    (203, 71, 119),
    (248, 149, 64),
    (240, 249, 33),
)


def color_ramp() -> np.ndarray:
    """256x3 uint8 lookup table from the anchor colors."""
    anchors = np.asarray(RAMP_ANCHORS, dtype=np.float64)
    pos = np.linspace(0.0, 1.0, len(anchors))
    t = np.linspace(0.0, 1.0, 256)
    ramp = np.stack([np.interp(t, pos, anchors[:, c]) for c in range(3)], axis=1)
    return np.clip(np.rint(ramp), 0, 255).astype(np.uint8)


_RAMP = color_ramp()


def write_ppm(path, rgb: np.ndarray) -> None:
    """rgb: [H, W, 3] uint8, written as binary P6."""
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM: {path}")
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise ValueError(f"unsupported maxval in {path}")
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3)


def render_heatmap(values: np.ndarray, path, vmin: float | None = None,
                   vmax: float | None = None, label: str = "") -> None:
    """Map a 2-d field through the fixed ramp and write PPM + sidecar."""
    v = np.asarray(values, dtype=np.float64)
    lo = float(v.min()) if vmin is None else float(vmin)
    hi = float(v.max()) if vmax is None else float(vmax)
    if hi > lo:
        idx = np.clip((v - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)
    else:
        idx = np.zeros(v.shape, dtype=np.uint8)
    write_ppm(path, _RAMP[idx])
    with open(str(path) + ".txt", "w") as fh:
        if label:
            fh.write(f"label={label}\n")
        fh.write(f"min={lo!r}\nmax={hi!r}\n")
        fh.write(f"shape={v.shape[0]}x{v.shape[1]}\n")
        fh.write("ramp=linear 5-anchor (dark blue->purple->magenta->orange->yellow)\n")


def render_triptych_ppm(coarse: np.ndarray, truth: np.ndarray, pred: np.ndarray,
                        prefix, model: str, var: str) -> list[str]:
    """Three PPMs (coarse, truth, predicted) on a shared color scale."""
    lo = float(min(truth.min(), coarse.min()))
    hi = float(max(truth.max(), coarse.max()))
    paths = []
    for tag, arr in (("coarse", coarse), ("truth", truth), (f"pred_{model}", pred)):
        p = f"{prefix}_{var}_{tag}.ppm"
        render_heatmap(arr, p, vmin=lo, vmax=hi, label=f"{var} {tag}")
        paths.append(p)
    return paths


# -- matplotlib figures (report path) ------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_triptych_figure(coarse: np.ndarray, truth: np.ndarray, pred: np.ndarray,
                           path, model: str, var: str) -> None:
    plt = _plt()
    lo = float(min(truth.min(), coarse.min()))
    hi = float(max(truth.max(), coarse.max()))
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    for ax, (title, arr) in zip(
        axes,
        [("coarse input", coarse), ("truth", truth), (f"predicted ({model})", pred)],
    ):
        im = ax.imshow(arr, vmin=lo, vmax=hi, origin="lower", interpolation="nearest")
        ax.set_title(f"{var}: {title}")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, fraction=0.025)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curve(log_rows, path) -> None:
    """log_rows: iterable of EpochLog."""
    plt = _plt()
    rows = list(log_rows)
    epochs = [r.epoch for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [r.train_total for r in rows], label="total", lw=1.8)
    ax.plot(epochs, [r.train_mse for r in rows], label="mse", lw=1.2)
    if any(r.train_mass for r in rows):
        ax.plot(epochs, [r.train_mass for r in rows], label="mass", lw=1.2)
    if rows and rows[0].val_rmse is not None:
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_rmse for r in rows], color="tab:red", ls="--", label="val rmse")
        ax2.set_ylabel("val rmse (normalized)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_rmse_bars(report: EvalReport, path) -> None:
    """Grouped per-variable RMSE bars, one group color per model."""
    plt = _plt()
    models = sorted({r.model for r in report.rows})
    variables = []
    for r in report.rows:
        if r.variable not in variables:
            variables.append(r.variable)
    lookup = {(r.model, r.variable): r.rmse for r in report.rows}
    x = np.arange(len(variables))
    width = 0.8 / max(len(models), 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(variables)), 4.5))
    for i, m in enumerate(models):
        vals = [lookup.get((m, v), np.nan) for v in variables]
        ax.bar(x + (i - (len(models) - 1) / 2) * width, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(variables, rotation=45, ha="right")
    ax.set_ylabel("RMSE (physical units)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
