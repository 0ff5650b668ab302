"""Operator-facing command line: synth | train | eval | transfer | gradcheck.

Configuration is a flat key=value table: built-in defaults, overlaid by an
optional --config file, then by repeatable --set key=value flags (--seed
and --out are shortcuts for the corresponding keys). Unknown keys are
rejected. Every run directory receives the echoed effective config
(config.used.txt) so a run can be reproduced from it alone; wall-time
dependent values live in a separate run_meta.txt so the primary artifacts
(checkpoints, CSVs) stay byte-identical across reruns.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
3 I/O-format error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from . import prng
from .errors import ConfigError, FormatError, NumericsError, ShapeError
from .evaluation import CarbonConfig, estimate_carbon, evaluate, render_report_text, report_to_csv
from .fields import (
    ALL_VARS,
    PROFILES,
    FieldStack,
    VariableId,
    coarsen_values,
    load_grid,
    save_grid,
    synth_stack,
)
from .models import Checkpoint, ModelSpec, bilinear_upsample, load_checkpoint, predict, save_checkpoint
from .render import (
    render_loss_curve,
    render_rmse_bars,
    render_triptych_figure,
    render_triptych_ppm,
)
from .training import LossConfig, TrainConfig, train, write_loss_log


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


# key -> (parser, default-as-string, help)
CONFIG_KEYS: dict[str, tuple] = {
    "seed": (int, "0", "master seed for all derived randomness"),
    "out": (str, "", "output/run directory"),
    "synth.n": (int, "8", "number of samples to generate"),
    "synth.ny": (int, "64", "fine grid rows"),
    "synth.nx": (int, "64", "fine grid cols"),
    "synth.profile": (str, "default", "variable profile name"),
    "synth.spacing_km": (float, "0.5", "fine grid spacing in km"),
    "model.kind": (str, "vit", "vit | resnet"),
    "model.patch": (int, "2", "vit patch size"),
    "model.window": (int, "4", "vit window size (in patches)"),
    "model.dim": (int, "96", "vit embedding dim"),
    "model.heads": (int, "4", "vit attention heads"),
    "model.blocks": (int, "0", "transformer/residual blocks (0 = kind default)"),
    "model.channels": (int, "64", "resnet feature channels"),
    "model.large_kernel": (int, "9", "resnet large kernel"),
    "model.small_kernel": (int, "3", "resnet small kernel"),
    "train.data_dir": (str, "", "directory of training .grd stacks"),
    "train.val_dir": (str, "", "optional directory of validation stacks"),
    "train.lr": (float, "1e-4", "Adam learning rate"),
    "train.epochs": (int, "50", "training epochs"),
    "train.batch_size": (int, "8", "batch size"),
    "train.channels": (str, "all", "channel mask: all | surface"),
    "loss.use_mass_loss": (_bool, "true", "add the mass-conservation term"),
    "loss.mass_weight": (float, "1.0", "weight of the mass term"),
    "loss.mass_convention": (str, "mean_preserving", "mean_preserving | raw_sum"),
    "loss.per_variable": (_bool, "true", "mass gap per variable vs whole stack"),
    "loss.physical_units": (_bool, "true", "mass gap in physical vs normalized units"),
    "eval.data_dir": (str, "", "directory of test .grd stacks"),
    "eval.checkpoints": (str, "", "comma-separated checkpoint paths"),
    "eval.sample": (int, "0", "sample index for triptych heatmaps"),
    "eval.variable": (str, "T2M", "variable for triptych heatmaps"),
    "carbon.device_power_watts": (float, "100.0", "assumed device draw"),
    "carbon.emission_factor_kg_per_kwh": (float, "0.7", "grid emission factor"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the exit codes
        raise ConfigError(message)


def _parse_value(key: str, raw: str):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key '{key}'")
    parser = CONFIG_KEYS[key][0]
    try:
        return parser(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def build_config(config_path: str | None, sets: list[str], seed: int | None,
                 out: str | None) -> dict:
    cfg = {k: _parse_value(k, default) for k, (_, default, _) in CONFIG_KEYS.items()}
    if config_path:
        try:
            text = Path(config_path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{config_path}:{lineno}: expected key=value, got '{line}'")
            k, _, v = line.partition("=")
            cfg[k.strip()] = _parse_value(k.strip(), v.strip())
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got '{item}'")
        k, _, v = item.partition("=")
        cfg[k.strip()] = _parse_value(k.strip(), v.strip())
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    lines = [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.used.txt").write_text("\n".join(lines) + "\n")


def _require_out(cfg: dict) -> Path:
    if not cfg["out"]:
        raise ConfigError("an output directory is required (--out or out=...)")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_spec(cfg: dict, in_channels: int) -> ModelSpec:
    kind = cfg["model.kind"]
    blocks = cfg["model.blocks"]
    if kind == "vit":
        return ModelSpec.vit(
            in_channels,
            patch=cfg["model.patch"],
            window=cfg["model.window"],
            dim=cfg["model.dim"],
            heads=cfg["model.heads"],
            blocks=blocks or 4,
        )
    if kind == "resnet":
        return ModelSpec.resnet(
            in_channels,
            channels=cfg["model.channels"],
            blocks=blocks or 16,
            large_kernel=cfg["model.large_kernel"],
            small_kernel=cfg["model.small_kernel"],
        )
    raise ConfigError(f"model.kind must be vit or resnet, got '{kind}'")


def _load_dataset(dir_path: str, what: str) -> list[FieldStack]:
    if not dir_path:
        raise ConfigError(f"{what} directory not set")
    d = Path(dir_path)
    files = sorted(d.glob("*.grd"))
    if not files:
        raise ConfigError(f"no .grd files in {what} directory {d}")
    return [load_grid(p) for p in files]


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    out = _require_out(cfg)
    ny, nx = cfg["synth.ny"], cfg["synth.nx"]
    tile = 2 * cfg["model.patch"] * cfg["model.window"]
    if ny % tile or nx % tile:
        raise ConfigError(
            f"fine grid {ny}x{nx} must be divisible by {tile} "
            f"(2 * patch * window, so the coarse grid tiles into attention windows)"
        )
    profile = cfg["synth.profile"]
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}'")
    seed = cfg["seed"]
    for i in range(cfg["synth.n"]):
        stack = synth_stack(ny, nx, prng.derive_seed(seed, 1000 + i), profile,
                            cfg["synth.spacing_km"])
        save_grid(out / f"sample_{i:04d}.grd", stack)
    lines = [
        "format=grd1",
        f"seed={seed}",
        f"profile={profile}",
        f"n_samples={cfg['synth.n']}",
        f"ny={ny}",
        f"nx={nx}",
        f"spacing_km={cfg['synth.spacing_km']}",
        "generator=seeded gaussian random fields (white noise x gaussian kernel, wrap)",
    ]
    for v in ALL_VARS:
        p = PROFILES[profile][v]
        lines.append(
            f"var.{v.name}=mean {p.mean} std {p.std} corr_len {p.corr_len} "
            f"zero_fraction {p.zero_fraction}"
        )
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    echo_config(cfg, out)
    print(f"wrote {cfg['synth.n']} stacks ({ny}x{nx}, 19 channels) to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    out = _require_out(cfg)
    stacks = _load_dataset(cfg["train.data_dir"], "training data")
    val = _load_dataset(cfg["train.val_dir"], "validation data") if cfg["train.val_dir"] else None
    tc = TrainConfig(
        lr=cfg["train.lr"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["seed"],
        channels=cfg["train.channels"],
    )
    lc = LossConfig(
        use_mass_loss=cfg["loss.use_mass_loss"],
        mass_weight=cfg["loss.mass_weight"],
        mass_convention=cfg["loss.mass_convention"],
        per_variable=cfg["loss.per_variable"],
        physical_units=cfg["loss.physical_units"],
    )
    spec = _model_spec(cfg, in_channels=len(tc.var_list))
    result = train(spec, stacks, tc, lc, val_stacks=val)
    save_checkpoint(out / "checkpoint.ckpt", result.checkpoint)
    write_loss_log(out / "loss_log.csv", result.log)
    render_loss_curve(result.log, out / "loss_curve.png")
    carbon = CarbonConfig(cfg["carbon.device_power_watts"],
                          cfg["carbon.emission_factor_kg_per_kwh"])
    kg = estimate_carbon(result.wall_seconds, carbon)
    (out / "run_meta.txt").write_text(
        f"wall_seconds={result.wall_seconds!r}\ncarbon_kg_estimate={kg!r}\n"
    )
    echo_config(cfg, out)
    print(
        f"trained {spec.kind} for {tc.epochs} epochs: "
        f"mse {result.initial_mse:.6g} -> {result.log[-1].train_mse:.6g}; "
        f"artifacts in {out}"
    )
    return 0


def _run_eval(cfg: dict, transfer: bool) -> int:
    out = _require_out(cfg)
    stacks = _load_dataset(cfg["eval.data_dir"], "test data")
    ckpt_paths = [p for p in cfg["eval.checkpoints"].split(",") if p.strip()]
    if transfer and not ckpt_paths:
        raise ConfigError("transfer needs at least one checkpoint")
    ckpts: list[tuple[str, Checkpoint]] = []
    for p in ckpt_paths:
        ckpts.append((Path(p).stem, load_checkpoint(p.strip())))

    if ckpts:
        vars = ckpts[0][1].norm.vars
        for name, c in ckpts[1:]:
            if c.norm.vars != vars:
                raise ConfigError(f"checkpoint {name} was trained on a different channel mask")
    else:
        vars = ALL_VARS

    meta = {
        "dataset": cfg["eval.data_dir"],
        "transfer": str(transfer).lower(),
    }
    for name, c in ckpts:
        meta[f"mass_convention.{name}"] = c.meta.get("mass_convention", "?")
        meta[f"train_grid.{name}"] = f"{c.meta.get('train_ny', '?')}x{c.meta.get('train_nx', '?')}"
        if transfer:
            tny, tnx = int(c.meta["train_ny"]), int(c.meta["train_nx"])
            if not (stacks[0].ny > tny and stacks[0].nx > tnx):
                raise ConfigError(
                    f"transfer expects test grids larger than the training grid "
                    f"{tny}x{tnx}, got {stacks[0].ny}x{stacks[0].nx}"
                )

    downscalers = {"bilinear": lambda c: bilinear_upsample(c, 2)}
    for name, c in ckpts:
        downscalers[name] = (lambda ck: lambda arr: predict(ck, arr))(c)

    carbon = CarbonConfig(cfg["carbon.device_power_watts"],
                          cfg["carbon.emission_factor_kg_per_kwh"])
    report = evaluate(downscalers, stacks, vars, carbon, meta=meta)

    (out / "report.csv").write_text(report_to_csv(report))
    (out / "report.txt").write_text(render_report_text(report))
    render_rmse_bars(report, out / "rmse_bars.png")

    # triptych heatmaps for the requested sample/variable
    idx = cfg["eval.sample"]
    if not 0 <= idx < len(stacks):
        raise ConfigError(f"eval.sample {idx} out of range (have {len(stacks)} samples)")
    try:
        var = VariableId[cfg["eval.variable"]]
    except KeyError:
        raise ConfigError(f"unknown variable '{cfg['eval.variable']}'") from None
    if var not in vars:
        raise ConfigError(f"variable {var.name} is not in the evaluated channel set")
    ci = vars.index(var)
    fine = stacks[idx].to_array(vars)
    coarse = coarsen_values(fine, 2)
    for name, fn in downscalers.items():
        pred = fn(coarse)
        prefix = out / f"triptych_s{idx}"
        render_triptych_ppm(coarse[ci], fine[ci], pred[ci], prefix, name, var.name)
        render_triptych_figure(coarse[ci], fine[ci], pred[ci],
                               out / f"triptych_s{idx}_{var.name}_{name}.png", name, var.name)

    wall_lines = [f"{k}={v}" for k, v in sorted(report.meta.items()) if k.startswith("wall_seconds")]
    (out / "run_meta.txt").write_text("\n".join(wall_lines) + "\n")
    echo_config(cfg, out)
    print(render_report_text(report))
    print(f"report and heatmaps written to {out}")
    return 0


def cmd_eval(cfg: dict) -> int:
    return _run_eval(cfg, transfer=False)


def cmd_transfer(cfg: dict) -> int:
    return _run_eval(cfg, transfer=True)


def cmd_gradcheck(cfg: dict) -> int:
    t0 = time.perf_counter()
    results = gc.run_all()
    failed = [name for name, err in results if not (err < gc.THRESHOLD)]
    width = max(len(name) for name, _ in results)
    for name, err in results:
        status = "PASS" if err < gc.THRESHOLD else "FAIL"
        print(f"{name.ljust(width)}  max_rel_err={err:.3e}  {status}")
    covered = gc.registered_names()
    import gridsr.tensor as te

    missing = sorted(te.DIFFERENTIABLE_OPS - covered)
    print(f"ops covered: {len(covered)} checks over {len(te.DIFFERENTIABLE_OPS)} engine ops"
          + (f"; MISSING: {missing}" if missing else ""))
    print(f"elapsed: {time.perf_counter() - t0:.1f}s; threshold {gc.THRESHOLD:g}")
    if missing:
        print("gradcheck FAILED: uncovered ops", file=sys.stderr)
        return 2
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return 2
    print("gradcheck OK")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _Parser(prog="gridsr", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=sorted(COMMANDS), help="subcommand to run")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    try:
        args = parser.parse_args(argv)
        cfg = build_config(args.config, args.set, args.seed, args.out)
        return COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ShapeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
