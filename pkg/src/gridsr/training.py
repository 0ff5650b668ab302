"""Composite loss (MSE + mass-conservation penalty) and the Adam training loop.

The mass penalty compares aggregate values of the super-resolved output
against the coarse input. Because coarse cells here are block means, the
default "mean_preserving" convention compares sums after dividing the
fine sum by scale^2; the literal "raw_sum" convention (|sum pred - sum
input|) is kept behind a flag. Either way the gap is normalized per
channel and per coarse pixel so it is scale-commensurate with the MSE
term. MSE is computed in normalized space; the mass gap is a physical
statement and is computed after denormalization when stats are supplied.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import prng
from . import tensor as T
from .errors import NumericsError, ShapeError
from .fields import (
    ALL_VARS,
    SURFACE_VARS,
    FieldStack,
    NormStats,
    coarsen_values,
    fit_norm,
)
from .models import Checkpoint, ModelSpec, forward, init_params

CONVENTIONS = ("mean_preserving", "raw_sum")


@dataclass
class LossConfig:
    use_mass_loss: bool = True
    mass_weight: float = 1.0
    mass_convention: str = "mean_preserving"
    per_variable: bool = True
    # conservation is a physical statement, so the gap defaults to physical
    # units; set False to measure it on standardized channels instead (the
    # two differ by a per-channel 1/std factor under mean_preserving)
    physical_units: bool = True

    def __post_init__(self):
        if self.mass_weight < 0:
            raise ValueError(f"mass_weight must be >= 0, got {self.mass_weight}")
        if self.mass_convention not in CONVENTIONS:
            raise ValueError(
                f"mass_convention must be one of {CONVENTIONS}, got '{self.mass_convention}'"
            )


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    channels: str = "all"  # all | surface

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.channels not in ("all", "surface"):
            raise ValueError(f"channels must be 'all' or 'surface', got '{self.channels}'")

    @property
    def var_list(self):
        return SURFACE_VARS if self.channels == "surface" else ALL_VARS


# -- losses ----------------------------------------------------------------------


def mse_loss(pred: T.Tensor, truth: T.Tensor) -> T.Tensor:
    if pred.shape != truth.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {truth.shape} differ")
    diff = pred - truth
    return (diff * diff).mean()


def mass_loss(
    pred: T.Tensor,
    coarse_input: T.Tensor,
    convention: str = "mean_preserving",
    per_variable: bool = True,
) -> T.Tensor:
    """Aggregate-discrepancy penalty between fine prediction and coarse input.

    Normalized per channel and per coarse pixel; returns a scalar tensor.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown mass convention '{convention}'")
    if pred.ndim != 3 or coarse_input.ndim != 3:
        raise ShapeError("mass_loss expects [C,H,W] tensors")
    c, hf, wf = pred.shape
    ci, h, w = coarse_input.shape
    if ci != c or hf % h or wf % w or hf // h != wf // w:
        raise ShapeError(
            f"mass_loss: prediction {pred.shape} is not an integer scale-up "
            f"of input {coarse_input.shape}"
        )
    s = hf // h
    axes = (1, 2) if per_variable else None
    pred_sum = pred.sum(axis=axes)
    in_sum = coarse_input.sum(axis=axes)
    if convention == "mean_preserving":
        gap = T.absolute(pred_sum * (1.0 / (s * s)) - in_sum)
    else:
        gap = T.absolute(pred_sum - in_sum)
    return gap.sum() * (1.0 / (c * h * w))


def _total_loss_parts(
    pred: T.Tensor,
    truth: T.Tensor,
    coarse_input: T.Tensor,
    cfg: LossConfig,
    stats: NormStats | None = None,
) -> tuple[T.Tensor, float, float]:
    mse = mse_loss(pred, truth)
    if not cfg.use_mass_loss:
        return mse, mse.item(), 0.0
    mass_pred, mass_input = pred, coarse_input
    if stats is not None:
        m = T.Tensor(stats.mean[:, None, None])
        s = T.Tensor(stats.std[:, None, None])
        if cfg.physical_units:
            mass_pred = pred * s + m  # coarse_input is already physical
        else:
            mass_input = (coarse_input - m) / s
    mass = mass_loss(mass_pred, mass_input, cfg.mass_convention, cfg.per_variable)
    loss = mse + mass * cfg.mass_weight
    return loss, mse.item(), mass.item()


def total_loss(
    pred: T.Tensor,
    truth: T.Tensor,
    coarse_input: T.Tensor,
    cfg: LossConfig,
    stats: NormStats | None = None,
) -> T.Tensor:
    """Composite scalar loss: mse + mass_weight * mass gap (if enabled).

    With stats given, pred/truth are taken as normalized and the mass gap
    is evaluated in physical units (coarse_input must be physical).
    """
    loss, _, _ = _total_loss_parts(pred, truth, coarse_input, cfg, stats)
    return loss


# -- optimizer -------------------------------------------------------------------


class Adam:
    """Standard Adam with bias correction; deterministic given the grads."""

    def __init__(self, params: dict[str, T.Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != param shape {p.data.shape}")
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- training loop -----------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    train_mass: float
    train_total: float
    val_rmse: float | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    initial_mse: float = 0.0
    initial_mass: float = 0.0
    initial_total: float = 0.0
    wall_seconds: float = 0.0


def _sample_arrays(stacks: list[FieldStack], vars, scale: int):
    """(fine_phys, coarse_phys) [C,H,W] pairs; coarse derived by area mean."""
    out = []
    for s in stacks:
        fine = s.to_array(vars)
        out.append((fine, coarsen_values(fine, scale)))
    return out


def train(
    spec: ModelSpec,
    train_stacks: list[FieldStack],
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    val_stacks: list[FieldStack] | None = None,
) -> TrainResult:
    """Deterministic training loop; same (config, seed, data) gives a
    bit-identical checkpoint and loss log."""
    t0 = time.perf_counter()
    vars = cfg.var_list
    if spec.in_channels != len(vars):
        raise ValueError(
            f"spec.in_channels={spec.in_channels} but channel mask selects {len(vars)}"
        )
    stats = fit_norm([s.select(vars) for s in train_stacks])
    samples = _sample_arrays(train_stacks, vars, spec.scale)
    val = _sample_arrays(val_stacks, vars, spec.scale) if val_stacks else None
    mean = stats.mean[:, None, None]
    std = stats.std[:, None, None]

    params = init_params(spec, cfg.seed)
    opt = Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    def eval_losses(pairs, with_grad: bool):
        """Mean losses over pairs; accumulates grads when with_grad."""
        tot_mse = tot_mass = tot_all = 0.0
        for fine, coarse in pairs:
            x = T.Tensor((coarse - mean) / std)
            y = T.Tensor((fine - mean) / std)
            pred = forward(spec, params, x)
            loss, mse_v, mass_v = _total_loss_parts(pred, y, T.Tensor(coarse), loss_cfg, stats)
            if with_grad:
                loss.backward()
            tot_mse += mse_v
            tot_mass += mass_v
            tot_all += loss.item()
        n = len(pairs)
        return tot_mse / n, tot_mass / n, tot_all / n

    def val_rmse():
        if val is None:
            return None
        sq = 0.0
        n = 0
        for fine, coarse in val:
            x = T.Tensor((coarse - mean) / std)
            pred = forward(spec, params, x).data
            diff = pred - (fine - mean) / std
            sq += float((diff * diff).sum())
            n += diff.size
        return float(np.sqrt(sq / n))

    init_mse, init_mass, init_total = eval_losses(samples, with_grad=False)

    log: list[EpochLog] = []
    shuffle_seed = prng.derive_seed(cfg.seed, 0xD5)
    for epoch in range(1, cfg.epochs + 1):
        order = prng.shuffled_indices(prng.derive_seed(shuffle_seed, epoch), len(samples))
        ep_mse = ep_mass = ep_total = 0.0
        nb = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            opt.zero_grad()
            try:
                b_mse, b_mass, b_total = eval_losses(batch, with_grad=True)
            except NumericsError as e:
                raise NumericsError(f"at epoch {epoch}, batch {nb}: {e}") from None
            if not np.isfinite(b_total):
                raise NumericsError(f"non-finite loss at epoch {epoch}, batch {nb}")
            for p in params.values():  # backward summed over the batch
                if p.grad is not None:
                    p.grad = p.grad / len(batch)
            opt.step()
            ep_mse += b_mse
            ep_mass += b_mass
            ep_total += b_total
            nb += 1
        log.append(EpochLog(epoch, ep_mse / nb, ep_mass / nb, ep_total / nb, val_rmse()))

    meta = {
        "epochs": str(cfg.epochs),
        "seed": str(cfg.seed),
        "lr": repr(cfg.lr),
        "batch_size": str(cfg.batch_size),
        "channels": cfg.channels,
        "use_mass_loss": str(loss_cfg.use_mass_loss).lower(),
        "mass_weight": repr(loss_cfg.mass_weight),
        "mass_convention": loss_cfg.mass_convention,
        "per_variable": str(loss_cfg.per_variable).lower(),
        "mass_physical_units": str(loss_cfg.physical_units).lower(),
        "train_ny": str(train_stacks[0].ny),
        "train_nx": str(train_stacks[0].nx),
        "initial_mse": repr(init_mse),
        "initial_mass": repr(init_mass),
        "initial_total": repr(init_total),
        "final_mse": repr(log[-1].train_mse),
        "final_mass": repr(log[-1].train_mass),
        "final_total": repr(log[-1].train_total),
    }
    ckpt = Checkpoint(spec, {k: p.data for k, p in params.items()}, stats, meta)
    return TrainResult(
        checkpoint=ckpt,
        log=log,
        initial_mse=init_mse,
        initial_mass=init_mass,
        initial_total=init_total,
        wall_seconds=time.perf_counter() - t0,
    )


LOSS_LOG_HEADER = "epoch,train_mse,train_mass,train_total,val_rmse"


def write_loss_log(path, log: list[EpochLog]) -> None:
    lines = [LOSS_LOG_HEADER]
    for row in log:
        val = "" if row.val_rmse is None else repr(row.val_rmse)
        lines.append(
            f"{row.epoch},{row.train_mse!r},{row.train_mass!r},{row.train_total!r},{val}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
