"""Central finite-difference verification of every differentiable op.

Each registered check builds a seeded scalar function of one or more leaf
tensors, compares the analytic gradients from backward() against central
finite differences (step 1e-5 scaled by entry magnitude), and reports the
maximum elementwise relative error. The registry must cover every name in
tensor.DIFFERENTIABLE_OPS plus the losses and the two tiny end-to-end
composites; the CLI fails (exit 2) when any op exceeds the threshold.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import prng
from . import tensor as T
from .fields import NormStats, VariableId, coarsen_values
from .models import ModelSpec, forward, init_params
from .training import LossConfig, mass_loss, mse_loss, total_loss

THRESHOLD = 1e-4
FD_STEP = 1e-5
_REL_FLOOR = 1e-6


def _rand(seed: int, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    u = prng.uniforms(seed, int(np.prod(shape))).reshape(shape)
    return lo + (hi - lo) * u


def finite_diff(f: Callable[[], float], x: np.ndarray, indices) -> np.ndarray:
    """Central differences of f w.r.t. the given flat indices of x."""
    flat = x.reshape(-1)
    out = np.empty(len(indices))
    for n, i in enumerate(indices):
        orig = flat[i]
        h = FD_STEP * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out


def _sample_indices(size: int, seed: int, cap: int = 48) -> np.ndarray:
    if size <= cap:
        return np.arange(size)
    return np.unique(prng.raw(seed, cap) % np.uint64(size)).astype(int)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), _REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_grads(inputs: list[T.Tensor], loss_fn: Callable[[], T.Tensor], seed: int = 7) -> float:
    """Max relative error over (sampled entries of) every input gradient."""
    loss = loss_fn()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in inputs]
    worst = 0.0
    for k, p in enumerate(inputs):
        idx = _sample_indices(p.data.size, prng.derive_seed(seed, k))
        numeric = finite_diff(lambda: loss_fn().item(), p.data, idx)
        a = np.zeros(p.data.size) if analytic[k] is None else analytic[k].reshape(-1)
        worst = max(worst, max_rel_err(a[idx], numeric))
        p.grad = None
    return worst


def _projected(out: T.Tensor, seed: int) -> T.Tensor:
    """Reduce an op output to a well-scaled scalar via a fixed random projection."""
    r = T.Tensor(_rand(seed, out.shape, 0.5, 1.5))
    return (out * r).mean()


def _leaf(seed, shape, lo=-1.0, hi=1.0) -> T.Tensor:
    return T.Tensor(_rand(seed, shape, lo, hi), requires_grad=True)


# -- individual op checks -------------------------------------------------------


def _check_binary(op_name: str) -> float:
    op = getattr(T, op_name)
    worst = 0.0
    for k, (sa, sb) in enumerate([((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 1, 4), (3, 4))]):
        a = _leaf(100 + k, sa, 0.5, 1.5)
        b = _leaf(200 + k, sb, 0.5, 1.5)
        worst = max(worst, check_grads([a, b], lambda: _projected(op(a, b), 300 + k)))
    return worst


def _check_unary(op_name: str, lo=-1.5, hi=1.5) -> float:
    op = getattr(T, op_name)
    a = _leaf(11, (4, 5), lo, hi)
    return check_grads([a], lambda: _projected(op(a), 12))


def _check_abs() -> float:
    # keep entries away from the kink
    a = T.Tensor(_rand(13, (4, 5), 0.3, 1.3) * np.where(_rand(14, (4, 5)) > 0, 1, -1),
                 requires_grad=True)
    return check_grads([a], lambda: _projected(T.absolute(a), 15))


def _check_sum() -> float:
    a = _leaf(16, (3, 4, 2))
    worst = check_grads([a], lambda: _projected(T.tsum(a, axis=1), 17))
    worst = max(worst, check_grads([a], lambda: T.tsum(a) * 0.1))
    return worst


def _check_mean() -> float:
    a = _leaf(18, (3, 4, 2))
    worst = check_grads([a], lambda: _projected(T.tmean(a, axis=(0, 2), keepdims=True), 19))
    worst = max(worst, check_grads([a], lambda: T.tmean(a)))
    return worst


def _check_reshape() -> float:
    a = _leaf(20, (2, 6))
    return check_grads([a], lambda: _projected(T.reshape(a, (3, 4)), 21))


def _check_transpose() -> float:
    a = _leaf(22, (2, 3, 4))
    return check_grads([a], lambda: _projected(T.transpose(a, (2, 0, 1)), 23))


def _check_roll() -> float:
    a = _leaf(24, (3, 4))
    return check_grads([a], lambda: _projected(T.roll(a, (1, -2), axis=(0, 1)), 25))


def _check_matmul() -> float:
    worst = 0.0
    cases = [((4, 3), (3, 2)), ((2, 3, 4), (2, 4, 2)), ((2, 3, 4), (4, 5))]
    for k, (sa, sb) in enumerate(cases):
        a = _leaf(26 + k, sa)
        b = _leaf(36 + k, sb)
        worst = max(worst, check_grads([a, b], lambda: _projected(T.matmul(a, b), 46 + k)))
    return worst


def _check_softmax() -> float:
    a = _leaf(50, (3, 5), -2.0, 2.0)
    return check_grads([a], lambda: _projected(T.softmax(a, axis=-1), 51))


def _check_layer_norm() -> float:
    a = _leaf(52, (3, 6), -2.0, 2.0)
    g = _leaf(53, (6,), 0.5, 1.5)
    b = _leaf(54, (6,), -0.5, 0.5)
    return check_grads([a, g, b], lambda: _projected(T.layer_norm(a, g, b), 55))


def _check_conv2d() -> float:
    worst = 0.0
    x = _leaf(56, (2, 5, 5))
    w = _leaf(57, (3, 2, 3, 3))
    worst = max(worst, check_grads([x, w], lambda: _projected(T.conv2d(x, w), 58)))
    x2 = _leaf(59, (1, 7, 7))
    w2 = _leaf(60, (2, 1, 3, 3))
    worst = max(
        worst, check_grads([x2, w2], lambda: _projected(T.conv2d(x2, w2, stride=2, padding=1), 61))
    )
    return worst


def _check_avg_pool2d() -> float:
    a = _leaf(62, (2, 4, 6))
    return check_grads([a], lambda: _projected(T.avg_pool2d(a, 2), 63))


def _check_pixel_shuffle() -> float:
    a = _leaf(64, (8, 2, 3))
    return check_grads([a], lambda: _projected(T.pixel_shuffle(a, 2), 65))


def _check_upsample_nearest() -> float:
    a = _leaf(66, (2, 3, 3))
    return check_grads([a], lambda: _projected(T.upsample_nearest(a, 2), 67))


def _check_mse_loss() -> float:
    p = _leaf(68, (2, 4, 4))
    t = _leaf(69, (2, 4, 4))
    return check_grads([p, t], lambda: mse_loss(p, t))


def _check_mass_loss() -> float:
    worst = 0.0
    for k, conv in enumerate(("mean_preserving", "raw_sum")):
        p = _leaf(70 + k, (2, 4, 4), 0.5, 1.5)
        c = _leaf(80 + k, (2, 2, 2), -1.5, -0.5)  # sign split keeps the gap well off zero
        worst = max(worst, check_grads([p, c], lambda: mass_loss(p, c, conv)))
    return worst


def _check_total_loss() -> float:
    stats = NormStats((VariableId.U10, VariableId.V10),
                      np.array([0.3, -0.2]), np.array([1.2, 0.8]))
    cfg = LossConfig(use_mass_loss=True, mass_weight=0.7)
    p = _leaf(90, (2, 4, 4), 0.5, 1.5)
    t = _leaf(91, (2, 4, 4))
    c = _leaf(92, (2, 2, 2), -1.5, -0.5)
    return check_grads([p, t, c], lambda: total_loss(p, t, c, cfg, stats))


def _composite(spec: ModelSpec, hw: int, seed: int) -> float:
    """End-to-end composite loss through a tiny model, fd over every tensor."""
    params = init_params(spec, seed)
    # nudge every parameter off its init (the zero head would otherwise
    # block gradient flow into the body, making the check vacuous there)
    for k, p in enumerate(params.values()):
        p.data = p.data + 0.05 * _rand(prng.derive_seed(seed, 500 + k), p.data.shape)
    c = spec.in_channels
    fine = _rand(seed + 1, (c, 2 * hw, 2 * hw), -1.0, 1.0)
    coarse = coarsen_values(fine, 2) + 0.25  # offset keeps the mass gap off zero
    x = T.Tensor(coarse)
    y = T.Tensor(fine)
    cfg = LossConfig(use_mass_loss=True, mass_weight=1.0)
    leaves = list(params.values())

    def loss_fn():
        return total_loss(forward(spec, params, x), y, T.Tensor(coarse), cfg)

    return check_grads(leaves, loss_fn, seed=seed + 2)


def _check_composite_vit() -> float:
    spec = ModelSpec.vit(in_channels=2, patch=2, window=2, dim=8, heads=2, blocks=2)
    return _composite(spec, hw=8, seed=1001)


def _check_composite_resnet() -> float:
    spec = ModelSpec.resnet(in_channels=2, channels=6, blocks=2)
    return _composite(spec, hw=6, seed=2002)


REGISTRY: list[tuple[str, Callable[[], float]]] = [
    ("add", lambda: _check_binary("add")),
    ("sub", lambda: _check_binary("sub")),
    ("mul", lambda: _check_binary("mul")),
    ("div", lambda: _check_binary("div")),
    ("neg", lambda: _check_unary("neg")),
    ("abs", _check_abs),
    ("gelu", lambda: _check_unary("gelu")),
    ("sum", _check_sum),
    ("mean", _check_mean),
    ("reshape", _check_reshape),
    ("transpose", _check_transpose),
    ("roll", _check_roll),
    ("matmul", _check_matmul),
    ("softmax", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("conv2d", _check_conv2d),
    ("avg_pool2d", _check_avg_pool2d),
    ("pixel_shuffle", _check_pixel_shuffle),
    ("upsample_nearest", _check_upsample_nearest),
    ("mse_loss", _check_mse_loss),
    ("mass_loss", _check_mass_loss),
    ("total_loss", _check_total_loss),
    ("composite_tiny_vit", _check_composite_vit),
    ("composite_tiny_resnet", _check_composite_resnet),
]


def run_all() -> list[tuple[str, float]]:
    return [(name, fn()) for name, fn in REGISTRY]


def registered_names() -> set[str]:
    return {name for name, _ in REGISTRY}
