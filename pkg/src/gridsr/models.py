"""The three 2x downscalers: windowed-attention transformer, residual CNN,
and bilinear interpolation, plus parameter init and checkpoint I/O.

Both learned models end in a zero-initialized projection and add the
bilinear upsample of their input, so a freshly initialized model is
bit-for-bit the bilinear baseline and training learns corrections on top
of it. Attention is window-local, which keeps parameter shapes
independent of the grid size: one checkpoint runs at any resolution whose
sides divide by patch*window.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import prng
from . import tensor as T
from .errors import FormatError, ShapeError
from .fields import NormStats, VariableId

CKPT_MAGIC = b"CKP1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters. Defaults follow the training table:
    resnet channels 64 / blocks 16 / kernels 9 and 3, scale factor 2."""

    kind: str  # vit | resnet | bilinear
    in_channels: int
    scale: int = 2
    # vit
    patch: int = 2
    window: int = 4
    dim: int = 96
    heads: int = 4
    blocks: int = 4
    # resnet
    channels: int = 64
    large_kernel: int = 9
    small_kernel: int = 3

    def __post_init__(self):
        if self.kind not in ("vit", "resnet", "bilinear"):
            raise ValueError(f"unknown model kind '{self.kind}'")
        if self.scale != 2:
            raise ValueError(f"scale must be 2, got {self.scale}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.kind == "vit" and self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @staticmethod
    def vit(in_channels: int, **kw) -> "ModelSpec":
        return ModelSpec(kind="vit", in_channels=in_channels, **kw)

    @staticmethod
    def resnet(in_channels: int, **kw) -> "ModelSpec":
        kw.setdefault("blocks", 16)
        return ModelSpec(kind="resnet", in_channels=in_channels, **kw)

    @staticmethod
    def bilinear(in_channels: int) -> "ModelSpec":
        return ModelSpec(kind="bilinear", in_channels=in_channels)


# -- parameter initialization -----------------------------------------------------


def _param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], bool]]:
    """Ordered (name, shape, zero_init) triples for the spec."""
    c, s = spec.in_channels, spec.scale
    out: list[tuple[str, tuple[int, ...], bool]] = []
    if spec.kind == "vit":
        p, d = spec.patch, spec.dim
        out.append(("embed.w", (c * p * p, d), False))
        out.append(("embed.b", (d,), True))
        for i in range(spec.blocks):
            pre = f"block{i}"
            out.append((f"{pre}.ln1.g", (d,), False))
            out.append((f"{pre}.ln1.b", (d,), True))
            for proj in ("wq", "wk", "wv", "wo"):
                out.append((f"{pre}.attn.{proj}", (d, d), False))
            for bias in ("bq", "bk", "bv", "bo"):
                out.append((f"{pre}.attn.{bias}", (d,), True))
            out.append((f"{pre}.ln2.g", (d,), False))
            out.append((f"{pre}.ln2.b", (d,), True))
            out.append((f"{pre}.mlp.w1", (d, 4 * d), False))
            out.append((f"{pre}.mlp.b1", (4 * d,), True))
            out.append((f"{pre}.mlp.w2", (4 * d, d), False))
            out.append((f"{pre}.mlp.b2", (d,), True))
        r = p * s
        out.append(("head.w", (d, c * r * r), True))
        out.append(("head.b", (c * r * r,), True))
    elif spec.kind == "resnet":
        ch, lk, sk = spec.channels, spec.large_kernel, spec.small_kernel
        out.append(("conv_in.w", (ch, c, lk, lk), False))
        out.append(("conv_in.b", (ch,), True))
        for i in range(spec.blocks):
            out.append((f"block{i}.c1.w", (ch, ch, sk, sk), False))
            out.append((f"block{i}.c1.b", (ch,), True))
            out.append((f"block{i}.c2.w", (ch, ch, sk, sk), False))
            out.append((f"block{i}.c2.b", (ch,), True))
        out.append(("conv_up.w", (c * s * s, ch, sk, sk), False))
        out.append(("conv_up.b", (c * s * s,), True))
        out.append(("conv_out.w", (c, c, lk, lk), True))
        out.append(("conv_out.b", (c,), True))
    return out


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        rf = shape[2] * shape[3]
        return shape[1] * rf, shape[0] * rf
    return shape[0], shape[0]


def init_params(spec: ModelSpec, seed: int) -> dict[str, T.Tensor]:
    """Glorot-uniform weights from the portable PRNG; biases and the final
    output projection start at zero."""
    params: dict[str, T.Tensor] = {}
    for idx, (name, shape, zero) in enumerate(_param_layout(spec)):
        if zero:
            data = np.zeros(shape)
        elif name.endswith((".g",)):  # layer-norm gains start at one
            data = np.ones(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            u = prng.uniforms(prng.derive_seed(seed, idx), int(np.prod(shape)))
            data = (2.0 * u - 1.0).reshape(shape) * bound
        params[name] = T.Tensor(data, requires_grad=True)
    return params


# -- bilinear baseline --------------------------------------------------------------


def bilinear_upsample(values: np.ndarray, s: int = 2) -> np.ndarray:
    """Align-corners bilinear interpolation on the trailing two dims."""
    h, w = values.shape[-2], values.shape[-1]
    hf, wf = h * s, w * s

    def weights(n, nf):
        if nf == 1:
            return np.zeros(1, dtype=int), np.zeros(1, dtype=int), np.zeros(1)
        src = np.arange(nf) * (n - 1) / (nf - 1)
        i0 = np.clip(np.floor(src).astype(int), 0, n - 1)
        i1 = np.clip(i0 + 1, 0, n - 1)
        return i0, i1, src - i0

    y0, y1, wy = weights(h, hf)
    x0, x1, wx = weights(w, wf)
    rows = values[..., y0, :] * (1.0 - wy)[:, None] + values[..., y1, :] * wy[:, None]
    return rows[..., :, x0] * (1.0 - wx) + rows[..., :, x1] * wx


# -- forward passes ------------------------------------------------------------------


def _window_partition(x: T.Tensor, w: int) -> T.Tensor:
    """[Hp, Wp, D] tokens -> [nWindows, w*w, D]."""
    hp, wp, d = x.shape
    x = x.reshape(hp // w, w, wp // w, w, d)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape((hp // w) * (wp // w), w * w, d)


def _window_merge(x: T.Tensor, w: int, hp: int, wp: int) -> T.Tensor:
    d = x.shape[-1]
    x = x.reshape(hp // w, wp // w, w, w, d)
    x = x.transpose(0, 2, 1, 3, 4)
    return x.reshape(hp, wp, d)


def _attention(x: T.Tensor, params: dict, pre: str, heads: int) -> T.Tensor:
    """Multi-head self-attention inside each window ([nW, T, D] tokens)."""
    nw, t, d = x.shape
    dh = d // heads
    q = x @ params[f"{pre}.wq"] + params[f"{pre}.bq"]
    k = x @ params[f"{pre}.wk"] + params[f"{pre}.bk"]
    v = x @ params[f"{pre}.wv"] + params[f"{pre}.bv"]

    def split(z):
        return z.reshape(nw, t, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(q), split(k), split(v)
    attn = T.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(nw, t, d)
    return out @ params[f"{pre}.wo"] + params[f"{pre}.bo"]


def vit_forward(spec: ModelSpec, params: dict[str, T.Tensor], coarse: T.Tensor) -> T.Tensor:
    """Windowed-attention transformer: patch embed, shifted-window blocks,
    linear head to pixel-shuffle, plus the global bilinear residual."""
    c, h, w = coarse.shape
    p, win, d = spec.patch, spec.window, spec.dim
    tile = p * win
    if c != spec.in_channels:
        raise ShapeError(f"model expects {spec.in_channels} channels, input has {c}")
    if h % tile or w % tile:
        raise ShapeError(
            f"vit needs grid dims divisible by patch*window = {tile}, got {h}x{w}"
        )
    hp, wp = h // p, w // p

    # patch embedding
    x = coarse.reshape(c, hp, p, wp, p).transpose(1, 3, 0, 2, 4).reshape(hp, wp, c * p * p)
    x = x @ params["embed.w"] + params["embed.b"]

    for i in range(spec.blocks):
        pre = f"block{i}"
        shift = (win // 2) if (i % 2 == 1) else 0
        res = x
        y = T.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        if shift:
            y = T.roll(y, (-shift, -shift), axis=(0, 1))
        y = _window_partition(y, win)
        y = _attention(y, params, f"{pre}.attn", spec.heads)
        y = _window_merge(y, win, hp, wp)
        if shift:
            y = T.roll(y, (shift, shift), axis=(0, 1))
        x = res + y
        res = x
        y = T.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        y = T.gelu(y @ params[f"{pre}.mlp.w1"] + params[f"{pre}.mlp.b1"])
        y = y @ params[f"{pre}.mlp.w2"] + params[f"{pre}.mlp.b2"]
        x = res + y

    r = p * spec.scale
    x = x @ params["head.w"] + params["head.b"]  # [hp, wp, c*r*r]
    x = x.transpose(2, 0, 1)
    fine = T.pixel_shuffle(x, r)
    return fine + T.Tensor(bilinear_upsample(coarse.data, spec.scale))


def resnet_forward(spec: ModelSpec, params: dict[str, T.Tensor], coarse: T.Tensor) -> T.Tensor:
    """Residual CNN: large-kernel head, small-kernel residual blocks,
    pixel-shuffle upsampling, large-kernel refinement, bilinear residual."""
    c = coarse.shape[0]
    if c != spec.in_channels:
        raise ShapeError(f"model expects {spec.in_channels} channels, input has {c}")

    def conv(x, name):
        return T.conv2d(x, params[f"{name}.w"]) + params[f"{name}.b"].reshape(-1, 1, 1)

    x = conv(coarse, "conv_in")
    for i in range(spec.blocks):
        y = T.gelu(conv(x, f"block{i}.c1"))
        x = x + conv(y, f"block{i}.c2")
    x = conv(x, "conv_up")
    x = T.pixel_shuffle(x, spec.scale)
    x = conv(x, "conv_out")
    return x + T.Tensor(bilinear_upsample(coarse.data, spec.scale))


def forward(spec: ModelSpec, params: dict[str, T.Tensor], coarse: T.Tensor) -> T.Tensor:
    if spec.kind == "vit":
        return vit_forward(spec, params, coarse)
    if spec.kind == "resnet":
        return resnet_forward(spec, params, coarse)
    return T.Tensor(bilinear_upsample(coarse.data, spec.scale))


# -- checkpoints ---------------------------------------------------------------------
#
# magic "CKP1", version byte, then two length-prefixed key=value text blocks
# (model spec, training metadata), then a tensor table: uint32 count and per
# tensor uint16 name length + name + uint8 rank + uint32 dims + float64 data.
# Little-endian throughout. Norm stats ride along as tensors "norm.mean" /
# "norm.std" plus the variable list in the spec block.


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: dict[str, np.ndarray]
    norm: NormStats | None
    meta: dict[str, str]

    def param_tensors(self, requires_grad: bool = False) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}


def _kv_block(d: dict[str, str]) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in d.items())
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_kv_block(blob: bytes, offset: int, path) -> tuple[dict[str, str], int]:
    if offset + 4 > len(blob):
        raise FormatError(f"truncated checkpoint {path}")
    (n,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if offset + n > len(blob):
        raise FormatError(f"truncated checkpoint {path}")
    d = {}
    for line in blob[offset : offset + n].decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            d[k] = v
    return d, offset + n


_SPEC_FIELDS = (
    "kind",
    "in_channels",
    "scale",
    "patch",
    "window",
    "dim",
    "heads",
    "blocks",
    "channels",
    "large_kernel",
    "small_kernel",
)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    spec_kv = {f: str(getattr(ckpt.spec, f)) for f in _SPEC_FIELDS}
    if ckpt.norm is not None:
        spec_kv["norm_vars"] = ",".join(v.name for v in ckpt.norm.vars)
    tensors = dict(ckpt.params)
    if ckpt.norm is not None:
        tensors["norm.mean"] = ckpt.norm.mean
        tensors["norm.std"] = ckpt.norm.std
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<B", CKPT_VERSION))
        fh.write(_kv_block(spec_kv))
        fh.write(_kv_block(ckpt.meta))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic in {path}: expected {CKPT_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 5:
        raise FormatError(f"truncated checkpoint {path}")
    version = blob[4]
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} in {path}")
    spec_kv, offset = _read_kv_block(blob, 5, path)
    meta, offset = _read_kv_block(blob, offset, path)

    norm_vars = spec_kv.pop("norm_vars", None)
    kwargs = {}
    for f in _SPEC_FIELDS:
        v = spec_kv.get(f)
        kwargs[f] = v if f == "kind" else int(v)
    spec = ModelSpec(**kwargs)

    if offset + 4 > len(blob):
        raise FormatError(f"truncated checkpoint {path}")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + nlen].decode("utf-8")
        offset += nlen
        rank = blob[offset]
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if offset + 8 * n > len(blob):
            raise FormatError(f"truncated tensor '{name}' in {path}")
        tensors[name] = (
            np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(dims).copy()
        )
        offset += 8 * n

    norm = None
    if norm_vars:
        mean = tensors.pop("norm.mean")
        std = tensors.pop("norm.std")
        vars = tuple(VariableId[n] for n in norm_vars.split(","))
        norm = NormStats(vars, mean, std)

    expected = {name: shape for name, shape, _ in _param_layout(spec)}
    for name, shape in expected.items():
        if name not in tensors:
            raise FormatError(f"checkpoint {path} is missing parameter '{name}'")
        if tensors[name].shape != shape:
            raise FormatError(
                f"checkpoint {path}: parameter '{name}' has shape "
                f"{tensors[name].shape}, spec requires {shape}"
            )
    extra = set(tensors) - set(expected)
    if extra:
        raise FormatError(f"checkpoint {path} has unexpected tensors: {sorted(extra)}")
    return Checkpoint(spec, tensors, norm, meta)


def predict(ckpt: Checkpoint, coarse_phys: np.ndarray) -> np.ndarray:
    """Inference in physical units: normalize, forward, denormalize.

    Precipitation is clamped at zero after denormalization.
    """
    if ckpt.spec.kind == "bilinear" or ckpt.norm is None:
        out = bilinear_upsample(coarse_phys, ckpt.spec.scale)
    else:
        m = ckpt.norm.mean[:, None, None]
        s = ckpt.norm.std[:, None, None]
        x = T.Tensor((coarse_phys - m) / s)
        out = forward(ckpt.spec, ckpt.param_tensors(), x).data * s + m
    if ckpt.norm is not None:
        for i, v in enumerate(ckpt.norm.vars):
            if v is VariableId.PR:
                out[i] = np.maximum(out[i], 0.0)
    return out
