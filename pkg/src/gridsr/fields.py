"""Gridded-variable data model, coarsening, synthetic fields, and grid I/O.

The variable set is 4 surface channels plus 5 upper-air quantities at
three pressure levels (50/100/150 hPa), 19 channels total, always kept in
the canonical enum order. Coarse grids are derived from fine ones by
area-mean coarsening, which makes the conservation relationship between
resolutions exact by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from . import prng
from .errors import FormatError, ShapeError

GRD_MAGIC = b"GRD1"
GRD_VERSION = 1


class VariableId(IntEnum):
    """Canonical channel order: surface first, then Z/Q/T/U/V per level."""

    U10 = 0
    V10 = 1
    T2M = 2
    PR = 3
    Z50 = 4
    Z100 = 5
    Z150 = 6
    Q50 = 7
    Q100 = 8
    Q150 = 9
    T50 = 10
    T100 = 11
    T150 = 12
    U50 = 13
    U100 = 14
    U150 = 15
    V50 = 16
    V100 = 17
    V150 = 18

    @property
    def is_surface(self) -> bool:
        return self.value < 4

    @property
    def units(self) -> str:
        return _UNITS[self]


_UNITS = {
    VariableId.U10: "m/s",
    VariableId.V10: "m/s",
    VariableId.T2M: "K",
    VariableId.PR: "mm",
}
for _v in VariableId:
    if _v.name.startswith("Z"):
        _UNITS[_v] = "m2/s2"
    elif _v.name.startswith("Q"):
        _UNITS[_v] = "kg/kg"
    elif _v.name.startswith("T") and _v is not VariableId.T2M:
        _UNITS[_v] = "K"
    elif _v not in _UNITS:
        _UNITS[_v] = "m/s"

SURFACE_VARS = tuple(v for v in VariableId if v.is_surface)
ALL_VARS = tuple(VariableId)


@dataclass
class GridField:
    """One 2-d gridded variable at a single resolution."""

    var: VariableId
    values: np.ndarray  # (ny, nx) float64
    spacing_km: float
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"GridField values must be 2-d, got shape {self.values.shape}")
        if self.ny < 2 or self.nx < 2:
            raise ShapeError(f"GridField needs ny, nx >= 2, got {self.ny}x{self.nx}")
        if not self.units:
            self.units = self.var.units
        if self.var is VariableId.PR and self.units == self.var.units and np.any(self.values < 0):
            raise ValueError("PR field contains negative values")

    @property
    def ny(self) -> int:
        return self.values.shape[0]

    @property
    def nx(self) -> int:
        return self.values.shape[1]


@dataclass
class FieldStack:
    """Co-registered multi-variable input/output of the models."""

    fields: list[GridField] = field(default_factory=list)

    def __post_init__(self):
        if not self.fields:
            raise ValueError("FieldStack needs at least one field")
        ny, nx, sp = self.fields[0].ny, self.fields[0].nx, self.fields[0].spacing_km
        for f in self.fields:
            if (f.ny, f.nx) != (ny, nx):
                raise ShapeError(
                    f"FieldStack members not co-registered: {f.var.name} is "
                    f"{f.ny}x{f.nx}, expected {ny}x{nx}"
                )
            if f.spacing_km != sp:
                raise ShapeError(f"FieldStack spacing mismatch on {f.var.name}")
        codes = [f.var.value for f in self.fields]
        if codes != sorted(codes) or len(set(codes)) != len(codes):
            raise ValueError("FieldStack channels must be unique and in canonical order")

    @property
    def vars(self) -> tuple[VariableId, ...]:
        return tuple(f.var for f in self.fields)

    @property
    def ny(self) -> int:
        return self.fields[0].ny

    @property
    def nx(self) -> int:
        return self.fields[0].nx

    @property
    def spacing_km(self) -> float:
        return self.fields[0].spacing_km

    def to_array(self, vars: tuple[VariableId, ...] | None = None) -> np.ndarray:
        """Stack (a subset of) channels into a [C, ny, nx] array."""
        if vars is None:
            return np.stack([f.values for f in self.fields])
        by_var = {f.var: f for f in self.fields}
        missing = [v.name for v in vars if v not in by_var]
        if missing:
            raise ValueError(f"stack is missing channels: {', '.join(missing)}")
        return np.stack([by_var[v].values for v in vars])

    def select(self, vars) -> "FieldStack":
        by_var = {f.var: f for f in self.fields}
        return FieldStack([by_var[v] for v in vars])


def stack_from_array(
    arr: np.ndarray,
    vars: tuple[VariableId, ...],
    spacing_km: float,
    units: tuple[str, ...] | None = None,
) -> FieldStack:
    if arr.shape[0] != len(vars):
        raise ShapeError(f"array has {arr.shape[0]} channels for {len(vars)} variables")
    fields = []
    for i, v in enumerate(vars):
        u = units[i] if units is not None else v.units
        fields.append(GridField(v, arr[i], spacing_km, units=u))
    return FieldStack(fields)


# -- coarsening ----------------------------------------------------------------


def coarsen_values(values: np.ndarray, s: int) -> np.ndarray:
    """Area-mean coarsening of the trailing two dims by integer factor s."""
    h, w = values.shape[-2], values.shape[-1]
    if h % s or w % s:
        raise ShapeError(f"coarsen: dims {h}x{w} not divisible by factor {s}")
    lead = values.shape[:-2]
    return values.reshape(*lead, h // s, s, w // s, s).mean(axis=(-3, -1))


def coarsen(f: GridField, s: int) -> GridField:
    """Each coarse cell is the mean of its s x s fine block."""
    return GridField(f.var, coarsen_values(f.values, s), f.spacing_km * s, units=f.units)


def coarsen_stack(stack: FieldStack, s: int) -> FieldStack:
    return FieldStack([coarsen(f, s) for f in stack.fields])


# -- synthetic Gaussian random fields -------------------------------------------


@dataclass(frozen=True)
class VarProfile:
    mean: float
    std: float
    corr_len: float
    zero_fraction: float = 0.0  # fraction clamped to exactly zero (precipitation)


def _default_profile() -> dict[VariableId, VarProfile]:
    prof = {
        VariableId.U10: VarProfile(0.0, 5.0, 6.0),
        VariableId.V10: VarProfile(0.0, 5.0, 6.0),
        VariableId.T2M: VarProfile(288.0, 5.0, 8.0),
        VariableId.PR: VarProfile(2.0, 4.0, 4.0, zero_fraction=0.45),
    }
    geo = {"Z50": (2.0e5, 1.5e3), "Z100": (1.6e5, 1.2e3), "Z150": (1.35e5, 1.0e3)}
    hum = {"Q50": (3e-6, 5e-7), "Q100": (3e-6, 5e-7), "Q150": (5e-6, 1e-6)}
    tmp = {"T50": (212.0, 4.0), "T100": (205.0, 4.0), "T150": (210.0, 5.0)}
    for name, (m, s) in {**geo, **hum, **tmp}.items():
        prof[VariableId[name]] = VarProfile(m, s, 7.0)
    for name in ("U50", "U100", "U150", "V50", "V100", "V150"):
        prof[VariableId[name]] = VarProfile(0.0, 12.0, 7.0)
    return prof


PROFILES: dict[str, dict[VariableId, VarProfile]] = {"default": _default_profile()}


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(int(np.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_wrap(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable convolution with periodic wrap on both axes."""
    r = (len(kernel) - 1) // 2
    for axis in (0, 1):
        a = np.moveaxis(a, axis, 0)
        idx = np.arange(-r, a.shape[0] + r) % a.shape[0]  # wrap even when r > size
        win = np.lib.stride_tricks.sliding_window_view(a[idx], len(kernel), axis=0)
        a = np.moveaxis(win @ kernel, 0, axis)
    return a


def grf_values(
    ny: int,
    nx: int,
    correlation_len_cells: float,
    mean: float,
    std: float,
    seed: int,
    zero_fraction: float = 0.0,
) -> np.ndarray:
    """Smooth Gaussian random field rescaled to the requested moments.

    Seeded white noise is convolved (periodic wrap) with a Gaussian kernel
    whose sigma is the correlation length in cells, then standardized and
    mapped to mean/std. With zero_fraction > 0 the field is shifted down
    by that empirical quantile and clamped at zero, giving rain/no-rain
    structure with at least that fraction of exact zeros.
    """
    if correlation_len_cells < 1:
        raise ValueError(f"correlation length must be >= 1 cell, got {correlation_len_cells}")
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0.0:
        out = np.full((ny, nx), float(mean))
    else:
        white = prng.normals(seed, ny * nx).reshape(ny, nx)
        smooth = _smooth_wrap(white, _gaussian_kernel(float(correlation_len_cells)))
        smooth = (smooth - smooth.mean()) / smooth.std()
        out = mean + std * smooth
    if zero_fraction > 0.0:
        out = np.maximum(out - np.quantile(out, zero_fraction), 0.0)
    return out


def synth_grf(
    var: VariableId,
    ny: int,
    nx: int,
    correlation_len_cells: float,
    mean: float,
    std: float,
    seed: int,
    spacing_km: float = 0.5,
    zero_fraction: float = 0.0,
) -> GridField:
    values = grf_values(ny, nx, correlation_len_cells, mean, std, seed, zero_fraction)
    return GridField(var, values, spacing_km)


def synth_stack(
    ny: int,
    nx: int,
    seed: int,
    profile: str = "default",
    spacing_km: float = 0.5,
) -> FieldStack:
    """One GridField per variable; per-variable seeds derive from the master seed."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile '{profile}' (have: {', '.join(sorted(PROFILES))})")
    prof = PROFILES[profile]
    fields = []
    for v in ALL_VARS:
        p = prof[v]
        child = prng.derive_seed(seed, v.value)
        fields.append(
            synth_grf(v, ny, nx, p.corr_len, p.mean, p.std, child, spacing_km, p.zero_fraction)
        )
    return FieldStack(fields)


# -- normalization ---------------------------------------------------------------


@dataclass
class NormStats:
    """Per-variable mean and standard deviation, in canonical channel order."""

    vars: tuple[VariableId, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            bad = [self.vars[i].name for i in np.nonzero(self.std <= 0)[0]]
            raise ValueError(f"non-positive std for variables: {', '.join(bad)}")

    def select(self, vars) -> "NormStats":
        index = {v: i for i, v in enumerate(self.vars)}
        ids = [index[v] for v in vars]
        return NormStats(tuple(vars), self.mean[ids], self.std[ids])


def fit_norm(stacks: list[FieldStack]) -> NormStats:
    """Pooled per-variable moments over every cell of every stack."""
    if not stacks:
        raise ValueError("fit_norm needs at least one stack")
    vars = stacks[0].vars
    for s in stacks:
        if s.vars != vars:
            raise ValueError("fit_norm: stacks carry different variable sets")
    n = 0
    acc = np.zeros(len(vars))
    acc2 = np.zeros(len(vars))
    for s in stacks:
        arr = s.to_array()
        n += arr.shape[1] * arr.shape[2]
        acc += arr.sum(axis=(1, 2))
        acc2 += (arr * arr).sum(axis=(1, 2))
    mean = acc / n
    var = acc2 / n - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    zero = np.nonzero(std <= 0)[0]
    if zero.size:
        bad = ", ".join(vars[i].name for i in zero)
        raise ValueError(f"zero variance in variables: {bad}")
    return NormStats(vars, mean, std)


def apply_norm(stack: FieldStack, stats: NormStats) -> FieldStack:
    """Standardize each channel; units become 'sigma' (dimensionless)."""
    st = stats.select(stack.vars)
    fields = []
    for f, m, s in zip(stack.fields, st.mean, st.std):
        fields.append(GridField(f.var, (f.values - m) / s, f.spacing_km, units="sigma"))
    return FieldStack(fields)


def invert_norm(stack: FieldStack, stats: NormStats) -> FieldStack:
    """Undo apply_norm; tiny negative precipitation from round-off is clamped."""
    st = stats.select(stack.vars)
    fields = []
    for f, m, s in zip(stack.fields, st.mean, st.std):
        vals = f.values * s + m
        if f.var is VariableId.PR:
            vals = np.maximum(vals, 0.0)
        fields.append(GridField(f.var, vals, f.spacing_km))
    return FieldStack(fields)


# -- on-disk grid container (.grd) ------------------------------------------------
#
# bytes 0-3   magic "GRD1"
# byte  4     version (1)
# byte  5     channel count
# bytes 6-7   reserved, zero
# per channel: uint16 variable id, uint32 ny, uint32 nx,
#              float64 spacing in meters, then ny*nx float64 values
# (everything little-endian, channels in canonical order)

_CHAN_HEADER = struct.Struct("<HIId")


def save_grid(path, stack: FieldStack) -> None:
    with open(path, "wb") as fh:
        fh.write(GRD_MAGIC)
        fh.write(struct.pack("<BBH", GRD_VERSION, len(stack.fields), 0))
        for f in stack.fields:
            fh.write(_CHAN_HEADER.pack(f.var.value, f.ny, f.nx, f.spacing_km * 1000.0))
            fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_grid(path) -> FieldStack:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRD_MAGIC:
        raise FormatError(f"bad magic in {path}: expected {GRD_MAGIC!r}, got {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"truncated header in {path}")
    version, nchan, _ = struct.unpack_from("<BBH", blob, 4)
    if version != GRD_VERSION:
        raise FormatError(f"unsupported grd version {version} in {path} (expected {GRD_VERSION})")
    offset = 8
    fields = []
    for _ in range(nchan):
        if offset + _CHAN_HEADER.size > len(blob):
            raise FormatError(f"truncated channel header in {path}")
        code, ny, nx, spacing_m = _CHAN_HEADER.unpack_from(blob, offset)
        offset += _CHAN_HEADER.size
        try:
            var = VariableId(code)
        except ValueError:
            raise FormatError(f"unknown variable id {code} in {path}") from None
        nbytes = ny * nx * 8
        if ny * nx > 2**28:
            raise FormatError(f"dimension overflow in {path}: {ny}x{nx} declared for {var.name}")
        if offset + nbytes > len(blob):
            raise FormatError(
                f"truncated payload in {path}: {var.name} declares {ny}x{nx} "
                f"({nbytes} bytes) but only {len(blob) - offset} remain"
            )
        values = np.frombuffer(blob, dtype="<f8", count=ny * nx, offset=offset).reshape(ny, nx)
        offset += nbytes
        fields.append(GridField(var, values.copy(), spacing_m / 1000.0))
    return FieldStack(fields)
