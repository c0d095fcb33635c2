"""Stochastic uniform quantization of model updates.

Magnitudes are quantized onto ``2**B`` uniformly spaced knobs spanning the
range ``[lower, upper]`` of their parameter group; the sign travels
separately. Rounding to the upper or lower neighbouring knob is randomized
so that the reconstruction is unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, RangeViolationError

# Relative slack when checking |x| against a group range; ranges computed
# from the same vector are exact, this only absorbs caller-side rounding.
_RANGE_SLACK = 1e-12
_SNAP = 1e-12  # relative to the knob index; round-off is a few ulps

RANGE_LIMIT_BITS = 64


@dataclass(frozen=True)
class GroupSpec:
    """Magnitude range shared by a contiguous block of parameters."""

    lower: float
    upper: float
    size: int

    def __post_init__(self):
        if self.lower < 0:
            raise ParameterError(f"group lower limit must be >= 0, got {self.lower}")
        if self.upper < self.lower:
            raise ParameterError(
                f"group upper limit {self.upper} is below lower limit {self.lower}"
            )
        if int(self.size) != self.size or self.size < 1:
            raise ParameterError(f"group size must be a positive integer, got {self.size}")

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass
class QuantizedUpdate:
    """Wire representation of one quantized update vector."""

    signs: np.ndarray  # int8, +1 or -1
    levels: np.ndarray  # int64 knob indices
    groups: list[GroupSpec]
    bits_per_param: int
    total_bits: int = field(default=0)

    @property
    def m(self) -> int:
        return int(self.levels.size)

    def dequantize(self) -> np.ndarray:
        return dequantize_update(self)


@dataclass(frozen=True)
class QeBound:
    delta: float
    bound: float


def _check_bits(B) -> int:
    if int(B) != B or B < 1:
        raise ParameterError(f"quantization bits must be an integer >= 1, got {B}")
    return int(B)


def knob_spacing(group: GroupSpec, B: int) -> float:
    return group.width / (2**B - 1)


def level_dtype(B: int):
    """int64 knob indices; beyond 62 bits they are held as integer-valued floats."""
    return np.int64 if B <= 62 else np.float64


def _knob_split(mag: np.ndarray, group: GroupSpec, B: int):
    """Lower knob index and rounding-up probability for each magnitude."""
    top = 2**B - 1
    dtype = level_dtype(B)
    if group.width == 0.0:
        return np.zeros(mag.shape, dtype=dtype), np.zeros(mag.shape)
    t = (mag - group.lower) / knob_spacing(group, B)
    t = np.clip(t, 0.0, float(top))
    nearest = np.rint(t)
    # exact knob hits (up to float noise) quantize deterministically
    t = np.where(np.abs(t - nearest) <= _SNAP * np.maximum(1.0, nearest), nearest, t)
    base = np.minimum(np.floor(t), float(top - 1))
    return base.astype(dtype), t - base


def _levels_for(mag: np.ndarray, group: GroupSpec, B: int, u: np.ndarray) -> np.ndarray:
    """Stochastically round magnitudes to knob indices given uniforms ``u``."""
    base, frac = _knob_split(mag, group, B)
    return base + (u < frac).astype(base.dtype)


def _check_range(mag, group: GroupSpec):
    tol = _RANGE_SLACK * max(group.upper, 1e-300)
    lo_bad = mag < group.lower - tol
    hi_bad = mag > group.upper + tol
    if np.any(lo_bad) or np.any(hi_bad):
        bad = np.asarray(mag)[np.asarray(lo_bad | hi_bad)].ravel()[0]
        raise RangeViolationError(
            f"|x| = {bad!r} outside quantization range [{group.lower!r}, {group.upper!r}]"
        )


def quantize_value(x: float, group: GroupSpec, B: int, rng: np.random.Generator):
    """Quantize a single value; returns ``(sign, level)``."""
    B = _check_bits(B)
    mag = abs(float(x))
    _check_range(mag, group)
    sign = -1 if x < 0 else 1
    u = rng.random()
    level = _levels_for(np.array([mag]), group, B, np.array([u]))[0]
    return sign, int(level)


def dequantize(sign: int, level: int, group: GroupSpec, B: int) -> float:
    B = _check_bits(B)
    if level < 0 or level > 2**B - 1:
        raise ParameterError(f"level {level} outside [0, {2**B - 1}]")
    if group.width == 0.0:
        return sign * group.lower
    return sign * (group.lower + level * knob_spacing(group, B))


def compute_ranges(v, partition) -> list[GroupSpec]:
    """Per-group magnitude range of ``v``.

    ``partition`` lists consecutive group sizes; they must sum to ``len(v)``.
    """
    v = np.asarray(v, dtype=float).ravel()
    sizes = [int(s) for s in partition]
    if any(s < 1 for s in sizes):
        raise ParameterError("empty parameter group")
    if sum(sizes) != v.size:
        raise ParameterError(f"partition covers {sum(sizes)} entries, vector has {v.size}")
    groups = []
    start = 0
    for s in sizes:
        mag = np.abs(v[start:start + s])
        groups.append(GroupSpec(float(mag.min()), float(mag.max()), s))
        start += s
    return groups


def bit_cost(m: int, B: int, mu: int) -> int:
    """Payload size ``m*B + mu`` with ``mu`` the total side-information overhead."""
    B = _check_bits(B)
    if m < 1 or mu < 0:
        raise ParameterError("m must be >= 1 and mu >= 0")
    return int(m) * B + int(mu)


def bit_cost_experiment(m: int, B: int, n_min: int, n_max: int,
                        B_min: int = RANGE_LIMIT_BITS, B_max: int = RANGE_LIMIT_BITS) -> int:
    """Payload size with one sign bit per parameter plus per-group range limits."""
    B = _check_bits(B)
    if m < 1 or min(n_min, n_max, B_min, B_max) < 0:
        raise ParameterError("bit-cost inputs must be positive")
    return int(m) * (1 + B) + int(n_min) * int(B_min) + int(n_max) * int(B_max)


def experiment_overhead(m: int, n_groups: int, range_bits: int = RANGE_LIMIT_BITS) -> int:
    """The ``mu`` that makes :func:`bit_cost` agree with :func:`bit_cost_experiment`."""
    return int(m) + 2 * int(n_groups) * int(range_bits)


def quantize_update(v, groups: list[GroupSpec], B: int, rng: np.random.Generator,
                    range_bits: int = RANGE_LIMIT_BITS) -> QuantizedUpdate:
    """Element-wise stochastic quantization of ``v``.

    One uniform variate is consumed per coordinate, in coordinate order, so
    the result depends only on the generator state.
    """
    B = _check_bits(B)
    v = np.asarray(v, dtype=float).ravel()
    base, frac = _split_update(v, groups, B)
    u = rng.random(v.size)
    levels = base + (u < frac).astype(base.dtype)
    signs = np.where(v < 0, -1, 1).astype(np.int8)
    total = bit_cost_experiment(v.size, B, len(groups), len(groups), range_bits, range_bits)
    return QuantizedUpdate(signs, levels, list(groups), B, total)


def _split_update(v, groups: list[GroupSpec], B: int):
    v = np.asarray(v, dtype=float).ravel()
    if sum(g.size for g in groups) != v.size:
        raise ParameterError(
            f"groups cover {sum(g.size for g in groups)} entries, vector has {v.size}"
        )
    mag = np.abs(v)
    base = np.empty(v.size, dtype=level_dtype(B))
    frac = np.empty(v.size)
    start = 0
    for g in groups:
        sl = slice(start, start + g.size)
        _check_range(mag[sl], g)
        base[sl], frac[sl] = _knob_split(mag[sl], g, B)
        start += g.size
    return base, frac


def sample_levels(v, groups: list[GroupSpec], B: int, rng: np.random.Generator,
                  draws: int) -> np.ndarray:
    """Knob indices of ``draws`` independent quantizations of ``v``, shape ``(draws, m)``.

    Row ``k`` equals the levels of the ``k``-th successive :func:`quantize_update`
    call on the same generator, so batched Monte Carlo reproduces the scalar path.
    """
    B = _check_bits(B)
    if draws < 1:
        raise ParameterError(f"draws must be >= 1, got {draws}")
    base, frac = _split_update(v, groups, B)
    u = rng.random((int(draws), base.size))
    return base + (u < frac).astype(base.dtype)


def knob_values(groups: list[GroupSpec], B: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate ``(lower, spacing)`` so that ``|Q(v)| = lower + level * spacing``."""
    B = _check_bits(B)
    lower = np.concatenate([np.full(g.size, g.lower) for g in groups])
    spacing = np.concatenate([np.full(g.size, knob_spacing(g, B)) for g in groups])
    return lower, spacing


def dequantize_update(q: QuantizedUpdate) -> np.ndarray:
    out = np.empty(q.levels.size, dtype=float)
    start = 0
    for g in q.groups:
        sl = slice(start, start + g.size)
        if g.width == 0.0:
            out[sl] = g.lower
        else:
            out[sl] = g.lower + q.levels[sl] * knob_spacing(g, q.bits_per_param)
        start += g.size
    return out * q.signs


def qe_bound(groups: list[GroupSpec], B: int) -> QeBound:
    """Expected squared quantization error bound for the given ranges."""
    B = _check_bits(B)
    delta_sq = 0.25 * sum(g.size * g.width**2 for g in groups)
    return QeBound(float(np.sqrt(delta_sq)), delta_sq / (2**B - 1) ** 2)


def delta_sq(groups: list[GroupSpec]) -> float:
    return 0.25 * sum(g.size * g.width**2 for g in groups)
