"""Decay kernels, contrast-encoding schedules and dictionary construction.

All times are in milliseconds. The discrete forward model for one voxel is
``m = K f`` where ``K[p, q] = w_q * (1 - 2 exp(-TI_p / T1_q)) * exp(-TE_p / T2_q)``.
One-dimensional experiments reuse the same machinery with one grid axis
collapsed to a single node of weight 1.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


class ConfigurationError(ValueError):
    """Inconsistent combination of otherwise valid inputs."""


class Mode(str, enum.Enum):
    T1T2 = "T1T2"
    T1 = "T1"
    T2 = "T2"


@dataclass(frozen=True)
class ContrastEncoding:
    """One (TE, TI) acquisition setting. ``ti=None`` means no inversion."""

    te: float
    ti: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.te) or self.te < 0:
            raise ValueError(f"te must be finite and >= 0, got {self.te}")
        if self.ti is not None and (not math.isfinite(self.ti) or self.ti < 0):
            raise ValueError(f"ti must be finite and >= 0, got {self.ti}")


def validate_schedule(schedule: Sequence[ContrastEncoding]) -> list[ContrastEncoding]:
    schedule = list(schedule)
    seen = set()
    for enc in schedule:
        key = (enc.te, enc.ti)
        if key in seen:
            raise ValueError(f"duplicate encoding in schedule: te={enc.te}, ti={enc.ti}")
        seen.add(key)
    return schedule


def schedule_arrays(schedule: Sequence[ContrastEncoding]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return (te, ti) arrays; absent TI is reported as NaN."""
    te = np.array([e.te for e in schedule], dtype=np.float64)
    ti = np.array([np.nan if e.ti is None else e.ti for e in schedule], dtype=np.float64)
    return te, ti


def product_schedule(tis: Iterable[float | None], tes: Iterable[float]) -> list[ContrastEncoding]:
    """Every (TI, TE) combination, TI-major, each TI followed by its echo train."""
    tes = list(tes)
    return validate_schedule(ContrastEncoding(te=float(te), ti=None if ti is None else float(ti))
                             for ti in tis for te in tes)


def standard_schedule() -> list[ContrastEncoding]:
    """7 inversion times x 15 echo times (P = 105)."""
    return product_schedule([0, 100, 200, 400, 700, 1000, 2000], 7.5 + 15.0 * np.arange(15))


def t1_baseline_schedule() -> list[ContrastEncoding]:
    """Inversion-recovery T1 relaxometry at the same 7 inversion times (TE ignored)."""
    return product_schedule([0, 100, 200, 400, 700, 1000, 2000], [0.0])


def t2_baseline_schedule() -> list[ContrastEncoding]:
    """CPMG T2 relaxometry, 32 echoes from 10 to 320 ms."""
    return product_schedule([None], 10.0 * np.arange(1, 33))


# -- scalar / vectorized kernels ---------------------------------------------------

def _check_positive(x: NDArray[np.float64], name: str) -> None:
    if np.any(~(x > 0)):
        raise ValueError(f"{name} must be strictly positive")


def kernel_t2(te: ArrayLike, t2: ArrayLike):
    """``exp(-te / t2)``; broadcasts over array inputs."""
    te = np.asarray(te, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    _check_positive(t2, "t2")
    out = np.exp(-te / t2)
    return float(out) if out.ndim == 0 else out


def kernel_t1(ti: ArrayLike, t1: ArrayLike):
    """Inversion recovery ``1 - 2 exp(-ti / t1)``; broadcasts over array inputs."""
    ti = np.asarray(ti, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    _check_positive(t1, "t1")
    out = 1.0 - 2.0 * np.exp(-ti / t1)
    return float(out) if out.ndim == 0 else out


def kernel_t1t2(enc: ContrastEncoding, t1: ArrayLike, t2: ArrayLike):
    if enc.ti is None:
        raise ValueError("kernel_t1t2 needs an encoding with an inversion time")
    return kernel_t1(enc.ti, t1) * kernel_t2(enc.te, t2)


# -- grids ---------------------------------------------------------------------------

def log_grid(vmin: float, vmax: float, count: int) -> NDArray[np.float64]:
    """``count`` geometrically spaced nodes with exact endpoints."""
    if not (0 < vmin < vmax) or not math.isfinite(vmax):
        raise ValueError(f"log_grid needs 0 < min < max, got ({vmin}, {vmax})")
    if count < 2:
        raise ValueError(f"log_grid needs count >= 2, got {count}")
    nodes = np.geomspace(vmin, vmax, count)
    nodes[0], nodes[-1] = vmin, vmax
    return nodes


def quadrature_weights(nodes: ArrayLike) -> NDArray[np.float64]:
    """Trapezoidal weights in log space; a single node gets weight 1.

    For nodes ``[1, e, e**2]`` the weights are ``[0.5, 1.0, 0.5]``.
    """
    nodes = np.asarray(nodes, dtype=np.float64).ravel()
    if nodes.size < 2:
        return np.ones(nodes.size)
    _check_positive(nodes, "nodes")
    logs = np.log(nodes)
    gaps = np.diff(logs)
    if np.any(gaps <= 0):
        raise ValueError("nodes must be strictly increasing")
    w = np.empty_like(logs)
    w[0] = gaps[0] / 2
    w[-1] = gaps[-1] / 2
    w[1:-1] = (gaps[:-1] + gaps[1:]) / 2
    return w


@dataclass(frozen=True, eq=False)
class SpectralGrid:
    """Tensor-product (T1, T2) grid, flattened T1-major (q = i1 * Q2 + i2)."""

    t1_values: NDArray[np.float64]
    t2_values: NDArray[np.float64]
    weights: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        t1 = np.atleast_1d(np.asarray(self.t1_values, dtype=np.float64))
        t2 = np.atleast_1d(np.asarray(self.t2_values, dtype=np.float64))
        for name, axis in (("t1_values", t1), ("t2_values", t2)):
            if axis.ndim != 1 or axis.size == 0:
                raise ValueError(f"{name} must be a nonempty 1D sequence")
            _check_positive(axis, name)
            if np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
        if self.weights is None:
            w = np.outer(quadrature_weights(t1), quadrature_weights(t2)).ravel()
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.size != t1.size * t2.size:
            raise ValueError(f"weights must have {t1.size * t2.size} entries, got {w.size}")
        if np.any(~(w > 0)):
            raise ValueError("quadrature weights must be strictly positive")
        object.__setattr__(self, "t1_values", t1)
        object.__setattr__(self, "t2_values", t2)
        object.__setattr__(self, "weights", w)

    @classmethod
    def logarithmic(cls, t1_range: tuple[float, float] | None, t2_range: tuple[float, float] | None,
                    n1: int = 100, n2: int = 100, *, fixed: float = 1.0) -> "SpectralGrid":
        """Log-spaced grid; pass ``None`` for an axis to collapse it to ``[fixed]``."""
        t1 = log_grid(*t1_range, n1) if t1_range is not None else np.array([fixed])
        t2 = log_grid(*t2_range, n2) if t2_range is not None else np.array([fixed])
        return cls(t1, t2)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.t1_values.size, self.t2_values.size)

    @property
    def size(self) -> int:
        return self.t1_values.size * self.t2_values.size

    def nodes(self) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Flattened per-atom (T1, T2) arrays of length Q."""
        t1, t2 = np.meshgrid(self.t1_values, self.t2_values, indexing="ij")
        return t1.ravel(), t2.ravel()

    def check_mode(self, mode: Mode) -> None:
        n1, n2 = self.shape
        if mode is Mode.T1 and n2 != 1:
            raise ConfigurationError("T1 mode needs a grid with a single T2 node")
        if mode is Mode.T2 and n1 != 1:
            raise ConfigurationError("T2 mode needs a grid with a single T1 node")

    def same_as(self, other: "SpectralGrid") -> bool:
        return (np.array_equal(self.t1_values, other.t1_values)
                and np.array_equal(self.t2_values, other.t2_values)
                and np.array_equal(self.weights, other.weights))

    def index_of(self, t1: float, t2: float) -> int:
        """Flat index of the grid node matching (t1, t2) to relative 1e-12."""
        i1 = np.flatnonzero(np.isclose(self.t1_values, t1, rtol=1e-12, atol=0))
        i2 = np.flatnonzero(np.isclose(self.t2_values, t2, rtol=1e-12, atol=0))
        if self.shape[0] == 1:
            i1 = np.array([0])
        if self.shape[1] == 1:
            i2 = np.array([0])
        if i1.size == 0 or i2.size == 0:
            raise KeyError(f"({t1}, {t2}) is not a grid node")
        return int(i1[0] * self.shape[1] + i2[0])


@dataclass(frozen=True)
class CompartmentModel:
    """Discrete compartments as parallel arrays (amplitude, T1, T2)."""

    amplitudes: tuple[float, ...]
    t1: tuple[float, ...]
    t2: tuple[float, ...]

    def __post_init__(self) -> None:
        f = tuple(float(x) for x in np.atleast_1d(self.amplitudes))
        t1 = tuple(float(x) for x in np.atleast_1d(self.t1))
        t2 = tuple(float(x) for x in np.atleast_1d(self.t2))
        if not f or not (len(f) == len(t1) == len(t2)):
            raise ValueError("compartment model needs equal-length, nonempty amplitude/t1/t2")
        if any(x < 0 for x in f):
            raise ValueError("amplitudes must be nonnegative")
        if any(not x > 0 for x in t1 + t2):
            raise ValueError("relaxation times must be strictly positive")
        object.__setattr__(self, "amplitudes", f)
        object.__setattr__(self, "t1", t1)
        object.__setattr__(self, "t2", t2)

    def __len__(self) -> int:
        return len(self.amplitudes)

    def with_amplitudes(self, amplitudes: Sequence[float]) -> "CompartmentModel":
        return CompartmentModel(tuple(amplitudes), self.t1, self.t2)


STANDARD_COMPARTMENTS = CompartmentModel((1.0, 1.0, 1.0), (750.0, 700.0, 1000.0), (70.0, 100.0, 110.0))


# -- dictionary ---------------------------------------------------------------------

def _mode_factors(schedule: Sequence[ContrastEncoding], t1: NDArray[np.float64],
                  t2: NDArray[np.float64], mode: Mode) -> NDArray[np.float64]:
    te, ti = schedule_arrays(schedule)
    if mode is Mode.T2:
        return kernel_t2(te[:, None], t2[None, :])
    if np.any(np.isnan(ti)):
        raise ConfigurationError(f"{mode.value} mode needs an inversion time for every encoding")
    inv = kernel_t1(ti[:, None], t1[None, :])
    if mode is Mode.T1:
        return inv
    return inv * kernel_t2(te[:, None], t2[None, :])


def kernel_matrix(schedule: Sequence[ContrastEncoding], t1: ArrayLike, t2: ArrayLike,
                  mode: Mode | str = Mode.T1T2) -> NDArray[np.float64]:
    """Unweighted P x S kernel for arbitrary (t1, t2) pairs."""
    mode = Mode(mode)
    t1 = np.atleast_1d(np.asarray(t1, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2, dtype=np.float64))
    return _mode_factors(schedule, t1, t2, mode)


@dataclass(frozen=True, eq=False)
class DecayDictionary:
    grid: SpectralGrid
    schedule: tuple[ContrastEncoding, ...]
    kernel: NDArray[np.float64]
    mode: Mode = Mode.T1T2

    @property
    def n_encodings(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.kernel.shape[1]


def build_dictionary(schedule: Sequence[ContrastEncoding], grid: SpectralGrid,
                     mode: Mode | str = Mode.T1T2) -> DecayDictionary:
    """Weighted P x Q dictionary ``K[p, q] = w_q * kernel(enc_p; T1_q, T2_q)``."""
    mode = Mode(mode)
    schedule = validate_schedule(schedule)
    if not schedule:
        raise ConfigurationError("schedule must be nonempty")
    grid.check_mode(mode)
    t1, t2 = grid.nodes()
    K = _mode_factors(schedule, t1, t2, mode) * grid.weights[None, :]
    return DecayDictionary(grid=grid, schedule=tuple(schedule), kernel=K, mode=mode)


def place_compartments(model: CompartmentModel, grid: SpectralGrid) -> NDArray[np.float64]:
    """Spectrum with ``f_s / w_q`` at each compartment's node, so ``K f`` is the signal."""
    f = np.zeros(grid.size)
    for amp, t1, t2 in zip(model.amplitudes, model.t1, model.t2):
        q = grid.index_of(t1, t2)
        f[q] += amp / grid.weights[q]
    return f
