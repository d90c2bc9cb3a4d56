"""Fisher information and Cramer-Rao bounds for multi-compartment decay models.

Parameters per compartment ``s`` are ``f<s>``, ``T1_<s>``, ``T2_<s>`` (1-based);
1D modes drop the relaxation time their experiment does not encode. With more
than one voxel, labels are prefixed ``v<k>.`` for voxel-specific parameters;
shared relaxation times keep the bare label.

Bounds are computed from the SVD of the noise-whitened, column-equilibrated
Jacobian rather than by inverting ``J^T J``: protocols such as 7-point
inversion recovery with six unknowns have Fisher condition numbers near
1e17, beyond what a direct float64 inverse resolves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .model import (
    CompartmentModel,
    ConfigurationError,
    ContrastEncoding,
    STANDARD_COMPARTMENTS,
    standard_schedule,
    schedule_arrays,
    t1_baseline_schedule,
    t2_baseline_schedule,
)

DEFAULT_CONDITION_CAP = 1e14


class FisherMode(str, enum.Enum):
    T1T2 = "T1T2"
    T1_ONLY = "T1_ONLY"
    T2_ONLY = "T2_ONLY"


class Sharing(str, enum.Enum):
    PER_VOXEL = "PER_VOXEL"
    SHARED_RELAXATION = "SHARED_RELAXATION"


class Unidentifiable(ArithmeticError):
    """The Fisher matrix is singular to working precision."""

    def __init__(self, message: str, condition: float, null_direction: dict[str, float]):
        super().__init__(message)
        self.condition = condition
        self.null_direction = null_direction


@dataclass
class FisherSpec:
    models: list[CompartmentModel]
    schedule: list[ContrastEncoding]
    sigma: float = 1.0
    averages: int = 1
    mode: FisherMode = FisherMode.T1T2
    sharing: Sharing = Sharing.PER_VOXEL
    name: str = ""

    def __post_init__(self) -> None:
        if isinstance(self.models, CompartmentModel):
            self.models = [self.models]
        self.models = list(self.models)
        self.schedule = list(self.schedule)
        self.mode = FisherMode(self.mode)
        self.sharing = Sharing(self.sharing)
        if not self.models:
            raise ConfigurationError("FisherSpec needs at least one voxel model")
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")
        if int(self.averages) != self.averages or self.averages < 1:
            raise ConfigurationError(f"averages must be a positive integer, got {self.averages}")
        self.averages = int(self.averages)
        if self.sharing is Sharing.SHARED_RELAXATION:
            if len(self.models) < 2:
                raise ConfigurationError("SHARED_RELAXATION needs at least two voxels")
            ref = self.models[0]
            for m in self.models[1:]:
                if m.t1 != ref.t1 or m.t2 != ref.t2:
                    raise ConfigurationError(
                        "SHARED_RELAXATION needs identical (T1, T2) per compartment in every voxel")


@dataclass
class CrlbResult:
    parameter_names: list[str]
    crlb: NDArray[np.float64]
    std_bound: NDArray[np.float64]
    fisher_condition: float
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.parameter_names, self.crlb.tolist()))

    def std_dict(self) -> dict[str, float]:
        return dict(zip(self.parameter_names, self.std_bound.tolist()))

    def __getitem__(self, label: str) -> float:
        return float(self.crlb[self.parameter_names.index(label)])


def _relax_keys(mode: FisherMode) -> tuple[str, ...]:
    return {FisherMode.T1T2: ("T1", "T2"), FisherMode.T1_ONLY: ("T1",),
            FisherMode.T2_ONLY: ("T2",)}[mode]


def parameter_labels(n_compartments: int, mode: FisherMode | str = FisherMode.T1T2) -> list[str]:
    mode = FisherMode(mode)
    labels = []
    for s in range(1, n_compartments + 1):
        labels.append(f"f{s}")
        labels.extend(f"{k}_{s}" for k in _relax_keys(mode))
    return labels


def jacobian(model: CompartmentModel, schedule: Sequence[ContrastEncoding],
             mode: FisherMode | str = FisherMode.T1T2) -> NDArray[np.float64]:
    """Analytic P x K Jacobian of the noiseless signal, columns per `parameter_labels`."""
    mode = FisherMode(mode)
    te, ti = schedule_arrays(schedule)
    if mode is not FisherMode.T2_ONLY and np.any(np.isnan(ti)):
        raise ConfigurationError(f"{mode.value} needs an inversion time for every encoding")
    cols = []
    for f, t1, t2 in zip(model.amplitudes, model.t1, model.t2):
        if mode is FisherMode.T2_ONLY:
            e2 = np.exp(-te / t2)
            cols += [e2, f * te / t2**2 * e2]
            continue
        e1 = np.exp(-ti / t1)
        inv = 1.0 - 2.0 * e1
        dinv = -2.0 * ti / t1**2 * e1
        if mode is FisherMode.T1_ONLY:
            cols += [inv, f * dinv]
            continue
        e2 = np.exp(-te / t2)
        cols += [inv * e2, f * dinv * e2, f * inv * te / t2**2 * e2]
    return np.column_stack(cols)


def joint_jacobian(spec: FisherSpec) -> tuple[NDArray[np.float64], list[str]]:
    """Stacked Jacobian over all voxels with its parameter labels."""
    blocks = [jacobian(m, spec.schedule, spec.mode) for m in spec.models]
    S = len(spec.models[0])
    base = parameter_labels(S, spec.mode)
    if len(blocks) == 1:
        return blocks[0], base
    P = len(spec.schedule)
    V = len(blocks)
    per = 1 + len(_relax_keys(spec.mode))
    if spec.sharing is Sharing.PER_VOXEL:
        K = sum(b.shape[1] for b in blocks)
        J = np.zeros((V * P, K))
        labels = []
        col = 0
        for v, b in enumerate(blocks):
            J[v * P:(v + 1) * P, col:col + b.shape[1]] = b
            labels += [f"v{v + 1}.{lab}" for lab in parameter_labels(len(spec.models[v]), spec.mode)]
            col += b.shape[1]
        return J, labels
    # shared relaxation: amplitudes per voxel first, then one column per shared time
    n_relax = per - 1
    J = np.zeros((V * P, V * S + S * n_relax))
    labels = [f"v{v + 1}.f{s + 1}" for v in range(V) for s in range(S)]
    labels += [lab for lab in base if not lab.startswith("f")]
    for v, b in enumerate(blocks):
        rows = slice(v * P, (v + 1) * P)
        for s in range(S):
            J[rows, v * S + s] = b[:, s * per]
            for r in range(n_relax):
                J[rows, V * S + s * n_relax + r] = b[:, s * per + 1 + r]
    return J, labels


def fisher_matrix(spec: FisherSpec) -> NDArray[np.float64]:
    J, _ = joint_jacobian(spec)
    return spec.averages / spec.sigma**2 * (J.T @ J)


def _null_direction(v: NDArray[np.float64], labels: list[str]) -> dict[str, float]:
    v = v / np.max(np.abs(v))
    return {lab: float(x) for lab, x in zip(labels, v) if abs(x) > 1e-6}


def crlb(spec: FisherSpec, condition_cap: float = DEFAULT_CONDITION_CAP) -> CrlbResult:
    """Diagonal of the inverse Fisher matrix and its square root.

    Raises `Unidentifiable` when the equilibrated whitened Jacobian has
    condition number above ``condition_cap``.
    """
    J, labels = joint_jacobian(spec)
    A = J * np.sqrt(spec.averages) / spec.sigma
    scale = np.linalg.norm(A, axis=0)
    if np.any(scale == 0):
        zero = [lab for lab, s in zip(labels, scale) if s == 0]
        raise Unidentifiable(f"parameters {zero} do not affect the signal", np.inf,
                             {lab: 1.0 for lab in zero})
    _, S, Vt = np.linalg.svd(A / scale, full_matrices=False)
    jac_cond = S[0] / S[-1] if S[-1] > 0 else np.inf
    if not jac_cond < condition_cap:
        raise Unidentifiable(
            f"Fisher matrix is singular to working precision (Jacobian condition {jac_cond:.3g} "
            f">= cap {condition_cap:.3g})", jac_cond**2, _null_direction(Vt[-1] / scale, labels))
    inv_diag = np.sum((Vt.T / S) ** 2, axis=1) / scale**2
    s_raw = np.linalg.svd(A, compute_uv=False)
    return CrlbResult(labels, inv_diag, np.sqrt(inv_diag), float((s_raw[0] / s_raw[-1]) ** 2),
                      meta={"name": spec.name, "mode": spec.mode.value, "sharing": spec.sharing.value,
                            "averages": spec.averages, "sigma": spec.sigma,
                            "n_encodings": len(spec.schedule), "jacobian_condition": float(jac_cond)})


def crlb_from_fisher(F: NDArray[np.float64], labels: Sequence[str] | None = None,
                     condition_cap: float = DEFAULT_CONDITION_CAP) -> CrlbResult:
    """CRLB for an explicit symmetric Fisher matrix via its eigendecomposition."""
    F = np.asarray(F, dtype=np.float64)
    labels = list(labels) if labels is not None else [f"p{k + 1}" for k in range(F.shape[0])]
    evals, evecs = np.linalg.eigh((F + F.T) / 2)
    top = evals[-1]
    cond = top / evals[0] if evals[0] > 0 else np.inf
    if top <= 0 or not cond < condition_cap:
        raise Unidentifiable(f"Fisher matrix condition {cond:.3g} exceeds cap {condition_cap:.3g}",
                             cond, _null_direction(evecs[:, 0], labels))
    inv_diag = np.sum(evecs**2 / evals[None, :], axis=1)
    return CrlbResult(labels, inv_diag, np.sqrt(inv_diag), float(cond))


def compare_protocols(a: FisherSpec | CrlbResult, b: FisherSpec | CrlbResult,
                      parameters: Iterable[str] | None = None) -> dict[str, float]:
    """Per-parameter ``std_bound_B / std_bound_A`` ("how many times smaller A is")."""
    ra = a if isinstance(a, CrlbResult) else crlb(a)
    rb = b if isinstance(b, CrlbResult) else crlb(b)
    sa, sb = ra.std_dict(), rb.std_dict()
    if parameters is None:
        parameters = [lab for lab in ra.parameter_names if lab in sb]
    parameters = list(parameters)
    missing = [p for p in parameters if p not in sa or p not in sb]
    if missing:
        raise ConfigurationError(f"parameters {missing} are not present in both protocols")
    return {p: sb[p] / sa[p] for p in parameters}


def shared_improvement(per_voxel: CrlbResult, shared: CrlbResult) -> dict[str, float]:
    """CRLB reduction from sharing relaxation times, per parameter kind.

    For each compartment parameter (``f1``, ``T1_1``, ...), the per-voxel CRLBs
    summed over voxels divided by the shared-model CRLBs summed over voxels
    (a shared relaxation time counts once per voxel).
    """
    pv = per_voxel.as_dict()
    sh = shared.as_dict()
    kinds: dict[str, list[float]] = {}
    for label, value in pv.items():
        kind = label.split(".", 1)[1]
        kinds.setdefault(kind, []).append(value)
    out = {}
    for kind, values in kinds.items():
        n = len(values)
        shared_vals = [sh[f"v{v + 1}.{kind}"] if f"v{v + 1}.{kind}" in sh else sh[kind]
                       for v in range(n)]
        out[kind] = float(np.sum(values) / np.sum(shared_vals))
    return out


# -- reference protocols ------------------------------------------------------------

STANDARD_VOXEL_AMPLITUDES = ((1.0, 1.0, 1.0), (0.8, 0.6, 1.8), (2.0, 0.5, 0.5))


def standard_protocols(sigma: float = 1.0,
                    model: CompartmentModel = STANDARD_COMPARTMENTS) -> dict[str, FisherSpec]:
    """2D (7 TI x 15 TE), 1D T1 (7 TI) and 1D T2 (32 TE, 7 averages) at equal scan time."""
    return {
        "2D": FisherSpec([model], standard_schedule(), sigma, 1, FisherMode.T1T2, name="2D"),
        "1D-T1": FisherSpec([model], t1_baseline_schedule(), sigma, 1, FisherMode.T1_ONLY, name="1D-T1"),
        "1D-T2": FisherSpec([model], t2_baseline_schedule(), sigma, 7, FisherMode.T2_ONLY, name="1D-T2"),
    }


def standard_spatial_specs(sigma: float = 1.0,
                        amplitudes: Sequence[Sequence[float]] = STANDARD_VOXEL_AMPLITUDES,
                        model: CompartmentModel = STANDARD_COMPARTMENTS) -> dict[str, FisherSpec]:
    """Three voxels sharing the toy compartments, with and without shared relaxation."""
    models = [model.with_amplitudes(a) for a in amplitudes]
    sched = standard_schedule()
    return {
        "per-voxel": FisherSpec(models, sched, sigma, 1, FisherMode.T1T2, Sharing.PER_VOXEL, "per-voxel"),
        "shared": FisherSpec(models, sched, sigma, 1, FisherMode.T1T2, Sharing.SHARED_RELAXATION, "shared"),
    }


def spec_from_mapping(d: Mapping) -> FisherSpec:
    """Build a FisherSpec from a config mapping (see the CLI schema)."""
    from .model import product_schedule

    voxels = d.get("voxels")
    comps = d.get("compartments", {"t1": list(STANDARD_COMPARTMENTS.t1), "t2": list(STANDARD_COMPARTMENTS.t2)})
    if voxels is None:
        voxels = [comps.get("amplitudes", [1.0] * len(comps["t1"]))]
    models = [CompartmentModel(tuple(a), tuple(comps["t1"]), tuple(comps["t2"])) for a in voxels]
    sch = d["schedule"]
    tis = sch.get("ti_ms", [None])
    schedule = product_schedule(tis if tis else [None], sch.get("te_ms", [0.0]))
    return FisherSpec(models, schedule, d.get("sigma", 1.0), d.get("averages", 1),
                      d.get("mode", "T1T2"), d.get("sharing", "PER_VOXEL"), d.get("name", ""))
