"""Spatially regularized nonnegative spectroscopic-image estimation by ADMM.

Solves::

    min_{F >= 0}  ||(M - K F) T||_F^2 + lam * ||F C^H||_F^2

where ``T = diag(mask)`` and ``C`` stacks one periodic forward difference per
spatial axis. The splitting uses ``X = F T`` (data term), ``Y = F`` (nonnegativity)
and ``Z = F`` (smoothness) with scaled multipliers ``G, H, R``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numba
import numpy as np
import scipy.fft
import scipy.linalg
import scipy.optimize
from numpy.typing import NDArray

from .model import ConfigurationError, DecayDictionary, SpectralGrid

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Non-finite values appeared during the iterations."""


@dataclass
class SolverConfig:
    lam: float = 0.01
    mu: float = 1.0
    max_iters: int = 5000
    tolerance: float = 1e-6
    neighbor_scheme: str = "periodic4"
    init: NDArray[np.float64] | None = None
    block_size: int | None = None
    objective_every: int = 10

    def __post_init__(self) -> None:
        if not self.mu > 0:
            raise ConfigurationError(f"mu must be > 0, got {self.mu}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.tolerance >= 0:
            raise ConfigurationError("tolerance must be >= 0")
        if self.neighbor_scheme != "periodic4":
            raise ConfigurationError(
                f"neighbor scheme {self.neighbor_scheme!r} is unsupported; only 'periodic4' "
                "(4-neighbor differences, periodic boundary) is diagonalized by the DFT")


def atom_scale(grid: SpectralGrid) -> float:
    """Typical squared quadrature weight, ``median(w)**2``.

    Folding ``w_q`` into the dictionary shrinks ``K`` by about ``median(w)``, so
    penalties quoted for a unit-weight dictionary map onto this one multiplied
    by this factor (exactly so for uniform weights, via ``F -> F / w``).
    """
    return float(np.median(grid.weights)) ** 2


def rescale_penalties(config: SolverConfig, grid: SpectralGrid) -> SolverConfig:
    """Copy of ``config`` with lam and mu given in unit-weight units converted for ``grid``."""
    s = atom_scale(grid)
    return replace(config, lam=config.lam * s, mu=config.mu * s)


def nnls_init(dictionary: DecayDictionary | NDArray[np.float64], data: NDArray[np.float64],
              mask: NDArray[np.float64], max_iter: int | None = None) -> NDArray[np.float64]:
    """Per-voxel unregularized NNLS solution, for use as ``SolverConfig.init``.

    The objective is convex, so the starting point changes only how quickly the
    iterates approach the minimizer. Starting from the sparse lam = 0 solution
    skips the long phase in which zero-initialized iterates are still smooth
    along poorly determined spectral directions. Masked-out voxels start at 0.
    """
    K = dictionary.kernel if isinstance(dictionary, DecayDictionary) else np.asarray(dictionary)
    data = np.asarray(data, dtype=np.float64)
    F = np.zeros((K.shape[1], data.shape[1]))
    maxiter = max_iter or 50 * K.shape[1]
    for i in np.flatnonzero(np.asarray(mask).ravel() > 0):
        F[:, i] = scipy.optimize.nnls(K, data[:, i], maxiter=maxiter)[0]
    return F


@dataclass
class SpectroscopicImage:
    """Q x N spectra, one column per voxel in row-major (y, x) order."""

    values: NDArray[np.float64]
    grid: SpectralGrid
    width: int
    height: int
    mask: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.size, self.width * self.height):
            raise ValueError(f"values shape {self.values.shape} does not match "
                             f"Q={self.grid.size}, N={self.width * self.height}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=np.float64).ravel()

    @property
    def n_voxels(self) -> int:
        return self.width * self.height

    def spectrum_at(self, x: int, y: int) -> NDArray[np.float64]:
        return self.values[:, y * self.width + x].reshape(self.grid.shape)


@dataclass
class AdmmState:
    F: NDArray[np.float64]
    X: NDArray[np.float64]
    Y: NDArray[np.float64]
    Z: NDArray[np.float64]
    G: NDArray[np.float64]
    H: NDArray[np.float64]
    R: NDArray[np.float64]
    mask: NDArray[np.float64]
    mu: float
    iteration: int = 0
    primal_residual: float = float("inf")
    dual_residual: float = float("inf")
    # iterate-to-iterate changes of the split variables, set by `step`
    dX: NDArray[np.float64] | None = None
    dY: NDArray[np.float64] | None = None
    dZ: NDArray[np.float64] | None = None

    @classmethod
    def zeros(cls, Q: int, N: int, mask: NDArray[np.float64], mu: float) -> "AdmmState":
        z = lambda: np.zeros((Q, N))  # noqa: E731
        return cls(z(), z(), z(), z(), z(), z(), z(), np.asarray(mask, dtype=np.float64), mu)

    @classmethod
    def from_init(cls, F0: NDArray[np.float64], mask: NDArray[np.float64], mu: float) -> "AdmmState":
        F0 = np.asarray(F0, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        st = cls.zeros(*F0.shape, mask=mask, mu=mu)
        st.F[...] = F0
        st.X[...] = F0 * mask
        st.Y[...] = np.maximum(F0, 0)
        st.Z[...] = F0
        return st


@dataclass
class ConvergenceReport:
    iterations: int
    converged: bool
    primal: list[float] = field(default_factory=list)
    dual: list[float] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    final_objective: float = float("nan")
    elapsed_s: float = 0.0
    returned_iterate: str = "Y"

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [(i + 1, p, d, o) for i, (p, d, o) in
                enumerate(zip(self.primal, self.dual, self.objective))]


class DataInverse:
    """Applies ``(K^T K + mu I)^{-1}`` using a Cholesky factor computed once.

    When ``P < Q`` the Woodbury form
    ``(1/mu) (v - K^T (K K^T + mu I)^{-1} K v)`` is used, which is the same
    operator but needs only a P x P factor and O(P Q) work per column.
    """

    def __init__(self, K: NDArray[np.float64], mu: float, block_size: int | None = None):
        if not mu > 0:
            raise ConfigurationError(f"mu must be > 0, got {mu}")
        self.K = np.asarray(K, dtype=np.float64)
        self.mu = float(mu)
        self.block_size = block_size
        P, Q = self.K.shape
        self.woodbury = P < Q
        if self.woodbury:
            S = self.K @ self.K.T
        else:
            S = self.K.T @ self.K
        S[np.diag_indices_from(S)] += self.mu
        self._chol = scipy.linalg.cho_factor(S, lower=True, check_finite=False)

    @property
    def shape(self) -> tuple[int, int]:
        Q = self.K.shape[1]
        return (Q, Q)

    def _apply_block(self, V: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.woodbury:
            W = scipy.linalg.cho_solve(self._chol, self.K @ V, check_finite=False)
            out = V - self.K.T @ W
            out /= self.mu
            return out
        return scipy.linalg.cho_solve(self._chol, V, check_finite=False)

    def apply(self, V: NDArray[np.float64]) -> NDArray[np.float64]:
        V = np.asarray(V, dtype=np.float64)
        if V.ndim == 1:
            return self._apply_block(V[:, None])[:, 0]
        n = V.shape[1]
        bs = self.block_size or n
        if bs >= n:
            return self._apply_block(V)
        out = np.empty_like(V)
        for start in range(0, n, bs):
            out[:, start:start + bs] = self._apply_block(V[:, start:start + bs])
        return out

    __call__ = apply

    def __matmul__(self, V: NDArray[np.float64]) -> NDArray[np.float64]:
        return self.apply(V)


def precompute_data_inverse(dictionary: DecayDictionary | NDArray[np.float64], mu: float,
                            block_size: int | None = None) -> DataInverse:
    K = dictionary.kernel if isinstance(dictionary, DecayDictionary) else dictionary
    return DataInverse(K, mu, block_size)


# -- spatial operators --------------------------------------------------------------

def laplacian_eigenvalues(width: int, height: int) -> NDArray[np.float64]:
    """Eigenvalues of C^H C on the rfft2 grid, shape (height, width // 2 + 1)."""
    kx = np.arange(width // 2 + 1)
    ky = np.arange(height)
    cx = 2.0 - 2.0 * np.cos(2 * np.pi * kx / width)
    cy = 2.0 - 2.0 * np.cos(2 * np.pi * ky / height)
    return cy[:, None] + cx[None, :]


def smoothness_solve(B: NDArray[np.float64], mu: float, lam: float, width: int,
                     height: int) -> NDArray[np.float64]:
    """Return ``mu * B (mu I + lam C^H C)^{-1}`` via 2D FFTs of each row of ``B``."""
    B = np.asarray(B, dtype=np.float64)
    if B.shape[-1] != width * height:
        raise ValueError(f"B has {B.shape[-1]} columns, expected {width * height}")
    if lam == 0:
        return B.copy()
    imgs = B.reshape(-1, height, width)
    spec = np.fft.rfft2(imgs, axes=(-2, -1))
    spec *= mu / (mu + lam * laplacian_eigenvalues(width, height))
    out = np.fft.irfft2(spec, s=(height, width), axes=(-2, -1))
    return out.reshape(B.shape)


def difference_operator(width: int, height: int) -> NDArray[np.float64]:
    """Dense C (2N x N): periodic forward differences along x then y."""
    N = width * height
    idx = np.arange(N).reshape(height, width)
    C = np.zeros((2 * N, N))
    rows = np.arange(N)
    C[rows, idx.ravel()] = -1
    C[rows, np.roll(idx, -1, axis=1).ravel()] += 1
    C[N + rows, idx.ravel()] = -1
    C[N + rows, np.roll(idx, -1, axis=0).ravel()] += 1
    return C


def roughness(F: NDArray[np.float64], width: int, height: int) -> float:
    """``||F C^H||_F^2``."""
    imgs = F.reshape(-1, height, width)
    dx = np.roll(imgs, -1, axis=2) - imgs
    dy = np.roll(imgs, -1, axis=1) - imgs
    return float(np.sum(dx * dx) + np.sum(dy * dy))


def objective(F: NDArray[np.float64], dictionary: DecayDictionary | NDArray[np.float64],
              data: NDArray[np.float64], mask: NDArray[np.float64], lam: float,
              width: int, height: int) -> float:
    K = dictionary.kernel if isinstance(dictionary, DecayDictionary) else dictionary
    F = np.asarray(F, dtype=np.float64)
    if F.shape != (K.shape[1], data.shape[1]) or data.shape[0] != K.shape[0]:
        raise ValueError(f"shape mismatch: K {K.shape}, F {F.shape}, M {data.shape}")
    resid = (data - K @ F) * np.asarray(mask, dtype=np.float64)[None, :]
    value = float(np.sum(resid * resid))
    if lam:
        value += lam * roughness(F, width, height)
    return value


def gradient(F, K, data, mask, lam, width, height):
    """Gradient of `objective` with respect to F."""
    t = np.asarray(mask, dtype=np.float64)[None, :]
    g = -2.0 * K.T @ ((data - K @ F) * t * t)
    if lam:
        imgs = F.reshape(-1, height, width)
        lap = (4 * imgs - np.roll(imgs, 1, 1) - np.roll(imgs, -1, 1)
               - np.roll(imgs, 1, 2) - np.roll(imgs, -1, 2))
        g += 2.0 * lam * lap.reshape(F.shape)
    return g


# -- ADMM ---------------------------------------------------------------------------

def residuals(state: AdmmState) -> tuple[float, float]:
    """Relative primal and dual residuals of the current state.

    primal = ||(F T - X, F - Y, F - Z)|| / ||F||, dual = mu ||(dX, dY, dZ)|| / ||F||.
    Absolute norms are reported when ||F|| = 0.
    """
    t = state.mask[None, :]
    primal = np.sqrt(_sqnorm(state.F * t - state.X) + _sqnorm(state.F - state.Y)
                     + _sqnorm(state.F - state.Z))
    if state.dX is None:
        dual = 0.0
    else:
        dual = state.mu * np.sqrt(_sqnorm(state.dX) + _sqnorm(state.dY) + _sqnorm(state.dZ))
    scale = np.sqrt(_sqnorm(state.F))
    if scale > 0:
        primal /= scale
        dual /= scale
    return float(primal), float(dual)


def _sqnorm(A: NDArray[np.float64]) -> float:
    a = A.ravel()
    return float(np.dot(a, a))


# Fused elementwise passes over the Q x N iterates. Each reads every array once,
# which dominates the per-iteration cost at imaging scale.

@numba.njit(cache=True)
def _update_f_y(X, G, Y, H, Z, R, t, KtM, mu, F, rhs, B):
    """F update, Y projection (in place), H update (in place), X rhs and Z input.

    Returns (||F||^2, ||F - Y_new||^2, ||Y_new - Y_old||^2).
    """
    Q, N = F.shape
    fn = 0.0
    pr = 0.0
    du = 0.0
    for q in range(Q):
        for i in range(N):
            ti = t[i]
            f = (Y[q, i] + H[q, i] + Z[q, i] + R[q, i] + ti * (X[q, i] + G[q, i])) / (2.0 + ti)
            F[q, i] = f
            rhs[q, i] = KtM[q, i] + mu * (f * ti - G[q, i])
            B[q, i] = f - R[q, i]
            y = f - H[q, i]
            if y < 0.0:
                y = 0.0
            d = y - Y[q, i]
            du += d * d
            Y[q, i] = y
            e = f - y
            pr += e * e
            H[q, i] -= e
            fn += f * f
    return fn, pr, du


@numba.njit(cache=True)
def _update_multipliers(F, t, X, X_old, Z, Z_old, G, R):
    """G and R updates in place. Returns (primal^2, dual^2) contributions of X and Z."""
    Q, N = F.shape
    pr = 0.0
    du = 0.0
    for q in range(Q):
        for i in range(N):
            f = F[q, i]
            a = f * t[i] - X[q, i]
            b = f - Z[q, i]
            G[q, i] -= a
            R[q, i] -= b
            pr += a * a + b * b
            dx = X[q, i] - X_old[q, i]
            dz = Z[q, i] - Z_old[q, i]
            du += dx * dx + dz * dz
    return pr, du


class AdmmSolver:
    """Holds the precomputed operators for one (dictionary, data, config) problem."""

    def __init__(self, dictionary: DecayDictionary | NDArray[np.float64], data: NDArray[np.float64],
                 mask: NDArray[np.float64], width: int, height: int, config: SolverConfig):
        self.K = dictionary.kernel if isinstance(dictionary, DecayDictionary) else np.asarray(dictionary)
        self.M = np.asarray(data, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=np.float64).ravel()
        self.width, self.height = int(width), int(height)
        self.config = config
        P, Q = self.K.shape
        N = self.width * self.height
        if self.M.shape != (P, N):
            raise ConfigurationError(f"data shape {self.M.shape} != (P={P}, N={N})")
        if self.mask.shape != (N,):
            raise ConfigurationError(f"mask has {self.mask.size} entries, expected {N}")
        if not np.all(np.isfinite(self.M)):
            raise ValueError("data contain NaN or Inf")
        self.inverse = DataInverse(self.K, config.mu, config.block_size)
        self.KtM = self.K.T @ self.M
        self._fcoef = 1.0 / (2.0 + self.mask)[None, :]
        self._eig = None
        if config.lam > 0:
            self._eig = config.mu / (config.mu + config.lam * laplacian_eigenvalues(self.width, self.height))

    def initial_state(self) -> AdmmState:
        Q, N = self.K.shape[1], self.M.shape[1]
        if self.config.init is None:
            return AdmmState.zeros(Q, N, self.mask, self.config.mu)
        F0 = np.asarray(self.config.init, dtype=np.float64)
        if F0.shape != (Q, N):
            raise ConfigurationError(f"init has shape {F0.shape}, expected {(Q, N)}")
        return AdmmState.from_init(F0, self.mask, self.config.mu)

    def _smooth(self, B: NDArray[np.float64]) -> NDArray[np.float64]:
        if self._eig is None:
            return B
        spec = scipy.fft.rfft2(B.reshape(-1, self.height, self.width), axes=(-2, -1))
        spec *= self._eig
        return scipy.fft.irfft2(spec, s=(self.height, self.width), axes=(-2, -1)).reshape(B.shape)

    def step(self, st: AdmmState) -> AdmmState:
        mu = self.config.mu
        t = self.mask
        F = np.empty_like(st.F)
        rhs = np.empty_like(st.F)
        B = np.empty_like(st.F)
        # steps 1 and 3 plus the H update, fused
        acc1 = _update_f_y(st.X, st.G, st.Y, st.H, st.Z, st.R, t, self.KtM, mu, F, rhs, B)
        X = self.inverse.apply(rhs)  # step 2
        Z = self._smooth(B)  # step 4
        acc2 = _update_multipliers(F, t, X, st.X, Z, st.Z, st.G, st.R)  # step 5
        st.F, st.X, st.Z = F, X, Z
        st.iteration += 1
        fnorm2 = acc1[0]
        primal2 = acc1[1] + acc2[0]
        dual2 = acc1[2] + acc2[1]
        scale = np.sqrt(fnorm2) if fnorm2 > 0 else 1.0
        st.primal_residual = float(np.sqrt(primal2) / scale)
        st.dual_residual = float(mu * np.sqrt(dual2) / scale)
        st.dX = st.dY = st.dZ = None
        return st

    def run(self, state: AdmmState | None = None,
            callback: Callable[[AdmmState], None] | None = None) -> tuple[AdmmState, ConvergenceReport]:
        cfg = self.config
        st = state if state is not None else self.initial_state()
        report = ConvergenceReport(iterations=0, converged=False)
        t0 = time.perf_counter()
        for _ in range(cfg.max_iters):
            self.step(st)
            if not (np.isfinite(st.primal_residual) and np.isfinite(st.dual_residual)):
                raise NumericalFailure(
                    f"non-finite values at iteration {st.iteration} "
                    f"(primal={st.primal_residual}, dual={st.dual_residual})")
            report.primal.append(st.primal_residual)
            report.dual.append(st.dual_residual)
            done = st.primal_residual < cfg.tolerance and st.dual_residual < cfg.tolerance
            if cfg.objective_every and (st.iteration % cfg.objective_every == 0 or done):
                report.objective.append(self.objective(st.Y))
            else:
                report.objective.append(float("nan"))
            if callback is not None:
                callback(st)
            if done:
                report.converged = True
                break
        report.iterations = st.iteration
        report.final_objective = self.objective(st.Y)
        report.elapsed_s = time.perf_counter() - t0
        log.info("ADMM stopped after %d iterations (converged=%s, primal=%.3g, dual=%.3g)",
                 st.iteration, report.converged, st.primal_residual, st.dual_residual)
        return st, report

    def objective(self, F: NDArray[np.float64]) -> float:
        return objective(F, self.K, self.M, self.mask, self.config.lam, self.width, self.height)


def solve(data: NDArray[np.float64], dictionary: DecayDictionary, config: SolverConfig, *,
          mask: NDArray[np.float64], width: int, height: int,
          callback: Callable[[AdmmState], None] | None = None) -> tuple[SpectroscopicImage, ConvergenceReport]:
    """Run ADMM and return the nonnegative iterate ``Y`` as the spectroscopic image."""
    solver = AdmmSolver(dictionary, data, mask, width, height, config)
    state, report = solver.run(callback=callback)
    image = SpectroscopicImage(state.Y, dictionary.grid, width, height, mask=np.asarray(mask))
    return image, report


def solve_dataset(ds, dictionary: DecayDictionary, config: SolverConfig, **kw):
    """`solve` for a MeasuredDataset whose schedule must match the dictionary's."""
    if tuple(ds.schedule) != tuple(dictionary.schedule):
        raise ConfigurationError("dataset schedule differs from dictionary schedule")
    return solve(ds.data, dictionary, config, mask=ds.mask, width=ds.width, height=ds.height, **kw)
