"""Non-convex cost functionals, spectral initialization and an L-BFGS driver.

Complex unknowns are optimized as real vectors ``[Re x, Im x]``; functionals
with phase unknowns append one angle per coherent group, ``psi_m = exp(j theta_m)``,
which removes the unit-modulus constraints.

Every functional is the Euclidean norm of a real or complex residual vector.
:meth:`CostFunctional.value_and_grad` returns that norm and its gradient;
:meth:`CostFunctional.half_sq` returns ``0.5 ||r||^2`` and its gradient,
which is what the minimizer works on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .linear import SolveReport, recover_phases
from .model import ForwardOperator, PartialObservations, relative_deviation

KINDS = ("magnitude_only", "full_phase_constrained", "reduced_phase",
         "eliminated_phase", "paulus_comparison")
#: Magnitude smoothing relative to the largest observed magnitude.
SMOOTHING = 1e-12


def _split(z, N):
    return z[:N] + 1j * z[N:2 * N]


def _stack(g):
    return np.concatenate([g.real, g.imag])


class CostFunctional:
    """Base class. Subclasses implement :meth:`half_sq`."""

    kind: str = ""
    n_angles: int = 0

    def __init__(self, op: ForwardOperator, obs: PartialObservations):
        self.op = op
        self.obs = obs
        self.N = op.N
        mags = obs.magnitudes
        self.eps = SMOOTHING * float(mags.max(initial=0.0))
        self.b_norm = float(np.linalg.norm(mags))

    @property
    def n_params(self) -> int:
        return 2 * self.N + self.n_angles

    def pack(self, x, angles=None) -> np.ndarray:
        parts = [np.real(x), np.imag(x)]
        if self.n_angles:
            parts.append(np.zeros(self.n_angles) if angles is None else np.asarray(angles, float))
        return np.concatenate(parts)

    def unpack(self, z):
        x = _split(z, self.N)
        return x, z[2 * self.N:]

    def initial_angles(self, x0) -> np.ndarray | None:
        if not self.n_angles:
            return None
        return np.angle(recover_phases(self.op, self.obs, x0).psi)

    def half_sq(self, z) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, z) -> float:
        return float(np.sqrt(2.0 * self.half_sq(z)[0]))

    def __call__(self, x, angles=None) -> float:
        return self.value(self.pack(x, angles))

    def value_and_grad(self, z) -> tuple[float, np.ndarray]:
        f, g = self.half_sq(z)
        v = np.sqrt(2.0 * f)
        if v == 0:
            return 0.0, np.zeros_like(g)
        return float(v), g / v


class _MagnitudeResidual(CostFunctional):
    """``|| sqrt(|K x|^2 + eps^2) - t ||`` for a stacked operator ``K`` and targets ``t``."""

    def __init__(self, op, obs, K, target):
        super().__init__(op, obs)
        self.K = K
        self.target = target

    def half_sq(self, z):
        x = _split(z, self.N)
        w = self.K @ x
        s = np.sqrt(np.abs(w) ** 2 + self.eps ** 2)
        r = s - self.target
        g = self.K.conj().T @ (r * w / s)
        return 0.5 * float(r @ r), _stack(g)


class MagnitudeOnly(_MagnitudeResidual):
    kind = "magnitude_only"

    def __init__(self, op, obs):
        super().__init__(op, obs, op.entries, obs.magnitudes)


class PaulusComparison(_MagnitudeResidual):
    """Four-block magnitude functional for two coherent blocks.

    Rows ``A_1``, ``A_2``, ``A_1 + A_2`` and ``A_1 + j A_2`` are compared
    against ``|b_1|``, ``|b_2|``, ``|b_1 + b_2|`` and ``|b_1 + j b_2|``; the
    last two follow from the observed magnitudes and phase differences.
    """

    kind = "paulus_comparison"

    def __init__(self, op, obs):
        if op.C != 2:
            raise ValueError("comparison method implemented for C=2 only")
        A1, A2 = op.block(0), op.block(1)
        B1, B2 = obs.B_diag
        K = np.vstack([A1, A2, A1 + A2, A1 + 1j * A2])
        t = np.concatenate([np.abs(B1), np.abs(B2), np.abs(B1 + B2), np.abs(B1 + 1j * B2)])
        super().__init__(op, obs, K, t)


class ReducedPhase(CostFunctional):
    """``|| A x - B exp(j theta) ||`` over ``x`` and one angle per group."""

    kind = "reduced_phase"

    def __init__(self, op, obs):
        super().__init__(op, obs)
        self.n_angles = op.M

    def _target(self, theta):
        return self.obs.apply_B(np.exp(1j * theta))

    def half_sq(self, z):
        x, theta = self.unpack(z)
        e = np.exp(1j * theta)
        r = self.op.entries @ x - self._target(theta)
        gx = self.op.entries.conj().T @ r
        gt = np.imag(e * np.conj(self.obs.apply_BH(r)))
        return 0.5 * float(np.vdot(r, r).real), np.concatenate([gx.real, gx.imag, gt])


class FullPhaseConstrained(ReducedPhase):
    """``|| A x - diag(exp(j phi)) |b| ||`` with all ``C M`` phases tied to ``M`` angles.

    ``phi`` for observation ``m`` of block ``c`` is ``theta_m`` plus the
    observed phase difference to the group anchor, so the phase-difference
    constraints hold by construction.
    """

    kind = "full_phase_constrained"

    def __init__(self, op, obs):
        super().__init__(op, obs)
        self._mags = obs.magnitudes.reshape(op.C, op.M)
        self._rel = obs.relative_phases

    def _target(self, theta):
        return (self._mags * np.exp(1j * (theta[None, :] + self._rel))).ravel()


class EliminatedPhase(CostFunctional):
    """Two-part residual with the phases replaced by ``B_1^-1 A_1 x``.

    First part ``|A_1 x| - |b_1|``; second part ``A_c x - B_c B_1^-1 A_1 x``
    for ``c = 2..C``. Rows whose ``B_1`` entry vanishes are dropped from the
    second part; their count is kept in ``dropped_rows``.
    """

    kind = "eliminated_phase"

    def __init__(self, op, obs):
        super().__init__(op, obs)
        A1 = op.block(0)
        B1 = obs.B_diag[0]
        keep = np.abs(B1) > 0
        self.dropped_rows = int((op.C - 1) * np.count_nonzero(~keep))
        rows = []
        for c in range(1, op.C):
            ratio = obs.B_diag[c][keep] / B1[keep]
            rows.append(op.block(c)[keep] - ratio[:, None] * A1[keep])
        self.L = np.vstack(rows) if rows else np.zeros((0, op.N), complex)
        self.A1 = A1
        self.t1 = np.abs(B1)

    def half_sq(self, z):
        x = _split(z, self.N)
        w = self.A1 @ x
        s = np.sqrt(np.abs(w) ** 2 + self.eps ** 2)
        r1 = s - self.t1
        r2 = self.L @ x
        g = self.A1.conj().T @ (r1 * w / s) + self.L.conj().T @ r2
        f = 0.5 * (float(r1 @ r1) + float(np.vdot(r2, r2).real))
        return f, _stack(g)


_CLASSES = {
    "magnitude_only": MagnitudeOnly,
    "full_phase_constrained": FullPhaseConstrained,
    "reduced_phase": ReducedPhase,
    "eliminated_phase": EliminatedPhase,
    "paulus_comparison": PaulusComparison,
}


def make_functional(kind: str, op: ForwardOperator, obs: PartialObservations) -> CostFunctional:
    try:
        cls = _CLASSES[kind]
    except KeyError:
        raise ValueError(f"unknown functional kind {kind!r}; choose from {KINDS}") from None
    return cls(op, obs)


@dataclass(frozen=True)
class SpectralInit:
    x0: np.ndarray
    eigenvalue: float
    iterations: int
    converged: bool


def spectral_initialization(op: ForwardOperator, obs: PartialObservations,
                            tol: float = 1e-10, max_iter: int | None = None,
                            seed: int = 0) -> SpectralInit:
    """Leading eigenvector of ``A^H diag(|b|^2) A`` by power iteration, rescaled.

    The scale is the least-squares fit of ``|A v|`` to ``|b|``:
    ``x0 = v (|b|^T |A v|) / ||A v||^2``.
    """
    A = op.entries
    w = obs.magnitudes ** 2
    N = op.N
    max_iter = 10 * N if max_iter is None else max_iter
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
    v /= np.linalg.norm(v)
    lam = 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        u = A.conj().T @ (w * (A @ v))
        lam_new = float(np.vdot(v, u).real)
        nu = np.linalg.norm(u)
        if nu == 0:
            break
        v = u / nu
        if abs(lam_new - lam) <= tol * abs(lam_new):
            lam = lam_new
            converged = True
            break
        lam = lam_new
    Av = A @ v
    den = float(np.vdot(Av, Av).real)
    scale = float(obs.magnitudes @ np.abs(Av)) / den if den > 0 else 0.0
    return SpectralInit(v * scale, lam, it, converged)


@dataclass(frozen=True)
class MinimizerConfig:
    """Settings for the limited-memory quasi-Newton minimizer.

    ``gradient_tolerance`` applies to the cost normalized by ``||b||^2``.
    Minimization stops early once the cost drops to ``cost_threshold * ||b||``.
    """

    max_iterations: int = 5000
    gradient_tolerance: float = 1e-10
    history_size: int = 10
    max_line_search: int = 40
    function_tolerance: float = 1e-16
    cost_threshold: float = 0.0

    def __post_init__(self):
        for name in ("max_iterations", "gradient_tolerance", "history_size", "max_line_search",
                     "function_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.cost_threshold < 0:
            raise ValueError("cost_threshold must be nonnegative")


class _StopEarly(Exception):
    pass


def minimize(functional: CostFunctional, x0=None, config: MinimizerConfig | None = None,
             angles0=None, xi=None) -> SolveReport:
    """Minimize a functional with L-BFGS, starting from ``x0`` (spectral init by default).

    Line-search trouble does not raise; the best iterate is returned with
    ``info["converged"] = False``.
    """
    config = config or MinimizerConfig()
    op, obs = functional.op, functional.obs
    if x0 is None:
        x0 = spectral_initialization(op, obs).x0
    if angles0 is None:
        angles0 = functional.initial_angles(x0)
    z0 = functional.pack(x0, angles0)
    norm2 = functional.b_norm ** 2 or 1.0
    stop_f = 0.5 * (config.cost_threshold * functional.b_norm) ** 2 / norm2

    best = {"f": np.inf, "z": z0}

    def fun(z):
        f, g = functional.half_sq(z)
        f /= norm2
        if f < best["f"]:
            best["f"], best["z"] = f, z.copy()
        return f, g / norm2

    def callback(zk):
        if stop_f > 0 and best["f"] <= stop_f:
            raise _StopEarly

    stopped = False
    try:
        res = _scipy_minimize(
            fun, z0, jac=True, method="L-BFGS-B", callback=callback,
            options={"maxcor": config.history_size, "gtol": config.gradient_tolerance,
                     "ftol": config.function_tolerance, "maxiter": config.max_iterations,
                     "maxls": config.max_line_search, "maxfun": 20 * config.max_iterations},
        )
        iterations, message = int(res.nit), str(res.message)
        converged = bool(res.success)
    except _StopEarly:
        stopped = True
        iterations, message, converged = -1, "cost threshold reached", True

    x, _ = functional.unpack(best["z"])
    cost = float(np.sqrt(2.0 * best["f"] * norm2))
    try:
        psi = recover_phases(op, obs, x)
        fluct = psi.fluctuation
    except ValueError:
        psi, fluct = None, np.inf
    rd = relative_deviation(op, x, xi) if xi is not None else None
    info = {"cost": cost, "iterations": iterations, "converged": converged,
            "message": message, "stopped_early": stopped, "kind": functional.kind}
    return SolveReport(x, psi, np.nan, np.nan, fluct, rd, info)
