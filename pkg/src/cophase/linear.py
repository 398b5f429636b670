"""Linear null-space solvers.

Two homogeneous systems carry the solution in a one-dimensional kernel:

* the Q form stacks ``B_c A_1 - B_1 A_c`` for ``c = 2..C`` and has the
  unknown ``x`` in its kernel;
* the R form ``A A^+ B - B`` has the reduced phase vector ``psi`` in its
  kernel, after which ``x`` follows from ``A x = B psi``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .model import ForwardOperator, PartialObservations, relative_deviation

EPS = np.finfo(float).eps
#: Condition numbers beyond this are treated as numerically singular.
COND_LIMIT = 1.0 / (1e3 * EPS)
#: Singular-value gaps below this mark a kernel vector as unreliable.
GAP_RELIABLE = 10.0
UNIT_TOL = 1e-14


class NoCoherenceError(ValueError):
    pass


class TrivialSolutionError(ValueError):
    pass


class DegenerateSystemError(np.linalg.LinAlgError):
    pass


class KernelConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class NullSpaceSystem:
    """A homogeneous system ``matrix @ v = 0`` with a wanted one-dimensional kernel.

    ``columns`` lists the unknowns that take part in the kernel search; for
    the R form, coherent groups with only zero magnitudes have an all-zero
    column and are left out.
    """

    kind: str
    matrix: np.ndarray
    columns: np.ndarray
    rank_deficient_operator: bool = False
    extra_rows: int = 0

    @property
    def active(self) -> np.ndarray:
        return self.matrix[:, self.columns]


@dataclass(frozen=True, eq=False)
class PhaseVector:
    """Reduced phase unknowns, one per coherent group.

    ``undetermined`` flags groups without any usable observation; their entry
    is set to 1. ``scale`` is the real factor that brought the mean magnitude
    of the determined entries to one.
    """

    psi: np.ndarray
    fluctuation: float
    undetermined: np.ndarray
    scale: float = 1.0

    @property
    def unit(self) -> bool:
        return bool(np.all(np.abs(np.abs(self.psi) - 1) <= 1e-10))

    def __len__(self):
        return len(self.psi)


@dataclass(frozen=True, eq=False)
class KernelVector:
    vector: np.ndarray
    sigma_min: float
    gap: float


@dataclass(eq=False)
class SolveReport:
    x: np.ndarray
    psi: PhaseVector | None
    sigma_min: float
    gap: float
    psi_fluctuation: float
    rd: float | None = None
    info: dict = field(default_factory=dict)

    @property
    def reliable(self) -> bool:
        return self.gap >= GAP_RELIABLE


def check_oversampling(N: int, M: int, C: int, zero_groups: int = 0) -> bool:
    """Necessary row-count condition for a one-dimensional kernel.

    Each coherent group consisting only of zero observations lowers the rank
    of ``B`` by one: the test is ``C M - rk B >= N - 1``.
    """
    if C < 2:
        raise NoCoherenceError("no coherence information: need C >= 2")
    if min(N, M, zero_groups) < 0:
        raise ValueError("counts must be nonnegative")
    rank_b = M - zero_groups
    return C * M - rank_b >= N - 1


def build_Q(op: ForwardOperator, obs: PartialObservations) -> NullSpaceSystem:
    """Stack ``B_c A_1 - B_1 A_c`` for ``c = 2..C``.

    Groups whose block-1 magnitude vanishes are referenced to their first
    nonzero member instead. For groups with all magnitudes zero, the ``C - 1``
    rows become ``A_c`` (``c >= 2``) and one extra row ``A_1`` is appended, so
    that ``A_c x = 0`` holds for every member.
    """
    C, M, N = op.C, op.M, op.N
    if C < 2:
        raise NoCoherenceError("no coherence information: need C >= 2")
    if obs.layout != op.layout:
        raise ValueError(f"layout mismatch: operator {op.layout}, observations {obs.layout}")
    Ab = op.blocks()
    Bd = obs.B_diag
    anchor = obs.anchors
    idx = np.arange(M)
    zg = obs.zero_groups
    nz = np.abs(Bd[~obs.zero_mask])
    zscale = float(np.sqrt(np.mean(nz ** 2))) if nz.size else 1.0

    Q = np.empty((M * (C - 1), N), dtype=complex)
    for s in range(1, C):
        other = np.where(s - 1 < anchor, s - 1, s)
        rows = (Bd[other, idx][:, None] * Ab[anchor, idx]
                - Bd[anchor, idx][:, None] * Ab[other, idx])
        if zg.any():
            rows[zg] = zscale * Ab[s, zg]
        Q[(s - 1) * M:s * M] = rows
    extra = 0
    if zg.any():
        Q = np.vstack([Q, zscale * Ab[0, zg]])
        extra = int(zg.sum())
    return NullSpaceSystem("Q", Q, np.arange(N), extra_rows=extra)


def build_R(op: ForwardOperator, obs: PartialObservations) -> NullSpaceSystem:
    """Form ``A A^+ B - B`` through a least-squares solve ``A Y = B``."""
    if op.C < 2:
        raise NoCoherenceError("no coherence information: need C >= 2")
    A = op.entries
    B = obs.B_stacked
    Y, _, _, s = np.linalg.lstsq(A, B, rcond=None)
    R = A @ Y - B
    singular = s.size == 0 or s[-1] * COND_LIMIT < s[0] or s.size < op.N
    return NullSpaceSystem("R", R, np.flatnonzero(~obs.zero_groups),
                           rank_deficient_operator=bool(singular))


def _gap(s_small: float, s_second: float) -> float:
    if s_small == 0:
        return np.inf if s_second > 0 else 1.0
    return s_second / s_small


def _svd_kernel(mat: np.ndarray) -> KernelVector:
    m, n = mat.shape
    _, s, vh = np.linalg.svd(mat, full_matrices=m < n)
    s = np.concatenate([s, np.zeros(n - s.size)])
    v = vh[n - 1].conj()
    gap = _gap(s[-1], s[-2]) if n > 1 else np.inf
    return KernelVector(v / np.linalg.norm(v), float(s[-1]), float(gap))


def _inverse_iteration(mat, tol=1e-12, max_iter=300, restarts=3, seed=0) -> KernelVector:
    """Block inverse iteration (two vectors) on ``mat^H mat`` via a QR factor."""
    m, n = mat.shape
    if m < n:
        mat_sq = np.vstack([mat, np.zeros((n - m, n), dtype=mat.dtype)])
    else:
        mat_sq = mat
    r = np.linalg.qr(mat_sq, mode="r")
    d = np.abs(np.diag(r))
    floor = EPS * max(d.max(initial=0.0), 1.0) * n
    small = d < floor
    if small.any():
        r = r.copy()
        r[np.diag_indices(n)] = np.where(small, floor, np.diag(r))

    k = min(2, n)
    rng = np.random.default_rng(seed)
    residual = np.inf
    for _ in range(restarts):
        V = rng.standard_normal((n, k)) + 1j * rng.standard_normal((n, k))
        V, _ = np.linalg.qr(V)
        prev_sigma2 = np.inf
        for _ in range(max_iter):
            W = sla.solve_triangular(r, sla.solve_triangular(r, V, trans="C"))
            W, _ = np.linalg.qr(W)
            MW = mat @ W
            evals, evecs = np.linalg.eigh(MW.conj().T @ MW)
            Vn = W @ evecs
            v1_old = V[:, 0]
            v1 = Vn[:, 0]
            sin_angle = np.linalg.norm(v1 - v1_old * np.vdot(v1_old, v1))
            sigma2 = np.sqrt(max(evals[-1], 0.0)) if k > 1 else np.inf
            V = Vn
            residual = float(np.linalg.norm(mat @ v1))
            converged_vec = sin_angle < tol
            converged_gap = k == 1 or abs(sigma2 - prev_sigma2) <= 1e-8 * sigma2
            prev_sigma2 = sigma2
            if converged_vec and converged_gap:
                break
        if converged_vec:
            # a slowly settling second vector only blurs the gap estimate (a Ritz upper bound)
            sigma1 = float(np.linalg.norm(mat @ v1))
            sigma2 = float(np.linalg.norm(mat @ V[:, 1])) if k > 1 else np.inf
            return KernelVector(v1 / np.linalg.norm(v1), sigma1, float(_gap(sigma1, sigma2)))
    raise KernelConvergenceError("inverse iteration did not converge", residual)


def smallest_singular_vector(system, method: str = "svd", seed: int = 0) -> KernelVector:
    """Unit right singular vector for the smallest singular value, with the gap.

    ``system`` is a :class:`NullSpaceSystem` or a plain matrix. ``method`` is
    ``"svd"`` for a dense SVD or ``"iterative"`` for inverse iteration.
    The gap is ``sigma_second / sigma_min`` (infinite for an exact kernel).
    """
    if isinstance(system, NullSpaceSystem):
        mat, cols, ncols = system.active, system.columns, system.matrix.shape[1]
    else:
        mat = np.asarray(system)
        cols, ncols = None, mat.shape[1]
    if mat.size == 0:
        raise ValueError("empty matrix")
    if method == "svd":
        kv = _svd_kernel(mat)
    elif method == "iterative":
        kv = _inverse_iteration(mat, seed=seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    if cols is not None and cols.size != ncols:
        full = np.zeros(ncols, dtype=complex)
        full[cols] = kv.vector
        kv = KernelVector(full, kv.sigma_min, kv.gap)
    return kv


def _normalized(psi: np.ndarray, undetermined: np.ndarray) -> PhaseVector:
    psi = np.array(psi, dtype=complex)
    psi[undetermined] = 1.0
    mags = np.abs(psi[~undetermined])
    mean = mags.mean() if mags.size else 1.0
    if mean == 0:
        raise TrivialSolutionError("trivial solution: phase vector is zero")
    psi[~undetermined] /= mean
    fluct = float(np.std(mags / mean)) if mags.size else 0.0
    return PhaseVector(psi, fluct, undetermined, scale=1.0 / mean)


def normalize_phases(psi, obs: PartialObservations) -> PhaseVector:
    """Scale a raw phase vector so its determined entries have mean magnitude one."""
    return _normalized(np.asarray(psi), obs.zero_groups.copy())


def recover_phases(op: ForwardOperator, obs: PartialObservations, x) -> PhaseVector:
    """Phase vector implied by ``x`` through ``B_c psi = A_c x``.

    The ``C`` block estimates are combined as the least-squares mean
    ``sum_c conj(B_c) A_c x / sum_c |B_c|^2``, which skips zero entries.
    """
    x = np.asarray(x, dtype=complex)
    if not np.any(x):
        raise TrivialSolutionError("trivial solution: x is zero")
    Ax = (op.entries @ x).reshape(op.C, op.M)
    Bd = obs.B_diag
    den = np.sum(np.abs(Bd) ** 2, axis=0)
    undetermined = den == 0
    num = np.sum(np.conj(Bd) * Ax, axis=0)
    psi = np.divide(num, den, out=np.ones(op.M, dtype=complex), where=~undetermined)
    return _normalized(psi, undetermined)


def _as_psi(psi) -> np.ndarray:
    return psi.psi if isinstance(psi, PhaseVector) else np.asarray(psi, dtype=complex)


def reconstruct_plain(op: ForwardOperator, obs: PartialObservations, psi) -> np.ndarray:
    """Least-squares solution of ``A x = B psi``."""
    psi = _as_psi(psi)
    if psi.shape != (op.M,):
        raise ValueError(f"phase vector length: expected {op.M}, got {psi.shape}")
    x, *_ = np.linalg.lstsq(op.entries, obs.apply_B(psi), rcond=None)
    return x


def reconstruct_unit_constrained(op: ForwardOperator, obs: PartialObservations, psi) -> np.ndarray:
    """Least-squares solution of ``A x = B diag(|psi|)^-1 psi``."""
    psi = _as_psi(psi).copy()
    skip = obs.zero_groups
    mags = np.abs(psi)
    bad = np.flatnonzero((mags <= UNIT_TOL) & ~skip)
    if bad.size:
        raise ValueError(f"phase undetermined at entry {int(bad[0])}")
    psi[skip] = 1.0
    return reconstruct_plain(op, obs, psi / np.abs(psi))


def pinned_matrix(R: np.ndarray, pin_index: int, scale: float = 1.0) -> np.ndarray:
    """``[R / scale; u_i^T]``: the R form with one pinned phase entry appended."""
    M = R.shape[1]
    if not 0 <= pin_index < M:
        raise IndexError(f"pin index {pin_index} out of range [0, {M})")
    row = np.zeros((1, M), dtype=complex)
    row[0, pin_index] = 1.0
    return np.vstack([R / scale, row])


def B_spectral_norm_of(B_diag: np.ndarray) -> float:
    """Spectral norm of the stacked matrix with the given ``(C, M)`` block diagonals."""
    # columns of the stack have disjoint row support
    return float(np.sqrt(np.max(np.sum(np.abs(B_diag) ** 2, axis=0))))


def B_spectral_norm(obs: PartialObservations) -> float:
    return B_spectral_norm_of(obs.B_diag)


def solve_pinned(op: ForwardOperator, obs: PartialObservations, pin_index: int,
                 R: np.ndarray | None = None) -> PhaseVector:
    """Fix ``psi[pin_index] = 1`` and solve ``R_star psi = u_last`` in the least-squares sense.

    ``pin_index`` is 0-based. ``R`` may be passed to reuse an existing R form.
    R is divided by ``||B||_2`` before the pinning row is appended, which keeps
    the pinned solution independent of the observation scale.
    """
    if R is None:
        R = build_R(op, obs).matrix
    Rs = pinned_matrix(R, pin_index, B_spectral_norm(obs) or 1.0)
    s = np.linalg.svd(Rs, compute_uv=False)
    if s[-1] == 0 or s[0] / s[-1] > COND_LIMIT:
        raise DegenerateSystemError("degenerate pinned system")
    rhs = np.zeros(Rs.shape[0], dtype=complex)
    rhs[-1] = 1.0
    psi, *_ = np.linalg.lstsq(Rs, rhs, rcond=None)
    mags = np.abs(psi)
    fluct = float(np.std(mags) / np.mean(mags)) if np.any(mags) else np.inf
    return PhaseVector(psi, fluct, np.zeros(op.M, bool))


def perturbation_bound(op: ForwardOperator, obs: PartialObservations, pin_index: int,
                       R: np.ndarray | None = None) -> float:
    """Sensitivity ``kappa = ||R_star^+||_2 ||B||_2`` of the pinned system.

    Evaluated on the normalized system of :func:`solve_pinned`, where
    ``||B||_2 = 1``, so ``kappa = 1 / sigma_min(R_star)``.
    """
    if R is None:
        R = build_R(op, obs).matrix
    s_min = np.linalg.svd(pinned_matrix(R, pin_index, B_spectral_norm(obs) or 1.0),
                          compute_uv=False)[-1]
    if s_min == 0:
        return np.inf
    return 1.0 / s_min


def solve_q(op: ForwardOperator, obs: PartialObservations, method: str = "svd",
            xi=None) -> SolveReport:
    """Kernel vector of the Q form, rescaled so the implied phases have unit mean magnitude."""
    system = build_Q(op, obs)
    kv = smallest_singular_vector(system, method)
    psi = recover_phases(op, obs, kv.vector)
    x = kv.vector * psi.scale
    rd = relative_deviation(op, x, xi) if xi is not None else None
    return SolveReport(x, psi, kv.sigma_min, kv.gap, psi.fluctuation, rd)


def solve_r(op: ForwardOperator, obs: PartialObservations, method: str = "svd",
            reconstruction: str = "plain", xi=None) -> SolveReport:
    """Kernel vector of the R form followed by ``A x = B psi`` (``"plain"``) or the unit-magnitude variant (``"unit"``)."""
    system = build_R(op, obs)
    kv = smallest_singular_vector(system, method)
    psi = normalize_phases(kv.vector, obs)
    if reconstruction == "plain":
        x = reconstruct_plain(op, obs, psi)
    elif reconstruction == "unit":
        x = reconstruct_unit_constrained(op, obs, psi)
    else:
        raise ValueError(f"unknown reconstruction {reconstruction!r}")
    rd = relative_deviation(op, x, xi) if xi is not None else None
    info = {"rank_deficient_operator": system.rank_deficient_operator}
    return SolveReport(x, psi, kv.sigma_min, kv.gap, psi.fluctuation, rd, info)
