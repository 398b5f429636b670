"""Problem data model for phase retrieval with partially coherent observations.

Observation vectors are ordered in ``C`` blocks of length ``M``: observation
``m`` of block ``c`` sits at flat index ``c * M + m`` (0-based), and the ``C``
observations ``m, m + M, ..., m + (C - 1) M`` form one coherent group whose
relative phases are known.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

#: Magnitudes at or below this fraction of the largest magnitude count as zero.
ZERO_TOL = 1e-14


class DimensionError(ValueError):
    """Raised when an array does not have the length or shape an operation expects."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class PhaseDifferenceUndefined(ValueError):
    pass


@dataclass(frozen=True)
class CoherenceLayout:
    """Block structure of ``C * M`` observations in ``M`` coherent groups of size ``C``."""

    M: int
    C: int

    def __post_init__(self):
        if self.M < 1 or self.C < 1:
            raise ValueError(f"layout needs M >= 1 and C >= 1, got M={self.M}, C={self.C}")

    @property
    def size(self) -> int:
        return self.M * self.C

    def group(self, m: int) -> np.ndarray:
        """Flat (0-based) observation indices belonging to group ``m``."""
        if not 0 <= m < self.M:
            raise IndexError(f"group {m} out of range [0, {self.M})")
        return m + self.M * np.arange(self.C)


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """Dense complex matrix mapping ``N`` unknowns to ``C * M`` observations."""

    entries: np.ndarray
    layout: CoherenceLayout

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=complex)
        if a.ndim != 2:
            raise DimensionError("operator ndim", 2, a.ndim)
        if a.shape[0] != self.layout.size:
            raise DimensionError("operator rows (C*M)", self.layout.size, a.shape[0])
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    @property
    def M(self) -> int:
        return self.layout.M

    @property
    def C(self) -> int:
        return self.layout.C

    def block(self, c: int) -> np.ndarray:
        """Rows of block ``c`` (0-based), shape ``(M, N)``."""
        M = self.layout.M
        return self.entries[c * M:(c + 1) * M]

    def blocks(self) -> np.ndarray:
        """All blocks as an array of shape ``(C, M, N)``."""
        return self.entries.reshape(self.C, self.M, self.N)


@dataclass(frozen=True, eq=False)
class TrueSolution:
    xi: np.ndarray
    b_true: np.ndarray

    @classmethod
    def from_operator(cls, op: ForwardOperator, xi) -> "TrueSolution":
        xi = np.asarray(xi, dtype=complex)
        return cls(xi=xi, b_true=forward_apply(op, xi))


@dataclass(frozen=True, eq=False)
class PartialObservations:
    """Magnitudes and intra-group phase differences of ``C * M`` observations.

    ``B_diag`` has shape ``(C, M)``; row ``c`` is the diagonal of ``B_c``.
    Each group is referenced to an *anchor* block, normally block 0. When the
    block-0 entry of a group vanishes, the first nonzero member of the group
    takes over as anchor so that the remaining phase differences stay usable;
    ``phase_diffs`` is then relative to that member.
    """

    layout: CoherenceLayout
    magnitudes: np.ndarray
    phase_diffs: np.ndarray
    B_diag: np.ndarray
    anchors: np.ndarray
    zero_mask: np.ndarray = field(repr=False)

    @property
    def M(self) -> int:
        return self.layout.M

    @property
    def C(self) -> int:
        return self.layout.C

    @property
    def B_blocks(self) -> list[np.ndarray]:
        return [np.diag(d) for d in self.B_diag]

    @property
    def B_stacked(self) -> np.ndarray:
        """The ``(C*M, M)`` stack of the diagonal blocks."""
        C, M = self.B_diag.shape
        out = np.zeros((C * M, M), dtype=complex)
        rows = np.arange(C * M)
        out[rows, np.tile(np.arange(M), C)] = self.B_diag.ravel()
        return out

    @property
    def relative_phases(self) -> np.ndarray:
        """Phase of every observation relative to its group anchor, shape ``(C, M)``."""
        rel = np.zeros((self.C, self.M))
        rel[1:] = self.phase_diffs.T
        return rel

    @property
    def zero_groups(self) -> np.ndarray:
        """Boolean mask of groups in which every magnitude vanishes."""
        return self.zero_mask.all(axis=0)

    @property
    def rank_B(self) -> int:
        return int(self.M - self.zero_groups.sum())

    def apply_B(self, psi) -> np.ndarray:
        """``B_stacked @ psi`` without forming the stack."""
        return (self.B_diag * np.asarray(psi)[None, :]).ravel()

    def apply_BH(self, r) -> np.ndarray:
        """``B_stacked^H @ r`` without forming the stack."""
        r = np.asarray(r).reshape(self.C, self.M)
        return np.sum(np.conj(self.B_diag) * r, axis=0)


@dataclass(frozen=True)
class NoiseSpec:
    n: float
    seed: int | None = None


def _check_len(what, v, expected):
    if v.ndim != 1 or v.shape[0] != expected:
        raise DimensionError(what, expected, v.shape[0] if v.ndim == 1 else v.shape)


def forward_apply(op: ForwardOperator, x) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    _check_len("unknown vector length", x, op.N)
    return op.entries @ x


def _wrap(angle):
    # np.angle yields [-pi, pi]; fold -pi onto pi
    return np.where(angle <= -np.pi, angle + 2 * np.pi, angle)


def observe_partial(layout: CoherenceLayout | ForwardOperator, b_complex) -> PartialObservations:
    """Split complex observations into magnitudes and intra-group phase differences.

    ``layout`` may also be a :class:`ForwardOperator`, whose layout is used.
    """
    if isinstance(layout, ForwardOperator):
        layout = layout.layout
    b = np.asarray(b_complex, dtype=complex)
    _check_len("observation vector length", b, layout.size)
    C, M = layout.C, layout.M
    mags = np.abs(b)
    bmax = mags.max(initial=0.0)
    zero = (mags <= ZERO_TOL * bmax).reshape(C, M) if bmax > 0 else np.ones((C, M), bool)
    bb = np.where(zero, 0, b.reshape(C, M))

    anchors = np.argmax(~zero, axis=0)  # first nonzero member; 0 for all-zero groups
    ref = bb[anchors, np.arange(M)]
    rel = np.where(zero, 0.0, _wrap(np.angle(bb * np.conj(ref)[None, :])))
    rel[anchors, np.arange(M)] = 0.0  # the anchor itself is exactly real
    B_diag = np.where(zero, 0, mags.reshape(C, M) * np.exp(1j * rel))

    mags_out = np.where(zero.ravel(), 0.0, mags)
    for arr in (mags_out, rel, B_diag, anchors, zero):
        arr.setflags(write=False)
    return PartialObservations(
        layout=layout,
        magnitudes=mags_out,
        phase_diffs=rel[1:].T.copy() if C > 1 else np.zeros((M, 0)),
        B_diag=B_diag,
        anchors=anchors,
        zero_mask=zero,
    )


def phase_diff_from_magnitudes(m_k: float, m_m: float, m_sum: float, m_quad: float) -> float:
    """Phase difference ``arg(b_k) - arg(b_m)`` from four magnitude measurements.

    The inputs are ``|b_k|``, ``|b_m|``, ``|b_k + b_m|`` and ``|b_k + j b_m|``.
    The cross terms ``|b_k + b_m|^2 - |b_k|^2 - |b_m|^2 = 2 Re(b_k conj(b_m))``
    and ``|b_k + j b_m|^2 - |b_k|^2 - |b_m|^2 = 2 Im(b_k conj(b_m))`` feed a
    four-quadrant arctangent.
    """
    if m_k <= 0 and m_m <= 0:
        raise PhaseDifferenceUndefined("phase difference undefined: both magnitudes are zero")
    base = m_k * m_k + m_m * m_m
    num_cos = m_sum * m_sum - base
    num_sin = m_quad * m_quad - base
    return float(_wrap(np.arctan2(num_sin, num_cos)))


def add_noise(b, spec: NoiseSpec) -> np.ndarray:
    """Add complex Gaussian noise scaled to an exact noise-to-signal ratio."""
    if spec.n < 0:
        raise ValueError(f"noise-to-signal ratio must be >= 0, got {spec.n}")
    b = np.asarray(b, dtype=complex)
    if spec.n == 0:
        return b.copy()
    rng = np.random.default_rng(spec.seed)
    db = rng.standard_normal(b.shape) + 1j * rng.standard_normal(b.shape)
    db *= spec.n * np.linalg.norm(b) / np.linalg.norm(db)
    return b + db


def noise_to_signal(b_prime, b) -> float:
    b_prime = np.asarray(b_prime)
    b = np.asarray(b)
    if b_prime.shape != b.shape:
        raise DimensionError("vector lengths", b.shape, b_prime.shape)
    nb = np.linalg.norm(b)
    if nb == 0:
        raise ZeroDivisionError("reference vector has zero norm")
    return float(np.linalg.norm(b_prime - b) / nb)


def align_scalar(y, target) -> complex:
    """Least-squares complex scalar ``a`` minimizing ``||a y - target||``."""
    ny = np.vdot(y, y).real
    if ny == 0:
        return 0j
    return complex(np.vdot(y, target) / ny)


def relative_deviation(op: ForwardOperator, x, xi) -> float:
    """Relative deviation ``||A x - A xi|| / ||A xi||`` after removing the global gauge."""
    ax = forward_apply(op, x)
    axi = forward_apply(op, xi)
    nref = np.linalg.norm(axi)
    if nref == 0:
        raise ZeroDivisionError("A @ xi has zero norm")
    if not np.any(ax):
        return 1.0
    alpha = align_scalar(ax, axi)
    return float(np.linalg.norm(alpha * ax - axi) / nref)


def success(rd: float, n: float) -> bool:
    """A reconstruction succeeds when its relative deviation is below ``3 n``."""
    # the boundary is excluded even when 3 * n rounds up past rd
    limit = 3.0 * n
    return bool(rd < limit and not math.isclose(rd, limit, rel_tol=1e-12))
