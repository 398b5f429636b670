"""Synthetic antenna near-field scenario.

Tangential Hertzian dipoles on a source sphere radiate to multi-element
probes placed around reference points on a larger measurement sphere. All
lengths are in wavelengths; the free-space impedance and the dipole moments
are normalized to one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .model import CoherenceLayout, ForwardOperator

K0 = 2 * np.pi
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))
MIN_SOURCE_PROBE_DISTANCE = 0.1
MIN_PROBE_SPACING = 1e-2


class GeometryError(ValueError):
    pass


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """``n`` points spread over a sphere on a Fibonacci spiral; a single point sits on the pole."""
    if n < 1:
        raise ValueError("need at least one point")
    if n == 1:
        return np.array([[0.0, 0.0, radius]])
    i = np.arange(n)
    z = 1.0 - 2.0 * i / (n - 1)
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return radius * np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def tangent_frames(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spherical unit vectors ``theta_hat`` and ``phi_hat`` at each point."""
    x, y, z = points.T
    theta = np.arccos(np.clip(z / np.linalg.norm(points, axis=1), -1, 1))
    phi = np.arctan2(y, x)
    e_theta = np.column_stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)])
    e_phi = np.column_stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)])
    return e_theta, e_phi


@dataclass(frozen=True, eq=False)
class DipoleSourceSet:
    """``N`` tangential dipoles, two orthogonal ones per location."""

    positions: np.ndarray
    polarizations: np.ndarray
    diameter: float

    @property
    def N(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class MeasurementGrid:
    positions: np.ndarray
    e_theta: np.ndarray
    e_phi: np.ndarray
    diameter: float

    @property
    def M(self) -> int:
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class ProbeArrayLayout:
    """Probe elements as offsets and polarizations in the local ``(theta, phi)`` frame."""

    offsets: np.ndarray
    polarizations: np.ndarray

    @property
    def C(self) -> int:
        return len(self.offsets)

    @classmethod
    def l_shape(cls, spacing: float = 1.0) -> "ProbeArrayLayout":
        d = spacing
        return cls(np.array([[0.0, 0.0], [d, 0.0], [0.0, d]]), _default_pol(3))

    @classmethod
    def diagonal(cls, spacing: float = 1.0) -> "ProbeArrayLayout":
        d = spacing
        return cls(np.array([[0.0, 0.0], [d, d]]), _default_pol(2))

    @classmethod
    def for_count(cls, C: int, spacing: float = 1.0) -> "ProbeArrayLayout":
        if C == 3:
            return cls.l_shape(spacing)
        if C == 2:
            return cls.diagonal(spacing)
        raise ValueError(f"probe arrays exist for C in (2, 3), got {C}")


def _default_pol(C):
    # slanted 45 degrees so both tangential field components are seen
    return np.tile([np.sqrt(0.5), np.sqrt(0.5)], (C, 1))


def build_source_sphere(diameter_wavelengths: float, N: int) -> DipoleSourceSet:
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and positive (two dipoles per location), got {N}")
    pts = fibonacci_sphere(N // 2, diameter_wavelengths / 2)
    et, ep = tangent_frames(pts)
    positions = np.repeat(pts, 2, axis=0)
    pols = np.empty_like(positions)
    pols[0::2] = et
    pols[1::2] = ep
    return DipoleSourceSet(positions, pols, diameter_wavelengths)


def build_measurement_grid(diameter_wavelengths: float, M: int) -> MeasurementGrid:
    if M < 1:
        raise ValueError("M must be >= 1")
    pts = fibonacci_sphere(M, diameter_wavelengths / 2)
    et, ep = tangent_frames(pts)
    return MeasurementGrid(pts, et, ep, diameter_wavelengths)


def dipole_coupling(probe_pos, probe_pol, src_pos, src_pol, k: float = K0) -> np.ndarray:
    """Voltage-like coupling ``q . E_p(r_probe)`` between every probe and source dipole.

    Uses the exact free-space field of a Hertzian dipole ``p`` at distance ``r``
    along the unit vector ``n``::

        E = exp(-j k r) / (4 pi r) * (k^2 (p - n (n.p)) + (3 n (n.p) - p) (1/r^2 + j k / r))

    The expression is symmetric in probe and source, so coupling is reciprocal.
    """
    d = probe_pos[:, None, :] - src_pos[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    n = d / r[..., None]
    qp = probe_pol @ src_pol.T
    qn = np.einsum("pk,psk->ps", probe_pol, n)
    pn = np.einsum("sk,psk->ps", src_pol, n)
    near = 1.0 / r ** 2 + 1j * k / r
    term = k * k * (qp - qn * pn) + (3.0 * qn * pn - qp) * near
    return term * np.exp(-1j * k * r) / (4 * np.pi * r)


def probe_points(grid: MeasurementGrid, probe: ProbeArrayLayout) -> tuple[np.ndarray, np.ndarray]:
    """Positions and polarizations of all probe elements, row ``c * M + m``."""
    off, pol = probe.offsets, probe.polarizations
    pos = (grid.positions[None] + off[:, 0, None, None] * grid.e_theta[None]
           + off[:, 1, None, None] * grid.e_phi[None])
    pvec = pol[:, 0, None, None] * grid.e_theta[None] + pol[:, 1, None, None] * grid.e_phi[None]
    pvec /= np.linalg.norm(pvec, axis=-1, keepdims=True)
    return pos.reshape(-1, 3), pvec.reshape(-1, 3)


def _min_pair_distance(points: np.ndarray) -> float:
    if len(points) < 2:
        return np.inf
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].min())


def build_dipole_operator(sources: DipoleSourceSet, grid: MeasurementGrid,
                          probe: ProbeArrayLayout) -> tuple[ForwardOperator, CoherenceLayout]:
    pos, pol = probe_points(grid, probe)
    if _min_pair_distance(pos) < MIN_PROBE_SPACING:
        raise GeometryError("probe locations coincide")
    dist = np.linalg.norm(pos[:, None, :] - sources.positions[None], axis=-1)
    if dist.min() <= MIN_SOURCE_PROBE_DISTANCE:
        raise GeometryError(f"source/probe collision: distance {dist.min():.3g} wavelengths")
    layout = CoherenceLayout(grid.M, probe.C)
    A = dipole_coupling(pos, pol, sources.positions, sources.polarizations)
    return ForwardOperator(A, layout), layout


@dataclass(frozen=True)
class AntennaConfig:
    N: int = 200
    C: int = 3
    ratio: float = 3.0
    noise: float = 1e-3
    trials: int = 50
    solvers: tuple[str, ...] = ("svd-r", "svd-q")
    source_diameter: float = 1.5
    measurement_diameter: float = 8.0
    spacing: float = 1.0
    seed: int = 0

    @property
    def M(self) -> int:
        return max(1, math.floor(self.ratio * self.N / self.C + 0.5 + 1e-9))


def build_scenario(config: AntennaConfig) -> ForwardOperator:
    sources = build_source_sphere(config.source_diameter, config.N)
    grid = build_measurement_grid(config.measurement_diameter, config.M)
    probe = ProbeArrayLayout.for_count(config.C, config.spacing)
    op, _ = build_dipole_operator(sources, grid, probe)
    return op


def run_antenna_scenario(config: AntennaConfig, threads: int = 1):
    """Solve ``trials`` random source excitations against one antenna operator.

    Returns a list of :class:`~cophase.experiments.TrialRecord`, ordered by
    trial then solver.
    """
    from .experiments import GridPoint, run_trials_on_operator

    op = build_scenario(config)
    point = GridPoint(N=config.N, M=config.M, C=config.C, n=config.noise)
    return run_trials_on_operator(op, point, config.solvers, config.trials, config.seed,
                                  threads=threads)
