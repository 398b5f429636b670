"""Monte-Carlo experiment harness: single trials, success-rate sweeps,
singular-value spectra and the perturbation-bound study, with CSV output.

Every trial draws its instance from a seed derived from
``(master seed, point index, trial index)``, so results do not depend on
execution order or on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from . import linear, nonlinear
from .model import (CoherenceLayout, ForwardOperator, NoiseSpec, add_noise, observe_partial,
                    relative_deviation, success)

#: Success threshold on the relative deviation for noise-free trials.
NOISE_FREE_RD = 1e-10


def complex_gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Circular complex Gaussian entries with unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def trial_seed(master: int, point: int, trial: int) -> int:
    return int(np.random.SeedSequence([master, point, trial]).generate_state(1, np.uint64)[0])


def trial_success(rd: float, n: float) -> bool:
    if not math.isfinite(rd):
        return False
    if n > 0:
        return success(rd, n)
    return rd <= NOISE_FREE_RD


# --------------------------------------------------------------------------
# solver registry

def _complex_ls(op, obs, b):
    x, *_ = np.linalg.lstsq(op.entries, b, rcond=None)
    return linear.SolveReport(x, None, np.nan, np.nan, 0.0)


def _nonlinear(kind):
    def run(op, obs, b):
        return nonlinear.minimize(nonlinear.make_functional(kind, op, obs))
    run.__name__ = kind
    return run


SOLVERS: dict[str, Callable] = {
    "svd-q": lambda op, obs, b: linear.solve_q(op, obs),
    "iter-q": lambda op, obs, b: linear.solve_q(op, obs, method="iterative"),
    "svd-r": lambda op, obs, b: linear.solve_r(op, obs),
    "svd-r-unit": lambda op, obs, b: linear.solve_r(op, obs, reconstruction="unit"),
    "iter-r": lambda op, obs, b: linear.solve_r(op, obs, method="iterative"),
    "complex": _complex_ls,
    "mag-only": _nonlinear("magnitude_only"),
    "full-phase": _nonlinear("full_phase_constrained"),
    "reduced-phase": _nonlinear("reduced_phase"),
    "eliminated": _nonlinear("eliminated_phase"),
    "paulus": _nonlinear("paulus_comparison"),
}
LINEAR_SOLVERS = ("svd-q", "iter-q", "svd-r", "svd-r-unit", "iter-r")


def check_solvers(names: Iterable[str]) -> tuple[str, ...]:
    names = tuple(names)
    unknown = [s for s in names if s not in SOLVERS]
    if unknown:
        raise ValueError(f"unknown solver(s) {unknown}; available: {sorted(SOLVERS)}")
    if not names:
        raise ValueError("no solver selected")
    return names


# --------------------------------------------------------------------------
# records

@dataclass(frozen=True)
class GridPoint:
    N: int
    M: int
    C: int
    n: float

    @property
    def ratio(self) -> float:
        return self.C * self.M / self.N


@dataclass(frozen=True)
class TrialRecord:
    solver: str
    N: int
    M: int
    C: int
    n: float
    seed: int
    rd: float
    success: bool
    gap: float
    psi_fluct: float
    seconds: float
    error: str = ""
    point: int = 0


TRIAL_COLUMNS = ("solver", "N", "M", "C", "n", "seed", "rd", "success", "gap", "psi_fluct", "seconds")


@dataclass(frozen=True)
class SweepRow:
    solver: str
    N: int
    M: int
    C: int
    n: float
    ratio: float
    trials: int
    success_rate: float


@dataclass(frozen=True)
class ExperimentGrid:
    """Sweep over ``M`` at fixed ``N``, ``C`` and noise level."""

    N: int
    C: int
    M_values: tuple[int, ...]
    n: float
    trials: int
    seed: int = 0
    solvers: tuple[str, ...] = ("svd-r",)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.M_values:
            raise ValueError("grid has no points")
        check_solvers(self.solvers)

    @classmethod
    def from_ratios(cls, N: int, C: int, ratios: Sequence[float], **kw) -> "ExperimentGrid":
        Ms = tuple(max(1, math.floor(r * N / C + 0.5 + 1e-9)) for r in ratios)
        return cls(N=N, C=C, M_values=Ms, **kw)

    def points(self) -> list[GridPoint]:
        return [GridPoint(self.N, M, self.C, self.n) for M in self.M_values]


# --------------------------------------------------------------------------
# trials

def draw_instance(point: GridPoint, seed: int):
    """Gaussian operator, true solution and noisy observations for one trial."""
    rng = np.random.default_rng(seed)
    layout = CoherenceLayout(point.M, point.C)
    op = ForwardOperator(complex_gaussian(rng, (layout.size, point.N)), layout)
    xi = complex_gaussian(rng, point.N)
    noise_seed = int(rng.integers(2 ** 63))
    b = add_noise(op.entries @ xi, NoiseSpec(point.n, noise_seed))
    return op, xi, b


def _solve_one(solver: str, op, xi, b, point: GridPoint, seed: int, index: int = 0) -> TrialRecord:
    obs = observe_partial(op.layout, b)
    t0 = time.perf_counter()
    try:
        rep = SOLVERS[solver](op, obs, b)
        rd = relative_deviation(op, rep.x, xi)
        gap, fluct, err = rep.gap, rep.psi_fluctuation, ""
    except Exception as exc:  # failed trials are recorded, not raised
        rd, gap, fluct, err = np.nan, np.nan, np.nan, f"{type(exc).__name__}: {exc}"
    seconds = time.perf_counter() - t0
    return TrialRecord(solver, point.N, point.M, point.C, point.n, seed, float(rd),
                       trial_success(rd, point.n), float(gap), float(fluct), seconds, err, index)


def run_trial(point: GridPoint, solver: str, seed: int) -> TrialRecord:
    """Draw an instance from ``seed``, solve it with ``solver`` and score the result."""
    check_solvers([solver])
    op, xi, b = draw_instance(point, seed)
    return _solve_one(solver, op, xi, b, point, seed)


def _run_task(task) -> list[TrialRecord]:
    point, solvers, seed, index = task
    op, xi, b = draw_instance(point, seed)
    return [_solve_one(s, op, xi, b, point, seed, index) for s in solvers]


def _run_operator_task(task) -> list[TrialRecord]:
    op, point, solvers, seed = task
    rng = np.random.default_rng(seed)
    xi = complex_gaussian(rng, op.N)
    b = add_noise(op.entries @ xi, NoiseSpec(point.n, int(rng.integers(2 ** 63))))
    return [_solve_one(s, op, xi, b, point, seed) for s in solvers]


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


def run_grid(grid: ExperimentGrid, threads: int = 1) -> list[TrialRecord]:
    """All trial records of a grid, ordered by (point, trial, solver)."""
    tasks = [(p, grid.solvers, trial_seed(grid.seed, i, t), i)
             for i, p in enumerate(grid.points()) for t in range(grid.trials)]
    return [r for recs in _map(_run_task, tasks, threads) for r in recs]


def run_trials_on_operator(op: ForwardOperator, point: GridPoint, solvers: Sequence[str],
                           trials: int, seed: int, threads: int = 1) -> list[TrialRecord]:
    """Random source vectors against a fixed operator (used by the antenna scenario)."""
    solvers = check_solvers(solvers)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tasks = [(op, point, solvers, trial_seed(seed, 0, t)) for t in range(trials)]
    return [r for recs in _map(_run_operator_task, tasks, threads) for r in recs]


def summarize(records: Sequence[TrialRecord]) -> list[SweepRow]:
    """Success rate per (grid point, solver), in first-appearance order."""
    groups: dict[tuple, list[TrialRecord]] = {}
    for r in records:
        groups.setdefault((r.point, r.solver), []).append(r)
    rows = []
    for (_, solver), recs in groups.items():
        r0 = recs[0]
        rate = sum(r.success for r in recs) / len(recs)
        rows.append(SweepRow(solver, r0.N, r0.M, r0.C, r0.n, r0.C * r0.M / r0.N, len(recs), rate))
    return rows


def sweep_rows(grid: ExperimentGrid, records: Sequence[TrialRecord]) -> list[SweepRow]:
    """Summary rows ordered by solver (grid order), then grid point."""
    keyed = [((r.point, r.solver), r) for r in records]
    order = {s: i for i, s in enumerate(grid.solvers)}
    rows = summarize([r for _, r in sorted(keyed, key=lambda kr: (order[kr[0][1]], kr[0][0]))])
    return rows


def sweep_success(grid: ExperimentGrid, threads: int = 1) -> list[SweepRow]:
    """Success rate of each solver at each grid point."""
    return sweep_rows(grid, run_grid(grid, threads))


# --------------------------------------------------------------------------
# spectra

def spectrum_dump(system) -> np.ndarray:
    """Full singular spectrum in descending order, zero-padded to the column count."""
    mat = system.active if isinstance(system, linear.NullSpaceSystem) else np.asarray(system)
    s = np.linalg.svd(mat, compute_uv=False)
    return np.concatenate([s, np.zeros(mat.shape[1] - s.size)])


# --------------------------------------------------------------------------
# perturbation-bound study

@dataclass(frozen=True)
class NoiseBoundRow:
    n: float
    C: int
    trial: int
    seed: int
    rel_error: float
    bound: float
    kappa: float
    satisfied: bool
    failed: bool


NOISE_BOUND_COLUMNS = tuple(f.name for f in fields(NoiseBoundRow))


def _noise_bound_task(task) -> NoiseBoundRow:
    N, CM, C, n, trial, seed, pin = task
    M = CM // C
    rng = np.random.default_rng(seed)
    layout = CoherenceLayout(M, C)
    op = ForwardOperator(complex_gaussian(rng, (layout.size, N)), layout)
    xi = complex_gaussian(rng, N)
    b = op.entries @ xi
    b_noisy = add_noise(b, NoiseSpec(n, int(rng.integers(2 ** 63))))
    clean = observe_partial(layout, b)
    noisy = observe_partial(layout, b_noisy)
    R_clean = linear.build_R(op, clean).matrix
    R_noisy = linear.build_R(op, noisy).matrix
    psi = linear.solve_pinned(op, clean, pin, R_clean).psi
    kappa = linear.perturbation_bound(op, clean, pin, R_clean)
    dB = linear.B_spectral_norm_of(noisy.B_diag - clean.B_diag)
    bound = kappa * dB / linear.B_spectral_norm(clean)
    failed = linear.smallest_singular_vector(R_noisy).gap < linear.GAP_RELIABLE
    try:
        psi_noisy = linear.solve_pinned(op, noisy, pin, R_noisy).psi
        rel = float(np.linalg.norm(psi_noisy - psi) / np.linalg.norm(psi))
    except linear.DegenerateSystemError:
        rel, failed = np.inf, True
    return NoiseBoundRow(n, C, trial, seed, rel, float(bound), float(kappa), bool(rel <= bound),
                         bool(failed))


def noise_bound_study(N: int, CM: int, C: int, noise_levels: Sequence[float], trials: int,
                      seed: int = 0, pin_index: int = 0, threads: int = 1) -> list[NoiseBoundRow]:
    """Compare the pinned R-form phase error with its first-order bound.

    For each trial the pinned solution on noise-free data is the reference;
    ``failed`` marks trials where the noisy R form has lost its distinct
    smallest singular value.
    """
    if CM % C:
        raise ValueError(f"CM={CM} is not a multiple of C={C}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    tasks = [(N, CM, C, n, t, trial_seed(seed, i, t), pin_index)
             for i, n in enumerate(noise_levels) for t in range(trials)]
    return _map(_noise_bound_task, tasks, threads)


# --------------------------------------------------------------------------
# CSV

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def trials_csv(records: Iterable[TrialRecord], timing: bool = False) -> str:
    """Trial table; ``seconds`` is left empty unless ``timing`` is set so output stays reproducible."""
    rows = []
    for r in records:
        vals = list(astuple(r)[:len(TRIAL_COLUMNS)])
        if not timing:
            vals[-1] = ""
        rows.append(vals)
    return to_csv(TRIAL_COLUMNS, rows)


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    return to_csv([f.name for f in fields(SweepRow)], (astuple(r) for r in rows))


def spectrum_csv(sigma: Iterable[float]) -> str:
    return to_csv(("index", "sigma"), ((i, float(s)) for i, s in enumerate(sigma)))


def noise_bound_csv(rows: Iterable[NoiseBoundRow]) -> str:
    return to_csv(NOISE_BOUND_COLUMNS, (astuple(r) for r in rows))
