"""The adaptive loop and the empirical verification checkers.

``run_afem`` iterates solve - estimate - mark - refine and records one row
per iteration. The checkers are pure functions of the recorded trace (plus
the reference-solution energies where needed): estimator reduction,
R-linear decay, quasi-orthogonality, marking optimality, discrete
reliability and log-log rate fits.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assembly import (
    DiscreteSolution,
    assemble_linear,
    energy_products,
    grad_norm_sq,
    solve_linear,
    solve_nonlinear,
    transfer,
)
from .estimator import estimate, local_sum
from .marking import AllZeroIndicators, mark_binned, mark_min
from .mesh import audit_refinement, closure_audit, refine_nvb, shape_regularity
from .problems import LinearProblem, check_ellipticity

TRACE_COLUMNS = (
    "ell",
    "n_elements",
    "n_vertices",
    "n_marked",
    "n_refined",
    "eta_sq",
    "osc_sq",
    "refined_eta_sq",
    "grad_diff_sq",
    "energy_diff_sq",
    "err_energy_sq",
    "wall_time_s",
)
_INT_COLUMNS = frozenset(("ell", "n_elements", "n_vertices", "n_marked", "n_refined"))


class AfemRunError(RuntimeError):
    """A solver failed mid-run; ``trace`` holds the partial record."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class AfemTrace:
    """Per-iteration record of one adaptive (or uniform) run.

    All columns are float arrays of equal length; count columns hold NaN
    where a quantity does not exist (for example the marked count of the
    final iteration). ``meta`` carries run parameters and derived run
    constants.
    """

    columns: dict
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if set(self.columns) != set(TRACE_COLUMNS) or len(lengths) != 1:
            raise ValueError("trace requires all columns at one common length")

    def __len__(self):
        return len(self.columns["ell"])

    def __getattr__(self, name):
        try:
            return self.__dict__["columns"][name]
        except KeyError:
            raise AttributeError(name) from None

    def to_csv(self, path):
        lines = [",".join(TRACE_COLUMNS)]
        for k in range(len(self)):
            cells = []
            for name in TRACE_COLUMNS:
                v = float(self.columns[name][k])
                if name in _INT_COLUMNS and math.isfinite(v):
                    cells.append(str(int(v)))
                else:
                    cells.append(repr(v))
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path, meta=None):
        with open(path) as fh:
            rows = [line.strip().split(",") for line in fh if line.strip()]
        if tuple(rows[0]) != TRACE_COLUMNS:
            raise ValueError("unexpected trace header")
        data = np.array([[float(v) for v in row] for row in rows[1:]])
        columns = {name: data[:, i].copy() for i, name in enumerate(TRACE_COLUMNS)}
        return cls(columns=columns, meta=dict(meta or {}))


def synthetic_trace(eta_sq, **overrides):
    """Trace from raw columns; anything not supplied is padded (tests)."""
    eta_sq = np.asarray(eta_sq, dtype=float)
    n = eta_sq.size
    columns = {
        "ell": np.arange(n, dtype=float),
        "n_elements": overrides.pop("n_elements", 4.0 * 2.0 ** np.arange(n)),
        "n_vertices": np.full(n, np.nan),
        "n_marked": np.full(n, np.nan),
        "n_refined": np.full(n, np.nan),
        "eta_sq": eta_sq,
        "osc_sq": np.zeros(n),
        "refined_eta_sq": np.full(n, np.nan),
        "grad_diff_sq": np.full(n, np.nan),
        "energy_diff_sq": np.full(n, np.nan),
        "err_energy_sq": np.full(n, np.nan),
        "wall_time_s": np.zeros(n),
    }
    meta = overrides.pop("meta", {})
    for name, value in overrides.items():
        if name not in columns:
            raise TypeError(f"unknown trace column {name!r}")
        arr = np.asarray(value, dtype=float)
        if arr.size != n:
            raise ValueError(f"column {name!r} has wrong length")
        columns[name] = arr.astype(float)
    return AfemTrace(columns=columns, meta=dict(meta))


@dataclass
class ReferenceSolution:
    """Uniform refinement of a run's final mesh, solved as ground truth."""

    mesh: object
    solution: DiscreteSolution
    system: Optional[object]


@dataclass
class AfemResult:
    trace: AfemTrace
    final_mesh: object
    final_solution: DiscreteSolution
    records: list
    meshes: Optional[list] = None
    solutions: Optional[list] = None
    reports: Optional[list] = None
    reference: Optional[ReferenceSolution] = None


def _solve_on(mesh, problem, previous=None):
    """Solve on one mesh; returns (solution, system-or-None)."""
    if isinstance(problem, LinearProblem):
        system = assemble_linear(mesh, problem)
        return solve_linear(system), system
    guess = transfer(previous, mesh) if previous is not None else None
    return solve_nonlinear(mesh, problem, initial_guess=guess), None


def _energy_error_sq(problem, reference, moved_values):
    ref = reference.solution
    if isinstance(problem, LinearProblem):
        interior = reference.system.interior
        e = ref.values[interior] - moved_values[interior]
        return max(0.0, float(e @ (reference.system.matrix @ e)))
    moved = DiscreteSolution(reference.mesh, moved_values)
    _, dl_sq = energy_products(reference.mesh, problem, ref, moved)
    return max(0.0, dl_sq)


def build_reference(problem, final_mesh, final_solution, levels=3):
    """Reference solution on ``levels`` uniform refinements of the final mesh."""
    from .mesh import uniform_refine

    ref_mesh = uniform_refine(final_mesh, levels)
    if isinstance(problem, LinearProblem):
        system = assemble_linear(ref_mesh, problem)
        return ReferenceSolution(ref_mesh, solve_linear(system), system)
    guess = transfer(final_solution, ref_mesh)
    return ReferenceSolution(
        ref_mesh, solve_nonlinear(ref_mesh, problem, initial_guess=guess), None
    )


def _run_loop(
    problem,
    mark_fn,
    theta,
    max_elements,
    eta_tol,
    marking_name,
    keep_history,
    compute_reference,
    reference_levels,
    audit,
    seed,
    max_iterations,
    initial_mesh,
):
    if max_elements is None and eta_tol is None:
        raise ValueError("need a stopping rule: max_elements or eta_tol")
    if isinstance(problem, LinearProblem):
        check_ellipticity(problem)
    if compute_reference and not keep_history:
        raise ValueError("reference energies need the run history")

    mesh = problem.make_initial_mesh() if initial_mesh is None else initial_mesh
    gamma0 = shape_regularity(mesh)
    gamma_max = gamma0
    rows = []
    records = []
    meshes, solutions, reports = [], [], []
    previous = None

    def _partial_trace():
        return _rows_to_trace(rows, meta)

    meta = {
        "problem": problem.name,
        "theta": theta,
        "marking": marking_name,
        "seed": seed,
        "stop_max_elements": max_elements,
        "stop_eta_tol": eta_tol,
        "n_initial_elements": mesh.n_elements,
        "gamma_initial": gamma0,
    }

    for ell in range(max_iterations + 1):
        tic = time.perf_counter()
        try:
            sol, system = _solve_on(mesh, problem, previous)
        except Exception as exc:
            meta["aborted"] = str(exc)
            raise AfemRunError(f"solver failed at iteration {ell}: {exc}", _partial_trace()) from exc
        if previous is not None:
            moved = transfer(previous, mesh)
            diff = sol.values - moved.values
            rows[-1]["grad_diff_sq"] = grad_norm_sq(mesh, diff)
            if isinstance(problem, LinearProblem):
                d = diff[system.interior]
                rows[-1]["energy_diff_sq"] = max(0.0, float(d @ (system.matrix @ d)))
            else:
                _, dl_sq = energy_products(mesh, problem, sol, moved)
                rows[-1]["energy_diff_sq"] = max(0.0, dl_sq)
        report = estimate(mesh, sol, problem)
        rows.append(
            {
                "ell": float(ell),
                "n_elements": float(mesh.n_elements),
                "n_vertices": float(mesh.n_vertices),
                "n_marked": np.nan,
                "n_refined": np.nan,
                "eta_sq": report.eta_sq_total,
                "osc_sq": report.osc_sq_total,
                "refined_eta_sq": np.nan,
                "grad_diff_sq": np.nan,
                "energy_diff_sq": np.nan,
                "err_energy_sq": np.nan,
                "wall_time_s": 0.0,
            }
        )
        if keep_history:
            meshes.append(mesh)
            solutions.append(sol)
            reports.append(report)

        stop = (
            (eta_tol is not None and math.sqrt(report.eta_sq_total) <= eta_tol)
            or (max_elements is not None and mesh.n_elements >= max_elements)
            or ell == max_iterations
        )
        if not stop:
            try:
                marked = mark_fn(report)
            except AllZeroIndicators:
                stop = True
        if stop:
            rows[-1]["wall_time_s"] = time.perf_counter() - tic
            previous = sol
            break

        refined_mesh, record = refine_nvb(mesh, marked)
        records.append(record)
        if audit:
            audit_refinement(mesh, refined_mesh, record)
            gamma = shape_regularity(refined_mesh)
            gamma_max = max(gamma_max, gamma)
        rows[-1]["n_marked"] = float(len(record.marked))
        rows[-1]["n_refined"] = float(len(record.refined))
        rows[-1]["refined_eta_sq"] = local_sum(report, record.refined)
        rows[-1]["wall_time_s"] = time.perf_counter() - tic
        previous = sol
        mesh = refined_mesh

    meta["gamma_max"] = gamma_max
    if records:
        meta["closure_constant"] = closure_audit(records)

    reference = None
    if compute_reference:
        reference = build_reference(problem, mesh, previous, levels=reference_levels)
        for k, sol_k in enumerate(solutions):
            moved = transfer(sol_k, reference.mesh)
            rows[k]["err_energy_sq"] = _energy_error_sq(problem, reference, moved.values)
        meta["noise_floor_err_sq"] = rows[-1]["err_energy_sq"]

    trace = _rows_to_trace(rows, meta)
    return AfemResult(
        trace=trace,
        final_mesh=mesh,
        final_solution=previous,
        records=records,
        meshes=meshes if keep_history else None,
        solutions=solutions if keep_history else None,
        reports=reports if keep_history else None,
        reference=reference,
    )


def _rows_to_trace(rows, meta):
    columns = {
        name: np.array([row[name] for row in rows], dtype=float) for name in TRACE_COLUMNS
    }
    return AfemTrace(columns=columns, meta=dict(meta))


def run_afem(
    problem,
    theta,
    max_elements=None,
    eta_tol=None,
    marking="min",
    keep_history=True,
    compute_reference=False,
    reference_levels=3,
    audit=True,
    seed=0,
    max_iterations=200,
    initial_mesh=None,
):
    """Adaptive run with Doerfler marking; returns an :class:`AfemResult`.

    Stops when the estimator drops below ``eta_tol``, the mesh reaches
    ``max_elements``, or the indicators vanish. With
    ``compute_reference=True`` the run is followed by a reference solve on
    ``reference_levels`` uniform refinements of the final mesh and the
    energy errors of all iterates are recorded. ``initial_mesh`` overrides
    the problem's default, which lets several runs share one genealogy.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    if marking == "min":
        mark_fn = lambda report: mark_min(report.indicators_sq, theta).marked
    elif marking == "binned":
        mark_fn = lambda report: mark_binned(report.indicators_sq, theta).marked
    else:
        raise ValueError(f"unknown marking variant {marking!r}")
    return _run_loop(
        problem, mark_fn, theta, max_elements, eta_tol, marking, keep_history,
        compute_reference, reference_levels, audit, seed, max_iterations, initial_mesh,
    )


def run_uniform(
    problem,
    max_elements=None,
    eta_tol=None,
    keep_history=True,
    compute_reference=False,
    reference_levels=3,
    audit=True,
    seed=0,
    max_iterations=200,
    initial_mesh=None,
):
    """Uniform-refinement baseline: every element is marked each step."""
    mark_fn = lambda report: np.arange(report.indicators_sq.shape[0])
    return _run_loop(
        problem, mark_fn, 1.0, max_elements, eta_tol, "uniform", keep_history,
        compute_reference, reference_levels, audit, seed, max_iterations, initial_mesh,
    )


# -- checkers -------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorReductionFit:
    q_fit: float
    c_fit: float
    violations: tuple

    @property
    def passed(self):
        return not self.violations and self.q_fit < 1.0


def check_estimator_reduction(trace, c_cap=1e6):
    """Fit (q, C) with eta_{l+1}^2 <= q eta_l^2 + C |grad diff|^2 per step.

    ``q_fit`` is the smallest q that works with C bounded by ``c_cap``;
    steps that no q < 1 can satisfy even at the cap are violations.
    """
    if len(trace) < 3:
        raise ValueError("estimator reduction needs a trace of length >= 3")
    eta = trace.eta_sq
    diff = trace.grad_diff_sq
    q_needed = []
    violations = []
    for k in range(len(trace) - 1):
        d = diff[k] if math.isfinite(diff[k]) else 0.0
        slack = eta[k + 1] - c_cap * d
        if eta[k] > 0.0:
            q = slack / eta[k]
            q_needed.append(q)
            if q >= 1.0:
                violations.append(k)
        elif slack > 0.0:
            violations.append(k)
    q_fit = max(0.0, max(q_needed, default=0.0))
    c_fit = 0.0
    for k in range(len(trace) - 1):
        d = diff[k] if math.isfinite(diff[k]) else 0.0
        if d > 0.0:
            c_fit = max(c_fit, (eta[k + 1] - q_fit * eta[k]) / d)
    return EstimatorReductionFit(q_fit=q_fit, c_fit=max(0.0, c_fit), violations=tuple(violations))


@dataclass(frozen=True)
class RLinearFit:
    q_fit: float
    c_fit: float
    passed: bool


def check_rlinear(trace, c_cap=100.0):
    """Geometric envelope eta_{l+k}^2 <= C q^k eta_l^2 over all pairs.

    The slope of a least-squares fit of log eta^2 gives the rate q; the
    check fails when that rate is not below one (stagnation) or when no
    q < 1 at or above it keeps the envelope constant within ``c_cap``.
    A finite trace always admits *some* q < 1 at C = c_cap, so the fitted
    rate, not bare envelope feasibility, carries the pass decision.
    """
    if len(trace) < 5:
        raise ValueError("R-linear check needs a trace of length >= 5")
    eta2 = trace.eta_sq
    pos = eta2 > 0.0
    if not pos.all():
        # a trailing zero estimator is a converged run; pairs into the zero
        # tail hold for any q, pairs out of it would be infinite
        first_zero = int(np.argmin(pos))
        if np.any(eta2[first_zero:] > 0.0):
            return RLinearFit(q_fit=1.0, c_fit=math.inf, passed=False)
        eta2 = eta2[:first_zero]
        if eta2.size < 3:
            return RLinearFit(q_fit=0.0, c_fit=1.0, passed=True)
    y = np.log(eta2)
    slope = np.polyfit(np.arange(y.size), y, 1)[0]
    q_ls = float(np.exp(slope))

    max_gap = np.array([np.max(y[k:] - y[:-k]) for k in range(1, y.size)])
    ks = np.arange(1, y.size)

    def log_c(q):
        return float(np.max(max_gap - ks * math.log(q)))

    log_cap = math.log(c_cap)
    if q_ls >= 1.0:
        c_at_one = math.exp(float(np.max(max_gap)))
        return RLinearFit(q_fit=q_ls, c_fit=c_at_one, passed=False)
    if log_c(q_ls) <= log_cap:
        return RLinearFit(q_fit=q_ls, c_fit=math.exp(log_c(q_ls)), passed=True)
    lo, hi = q_ls, 1.0 - 1e-12
    if log_c(hi) > log_cap:
        return RLinearFit(q_fit=1.0, c_fit=math.exp(log_c(hi)), passed=False)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if log_c(mid) <= log_cap:
            hi = mid
        else:
            lo = mid
    return RLinearFit(q_fit=hi, c_fit=math.exp(log_c(hi)), passed=True)


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float
    window: np.ndarray

    @property
    def rate(self):
        """Observed s in eta ~ (#elements - #initial)^(-s)."""
        return -self.slope


def fit_rate(trace, window=None, min_extra=100):
    """Least-squares slope of log eta against log(#elements - #initial).

    The default window drops the preasymptotic iterations with fewer than
    ``min_extra`` extra elements.
    """
    eta = np.sqrt(trace.eta_sq)
    extra = trace.n_elements - trace.n_elements[0]
    if window is None:
        idx = np.nonzero((extra >= min_extra) & (eta > 0.0))[0]
    else:
        idx = np.asarray(window, dtype=np.int64)
    if idx.size < 6:
        raise ValueError("rate fit needs at least 6 points in the window")
    x = np.log(extra[idx])
    y = np.log(eta[idx])
    slope, intercept = np.polyfit(x, y, 1)
    resid = float(np.sqrt(np.mean((y - (slope * x + intercept)) ** 2)))
    return RateFit(slope=float(slope), intercept=float(intercept), residual=resid, window=idx)


@dataclass(frozen=True)
class QuasiOrthogonalityReport:
    ell0: int
    failures: tuple
    usable: tuple
    slack: dict


def check_quasi_orthogonality(trace, epsilon, noise_mult=10.0):
    """First index from which the quasi-Pythagoras inequality always holds.

    Checks ``|U_{l+1} - U_l|^2 <= E_l^2 / (1 - eps) - E_{l+1}^2`` in the
    recorded energy (or nonlinear quasi-metric) against the reference
    solution, using only iterations whose error exceeds ``noise_mult``
    times the reference noise floor. ``epsilon = 0`` asks for the exact
    Pythagoras identity; on non-symmetric problems the report then lists
    the failing steps instead of asserting.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    err = trace.err_energy_sq
    diff = trace.energy_diff_sq
    if not np.any(np.isfinite(err)):
        raise ValueError("trace has no reference energies; run with compute_reference")
    noise = trace.meta.get("noise_floor_err_sq", 0.0)
    floor = noise_mult**2 * noise
    usable, failures, slack = [], [], {}
    for k in range(len(trace) - 1):
        if not (math.isfinite(err[k]) and math.isfinite(err[k + 1]) and math.isfinite(diff[k])):
            continue
        if err[k] <= floor or err[k + 1] <= floor:
            continue
        usable.append(k)
        s = err[k] / (1.0 - epsilon) - err[k + 1] - diff[k]
        slack[k] = s
        if s < 0.0:
            failures.append(k)
    ell0 = (max(failures) + 1) if failures else 0
    return QuasiOrthogonalityReport(
        ell0=ell0, failures=tuple(failures), usable=tuple(usable), slack=slack
    )


@dataclass(frozen=True)
class MarkingOptimalityRow:
    ell: int
    q_d: float
    applicable: bool
    passed: bool


def check_marking_optimality(trace, q_values=(0.5, 0.7, 0.9), theta=None):
    """Doerfler-optimality implication table (refined set carries theta).

    For each step where the estimator contracted by at least a factor
    ``q_d``, checks that the indicators of the refined elements reach the
    theta fraction of the total; steps without that much contraction are
    vacuously passing and reported as not applicable.
    """
    theta = trace.meta.get("theta") if theta is None else theta
    if theta is None:
        raise ValueError("marking optimality needs the run's theta")
    rows = []
    eta = trace.eta_sq
    refined = trace.refined_eta_sq
    for k in range(len(trace) - 1):
        if not math.isfinite(refined[k]):
            continue
        for q_d in q_values:
            applicable = eta[k + 1] <= q_d * eta[k]
            ok = (not applicable) or refined[k] >= theta * eta[k] * (1.0 - 1e-12)
            rows.append(MarkingOptimalityRow(ell=k, q_d=q_d, applicable=applicable, passed=ok))
    return rows


@dataclass(frozen=True)
class DiscreteReliabilityReport:
    ratios: np.ndarray
    max_ratio: float
    min_ratio: float

    @property
    def spread(self):
        return self.max_ratio / self.min_ratio if self.min_ratio > 0 else math.inf


def check_discrete_reliability(trace, min_extra=0):
    """Per-step ratios |grad(U_{l+1} - U_l)|^2 / sum of refined indicators."""
    num = trace.grad_diff_sq
    den = trace.refined_eta_sq
    extra = trace.n_elements - trace.n_elements[0]
    ratios = []
    for k in range(len(trace) - 1):
        if not (math.isfinite(num[k]) and math.isfinite(den[k])):
            continue
        if extra[k] < min_extra:
            continue
        if den[k] <= 0.0:
            ratios.append(0.0)
        else:
            ratios.append(num[k] / den[k])
    ratios = np.asarray(ratios)
    positive = ratios[ratios > 0.0]
    return DiscreteReliabilityReport(
        ratios=ratios,
        max_ratio=float(ratios.max()) if ratios.size else 0.0,
        min_ratio=float(positive.min()) if positive.size else 0.0,
    )


def discrete_reliability_ratio(coarse_mesh, fine_mesh, coarse_report, coarse_sol, fine_sol):
    """Single-pair discrete reliability ratio (0 when nothing was refined)."""
    fine_set = set(int(n) for n in fine_mesh.node_ids)
    refined = [k for k, nid in enumerate(coarse_mesh.node_ids) if int(nid) not in fine_set]
    denom = local_sum(coarse_report, refined)
    if denom == 0.0:
        return 0.0
    moved = transfer(coarse_sol, fine_mesh)
    return grad_norm_sq(fine_mesh, fine_sol.values - moved.values) / denom


@dataclass(frozen=True)
class ConvergenceReport:
    passed: bool
    reduction: float


def check_convergence(trace, factor=100.0):
    """Final estimator must drop below the initial one by ``factor``."""
    eta0 = math.sqrt(trace.eta_sq[0])
    eta_last = math.sqrt(trace.eta_sq[-1])
    if eta0 == 0.0:
        return ConvergenceReport(passed=True, reduction=math.inf)
    return ConvergenceReport(passed=eta_last <= eta0 / factor, reduction=eta0 / max(eta_last, 1e-300))
