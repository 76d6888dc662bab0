"""Second-order correction to the simulated observable and its diagnostics.

The correction combines the four three-time system correlators with the
bath correlator on the time-ordered simplex:

    + <o1(t1) a(t) o2(t2)> C(t1,t2) + <o2(t2) a(t) o1(t1)> C(t2,t1)
    - <o2(t2) o1(t1) a(t)> C(t2,t1) - <a(t) o1(t1) o2(t2)> C(t1,t2)

integrated over t0 <= t2 <= t1 <= t.  Besides the full quadrature the
module provides the cheap upper bound from equal-time correlators, the
single-integral long-time form valid for slowly varying correlators, the
decay-rate fit of the equal-time correlator, and the fourth-order
consistency estimate used as a convergence guard.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .baths import BathCorrelator, correlator_value
from .dynamics import (
    EqualTimeData,
    Ordering,
    PiecewiseHamiltonian,
    TimeGrid,
    correlator_matrices,
    equal_time_correlators,
    evolve_reduced,
    unitary_propagator,
)
from .quadrature import prefix_simplex_trapezoid, simplex_trapezoid
from .spaces import DensityMatrix, QOperator

__all__ = [
    "CorrelatorGrid",
    "CorrectionBreakdown",
    "ConvergenceEstimate",
    "build_correlator_grid",
    "correction_integrand",
    "correction_integral",
    "correction_prefix_totals",
    "correction_upper_bound",
    "longtime_markov_correction",
    "fit_correlator_decay",
    "fourth_order_consistency",
    "save_correlator_grid",
    "load_correlator_grid",
]

MIN_GRID_STEPS = 16
RESOLUTION_FLAG_FRACTION = 0.1

_trapz = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True, eq=False)
class CorrelatorGrid:
    """Sampled three-time correlators on the simplex t0 <= t2 <= t1 <= t.

    ``values[k, i, j]`` holds ordering k of :class:`Ordering` at t1 =
    times[i], t2 = times[j]; only j <= i is meaningful.  ``a_series`` is
    the observable average on the grid from the same source, and
    ``source_tag`` records whether the numbers are ideal-model values or
    stand-ins for measurements on the perturbed simulator.
    """

    grid: TimeGrid
    values: np.ndarray
    a_series: np.ndarray
    source_tag: str = "ideal"

    def __post_init__(self):
        n = self.grid.n_steps
        if self.values.shape != (4, n + 1, n + 1):
            raise ValueError(
                f"values shape {self.values.shape} does not match grid with {n} steps"
            )
        if self.a_series.shape != (n + 1,):
            raise ValueError("a_series must have one entry per grid point")
        if self.source_tag not in ("ideal", "perturbed-measured"):
            raise ValueError(f"unknown source_tag {self.source_tag!r}")

    @property
    def times(self) -> np.ndarray:
        return self.grid.times()

    @property
    def a_final(self) -> complex:
        return complex(self.a_series[-1])

    def equal_time(self, ordering: Ordering) -> np.ndarray:
        idx = np.arange(self.grid.n_steps + 1)
        return self.values[ordering.index, idx, idx]

    def equal_time_data(self) -> EqualTimeData:
        return EqualTimeData(
            grid=self.grid,
            sandwich=self.equal_time(Ordering.O1_A_O2),
            oo_before=self.equal_time(Ordering.O2_O1_A),
            oo_after=self.equal_time(Ordering.A_O1_O2),
            a_series=self.a_series,
        )

    def hermitian_pairing_defect(self) -> float:
        """Max deviation of the conjugate pairings on the simplex."""
        tri = np.tril_indices(self.grid.n_steps + 1)
        d1 = np.abs(
            self.values[Ordering.O2_O1_A.index][tri]
            - np.conj(self.values[Ordering.A_O1_O2.index][tri])
        ).max()
        d2 = np.abs(
            self.values[Ordering.O1_A_O2.index][tri]
            - np.conj(self.values[Ordering.O2_A_O1.index][tri])
        ).max()
        return float(max(d1, d2))

    @classmethod
    def constant(cls, grid: TimeGrid, ordering_values, a_value: complex,
                 source_tag: str = "ideal") -> "CorrelatorGrid":
        """Grid with time-independent correlators (worst-case scenarios)."""
        n = grid.n_steps
        values = np.empty((4, n + 1, n + 1), dtype=complex)
        for k, v in enumerate(ordering_values):
            values[k].fill(complex(v))
        a_series = np.full(n + 1, complex(a_value))
        return cls(grid=grid, values=values, a_series=a_series, source_tag=source_tag)

    def halved(self) -> "CorrelatorGrid":
        return CorrelatorGrid(
            grid=self.grid.halved(),
            values=self.values[:, ::2, ::2],
            a_series=self.a_series[::2],
            source_tag=self.source_tag,
        )


def build_correlator_grid(
    model,
    rho0: DensityMatrix,
    o: QOperator,
    a: QOperator,
    grid: TimeGrid,
    o2: QOperator | None = None,
    source_tag: str = "ideal",
    method: str = "auto",
) -> CorrelatorGrid:
    """Sample all four correlator orderings of the model on the simplex."""
    data = correlator_matrices(model, rho0, o, a, grid, o2=o2, method=method)
    return CorrelatorGrid(
        grid=grid, values=data.values, a_series=data.a_series, source_tag=source_tag
    )


def _bath_meshes(bath: BathCorrelator, times: np.ndarray):
    forward = correlator_value(bath, times[:, None], times[None, :])
    backward = correlator_value(bath, times[None, :], times[:, None])
    return forward, backward


def _point_combination(vals, c_fwd, c_bwd) -> complex:
    t_fwd = vals[0] * c_fwd - vals[3] * c_fwd
    t_bwd = vals[1] * c_bwd - vals[2] * c_bwd
    return t_fwd + t_bwd


def correction_integrand(
    t1: float, t2: float, correlators: CorrelatorGrid, bath: BathCorrelator
) -> complex:
    """The four-term combination at one simplex point (t1, t2 on the grid)."""
    grid = correlators.grid
    if not (grid.t0 <= t2 <= t1 <= grid.t):
        raise ValueError(f"point ({t1}, {t2}) outside the simplex of {grid}")
    dt = grid.dt
    i = int(round((t1 - grid.t0) / dt))
    j = int(round((t2 - grid.t0) / dt))
    for val, name in ((i, "t1"), (j, "t2")):
        if not 0 <= val <= grid.n_steps:
            raise ValueError(f"{name} not on the grid")
    if abs(grid.t0 + i * dt - t1) > 1e-9 * max(1.0, abs(t1)) or abs(
        grid.t0 + j * dt - t2
    ) > 1e-9 * max(1.0, abs(t2)):
        raise ValueError("requested point does not lie on the sampled grid")
    c_fwd = correlator_value(bath, t1, t2)
    c_bwd = correlator_value(bath, t2, t1)
    return _point_combination(correlators.values[:, i, j], c_fwd, c_bwd)


def _term_integrals(correlators: CorrelatorGrid, bath: BathCorrelator):
    times = correlators.times
    c_fwd, c_bwd = _bath_meshes(bath, times)
    signs = (1.0, 1.0, -1.0, -1.0)
    meshes = (c_fwd, c_bwd, c_bwd, c_fwd)
    return [
        sign * simplex_trapezoid(correlators.values[k] * mesh, correlators.grid.dt)
        for k, (sign, mesh) in enumerate(zip(signs, meshes))
    ]


@dataclass(frozen=True)
class CorrectionBreakdown:
    """Integrated second-order correction and its quadrature diagnostics."""

    term_values: tuple[complex, complex, complex, complex]
    total: complex
    grid_resolution: int
    estimated_quadrature_error: float
    resolution_flagged: bool

    def to_record(self) -> dict:
        rec = {
            "total_re": self.total.real,
            "total_im": self.total.imag,
            "grid_resolution": self.grid_resolution,
            "estimated_quadrature_error": self.estimated_quadrature_error,
            "resolution_flagged": self.resolution_flagged,
        }
        for k, term in enumerate(self.term_values):
            rec[f"term{k}_re"] = term.real
            rec[f"term{k}_im"] = term.imag
        return rec


def correction_integral(
    correlators: CorrelatorGrid, bath: BathCorrelator
) -> CorrectionBreakdown:
    """Trapezoidal quadrature of the correction over the simplex.

    The quadrature error is estimated by comparing against the
    half-resolution subgrid (second-order Richardson); a ratio above 10%
    of the total flags the resolution as too coarse without failing.
    """
    n = correlators.grid.n_steps
    if n < MIN_GRID_STEPS:
        raise ValueError(f"grid resolution {n} below minimum {MIN_GRID_STEPS}")
    terms = _term_integrals(correlators, bath)
    total = (terms[0] + terms[3]) + (terms[1] + terms[2])

    est = float("nan")
    flagged = False
    if n % 2 == 0:
        coarse_terms = _term_integrals(correlators.halved(), bath)
        coarse_total = (coarse_terms[0] + coarse_terms[3]) + (
            coarse_terms[1] + coarse_terms[2]
        )
        est = abs(total - coarse_total) / 3.0
        if abs(total) > 0:
            flagged = est > RESOLUTION_FLAG_FRACTION * abs(total)
    return CorrectionBreakdown(
        term_values=tuple(terms),
        total=total,
        grid_resolution=n,
        estimated_quadrature_error=est,
        resolution_flagged=flagged,
    )


def correction_prefix_totals(
    correlators: CorrelatorGrid, bath: BathCorrelator
) -> np.ndarray:
    """Correction totals for every prefix endpoint of the grid.

    Valid when the sampled correlators do not depend on the final
    measurement time (time-independent worst cases, imported data).
    """
    times = correlators.times
    c_fwd, c_bwd = _bath_meshes(bath, times)
    dt = correlators.grid.dt
    fwd_part = prefix_simplex_trapezoid(
        (correlators.values[0] - correlators.values[3]) * c_fwd, dt
    )
    bwd_part = prefix_simplex_trapezoid(
        (correlators.values[1] - correlators.values[2]) * c_bwd, dt
    )
    return fwd_part + bwd_part


def _abs_weight(bath: BathCorrelator, span: float) -> float:
    """Conservative bound on the triangle integral of |C|: sum of (lam/gamma)*span terms."""
    total = 0.0
    for lam, gamma, _ in bath.terms:
        if gamma > 0:
            total += abs(lam) / gamma * span
        else:
            total += abs(lam) * span * span / 2.0
    return total


def _equal_time_maxima(equal_time) -> tuple[float, float, float]:
    if isinstance(equal_time, (EqualTimeData, CorrelatorGrid)):
        data = (
            equal_time.equal_time_data()
            if isinstance(equal_time, CorrelatorGrid)
            else equal_time
        )
        return (
            float(np.abs(data.sandwich).max()),
            float(np.abs(data.oo_after).max()),
            float(np.abs(data.oo_before).max()),
        )
    sandwich, oo_after, oo_before = equal_time
    return float(abs(sandwich)), float(abs(oo_after)), float(abs(oo_before))


def correction_upper_bound(equal_time, bath: BathCorrelator, t0: float, t: float) -> float:
    """Bound from equal-time correlators at their sampled maxima.

    ``equal_time`` is an :class:`EqualTimeData`, a :class:`CorrelatorGrid`,
    or a plain triple (sandwich, after, before) of correlator values.
    """
    sandwich_max, after_max, before_max = _equal_time_maxima(equal_time)
    span = float(t) - float(t0)
    if span < 0:
        raise ValueError("need t >= t0")
    return _abs_weight(bath, span) * (2 * sandwich_max + after_max + before_max)


def _square_is_identity(o: QOperator, tol: float = 1e-10) -> bool:
    sq = o.elements @ o.elements
    return bool(np.abs(sq - np.eye(o.dim)).max() <= tol)


def longtime_markov_correction(
    model, rho0: DensityMatrix, o: QOperator, a: QOperator,
    bath: BathCorrelator, grid: TimeGrid,
) -> complex:
    """Single-integral form of the correction for a fast-decaying bath.

    Requires o squared to be the identity and every bath term to decay.
    The bath enters only through the integrated weight
    2 * sum_k lam_k gamma_k / (gamma_k^2 + Omega_k^2).
    """
    if not _square_is_identity(o):
        raise ValueError(
            "single-integral form requires the coupling operator to square to the identity"
        )
    weight = 0.0
    for lam, gamma, omega in bath.terms:
        if gamma <= 0:
            raise ValueError("single-integral form requires decaying bath terms")
        weight += lam * 2.0 * gamma / (gamma * gamma + omega * omega)
    eq = equal_time_correlators(model, rho0, o, a, grid)
    integrand = eq.sandwich - eq.a_series[-1]
    integral = _trapz(integrand, dx=grid.dt)
    return complex(weight * integral)


def fit_correlator_decay(source, tail_fraction: float = 0.1) -> float | None:
    """Decay rate of the equal-time sandwich correlator toward its stationary value.

    The stationary value is estimated as the mean over the largest-lag
    ``tail_fraction`` of samples; the rate comes from a least-squares line
    through log|corr - stationary| at lags below 60% of the window.
    Returns None when the correlator does not decay.
    """
    if isinstance(source, CorrelatorGrid):
        data = source.equal_time_data()
    elif isinstance(source, EqualTimeData):
        data = source
    else:
        raise TypeError("source must be a CorrelatorGrid or EqualTimeData")
    series = np.asarray(data.sandwich)
    if series.size < 8:
        raise ValueError("need at least 8 equal-time samples to fit a decay rate")
    lags = data.grid.t - data.grid.times()

    n_tail = max(2, int(np.ceil(tail_fraction * series.size)))
    tail_idx = np.argsort(lags)[-n_tail:]
    stationary = series[tail_idx].mean()

    resid = np.abs(series - stationary)
    scale = np.abs(series).max() + abs(stationary)
    if resid.max() <= 1e-9 * max(scale, 1e-30):
        return None

    max_lag = lags.max()
    mask = (lags <= 0.6 * max_lag) & (resid > 1e-13 * resid.max())
    if mask.sum() < 8:
        mask = resid > 1e-13 * resid.max()
    if mask.sum() < 2:
        return None
    slope = np.polyfit(lags[mask], np.log(resid[mask]), 1)[0]
    if slope >= -1e-12:
        return None
    return float(-slope)


@dataclass(frozen=True)
class ConvergenceEstimate:
    """Fourth-order consistency indicator for the perturbative estimate.

    ``fourth_order_ratio`` approximates |fourth-order correction| over the
    observable: the square of ``ratio`` when the equal-time correlator
    decays, or the quadratic-in-time growth bound when it does not
    (``separable_growth`` set).
    """

    decay_rate: float | None
    ratio: complex
    fourth_order_ratio: float
    separable_growth: bool
    five_term_residual: float | None = None


def _five_term_combination(model, rho0, o, a, grid) -> tuple[complex, complex]:
    """Equal-time five-operator combination at the final time and <a(t)>."""
    if isinstance(model, PiecewiseHamiltonian):
        u = unitary_propagator(model, grid.t0, grid.t).elements
        rho_t = u @ rho0.elements @ u.conj().T
    else:
        rho_t = evolve_reduced(model, rho0, grid.t0, grid.t).elements
    om, am = o.elements, a.elements
    oo = om @ om
    terms = [
        oo @ oo @ am,
        oo @ om @ am @ om,
        oo @ am @ oo,
        om @ am @ om @ oo,
        am @ oo @ oo,
    ]
    coeffs = (1.0, -4.0, 6.0, -4.0, 1.0)
    combo = sum(c * np.trace(rho_t @ term) for c, term in zip(coeffs, terms))
    return complex(combo), complex(np.trace(rho_t @ am))


def fourth_order_consistency(
    x: complex,
    kappa: float | None,
    bath: BathCorrelator,
    model=None,
    rho0: DensityMatrix | None = None,
    o: QOperator | None = None,
    a: QOperator | None = None,
    grid: TimeGrid | None = None,
    bound_ratio: float | None = None,
) -> ConvergenceEstimate:
    """Fourth-order estimate from the second-order ratio x.

    With a fitted decay rate the estimate is |x|^2.  Without one the
    separable contributions grow quadratically in time and the estimate
    falls back to the squared bound ratio.  When the model context is
    supplied and the coupling operator squares to the identity, the
    explicit five-term equal-time combination is evaluated and compared
    against 16 (lam/(gamma*kappa))^2 <a(t)>; the relative deviation is
    reported as ``five_term_residual``.
    """
    if kappa is None:
        if bound_ratio is None:
            raise ValueError("bound_ratio is required when no decay rate is available")
        return ConvergenceEstimate(
            decay_rate=None,
            ratio=complex(x),
            fourth_order_ratio=float(bound_ratio) ** 2,
            separable_growth=True,
        )

    residual = None
    if model is not None and len(bath.terms) == 1 and _square_is_identity(o):
        lam, gamma, _ = bath.terms[0]
        if gamma > 0:
            scale = (lam / (gamma * kappa)) ** 2
            combo, a_now = _five_term_combination(model, rho0, o, a, grid)
            lhs = scale * combo
            rhs = 16.0 * scale * a_now
            denom = max(abs(rhs), 1e-30)
            residual = float(abs(lhs - rhs) / denom)
    return ConvergenceEstimate(
        decay_rate=float(kappa),
        ratio=complex(x),
        fourth_order_ratio=float(abs(x) ** 2),
        separable_growth=False,
        five_term_residual=residual,
    )


# ---------------------------------------------------------------------------
# grid CSV interchange
# ---------------------------------------------------------------------------


def save_correlator_grid(path, correlators: CorrelatorGrid) -> None:
    """Write the simplex samples as CSV rows t1, t2, ordering_tag, re, im."""
    times = correlators.times
    lines = ["t1,t2,ordering_tag,re,im"]
    for ordering in Ordering:
        block = correlators.values[ordering.index]
        for i in range(times.size):
            t1 = times[i]
            for j in range(i + 1):
                v = block[i, j]
                lines.append(
                    f"{t1:.15e},{times[j]:.15e},{ordering.tag},{v.real:.15e},{v.imag:.15e}"
                )
    # The observable series rides along under a reserved tag.
    for i, t1 in enumerate(times):
        v = correlators.a_series[i]
        lines.append(f"{t1:.15e},{t1:.15e},a_series,{v.real:.15e},{v.imag:.15e}")
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def load_correlator_grid(path, source_tag: str = "perturbed-measured") -> CorrelatorGrid:
    """Read a grid written by :func:`save_correlator_grid`."""
    by_tag: dict[str, list[tuple[float, float, complex]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            by_tag.setdefault(row["ordering_tag"], []).append(
                (
                    float(row["t1"]),
                    float(row["t2"]),
                    float(row["re"]) + 1j * float(row["im"]),
                )
            )
    if "a_series" not in by_tag:
        raise ValueError("grid file is missing the observable series")
    all_times = sorted({t1 for rows in by_tag.values() for t1, _, _ in rows})
    t0, t = all_times[0], all_times[-1]
    n = len(all_times) - 1
    if n < 1:
        raise ValueError("grid file holds fewer than two time points")
    dt = (t - t0) / n
    spacing = np.diff(all_times)
    if np.abs(spacing - dt).max() > 1e-9 * max(1.0, abs(t)):
        raise ValueError("grid times are not uniformly spaced")
    grid = TimeGrid(t0, t, n)

    def index(time: float) -> int:
        return int(round((time - t0) / dt))

    values = np.zeros((4, n + 1, n + 1), dtype=complex)
    seen = np.zeros((4, n + 1, n + 1), dtype=bool)
    for ordering in Ordering:
        rows = by_tag.get(ordering.tag)
        if not rows:
            raise ValueError(f"grid file is missing ordering {ordering.tag}")
        for t1, t2, v in rows:
            i, j = index(t1), index(t2)
            values[ordering.index, i, j] = v
            seen[ordering.index, i, j] = True
    tri = np.tril_indices(n + 1)
    if not seen[:, tri[0], tri[1]].all():
        raise ValueError("grid file does not cover the full simplex")

    a_series = np.zeros(n + 1, dtype=complex)
    for t1, _, v in by_tag["a_series"]:
        a_series[index(t1)] = v
    return CorrelatorGrid(grid=grid, values=values, a_series=a_series, source_tag=source_tag)
