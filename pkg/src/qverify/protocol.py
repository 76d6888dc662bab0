"""Reliability protocol: measure, estimate the correction, compare, decide.

The pipeline samples the observable and the three-time correlators from a
model standing in for the (ideal or perturbed) simulator, integrates the
second-order correction, and turns the ratio against the observable into a
verdict at a threshold eta.  A reliable verdict additionally requires the
fourth-order consistency guard: either the correlators decay (long-time
convergent regime) or the squared ratio stays below eta^2.

Verdict strings are exactly "reliable", "unreliable", "inconclusive".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .baths import BathCorrelator
from .dynamics import LindbladModel, TimeGrid
from .estimator import (
    ConvergenceEstimate,
    CorrelatorGrid,
    build_correlator_grid,
    correction_integral,
    correction_prefix_totals,
    correction_upper_bound,
    fit_correlator_decay,
    fourth_order_consistency,
    longtime_markov_correction,
)
from .spaces import DensityMatrix, QOperator

__all__ = [
    "ReliabilityReport",
    "Channel",
    "MultiChannelConfig",
    "HorizonResult",
    "run_protocol",
    "run_protocol_suite",
    "run_protocol_bounded",
    "run_protocol_multichannel",
    "reliable_time_horizon",
    "decide_verdict",
    "DEFAULT_ETA",
]

DEFAULT_ETA = 0.1
ABS_FLOOR_SCALE = 1e-6
ALL_TIMES_STABILITY = 0.02
RELIABLE = "reliable"
UNRELIABLE = "unreliable"
INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class ReliabilityReport:
    """Outcome of one protocol run for one observable."""

    t: float
    a_value: complex
    c2_total: complex
    c2_bound: float
    ratio: float
    bound_ratio: float
    threshold_eta: float
    verdict: str
    convergence: ConvergenceEstimate | None
    source_tag: str
    observable: str = ""
    mode: str = "full"
    all_times: bool = False
    resolution_flagged: bool = False
    by_accident: bool = False
    quadrature_error: float = float("nan")
    perturbation_source: str = "bath"  # reserved for disorder-type sources
    channel_breakdown: tuple = ()
    n_channel_pairs: int = 1

    def to_json_dict(self) -> dict:
        conv = self.convergence
        return {
            "t": self.t,
            "a_value_re": self.a_value.real,
            "a_value_im": self.a_value.imag,
            "c2_re": self.c2_total.real,
            "c2_im": self.c2_total.imag,
            "c2_bound": self.c2_bound,
            "ratio": self.ratio,
            "bound_ratio": self.bound_ratio,
            "eta": self.threshold_eta,
            "verdict": self.verdict,
            "observable": self.observable,
            "mode": self.mode,
            "source_tag": self.source_tag,
            "all_times": self.all_times,
            "resolution_flagged": self.resolution_flagged,
            "by_accident": self.by_accident,
            "quadrature_error": self.quadrature_error,
            "perturbation_source": self.perturbation_source,
            "decay_rate": None if conv is None else conv.decay_rate,
            "fourth_order_ratio": None if conv is None else conv.fourth_order_ratio,
            "separable_growth": False if conv is None else conv.separable_growth,
            "n_channel_pairs": self.n_channel_pairs,
            "channel_breakdown": [
                {"name": name, "c2_re": c2.real, "c2_im": c2.imag}
                for name, c2 in self.channel_breakdown
            ],
        }

    CSV_FIELDS = (
        "observable", "t", "a_value_re", "a_value_im", "c2_re", "c2_im",
        "c2_bound", "ratio", "bound_ratio", "eta", "verdict", "mode",
        "source_tag", "all_times", "by_accident",
    )

    def to_csv_row(self) -> str:
        d = self.to_json_dict()
        cells = []
        for name in self.CSV_FIELDS:
            v = d[name]
            if isinstance(v, float):
                cells.append(f"{v:.15e}")
            elif isinstance(v, bool):
                cells.append(str(v).lower())
            else:
                cells.append(str(v))
        return ",".join(cells)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.CSV_FIELDS)

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)


def decide_verdict(
    eta: float,
    a_abs: float,
    floor: float,
    ratio: float,
    guard_ratio: float | None,
    all_times: bool,
    mode: str = "full",
) -> str:
    """Apply the threshold and the fourth-order guard to one measured ratio.

    ``guard_ratio`` is the fourth-order estimate relative to the observable;
    the guard passes when the long-time regime is established or the
    estimate stays below eta^2.  Bounded mode adds an inconclusive band up
    to 3*eta because the bound is deliberately conservative.
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if a_abs <= floor:
        return INCONCLUSIVE
    guard_ok = all_times or (guard_ratio is not None and guard_ratio <= eta * eta)
    if ratio <= eta:
        return RELIABLE if guard_ok else INCONCLUSIVE
    if mode == "bounded" and ratio <= 3 * eta:
        return INCONCLUSIVE
    return UNRELIABLE


def _abs_floor(a: QOperator) -> float:
    return ABS_FLOOR_SCALE * a.norm()


def _square_is_identity(o: QOperator, tol: float = 1e-10) -> bool:
    return bool(np.abs(o.elements @ o.elements - np.eye(o.dim)).max() <= tol)


def _detect_all_times(model, rho0, o, a, bath, grid) -> tuple[bool, float | None]:
    """Long-time convergent regime check; returns (flag, kappa if fitted)."""
    if bath.total_amplitude == 0.0:
        return True, None
    markovian = isinstance(model, LindbladModel) and model.total_jump_rate > 0
    if not markovian or not _square_is_identity(o):
        return False, None
    if any(gamma <= 0 for _, gamma, _ in bath.terms):
        return False, None
    late = longtime_markov_correction(model, rho0, o, a, bath, grid)
    sub = TimeGrid(grid.t0, grid.t0 + 0.8 * grid.span, max(16, int(0.8 * grid.n_steps)))
    early = longtime_markov_correction(model, rho0, o, a, bath, sub)
    scale = max(abs(late), 1e-30)
    return bool(abs(late - early) <= ALL_TIMES_STABILITY * scale), None


def _assemble_full_report(
    model, rho0, a, o, bath, grid, eta, corr: CorrelatorGrid,
    observable_name: str, mode: str,
) -> ReliabilityReport:
    breakdown = correction_integral(corr, bath)
    a_value = corr.a_final
    a_abs = abs(a_value)
    floor = _abs_floor(a)

    bound = correction_upper_bound(corr, bath, grid.t0, grid.t)
    ratio = abs(breakdown.total) / max(a_abs, floor)
    bound_ratio = bound / max(a_abs, floor)

    kappa = fit_correlator_decay(corr)
    x = breakdown.total / a_value if a_abs > floor else complex(ratio)
    convergence = fourth_order_consistency(
        x, kappa, bath,
        model=model, rho0=rho0, o=o, a=a, grid=grid,
        bound_ratio=bound_ratio if kappa is None else None,
    )
    all_times, _ = _detect_all_times(model, rho0, o, a, bath, grid)
    if kappa is None and bath.total_amplitude > 0:
        all_times = False

    verdict = decide_verdict(
        eta, a_abs, floor, ratio,
        guard_ratio=convergence.fourth_order_ratio,
        all_times=all_times, mode="full",
    )
    return ReliabilityReport(
        t=grid.t,
        a_value=a_value,
        c2_total=breakdown.total,
        c2_bound=bound,
        ratio=ratio,
        bound_ratio=bound_ratio,
        threshold_eta=eta,
        verdict=verdict,
        convergence=convergence,
        source_tag=corr.source_tag,
        observable=observable_name,
        mode=mode,
        all_times=all_times,
        resolution_flagged=breakdown.resolution_flagged,
        quadrature_error=breakdown.estimated_quadrature_error,
    )


def run_protocol(
    model,
    rho0: DensityMatrix,
    a: QOperator,
    o: QOperator,
    bath: BathCorrelator,
    grid: TimeGrid,
    eta: float = DEFAULT_ETA,
    source_tag: str = "ideal",
    correlators: CorrelatorGrid | None = None,
    observable_name: str = "",
) -> ReliabilityReport:
    """Full protocol: sample correlators, integrate the correction, decide.

    ``correlators`` short-circuits the sampling step so externally measured
    grids can be fed through the identical decision path.
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if correlators is None:
        correlators = build_correlator_grid(
            model, rho0, o, a, grid, source_tag=source_tag
        )
    return _assemble_full_report(
        model, rho0, a, o, bath, grid, eta, correlators, observable_name, mode="full"
    )


def run_protocol_suite(
    model,
    rho0: DensityMatrix,
    observables,
    o: QOperator,
    bath: BathCorrelator,
    grid: TimeGrid,
    eta: float = DEFAULT_ETA,
    source_tag: str = "ideal",
) -> list[ReliabilityReport]:
    """Run the protocol per observable and cross-flag accidental passes.

    When any observable in the list fails, the remaining (non-failing)
    reports are marked ``by_accident``: a small ratio for one observable is
    not trustworthy while a sibling observable exposes a large error.
    """
    reports = [
        run_protocol(
            model, rho0, op, o, bath, grid, eta,
            source_tag=source_tag, observable_name=name,
        )
        for name, op in observables
    ]
    if any(r.verdict == UNRELIABLE for r in reports):
        reports = [
            r if r.verdict == UNRELIABLE else _replace(r, by_accident=True)
            for r in reports
        ]
    return reports


def _replace(report: ReliabilityReport, **changes) -> ReliabilityReport:
    from dataclasses import replace

    return replace(report, **changes)


def run_protocol_bounded(
    model,
    rho0: DensityMatrix,
    a: QOperator,
    o: QOperator,
    bath: BathCorrelator,
    grid: TimeGrid,
    eta: float = DEFAULT_ETA,
    source_tag: str = "ideal",
    observable_name: str = "",
) -> ReliabilityReport:
    """Bound-only protocol from equal-time correlators, no simplex sampling.

    Strictly more conservative than the full protocol: the bound ratio
    dominates the full ratio by construction, and verdicts between eta and
    3*eta are inconclusive rather than unreliable.
    """
    from .dynamics import equal_time_correlators

    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    eq = equal_time_correlators(model, rho0, o, a, grid)
    a_value = eq.a_final
    a_abs = abs(a_value)
    floor = _abs_floor(a)
    bound = correction_upper_bound(eq, bath, grid.t0, grid.t)
    bound_ratio = bound / max(a_abs, floor)
    all_times, _ = _detect_all_times(model, rho0, o, a, bath, grid)
    verdict = decide_verdict(
        eta, a_abs, floor, bound_ratio,
        guard_ratio=bound_ratio**2, all_times=all_times, mode="bounded",
    )
    return ReliabilityReport(
        t=grid.t,
        a_value=a_value,
        c2_total=complex("nan"),
        c2_bound=bound,
        ratio=float("nan"),
        bound_ratio=bound_ratio,
        threshold_eta=eta,
        verdict=verdict,
        convergence=None,
        source_tag=source_tag,
        observable=observable_name,
        mode="bounded",
        all_times=all_times,
    )


@dataclass(frozen=True)
class Channel:
    """One bath-coupling channel of a multichannel configuration."""

    operator: QOperator
    bath: BathCorrelator
    name: str = ""


@dataclass(frozen=True)
class MultiChannelConfig:
    """Channels plus optional symmetric cross-correlators between their baths."""

    channels: tuple[Channel, ...]
    cross_terms: bool = False
    cross_baths: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.channels:
            raise ValueError("need at least one channel")
        if self.cross_terms:
            n = len(self.channels)
            for i in range(n):
                for j in range(n):
                    if i != j and self._cross_key(i, j) not in self.cross_baths:
                        raise ValueError(
                            f"cross_terms enabled but cross bath for pair ({i}, {j}) missing"
                        )

    @staticmethod
    def _cross_key(i: int, j: int) -> tuple[int, int]:
        return (min(i, j), max(i, j))

    def cross_bath(self, i: int, j: int) -> BathCorrelator:
        return self.cross_baths[self._cross_key(i, j)]


def run_protocol_multichannel(
    model,
    rho0: DensityMatrix,
    a: QOperator,
    config: MultiChannelConfig,
    grid: TimeGrid,
    eta: float = DEFAULT_ETA,
    source_tag: str = "ideal",
    observable_name: str = "",
) -> ReliabilityReport:
    """Protocol for several coupling channels.

    Independent baths contribute additively (N evaluated pairs); with
    cross_terms every ordered pair contributes through the symmetric cross
    correlators (N^2 evaluated pairs).
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    channels = config.channels
    n_ch = len(channels)

    total = 0j
    bound = 0.0
    breakdowns = []
    kappas = []
    flagged = False
    quad_err = 0.0
    n_pairs = 0
    all_times_every = True
    for i, ch in enumerate(channels):
        corr = build_correlator_grid(
            model, rho0, ch.operator, a, grid, source_tag=source_tag
        )
        part = correction_integral(corr, bath=ch.bath)
        total += part.total
        bound += correction_upper_bound(corr, ch.bath, grid.t0, grid.t)
        flagged = flagged or part.resolution_flagged
        if np.isfinite(part.estimated_quadrature_error):
            quad_err += part.estimated_quadrature_error
        kappas.append(fit_correlator_decay(corr))
        breakdowns.append((ch.name or f"channel{i}", part.total))
        at, _ = _detect_all_times(model, rho0, ch.operator, a, ch.bath, grid)
        all_times_every = all_times_every and at
        n_pairs += 1
        a_value = corr.a_final

    if config.cross_terms:
        for i in range(n_ch):
            for j in range(n_ch):
                if i == j:
                    continue
                corr_ij = build_correlator_grid(
                    model, rho0, channels[i].operator, a, grid,
                    o2=channels[j].operator, source_tag=source_tag,
                )
                part = correction_integral(corr_ij, config.cross_bath(i, j))
                total += part.total
                bound += correction_upper_bound(
                    corr_ij, config.cross_bath(i, j), grid.t0, grid.t
                )
                breakdowns.append((f"cross{i}{j}", part.total))
                n_pairs += 1

    a_abs = abs(a_value)
    floor = _abs_floor(a)
    ratio = abs(total) / max(a_abs, floor)
    bound_ratio = bound / max(a_abs, floor)

    kappa = None
    if all(k is not None for k in kappas):
        kappa = float(np.mean([k for k in kappas]))
    x = total / a_value if a_abs > floor else complex(ratio)
    convergence = fourth_order_consistency(
        x, kappa, channels[0].bath,
        bound_ratio=bound_ratio if kappa is None else None,
    )
    verdict = decide_verdict(
        eta, a_abs, floor, ratio,
        guard_ratio=convergence.fourth_order_ratio,
        all_times=all_times_every, mode="full",
    )
    return ReliabilityReport(
        t=grid.t,
        a_value=a_value,
        c2_total=total,
        c2_bound=bound,
        ratio=ratio,
        bound_ratio=bound_ratio,
        threshold_eta=eta,
        verdict=verdict,
        convergence=convergence,
        source_tag=source_tag,
        observable=observable_name,
        mode="multichannel",
        all_times=all_times_every,
        resolution_flagged=flagged,
        quadrature_error=quad_err,
        channel_breakdown=tuple(breakdowns),
        n_channel_pairs=n_pairs,
    )


@dataclass(frozen=True)
class HorizonResult:
    """Largest grid time at which the reliability condition holds."""

    time: float | None
    all_times: bool = False
    times: np.ndarray | None = None
    ratios: np.ndarray | None = None


def reliable_time_horizon(
    source,
    rho0: DensityMatrix | None = None,
    a: QOperator | None = None,
    o: QOperator | None = None,
    bath: BathCorrelator | None = None,
    grid: TimeGrid | None = None,
    eta: float = DEFAULT_ETA,
    stride: int | None = None,
) -> HorizonResult:
    """Scan the grid for the largest time with ratio below eta.

    ``source`` is either a model (correlators are resampled for every
    candidate final time) or a :class:`CorrelatorGrid` whose values do not
    depend on the final time (worst-case or imported grids); the latter is
    evaluated with prefix quadrature at every grid point.  Returns the
    horizon time, None when no time qualifies, or the final time with the
    ``all_times`` flag when the long-time regime holds.
    """
    if isinstance(source, CorrelatorGrid):
        corr = source
        grid = corr.grid
        if bath.total_amplitude == 0.0:
            return HorizonResult(time=grid.t, all_times=True)
        totals = correction_prefix_totals(corr, bath)
        ratios = np.abs(totals) / np.maximum(np.abs(corr.a_series), 1e-30)
        ok = np.nonzero(ratios[1:] <= eta)[0]
        time = float(corr.times[ok[-1] + 1]) if ok.size else None
        return HorizonResult(
            time=time, all_times=False, times=corr.times, ratios=ratios
        )

    model = source
    if bath.total_amplitude == 0.0:
        return HorizonResult(time=grid.t, all_times=True)
    all_times, _ = _detect_all_times(model, rho0, o, a, bath, grid)
    if all_times:
        report = run_protocol(model, rho0, a, o, bath, grid, eta)
        if report.verdict == RELIABLE:
            return HorizonResult(time=grid.t, all_times=True)

    n = grid.n_steps
    if stride is None:
        stride = max(1, n // 64)
    times_out, ratios_out = [], []
    horizon = None
    from .estimator import MIN_GRID_STEPS

    for k in range(MIN_GRID_STEPS, n + 1, stride):
        sub = TimeGrid(grid.t0, grid.times()[k], k)
        corr = build_correlator_grid(model, rho0, o, a, sub)
        breakdown = correction_integral(corr, bath)
        a_abs = max(abs(corr.a_final), 1e-30)
        ratio = abs(breakdown.total) / a_abs
        times_out.append(sub.t)
        ratios_out.append(ratio)
        if ratio <= eta:
            horizon = sub.t
    return HorizonResult(
        time=horizon,
        all_times=False,
        times=np.array(times_out),
        ratios=np.array(ratios_out),
    )
