"""Brute-force ground truth: exact evolution of system plus discretized bath.

The full composite model is diagonalized once per Hamiltonian segment and
propagated spectrally, so the reference dynamics carries no step error.
It measures the actual deviation of the coupled simulator from the ideal
one, produces genuinely perturbed correlators for the self-consistency
checks, and validates reliability reports against the measured error.

Validation is only meaningful before the revival of the finite bath comb;
every record carries the recurrence time stamp.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .baths import DiscretizedBath
from .dynamics import (
    Ordering,
    PiecewiseHamiltonian,
    LindbladModel,
    TimeGrid,
    correlator_matrices,
    expectation_series,
    three_time_correlator,
)
from .estimator import CorrelatorGrid
from .protocol import ReliabilityReport, RELIABLE
from .spaces import CompositeSpace, DensityMatrix, DimensionError, QOperator, boson_annihilation

__all__ = [
    "SystemModel",
    "FullModel",
    "ValidationRecord",
    "full_expectation",
    "actual_error",
    "perturbed_correlator",
    "build_perturbed_grid",
    "validate_estimate",
    "append_validation_records",
]

DEFAULT_DIM_CAP = 4096


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Description of the ideal simulator.

    ``jump_ops`` are optional reduced-dynamics channels used when the ideal
    simulator is modelled as open (measured-data stand-ins); the oracle
    itself always evolves the closed composite system.
    """

    hamiltonian: PiecewiseHamiltonian
    rho0: DensityMatrix
    coupling_ops: tuple[QOperator, ...]
    jump_ops: tuple = ()

    def __post_init__(self):
        if not self.coupling_ops:
            raise ValueError("system model needs at least one coupling operator")
        for op in self.coupling_ops:
            if op.space != self.hamiltonian.space:
                raise DimensionError("coupling operator space mismatch")
        if self.rho0.space != self.hamiltonian.space:
            raise DimensionError("initial state space mismatch")

    @property
    def space(self) -> CompositeSpace:
        return self.hamiltonian.space

    def dynamical_model(self):
        """The model used for ideal-side propagation and correlators."""
        if self.jump_ops:
            return LindbladModel(self.hamiltonian, self.jump_ops)
        return self.hamiltonian


def _thermal_mode_state(dim: int, occupation: float) -> np.ndarray:
    if occupation <= 0:
        state = np.zeros((dim, dim), dtype=complex)
        state[0, 0] = 1.0
        return state
    ratio = occupation / (1.0 + occupation)
    weights = ratio ** np.arange(dim)
    weights /= weights.sum()
    return np.diag(weights).astype(complex)


@dataclass(frozen=True, eq=False)
class FullModel:
    """Composite system (x) external bath modes with a scalable coupling.

    ``coupling_scale`` multiplies the system-bath coupling; scale 1 is the
    physical configuration.  One discretized bath attaches per coupling
    operator of the system model.
    """

    system: SystemModel
    ext_baths: tuple[DiscretizedBath, ...]
    coupling_scale: float = 1.0
    dim_cap: int = DEFAULT_DIM_CAP
    _cache: dict = field(default_factory=dict, repr=False)

    def __init__(self, system: SystemModel, ext_baths, coupling_scale: float = 1.0,
                 dim_cap: int = DEFAULT_DIM_CAP):
        if isinstance(ext_baths, DiscretizedBath):
            ext_baths = (ext_baths,)
        ext_baths = tuple(ext_baths)
        if len(ext_baths) != len(system.coupling_ops):
            raise ValueError("need exactly one external bath per coupling operator")
        object.__setattr__(self, "system", system)
        object.__setattr__(self, "ext_baths", ext_baths)
        object.__setattr__(self, "coupling_scale", float(coupling_scale))
        object.__setattr__(self, "dim_cap", int(dim_cap))
        object.__setattr__(self, "_cache", {})
        if self.space.total_dim > self.dim_cap:
            raise ValueError(
                f"full dimension {self.space.total_dim} exceeds cap {self.dim_cap}"
            )

    @property
    def space(self) -> CompositeSpace:
        dims = list(self.system.space.subsystem_dims)
        for bath in self.ext_baths:
            dims.extend([bath.truncation_dim] * bath.n_modes)
        return CompositeSpace(tuple(dims))

    @property
    def bath_dim(self) -> int:
        return math.prod(
            bath.truncation_dim**bath.n_modes for bath in self.ext_baths
        )

    def recurrence_time(self) -> float:
        return min(bath.recurrence_time() for bath in self.ext_baths)

    def rescaled(self, coupling_scale: float) -> "FullModel":
        return FullModel(self.system, self.ext_baths, coupling_scale, self.dim_cap)

    # -- operator construction ------------------------------------------------

    def lift_system_operator(self, op: QOperator) -> QOperator:
        """System operator acting as identity on every bath mode."""
        if op.space != self.system.space:
            raise DimensionError("operator does not act on the system space")
        mat = np.kron(op.elements, np.eye(self.bath_dim))
        return QOperator(self.space, mat, hermitian_hint=op.hermitian_hint)

    def _bath_position_operators(self) -> list[np.ndarray]:
        """X_i = sum_m f_m (c_m^dag + c_m) on the bath factor, one per bath."""
        ops = []
        mode_dims = []
        for bath in self.ext_baths:
            mode_dims.extend([bath.truncation_dim] * bath.n_modes)
        total = int(np.prod(mode_dims)) if mode_dims else 1
        offset = 0
        for bath in self.ext_baths:
            x = np.zeros((total, total), dtype=complex)
            for m, (energy, coupling) in enumerate(bath.modes):
                slot = offset + m
                a_op = boson_annihilation(bath.truncation_dim).elements
                pos = a_op + a_op.conj().T
                left = int(np.prod(mode_dims[:slot])) if slot else 1
                right = int(np.prod(mode_dims[slot + 1 :])) if slot + 1 < len(mode_dims) else 1
                x += coupling * np.kron(np.kron(np.eye(left), pos), np.eye(right))
            ops.append(x)
            offset += bath.n_modes
        return ops

    def _bath_hamiltonian(self) -> np.ndarray:
        mode_dims = []
        for bath in self.ext_baths:
            mode_dims.extend([bath.truncation_dim] * bath.n_modes)
        total = int(np.prod(mode_dims)) if mode_dims else 1
        h = np.zeros((total, total), dtype=complex)
        slot = 0
        for bath in self.ext_baths:
            for energy, _ in bath.modes:
                a_op = boson_annihilation(bath.truncation_dim).elements
                number = a_op.conj().T @ a_op
                left = int(np.prod(mode_dims[:slot])) if slot else 1
                right = int(np.prod(mode_dims[slot + 1 :])) if slot + 1 < len(mode_dims) else 1
                h += energy * np.kron(np.kron(np.eye(left), number), np.eye(right))
                slot += 1
        return h

    def full_hamiltonian(self) -> PiecewiseHamiltonian:
        """H_S (x) 1 + 1 (x) H_B + scale * sum_i O_i (x) X_i, per segment."""
        cached = self._cache.get("h_full")
        if cached is not None:
            return cached
        sys_dim = self.system.space.total_dim
        bath_dim = self.bath_dim
        h_bath = np.kron(np.eye(sys_dim), self._bath_hamiltonian())
        coupling = np.zeros_like(h_bath)
        for op, x in zip(self.system.coupling_ops, self._bath_position_operators()):
            coupling += np.kron(op.elements, x)
        coupling *= self.coupling_scale
        segments = []
        for t_a, t_b, op in self.system.hamiltonian.segments:
            mat = np.kron(op.elements, np.eye(bath_dim)) + h_bath + coupling
            segments.append((t_a, t_b, QOperator(self.space, mat, hermitian_hint=True)))
        return self._cache.setdefault("h_full", PiecewiseHamiltonian(segments))

    def initial_state(self) -> DensityMatrix:
        """System initial state with every bath mode in vacuum or thermal occupation."""
        mat = np.array(self.system.rho0.elements)
        for bath in self.ext_baths:
            for n_bar in bath.occupations:
                mat = np.kron(mat, _thermal_mode_state(bath.truncation_dim, n_bar))
        return DensityMatrix(self.space, mat)


def full_expectation(model: FullModel, a: QOperator, grid: TimeGrid):
    """<a (x) 1>(t) under exact full evolution; (time, real value) pairs."""
    series = expectation_series(
        model.full_hamiltonian(), model.initial_state(),
        model.lift_system_operator(a), grid,
    )
    out = []
    for t, v in zip(grid.times().tolist(), series):
        if abs(v.imag) > 1e-8 * max(1.0, abs(v)):
            raise RuntimeError(f"expectation of a Hermitian observable came out complex: {v}")
        out.append((t, float(v.real)))
    return out


def actual_error(model: FullModel, a: QOperator, grid: TimeGrid):
    """Delta(t): full-model value minus the ideal simulator value."""
    full = full_expectation(model, a, grid)
    ideal = expectation_series(
        model.system.dynamical_model(), model.system.rho0, a, grid
    )
    return [(t, fv - iv.real) for (t, fv), iv in zip(full, ideal)]


def perturbed_correlator(
    model: FullModel,
    o: QOperator,
    a: QOperator,
    t1: float,
    t: float,
    t2: float,
    ordering: Ordering,
) -> complex:
    """Three-time correlator measured on the coupled (perturbed) simulator."""
    return three_time_correlator(
        model.full_hamiltonian(),
        model.initial_state(),
        model.lift_system_operator(o),
        model.lift_system_operator(a),
        model.lift_system_operator(o),
        t1, t, t2, ordering,
    )


def build_perturbed_grid(
    model: FullModel, o: QOperator, a: QOperator, grid: TimeGrid
) -> CorrelatorGrid:
    """Full simplex of perturbed correlators, tagged as measured data."""
    data = correlator_matrices(
        model.full_hamiltonian(),
        model.initial_state(),
        model.lift_system_operator(o),
        model.lift_system_operator(a),
        grid,
    )
    return CorrelatorGrid(
        grid=grid, values=data.values, a_series=data.a_series,
        source_tag="perturbed-measured",
    )


@dataclass(frozen=True)
class ValidationRecord:
    """Measured error versus estimate at one time."""

    scenario_id: str
    t: float
    delta: float
    c2: float
    residual: float
    verdict: str
    verdict_correct: bool
    recurrence_time: float
    within_window: bool

    CSV_FIELDS = (
        "scenario_id", "t", "delta", "c2", "residual", "verdict",
        "verdict_correct", "recurrence_time", "within_window",
    )

    def to_csv_row(self) -> str:
        cells = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool):
                cells.append(str(v).lower())
            elif isinstance(v, float):
                cells.append(f"{v:.15e}")
            else:
                cells.append(str(v))
        return ",".join(cells)


def validate_estimate(
    model: FullModel,
    report: ReliabilityReport,
    a: QOperator,
    grid: TimeGrid,
    scenario_id: str = "",
) -> ValidationRecord:
    """Compare the reported correction against the actually measured error.

    A reliable verdict is counted correct when the true relative error stays
    within twice the threshold; unreliable and inconclusive verdicts claim
    no guarantee and are always counted correct.
    """
    delta = actual_error(model, a, grid)[-1][1]
    c2 = report.c2_total
    residual = abs(delta - c2)
    recurrence = model.recurrence_time()
    if report.verdict == RELIABLE:
        denom = max(abs(report.a_value), 1e-30)
        verdict_correct = abs(delta) / denom <= 2.0 * report.threshold_eta
    else:
        verdict_correct = True
    return ValidationRecord(
        scenario_id=scenario_id,
        t=grid.t,
        delta=float(delta),
        c2=float(c2.real),
        residual=float(residual),
        verdict=report.verdict,
        verdict_correct=bool(verdict_correct),
        recurrence_time=float(recurrence),
        within_window=bool(grid.t <= recurrence),
    )


def append_validation_records(path, records) -> None:
    """Append records to a CSV log, writing the header when the file is new."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        if new_file:
            fh.write(",".join(ValidationRecord.CSV_FIELDS) + "\n")
        for rec in records:
            fh.write(rec.to_csv_row() + "\n")
