"""Time evolution of the ideal simulator and its multi-time correlators.

Unitary evolution of piecewise-constant Hamiltonians is exact per segment
(spectral decomposition); reduced Markovian dynamics is a Lindblad
semigroup.  Three-time correlators are computed either directly from
Heisenberg operators (closed systems) or by conditional propagation of the
state with operator insertions (the regression-theorem form, exact for
unitary dynamics and the standard Born-Markov approximation for reduced
dynamics).

The insertion rule used throughout: in a product like <o1(t1) a(t) o2(t2)>,
operators standing to the right of the observable multiply the evolving
state from the left at their own time, operators to the left multiply from
the right, insertions are applied in time order, and the final state is
traced against the observable.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .spaces import CompositeSpace, DensityMatrix, DimensionError, QOperator

__all__ = [
    "PiecewiseHamiltonian",
    "LindbladModel",
    "TimeGrid",
    "Ordering",
    "TimeOrderError",
    "EvolutionError",
    "unitary_propagator",
    "evolve_reduced",
    "propagate_decaying_spin",
    "ideal_expectation",
    "expectation_series",
    "three_time_correlator",
    "correlator_matrices",
    "equal_time_correlators",
    "CorrelatorData",
    "EqualTimeData",
]

# Substep budget for the fixed-step integrator: generator scale times dt.
# The commutator doubles the effective Hamiltonian rate, and the module
# accuracy contracts (1e-8 agreement with exact propagation) need the
# fifth-order local error of RK4 well below that.
STEP_BUDGET = 0.01


class TimeOrderError(ValueError):
    """Raised when requested times violate the required ordering."""


class EvolutionError(RuntimeError):
    """Raised when fixed-step integration loses the trace beyond tolerance."""

    def __init__(self, message: str, suggested_dt: float | None = None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


@dataclass(frozen=True, eq=False)
class PiecewiseHamiltonian:
    """Hamiltonian that is constant on contiguous segments covering [t_start, t_end]."""

    segments: tuple[tuple[float, float, QOperator], ...]

    def __init__(self, segments):
        segs = []
        for t_a, t_b, op in segments:
            t_a, t_b = float(t_a), float(t_b)
            if t_b <= t_a:
                raise ValueError(f"segment [{t_a}, {t_b}] has nonpositive length")
            if not op.hermitian_hint:
                raise ValueError("segment Hamiltonians must carry hermitian_hint")
            segs.append((t_a, t_b, op))
        if not segs:
            raise ValueError("need at least one segment")
        segs.sort(key=lambda s: s[0])
        for (_, b, _), (a2, _, _) in zip(segs, segs[1:]):
            if abs(b - a2) > 1e-12 * max(1.0, abs(b)):
                raise ValueError(f"segments are not contiguous at t={b}")
        spaces = {s[2].space for s in segs}
        if len(spaces) > 1:
            raise DimensionError("all segments must act on the same space")
        object.__setattr__(self, "segments", tuple(segs))

    @classmethod
    def constant(cls, op: QOperator, t_start: float, t_end: float):
        return cls(((t_start, t_end, op),))

    @property
    def space(self) -> CompositeSpace:
        return self.segments[0][2].space

    @property
    def t_start(self) -> float:
        return self.segments[0][0]

    @property
    def t_end(self) -> float:
        return self.segments[-1][1]

    @property
    def is_static(self) -> bool:
        return len(self.segments) == 1

    def covers(self, t_a: float, t_b: float) -> bool:
        eps = 1e-9 * max(1.0, abs(self.t_end))
        return self.t_start - eps <= t_a and t_b <= self.t_end + eps

    def segment_index(self, t: float) -> int:
        """Index of the segment whose interval contains t (right edge inclusive)."""
        for k, (a, b, _) in enumerate(self.segments):
            if a <= t < b:
                return k
        if abs(t - self.t_end) <= 1e-9 * max(1.0, abs(self.t_end)):
            return len(self.segments) - 1
        raise ValueError(f"time {t} outside covered range [{self.t_start}, {self.t_end}]")


@dataclass(frozen=True, eq=False)
class LindbladModel:
    """Reduced Markovian model: piecewise Hamiltonian plus weighted jump operators.

    The generator is checked for trace preservation on a random state at
    construction.  Step propagators are memoized in an internal map; lookups
    use dict.setdefault, so concurrent readers are safe.
    """

    hamiltonian: PiecewiseHamiltonian
    jump_ops: tuple[tuple[QOperator, float], ...] = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __init__(self, hamiltonian: PiecewiseHamiltonian, jump_ops=()):
        jumps = []
        for op, rate in jump_ops:
            rate = float(rate)
            if rate < 0:
                raise ValueError(f"jump rate must be >= 0, got {rate}")
            if op.space != hamiltonian.space:
                raise DimensionError("jump operator space does not match Hamiltonian")
            jumps.append((op, rate))
        object.__setattr__(self, "hamiltonian", hamiltonian)
        object.__setattr__(self, "jump_ops", tuple(jumps))
        object.__setattr__(self, "_cache", {})
        self._check_trace_preservation()

    @classmethod
    def decaying_spin(
        cls,
        eps: float,
        decay_rate: float,
        t_start: float,
        t_end: float,
        dephasing_rate: float = 0.0,
    ) -> "LindbladModel":
        """Spin with splitting eps, lowering-operator decay and optional dephasing."""
        from .spaces import pauli

        space = CompositeSpace((2,))
        h = QOperator(space, 0.5 * eps * pauli("z").elements, hermitian_hint=True)
        lower = QOperator(space, np.array([[0, 0], [1, 0]], dtype=complex))
        jumps = [(lower, decay_rate)]
        if dephasing_rate > 0:
            jumps.append((pauli("z"), dephasing_rate))
        return cls(PiecewiseHamiltonian.constant(h, t_start, t_end), jumps)

    @property
    def space(self) -> CompositeSpace:
        return self.hamiltonian.space

    @property
    def dim(self) -> int:
        return self.space.total_dim

    @property
    def total_jump_rate(self) -> float:
        return sum(rate for _, rate in self.jump_ops)

    def _check_trace_preservation(self):
        dim = self.dim
        rng = np.random.default_rng(0)
        m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        rho = m @ m.conj().T
        rho /= np.trace(rho)
        drift = abs(np.trace(self.apply_generator(rho, self.hamiltonian.t_start)))
        if drift > 1e-10:
            raise ValueError(f"generator does not preserve trace (|tr L(rho)| = {drift})")

    def hamiltonian_at(self, t: float) -> np.ndarray:
        k = self.hamiltonian.segment_index(t)
        return self.hamiltonian.segments[k][2].elements

    def apply_generator(self, rho: np.ndarray, t: float) -> np.ndarray:
        h = self.hamiltonian_at(t)
        out = -1j * (h @ rho - rho @ h)
        for op, rate in self.jump_ops:
            if rate == 0.0:
                continue
            l = op.elements
            ldl = l.conj().T @ l
            out = out + rate * (l @ rho @ l.conj().T - 0.5 * (ldl @ rho + rho @ ldl))
        return out

    def generator_matrix(self, segment: int) -> np.ndarray:
        """Superoperator matrix of the generator for row-major vec(rho)."""
        key = ("gen", segment)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        dim = self.dim
        eye = np.eye(dim)
        h = self.hamiltonian.segments[segment][2].elements
        gen = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
        for op, rate in self.jump_ops:
            if rate == 0.0:
                continue
            l = op.elements
            ldl = l.conj().T @ l
            gen = gen + rate * (
                np.kron(l, l.conj())
                - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T))
            )
        return self._cache.setdefault(key, gen)

    def step_propagator(self, segment: int, dt: float) -> np.ndarray:
        """exp(L dt) for one segment, memoized by (segment, dt)."""
        key = ("step", segment, dt)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        return self._cache.setdefault(key, expm(self.generator_matrix(segment) * dt))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid of n_steps intervals between t0 and t."""

    t0: float
    t: float
    n_steps: int

    def __post_init__(self):
        if self.t <= self.t0:
            raise ValueError(f"need t > t0, got [{self.t0}, {self.t}]")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def dt(self) -> float:
        return (self.t - self.t0) / self.n_steps

    @property
    def span(self) -> float:
        return self.t - self.t0

    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.t, self.n_steps + 1)

    def halved(self) -> "TimeGrid":
        if self.n_steps % 2:
            raise ValueError("n_steps must be even to halve the grid")
        return TimeGrid(self.t0, self.t, self.n_steps // 2)


class Ordering(enum.Enum):
    """The four operator orderings of a three-time correlator.

    O1 carries time t1, O2 time t2, the observable time t.  In the grid
    convention t2 <= t1 <= t, so O1 is the later insertion.
    """

    O1_A_O2 = "o1_a_o2"
    O2_A_O1 = "o2_a_o1"
    O2_O1_A = "o2_o1_a"
    A_O1_O2 = "a_o1_o2"

    @property
    def index(self) -> int:
        return _ORDERING_LIST.index(self)

    @property
    def tag(self) -> str:
        return self.value


_ORDERING_LIST = [
    Ordering.O1_A_O2,
    Ordering.O2_A_O1,
    Ordering.O2_O1_A,
    Ordering.A_O1_O2,
]


# ---------------------------------------------------------------------------
# unitary propagation
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _eig_of(op: QOperator) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(op.elements)
    return vals, vecs


def _segment_unitary(op: QOperator, duration: float) -> np.ndarray:
    vals, vecs = _eig_of(op)
    return (vecs * np.exp(-1j * vals * duration)) @ vecs.conj().T


def unitary_propagator(h: PiecewiseHamiltonian, t_from: float, t_to: float) -> QOperator:
    """Time-ordered product of segment exponentials, U(t_to, t_from)."""
    if t_to < t_from:
        raise TimeOrderError(f"need t_from <= t_to, got {t_from} > {t_to}")
    if not h.covers(t_from, t_to):
        raise ValueError(
            f"[{t_from}, {t_to}] not covered by [{h.t_start}, {h.t_end}]"
        )
    dim = h.space.total_dim
    u = np.eye(dim, dtype=complex)
    if t_to == t_from:
        return QOperator(h.space, u)
    for t_a, t_b, op in h.segments:
        lo = max(t_a, t_from)
        hi = min(t_b, t_to)
        if hi > lo:
            u = _segment_unitary(op, hi - lo) @ u
    return QOperator(h.space, u)


# ---------------------------------------------------------------------------
# reduced (Lindblad) propagation
# ---------------------------------------------------------------------------


def _default_substep(model: LindbladModel) -> float:
    scale = max(
        max(2.0 * np.linalg.norm(op.elements, 2) for _, _, op in model.hamiltonian.segments),
        max((rate for _, rate in model.jump_ops), default=0.0),
        1e-12,
    )
    return STEP_BUDGET / scale


def evolve_reduced(
    model: LindbladModel,
    rho: DensityMatrix,
    t_from: float,
    t_to: float,
    dt: float | None = None,
) -> DensityMatrix:
    """Propagate a state with the Lindblad semigroup using fixed-step RK4.

    The default substep keeps max(|H| dt, rate dt) <= 0.05.  Raises
    :class:`EvolutionError` when the trace drifts by more than 1e-6.
    """
    if t_to < t_from:
        raise TimeOrderError(f"need t_from <= t_to, got {t_from} > {t_to}")
    if rho.space != model.space:
        raise DimensionError("state space does not match model")
    if t_to == t_from:
        return rho
    if dt is None:
        dt = _default_substep(model)

    mat = np.array(rho.elements)
    for t_a, t_b, _ in model.hamiltonian.segments:
        lo = max(t_a, t_from)
        hi = min(t_b, t_to)
        if hi <= lo:
            continue
        n_sub = max(1, int(np.ceil((hi - lo) / dt)))
        h_sub = (hi - lo) / n_sub
        t_mid = (lo + hi) / 2
        for _ in range(n_sub):
            k1 = model.apply_generator(mat, t_mid)
            k2 = model.apply_generator(mat + 0.5 * h_sub * k1, t_mid)
            k3 = model.apply_generator(mat + 0.5 * h_sub * k2, t_mid)
            k4 = model.apply_generator(mat + h_sub * k3, t_mid)
            mat = mat + (h_sub / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    drift = abs(np.trace(mat) - 1.0)
    # A trace-preserving generator keeps RK4 traceless-exact, so blowup of the
    # state norm is the practical instability signal alongside trace drift.
    norm_excess = float(np.linalg.norm(mat)) - 1.0
    if drift > 1e-6 or norm_excess > 1e-3:
        raise EvolutionError(
            f"unstable step over [{t_from}, {t_to}] (trace drift {drift:.3g}, "
            f"norm excess {norm_excess:.3g}); retry with dt <= {dt / 4:.3g}",
            suggested_dt=dt / 4,
        )
    mat = mat / np.trace(mat)
    mat = (mat + mat.conj().T) / 2
    return DensityMatrix(model.space, mat, positivity_floor=1e-8)


def propagate_decaying_spin(
    eps: float, decay_rate: float, rho0: DensityMatrix, dt: float
) -> DensityMatrix:
    """Closed-form propagator of the decaying spin.

    Populations relax as exp(-decay_rate * dt) toward the ground state and
    coherences evolve as exp(-(i*eps + decay_rate/2) * dt).
    """
    if rho0.dim != 2:
        raise DimensionError("analytic spin propagator needs a 2x2 state")
    if dt < 0:
        raise TimeOrderError("dt must be >= 0")
    r = rho0.elements
    decay = np.exp(-decay_rate * dt)
    coh = np.exp(-(1j * eps + decay_rate / 2.0) * dt)
    out = np.array(
        [
            [decay * r[0, 0], coh * r[0, 1]],
            [np.conj(coh) * r[1, 0], 1.0 - decay * r[0, 0]],
        ],
        dtype=complex,
    )
    return DensityMatrix(rho0.space, out)


# ---------------------------------------------------------------------------
# grid propagation backends
# ---------------------------------------------------------------------------


def _vec(mat: np.ndarray) -> np.ndarray:
    return mat.reshape(-1)


def _check_grid_cover(model, grid: TimeGrid):
    h = model if isinstance(model, PiecewiseHamiltonian) else model.hamiltonian
    if not h.covers(grid.t0, grid.t):
        raise ValueError(
            f"grid [{grid.t0}, {grid.t}] not covered by Hamiltonian "
            f"[{h.t_start}, {h.t_end}]"
        )


def _step_superops(model, grid: TimeGrid) -> list[np.ndarray]:
    """Per-step propagator superoperators S_m for [t_m, t_m + dt]."""
    times = grid.times()
    dt = grid.dt
    if isinstance(model, LindbladModel):
        h = model.hamiltonian
        out = []
        for m in range(grid.n_steps):
            seg = h.segment_index(times[m] + dt / 2)
            a, b, _ = h.segments[seg]
            if times[m] < a - 1e-9 or times[m] + dt > b + 1e-9:
                raise ValueError(
                    "grid steps must not straddle Hamiltonian segments; "
                    "align segment edges with grid points"
                )
            out.append(model.step_propagator(seg, dt))
        return out
    # Unitary: conjugation superoperator from the exact segment product.
    out = []
    for m in range(grid.n_steps):
        u = unitary_propagator(model, times[m], times[m] + dt).elements
        out.append(np.kron(u, u.conj()))
    return out


def _forward_states(model, rho0: DensityMatrix, grid: TimeGrid, superops):
    """vec(rho(t_m)) for every grid point."""
    d2 = rho0.dim**2
    states = np.empty((grid.n_steps + 1, d2), dtype=complex)
    states[0] = _vec(np.array(rho0.elements))
    for m in range(grid.n_steps):
        states[m + 1] = superops[m] @ states[m]
    return states


def _adjoint_observables(a: QOperator, grid: TimeGrid, superops):
    """Matrices A_H(t_m) with Tr[a E_{t_m -> t}(M)] = Tr[A_H(t_m) M]."""
    dim = a.dim
    avec = _vec(a.elements.T).copy()
    stack = np.empty((grid.n_steps + 1, dim, dim), dtype=complex)
    stack[grid.n_steps] = a.elements
    for m in range(grid.n_steps - 1, -1, -1):
        avec = superops[m].T @ avec
        stack[m] = avec.reshape(dim, dim).T
    return stack


def _static_heisenberg_stack(
    op_tilde: np.ndarray, delta: np.ndarray, times_rel: np.ndarray
) -> np.ndarray:
    """Heisenberg operators in the energy eigenbasis for a static Hamiltonian."""
    phases = np.exp(1j * np.multiply.outer(times_rel, delta))
    return op_tilde[None, :, :] * phases


@dataclass(frozen=True, eq=False)
class CorrelatorData:
    """Sampled three-time correlators on the simplex t0 <= t2 <= t1 <= t.

    ``values[k, i, j]`` holds ordering k (see :class:`Ordering`) at
    t1 = times[i], t2 = times[j]; entries with j > i are not meaningful.
    ``a_series`` is the plain observable expectation on the grid.
    """

    grid: TimeGrid
    values: np.ndarray
    a_series: np.ndarray


def correlator_matrices(
    model,
    rho0: DensityMatrix,
    o1: QOperator,
    a: QOperator,
    grid: TimeGrid,
    o2: QOperator | None = None,
    method: str = "auto",
) -> CorrelatorData:
    """All four correlator orderings on the full time-ordered simplex.

    For a static closed system the Heisenberg-operator form is used; any
    other model goes through conditional propagation with per-step
    propagators.  Both paths coincide for unitary dynamics.
    """
    if o2 is None:
        o2 = o1
    _check_grid_cover(model, grid)
    for op in (o1, o2, a):
        if op.space != model.space:
            raise DimensionError("operator space does not match model space")

    is_unitary = isinstance(model, PiecewiseHamiltonian)
    if method == "auto":
        method = "heisenberg" if (is_unitary and model.is_static) else "conditional"
    if method == "heisenberg":
        if not (is_unitary and model.is_static):
            raise ValueError("Heisenberg grid path requires a static closed model")
        return _grid_heisenberg_static(model, rho0, o1, a, grid, o2)
    if method != "conditional":
        raise ValueError(f"unknown method {method!r}")
    return _grid_conditional(model, rho0, o1, a, grid, o2)


def _grid_heisenberg_static(h, rho0, o1, a, grid, o2) -> CorrelatorData:
    rho_t, (o1_t, o2_t, a_t), delta, times_rel = _static_frames(h, rho0, (o1, o2, a), grid)

    p1 = _static_heisenberg_stack(o1_t, delta, times_rel)
    p2 = _static_heisenberg_stack(o2_t, delta, times_rel)
    b = a_t * np.exp(1j * delta * times_rel[-1])

    n1 = times_rel.size
    d = rho_t.shape[0]

    def flat(stack):
        return stack.reshape(n1, d * d)

    def flat_t(stack):
        return stack.transpose(0, 2, 1).reshape(n1, d * d)

    p2_tf = flat_t(p2)
    rho_p1 = rho_t[None] @ p1
    vals_a = flat(rho_p1 @ b) @ p2_tf.T
    rho_p2 = rho_t[None] @ p2
    vals_b = flat(b[None] @ p1) @ flat_t(rho_p2).T
    vals_c = flat(p1 @ b) @ flat_t(rho_p2).T
    vals_d = flat((rho_t @ b)[None] @ p1) @ p2_tf.T

    values = np.stack([vals_a, vals_b, vals_c, vals_d])
    a_series = np.einsum("ab,iba->i", rho_t, _static_heisenberg_stack(a_t, delta, times_rel))
    return CorrelatorData(grid=grid, values=values, a_series=a_series)


def _grid_conditional(model, rho0, o1, a, grid, o2) -> CorrelatorData:
    dim = rho0.dim
    n = grid.n_steps
    superops = _step_superops(model, grid)
    states = _forward_states(model, rho0, grid, superops)
    a_stack = _adjoint_observables(a, grid, superops)

    o1m, o2m, am = o1.elements, o2.elements, a.elements
    # Trace vectors: Tr[X M] = vec(X^T) . vec(M).
    u_left = np.einsum("ab,ibc->ica", o1m, a_stack).reshape(n + 1, dim * dim)
    u_right = np.einsum("iab,bc->ica", a_stack, o1m).reshape(n + 1, dim * dim)

    rho_mats = states.reshape(n + 1, dim, dim)
    born_left = np.einsum("ab,jbc->jac", o2m, rho_mats).reshape(n + 1, dim * dim)
    born_right = np.einsum("jab,bc->jac", rho_mats, o2m).reshape(n + 1, dim * dim)

    values = np.zeros((4, n + 1, n + 1), dtype=complex)
    stream_l = np.zeros((dim * dim, n + 1), dtype=complex)
    stream_r = np.zeros((dim * dim, n + 1), dtype=complex)
    for m in range(n + 1):
        stream_l[:, m] = born_left[m]
        stream_r[:, m] = born_right[m]
        cols_l = stream_l[:, : m + 1]
        cols_r = stream_r[:, : m + 1]
        values[0, m, : m + 1] = u_left[m] @ cols_l
        values[1, m, : m + 1] = u_right[m] @ cols_r
        values[2, m, : m + 1] = u_left[m] @ cols_r
        values[3, m, : m + 1] = u_right[m] @ cols_l
        if m < n:
            stream_l[:, : m + 1] = superops[m] @ cols_l
            stream_r[:, : m + 1] = superops[m] @ cols_r

    a_vec = _vec(a.elements.T)
    a_series = states @ a_vec
    return CorrelatorData(grid=grid, values=values, a_series=a_series)


@dataclass(frozen=True, eq=False)
class EqualTimeData:
    """Equal-time system correlators along the grid, for a fixed final time."""

    grid: TimeGrid
    sandwich: np.ndarray  # <o(t1) a(t) o(t1)>
    oo_before: np.ndarray  # <o(t1) o(t1) a(t)>
    oo_after: np.ndarray  # <a(t) o(t1) o(t1)>
    a_series: np.ndarray  # <a(t1)> along the grid

    @property
    def a_final(self) -> complex:
        return complex(self.a_series[-1])


def _static_frames(h, rho0, ops, grid):
    """Eigenbasis transforms and relative grid times for a static Hamiltonian."""
    vals, vecs = _eig_of(h.segments[0][2])
    vdag = vecs.conj().T
    rho_t = vdag @ rho0.elements @ vecs
    tilded = [vdag @ op.elements @ vecs for op in ops]
    delta = vals[:, None] - vals[None, :]
    return rho_t, tilded, delta, grid.times() - grid.t0


def _equal_time_static(h, rho0, o, a, grid) -> EqualTimeData:
    rho_t, (o_t, a_t), delta, times_rel = _static_frames(h, rho0, (o, a), grid)
    p = _static_heisenberg_stack(o_t, delta, times_rel)
    b = a_t * np.exp(1j * delta * times_rel[-1])
    sandwich = np.einsum("ab,ibc,cd,ida->i", rho_t, p, b, p, optimize=True)
    oo = np.einsum("iab,ibc->iac", p, p)
    oo_before = np.einsum("ab,ibc,ca->i", rho_t, oo, b, optimize=True)
    oo_after = np.einsum("ab,bc,ica->i", rho_t, b, oo, optimize=True)
    a_stack = _static_heisenberg_stack(a_t, delta, times_rel)
    a_series = np.einsum("ab,iba->i", rho_t, a_stack)
    return EqualTimeData(
        grid=grid,
        sandwich=sandwich,
        oo_before=oo_before,
        oo_after=oo_after,
        a_series=a_series,
    )


def equal_time_correlators(
    model, rho0: DensityMatrix, o: QOperator, a: QOperator, grid: TimeGrid
) -> EqualTimeData:
    """The three equal-time correlators used by bounds and long-time forms."""
    _check_grid_cover(model, grid)
    if isinstance(model, PiecewiseHamiltonian) and model.is_static:
        return _equal_time_static(model, rho0, o, a, grid)
    superops = _step_superops(model, grid)
    states = _forward_states(model, rho0, grid, superops)
    a_stack = _adjoint_observables(a, grid, superops)
    dim = rho0.dim
    rho_mats = states.reshape(-1, dim, dim)
    om = o.elements
    sandwich = np.einsum("iab,bc,icd,da->i", a_stack, om, rho_mats, om)
    oo_before = np.einsum("iab,ibc,cd,da->i", a_stack, rho_mats, om, om)
    oo_after = np.einsum("iab,bc,cd,ida->i", a_stack, om, om, rho_mats)
    a_series = states @ _vec(a.elements.T)
    return EqualTimeData(
        grid=grid,
        sandwich=sandwich,
        oo_before=oo_before,
        oo_after=oo_after,
        a_series=a_series,
    )


def expectation_series(model, rho0: DensityMatrix, a: QOperator, grid: TimeGrid) -> np.ndarray:
    """<a(t)> sampled on the grid, as an array."""
    _check_grid_cover(model, grid)
    if isinstance(model, PiecewiseHamiltonian) and model.is_static:
        rho_t, (a_t,), delta, times_rel = _static_frames(model, rho0, (a,), grid)
        a_stack = _static_heisenberg_stack(a_t, delta, times_rel)
        return np.einsum("ab,iba->i", rho_t, a_stack)
    superops = _step_superops(model, grid)
    states = _forward_states(model, rho0, grid, superops)
    return states @ _vec(a.elements.T)


def ideal_expectation(model, rho0: DensityMatrix, a: QOperator, grid: TimeGrid):
    """<a(t)> on the grid for the unperturbed model; returns (time, value) pairs."""
    series = expectation_series(model, rho0, a, grid)
    return list(zip(grid.times().tolist(), (complex(v) for v in series)))


# ---------------------------------------------------------------------------
# scalar three-time correlator
# ---------------------------------------------------------------------------


def _insertion_schedule(ordering: Ordering, o1, t1, o2, t2):
    """(time, operator, side) insertions; side 'L' multiplies from the left."""
    if ordering is Ordering.O1_A_O2:
        sched = [(t1, o1, "R"), (t2, o2, "L")]
    elif ordering is Ordering.O2_A_O1:
        sched = [(t2, o2, "R"), (t1, o1, "L")]
    elif ordering is Ordering.O2_O1_A:
        sched = [(t2, o2, "R"), (t1, o1, "R")]
    elif ordering is Ordering.A_O1_O2:
        sched = [(t2, o2, "L"), (t1, o1, "L")]
    else:
        raise ValueError(f"unknown ordering {ordering}")
    return sorted(sched, key=lambda item: item[0])


def three_time_correlator(
    model,
    rho0: DensityMatrix,
    o1: QOperator,
    a: QOperator,
    o2: QOperator,
    t1: float,
    t: float,
    t2: float,
    ordering: Ordering,
    method: str = "auto",
) -> complex:
    """Single three-time correlator value for the given operator ordering.

    The model's start time is taken as the preparation time of ``rho0``.
    Closed systems default to the exact Heisenberg-operator evaluation;
    reduced models use conditional propagation (regression form).
    """
    is_unitary = isinstance(model, PiecewiseHamiltonian)
    h = model if is_unitary else model.hamiltonian
    t0 = h.t_start
    if not (t0 <= min(t1, t2) and max(t1, t2) <= t):
        raise TimeOrderError(
            f"need {t0} <= min(t1, t2) and max(t1, t2) <= {t}, got t1={t1}, t2={t2}"
        )
    if not h.covers(t0, t):
        raise ValueError("final time outside the covered range")

    if method == "auto":
        method = "heisenberg" if is_unitary else "conditional"
    if method == "heisenberg":
        if not is_unitary:
            raise ValueError("Heisenberg path requires a closed (unitary) model")
        return _scalar_heisenberg(model, rho0, o1, a, o2, t1, t, t2, ordering)
    return _scalar_conditional(model, rho0, o1, a, o2, t1, t, t2, ordering)


def _heisenberg_op(h, op: QOperator, t_op: float) -> np.ndarray:
    u = unitary_propagator(h, h.t_start, t_op).elements
    return u.conj().T @ op.elements @ u


def _scalar_heisenberg(h, rho0, o1, a, o2, t1, t, t2, ordering) -> complex:
    p1 = _heisenberg_op(h, o1, t1)
    p2 = _heisenberg_op(h, o2, t2)
    b = _heisenberg_op(h, a, t)
    r = rho0.elements
    if ordering is Ordering.O1_A_O2:
        prod = r @ p1 @ b @ p2
    elif ordering is Ordering.O2_A_O1:
        prod = r @ p2 @ b @ p1
    elif ordering is Ordering.O2_O1_A:
        prod = r @ p2 @ p1 @ b
    else:
        prod = r @ b @ p1 @ p2
    return complex(np.trace(prod))


def _propagate_matrix(model, mat: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """Propagate an arbitrary (not necessarily positive) matrix."""
    if t_to == t_from:
        return mat
    if isinstance(model, PiecewiseHamiltonian):
        u = unitary_propagator(model, t_from, t_to).elements
        return u @ mat @ u.conj().T
    h = model.hamiltonian
    out = mat
    for k, (a_seg, b_seg, _) in enumerate(h.segments):
        lo, hi = max(a_seg, t_from), min(b_seg, t_to)
        if hi <= lo:
            continue
        gen = model.generator_matrix(k)
        out = (expm(gen * (hi - lo)) @ _vec(out)).reshape(out.shape)
    return out


def _scalar_conditional(model, rho0, o1, a, o2, t1, t, t2, ordering) -> complex:
    if ordering in (Ordering.O2_O1_A, Ordering.A_O1_O2) and t1 < t2:
        # Both insertions on one side of the observable are only
        # contour-ordered (computable by forward conditional propagation)
        # when t2 <= t1; closed systems can use the Heisenberg path instead.
        raise TimeOrderError(
            f"ordering {ordering.name} requires t2 <= t1 on the conditional path"
        )
    is_unitary = isinstance(model, PiecewiseHamiltonian)
    h = model if is_unitary else model.hamiltonian
    mat = np.array(rho0.elements)
    current = h.t_start
    for t_ins, op, side in _insertion_schedule(ordering, o1, t1, o2, t2):
        mat = _propagate_matrix(model, mat, current, t_ins)
        mat = op.elements @ mat if side == "L" else mat @ op.elements
        current = t_ins
    mat = _propagate_matrix(model, mat, current, t)
    return complex(np.trace(a.elements @ mat))
