"""Models of the bath correlation function.

The working model is a sum of decaying complex exponentials

    C(t1, t2) = sum_k  lam_k * exp(-gamma_k |t1 - t2|) * exp(-i Omega_k (t1 - t2)),

which covers the single real exponential used in reliability bounds, fitted
correlators of sampled data, and (with gamma_k = 0) the exact correlator of
a finite comb of bosonic modes.  The comb itself lives in
:class:`DiscretizedBath`, which also knows its revival time, after which any
decaying approximation is meaningless.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .quadrature import simplex_trapezoid

__all__ = [
    "BathCorrelator",
    "DiscretizedBath",
    "ExponentialFit",
    "BathFitError",
    "correlator_value",
    "abs_double_integral",
    "exact_mode_correlator",
    "fit_exponential",
    "save_correlator_samples",
    "load_correlator_samples",
]


class BathFitError(RuntimeError):
    """Raised when sampled correlator data cannot be fit by a decaying exponential."""


@dataclass(frozen=True)
class BathCorrelator:
    """Sum-of-exponentials model of <X(t1) X(t2)>.

    Each term is (amplitude, decay, frequency) with decay >= 0; a zero decay
    gives a pure phasor term, used for exact finite-comb correlators.
    """

    terms: tuple[tuple[float, float, float], ...]

    def __init__(self, terms):
        clean = []
        for k, term in enumerate(terms):
            lam, gamma, omega = (float(x) for x in term)
            if gamma < 0:
                raise ValueError(f"term {k}: decay rate must be >= 0, got {gamma}")
            clean.append((lam, gamma, omega))
        if not clean:
            raise ValueError("bath correlator needs at least one term")
        total = sum(lam for lam, _, _ in clean)
        if total < 0:
            warnings.warn(
                f"bath correlator has negative zero-lag value {total}; "
                "model is not physically admissible",
                stacklevel=2,
            )
        object.__setattr__(self, "terms", tuple(clean))

    @classmethod
    def single(cls, amplitude: float, decay: float, frequency: float = 0.0):
        return cls(((amplitude, decay, frequency),))

    @property
    def zero_lag(self) -> float:
        return sum(lam for lam, _, _ in self.terms)

    @property
    def total_amplitude(self) -> float:
        return sum(abs(lam) for lam, _, _ in self.terms)

    def scaled(self, factor: float) -> "BathCorrelator":
        return BathCorrelator(
            tuple((factor * lam, gamma, omega) for lam, gamma, omega in self.terms)
        )

    def value(self, t1, t2):
        return correlator_value(self, t1, t2)


def correlator_value(bath: BathCorrelator, t1, t2):
    """Evaluate the correlator at (t1, t2); broadcasts over array arguments."""
    tau = np.asarray(t1, dtype=float) - np.asarray(t2, dtype=float)
    out = np.zeros_like(tau, dtype=complex)
    for lam, gamma, omega in bath.terms:
        out = out + lam * np.exp(-gamma * np.abs(tau) - 1j * omega * tau)
    if out.ndim == 0:
        return complex(out)
    return out


def _single_term_closed_form(lam: float, gamma: float, span: float) -> float:
    """Triangle integral of lam*exp(-gamma*(t1-t2)) over a span t - t0."""
    if span < 0:
        raise ValueError("t must be >= t0")
    x = gamma * span
    if x < 1e-6:
        # Series in gamma*span keeps the gamma -> 0 limit exact: span^2/2 - ...
        return lam * span * span * (0.5 - x / 6.0 + x * x / 24.0)
    return lam * (span / gamma + (np.exp(-x) - 1.0) / gamma**2)


def abs_double_integral(
    bath: BathCorrelator, t0: float, t: float, n_steps: int = 1024
) -> float:
    """Triangle integral of |<X(t1) X(t2)>| between t0 and t.

    A single real term has the closed form lam*[(t-t0)/gamma +
    (exp(-gamma(t-t0)) - 1)/gamma^2]; anything else falls back to numeric
    quadrature at the given resolution.
    """
    span = float(t) - float(t0)
    if span == 0.0:
        return 0.0
    if len(bath.terms) == 1:
        lam, gamma, _ = bath.terms[0]
        # |C| ignores the phase, so the closed form holds for any frequency.
        return _single_term_closed_form(abs(lam), gamma, span)
    times = np.linspace(t0, t, n_steps + 1)
    values = np.abs(correlator_value(bath, times[:, None], times[None, :]))
    return float(np.real(simplex_trapezoid(values, span / n_steps)))


@dataclass(frozen=True)
class DiscretizedBath:
    """Finite comb of bosonic modes coupled through X = sum_i f_i (c_i^dag + c_i).

    ``occupations`` holds the thermal occupation of each mode; zero means
    vacuum.  The comb revives after 2*pi over the smallest mode spacing, so
    exponential approximations are valid only before ``recurrence_time``.
    """

    energies: tuple[float, ...]
    couplings: tuple[float, ...]
    truncation_dim: int = 2
    occupations: tuple[float, ...] = ()

    def __init__(self, modes, truncation_dim: int = 2, occupations=None):
        energies = tuple(float(e) for e, _ in modes)
        couplings = tuple(float(f) for _, f in modes)
        if not energies:
            raise ValueError("discretized bath needs at least one mode")
        if any(e <= 0 for e in energies):
            raise ValueError(f"mode energies must be positive, got {energies}")
        if truncation_dim < 2:
            raise ValueError("truncation_dim must be >= 2")
        if occupations is None:
            occ = (0.0,) * len(energies)
        elif np.isscalar(occupations):
            occ = (float(occupations),) * len(energies)
        else:
            occ = tuple(float(x) for x in occupations)
            if len(occ) != len(energies):
                raise ValueError("need one occupation per mode")
        if any(x < 0 for x in occ):
            raise ValueError("occupations must be >= 0")
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "couplings", couplings)
        object.__setattr__(self, "truncation_dim", int(truncation_dim))
        object.__setattr__(self, "occupations", occ)

    @property
    def n_modes(self) -> int:
        return len(self.energies)

    @property
    def modes(self) -> tuple[tuple[float, float], ...]:
        return tuple(zip(self.energies, self.couplings))

    def recurrence_time(self) -> float:
        """2*pi over the smallest mode spacing; inf for a single mode."""
        if self.n_modes < 2:
            return np.inf
        spacing = np.diff(np.sort(self.energies)).min()
        if spacing <= 0:
            return np.inf
        return float(2 * np.pi / spacing)

    def correlator_terms(self) -> BathCorrelator:
        """Exact correlator of the comb as zero-decay phasor terms."""
        terms = []
        for e, f, n in zip(self.energies, self.couplings, self.occupations):
            terms.append((f * f * (n + 1.0), 0.0, e))
            if n > 0:
                terms.append((f * f * n, 0.0, -e))
        return BathCorrelator(terms)

    @classmethod
    def flat_band(
        cls,
        n_modes: int,
        cutoff: float,
        coupling: float,
        truncation_dim: int = 2,
        occupations=None,
    ) -> "DiscretizedBath":
        """Equal couplings on modes spaced linearly over [cutoff/10, cutoff]."""
        energies = np.linspace(cutoff / 10.0, cutoff, n_modes)
        return cls(
            [(e, coupling) for e in energies],
            truncation_dim=truncation_dim,
            occupations=occupations,
        )

    @classmethod
    def lorentzian_band(
        cls,
        amplitude: float,
        decay: float,
        center: float,
        n_modes: int = 60,
        half_width: float | None = None,
        truncation_dim: int = 2,
    ) -> "DiscretizedBath":
        """Comb whose vacuum correlator approximates amplitude*exp(-decay*|tau| - i*center*tau).

        Mode weights sample a Lorentzian of width ``decay`` around ``center``;
        the approximation holds before the recurrence time of the comb.
        """
        if half_width is None:
            half_width = 12.0 * decay
        lo = max(center - half_width, center * 1e-3 if center > 0 else 1e-6)
        energies = np.linspace(lo, center + half_width, n_modes)
        de = energies[1] - energies[0]
        density = (amplitude / np.pi) * decay / ((energies - center) ** 2 + decay**2)
        weights = density * de
        # Renormalize so the zero-lag value matches exactly despite the cut tails.
        weights *= amplitude / weights.sum()
        return cls(
            [(e, np.sqrt(w)) for e, w in zip(energies, weights)],
            truncation_dim=truncation_dim,
        )


def exact_mode_correlator(bath: DiscretizedBath, tau):
    """<X(tau) X(0)> for the comb: sum_i f_i^2 [(n_i+1) e^{-i e_i tau} + n_i e^{+i e_i tau}]."""
    tau = np.asarray(tau, dtype=float)
    e = np.array(bath.energies)
    f2 = np.array(bath.couplings) ** 2
    n = np.array(bath.occupations)
    phases = np.exp(-1j * np.multiply.outer(tau, e))
    out = phases @ (f2 * (n + 1.0)) + np.conj(phases) @ (f2 * n)
    if out.ndim == 0:
        return complex(out)
    return out


@dataclass(frozen=True)
class ExponentialFit:
    """Single-exponential fit of sampled correlator data."""

    amplitude: float
    decay: float
    frequency: float
    residual: float
    n_points: int

    def to_bath(self) -> BathCorrelator:
        return BathCorrelator.single(self.amplitude, self.decay, self.frequency)


def fit_exponential(samples, window) -> ExponentialFit:
    """Fit |C(tau)| to a decaying exponential and the phase to a linear drift.

    ``samples`` is a sequence of (tau, complex value) pairs; ``window`` is
    either an upper lag bound or a (low, high) pair selecting the lags used
    in the least-squares fit of log|C|.  The amplitude is taken from the
    tau = 0 sample when present, otherwise from the fit intercept.

    Raises :class:`BathFitError` when fewer than 8 samples fall inside the
    window or the magnitude does not decrease.
    """
    taus = np.array([float(t) for t, _ in samples])
    vals = np.array([complex(v) for _, v in samples])
    if np.isscalar(window):
        lo, hi = 0.0, float(window)
    else:
        lo, hi = (float(x) for x in window)
    order = np.argsort(taus)
    taus, vals = taus[order], vals[order]

    in_window = (taus >= lo) & (taus <= hi) & (np.abs(vals) > 0)
    if in_window.sum() < 8:
        raise BathFitError(
            f"need >= 8 samples with nonzero magnitude in window [{lo}, {hi}], "
            f"got {int(in_window.sum())}"
        )
    tw = taus[in_window]
    cw = vals[in_window]

    logmag = np.log(np.abs(cw))
    slope, intercept = np.polyfit(tw, logmag, 1)
    if slope >= 0:
        raise BathFitError(f"sampled correlator does not decay (log slope {slope:.3g})")
    residual = float(np.sqrt(np.mean((logmag - (slope * tw + intercept)) ** 2)))

    phase = np.unwrap(np.angle(cw))
    phase_slope = np.polyfit(tw, phase, 1)[0]

    near_zero = np.abs(taus) <= 1e-12 * max(hi, 1.0)
    if near_zero.any():
        amplitude = float(np.abs(vals[near_zero][0]))
    else:
        amplitude = float(np.exp(intercept))

    return ExponentialFit(
        amplitude=amplitude,
        decay=float(-slope),
        frequency=float(-phase_slope),
        residual=residual,
        n_points=int(in_window.sum()),
    )


def save_correlator_samples(path, taus, values) -> None:
    """Write sampled correlator values as CSV with columns tau, re, im."""
    taus = np.asarray(taus, dtype=float)
    values = np.asarray(values, dtype=complex)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["tau", "re", "im"])
        for t, v in zip(taus, values):
            writer.writerow([f"{t:.15e}", f"{v.real:.15e}", f"{v.imag:.15e}"])


def load_correlator_samples(path):
    """Read a correlator-sample CSV; returns (taus, values) arrays."""
    taus, values = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            taus.append(float(row["tau"]))
            values.append(float(row["re"]) + 1j * float(row["im"]))
    return np.array(taus), np.array(values)
