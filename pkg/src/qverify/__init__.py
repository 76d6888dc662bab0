"""Self-consistent error estimation for analog quantum simulators.

The package estimates how strongly an environmental bath perturbs the
observable of interest of a simulated system.  It evaluates the
second-order correction to the observable from measurable three-time
system correlators and a bath correlation function, checks a reliability
condition against a threshold, and can validate the whole chain against
exact evolution of a small system-plus-bath model.
"""

__version__ = "0.1.0"

from .spaces import (
    CompositeSpace,
    DensityMatrix,
    DimensionError,
    QOperator,
    boson_annihilation,
    embed,
    expectation,
    partial_trace,
    pauli,
)

__all__ = [
    "CompositeSpace",
    "DensityMatrix",
    "DimensionError",
    "QOperator",
    "boson_annihilation",
    "embed",
    "expectation",
    "partial_trace",
    "pauli",
]
