"""Dense linear algebra over small composite Hilbert spaces.

Operators and density matrices are plain complex numpy matrices tagged with
the tensor-product structure of the space they act on.  Everything here is
immutable after construction and safe to share between threads.

Conventions: hbar = 1, so energies and rates share inverse-time units.
Subsystem ordering is system spin(s) first, internal bosonic modes next,
external bath modes last.  Storage is dense; intended for total dimensions
up to a few thousand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CompositeSpace",
    "QOperator",
    "DensityMatrix",
    "DimensionError",
    "pauli",
    "boson_annihilation",
    "embed",
    "expectation",
    "partial_trace",
]

HERMITIAN_RTOL = 1e-12


class DimensionError(ValueError):
    """Raised when operator/state dimensions or subsystem indices disagree."""


@dataclass(frozen=True)
class CompositeSpace:
    """Tensor-product space described by the ordered subsystem dimensions."""

    subsystem_dims: tuple[int, ...]

    def __init__(self, subsystem_dims):
        dims = tuple(int(d) for d in subsystem_dims)
        if not dims:
            raise DimensionError("composite space needs at least one subsystem")
        if any(d < 2 for d in dims):
            raise DimensionError(f"subsystem dimensions must be >= 2, got {dims}")
        object.__setattr__(self, "subsystem_dims", dims)

    @property
    def total_dim(self) -> int:
        return math.prod(self.subsystem_dims)

    @property
    def n_subsystems(self) -> int:
        return len(self.subsystem_dims)

    def __repr__(self):
        return f"CompositeSpace({list(self.subsystem_dims)})"


def _as_square_complex(elements, dim: int | None = None) -> np.ndarray:
    mat = np.asarray(elements, dtype=complex)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {mat.shape}")
    if dim is not None and mat.shape[0] != dim:
        raise DimensionError(
            f"matrix side {mat.shape[0]} does not match space dimension {dim}"
        )
    mat = mat.copy()
    mat.flags.writeable = False
    return mat


@dataclass(frozen=True, eq=False)
class QOperator:
    """Dense operator on a composite space.

    ``hermitian_hint`` is checked on construction: when set, the matrix must
    be Hermitian to within ``HERMITIAN_RTOL`` of its largest entry.
    """

    space: CompositeSpace
    elements: np.ndarray
    hermitian_hint: bool = False

    def __init__(self, space: CompositeSpace, elements, hermitian_hint: bool = False):
        mat = _as_square_complex(elements, space.total_dim)
        if hermitian_hint:
            scale = np.abs(mat).max()
            if scale > 0 and np.abs(mat - mat.conj().T).max() > HERMITIAN_RTOL * scale:
                raise ValueError("hermitian_hint set but matrix is not Hermitian")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "elements", mat)
        object.__setattr__(self, "hermitian_hint", hermitian_hint)

    @property
    def dim(self) -> int:
        return self.space.total_dim

    def dag(self) -> "QOperator":
        return QOperator(self.space, self.elements.conj().T, self.hermitian_hint)

    def norm(self) -> float:
        """Spectral (largest singular value) norm."""
        return float(np.linalg.norm(self.elements, ord=2))

    def __matmul__(self, other: "QOperator") -> "QOperator":
        if self.space != other.space:
            raise DimensionError("operator product requires matching spaces")
        return QOperator(self.space, self.elements @ other.elements)

    def __add__(self, other: "QOperator") -> "QOperator":
        if self.space != other.space:
            raise DimensionError("operator sum requires matching spaces")
        hint = self.hermitian_hint and other.hermitian_hint
        return QOperator(self.space, self.elements + other.elements, hint)

    def __sub__(self, other: "QOperator") -> "QOperator":
        return self + (-1.0) * other

    def __rmul__(self, scalar) -> "QOperator":
        hint = self.hermitian_hint and float(np.imag(scalar)) == 0.0
        return QOperator(self.space, scalar * self.elements, hint)

    def __repr__(self):
        return f"QOperator(dim={self.dim}, hermitian={self.hermitian_hint})"


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Physical state: unit trace, Hermitian, positive up to a small floor."""

    space: CompositeSpace
    elements: np.ndarray
    positivity_floor: float = 1e-9

    def __init__(self, space: CompositeSpace, elements, positivity_floor: float = 1e-9):
        mat = _as_square_complex(elements, space.total_dim)
        tr = np.trace(mat)
        if abs(tr - 1.0) > 1e-9:
            raise ValueError(f"density matrix trace {tr} is not 1 within 1e-9")
        scale = max(np.abs(mat).max(), 1e-300)
        if np.abs(mat - mat.conj().T).max() > 1e-10 * scale:
            raise ValueError("density matrix is not Hermitian within 1e-10 relative")
        min_eig = float(np.linalg.eigvalsh((mat + mat.conj().T) / 2).min())
        if min_eig < -positivity_floor:
            raise ValueError(f"density matrix has negative eigenvalue {min_eig}")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "elements", mat)
        object.__setattr__(self, "positivity_floor", positivity_floor)

    @property
    def dim(self) -> int:
        return self.space.total_dim

    def __repr__(self):
        return f"DensityMatrix(dim={self.dim})"


_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
    "identity": np.eye(2, dtype=complex),
}

_SPIN_SPACE = CompositeSpace((2,))


def pauli(which: str) -> QOperator:
    """Pauli matrix on a single-spin space; ``which`` in {x, y, z, identity}."""
    try:
        mat = _PAULI[which]
    except KeyError:
        raise ValueError(f"unknown Pauli label {which!r}; use x, y, z or identity")
    return QOperator(_SPIN_SPACE, mat, hermitian_hint=True)


def boson_annihilation(truncation_dim: int) -> QOperator:
    """Truncated annihilation operator with sqrt(n) on the first superdiagonal."""
    if truncation_dim < 2:
        raise ValueError(f"truncation_dim must be >= 2, got {truncation_dim}")
    mat = np.zeros((truncation_dim, truncation_dim), dtype=complex)
    ns = np.arange(1, truncation_dim)
    mat[ns - 1, ns] = np.sqrt(ns)
    return QOperator(CompositeSpace((truncation_dim,)), mat)


def embed(op: QOperator, slot: int, space: CompositeSpace) -> QOperator:
    """Embed a single-subsystem operator at ``slot`` of a composite space.

    Returns identity (x) ... (x) op (x) ... (x) identity; the hermitian hint
    of ``op`` carries over.
    """
    dims = space.subsystem_dims
    if not 0 <= slot < len(dims):
        raise DimensionError(f"slot {slot} out of range for {space}")
    if op.dim != dims[slot]:
        raise DimensionError(
            f"operator dimension {op.dim} does not match slot {slot} "
            f"dimension {dims[slot]}"
        )
    left = math.prod(dims[:slot]) if slot > 0 else 1
    right = math.prod(dims[slot + 1 :]) if slot + 1 < len(dims) else 1
    mat = np.kron(np.kron(np.eye(left), op.elements), np.eye(right))
    return QOperator(space, mat, hermitian_hint=op.hermitian_hint)


def expectation(rho: DensityMatrix, op: QOperator) -> complex:
    """Tr[rho op]."""
    if rho.space != op.space:
        raise DimensionError("expectation requires matching spaces")
    return complex(np.einsum("ij,ji->", rho.elements, op.elements))


def partial_trace(rho: DensityMatrix, keep) -> DensityMatrix:
    """Reduced density matrix on the subsystems listed in ``keep``.

    ``keep`` must be a nonempty, strictly increasing sequence of subsystem
    indices.
    """
    dims = rho.space.subsystem_dims
    keep = tuple(int(k) for k in keep)
    if not keep:
        raise DimensionError("keep must name at least one subsystem")
    if any(k < 0 or k >= len(dims) for k in keep):
        raise DimensionError(f"keep indices {keep} out of range for {rho.space}")
    if any(b <= a for a, b in zip(keep, keep[1:])):
        raise DimensionError(f"keep indices {keep} must be strictly increasing")

    n = len(dims)
    tensor = rho.elements.reshape(dims + dims)
    # Trace out dropped slots highest-first so row/column axis pairs stay at
    # (slot, slot + ndim/2) as the tensor shrinks.
    for slot in sorted(set(range(n)) - set(keep), reverse=True):
        tensor = np.trace(tensor, axis1=slot, axis2=slot + tensor.ndim // 2)
    kept_dim = math.prod(dims[k] for k in keep)
    reduced = tensor.reshape(kept_dim, kept_dim)
    return DensityMatrix(CompositeSpace(tuple(dims[k] for k in keep)), reduced)
