"""Scenario configuration: a versioned JSON schema and model builders.

A scenario file fully determines one protocol run: the simulator model,
the coupling channel, the bath correlator, the time grid, and the
protocol settings.  Unknown keys are rejected with their field path so
typos cannot silently change a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .baths import BathCorrelator, DiscretizedBath
from .dynamics import LindbladModel, PiecewiseHamiltonian, TimeGrid
from .oracle import FullModel, SystemModel
from .spaces import CompositeSpace, DensityMatrix, QOperator, boson_annihilation, embed, pauli

__all__ = ["SchemaError", "Scenario", "load_scenario", "parse_scenario"]

SCHEMA_VERSION = 1

_PAULI_NAMES = {"sigma_x": "x", "sigma_y": "y", "sigma_z": "z", "identity": "identity"}


class SchemaError(ValueError):
    """Configuration problem, annotated with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _require_mapping(obj, path):
    if not isinstance(obj, dict):
        raise SchemaError(path, f"expected an object, got {type(obj).__name__}")


def _check_keys(obj, path, required, optional=()):
    _require_mapping(obj, path)
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            raise SchemaError(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing required key")


def _number(obj, path, minimum=None, strict_min=None):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise SchemaError(path, f"expected a number, got {obj!r}")
    value = float(obj)
    if minimum is not None and value < minimum:
        raise SchemaError(path, f"must be >= {minimum}, got {value}")
    if strict_min is not None and value <= strict_min:
        raise SchemaError(path, f"must be > {strict_min}, got {value}")
    return value


def _integer(obj, path, minimum=None):
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise SchemaError(path, f"expected an integer, got {obj!r}")
    if minimum is not None and obj < minimum:
        raise SchemaError(path, f"must be >= {minimum}, got {obj}")
    return int(obj)


def _complex_matrix(obj, path):
    try:
        rows = [[complex(re, im) for re, im in row] for row in obj]
        mat = np.array(rows, dtype=complex)
    except (TypeError, ValueError):
        raise SchemaError(path, "expected a matrix of [re, im] pairs")
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise SchemaError(path, f"expected a square matrix, got shape {mat.shape}")
    return mat


@dataclass(frozen=True, eq=False)
class Scenario:
    """Executable scenario: validated configuration plus built objects."""

    name: str
    model: object  # LindbladModel | PiecewiseHamiltonian
    rho0: DensityMatrix
    observables: tuple
    coupling_op: QOperator
    coupling_scale: float
    bath: BathCorrelator
    grid: TimeGrid
    eta: float
    mode: str
    source_tag: str
    oracle_model: FullModel | None
    oracle_scales: tuple[float, ...]
    raw: dict

    def with_resolution(self, n_steps: int) -> "Scenario":
        from dataclasses import replace

        return replace(self, grid=TimeGrid(self.grid.t0, self.grid.t, n_steps))


def _build_operator(spec, path, space: CompositeSpace, spin_slot=0) -> QOperator:
    if isinstance(spec, str):
        if spec not in _PAULI_NAMES:
            raise SchemaError(path, f"unknown operator name {spec!r}")
        op = pauli(_PAULI_NAMES[spec])
        if space.total_dim == 2:
            return op
        return embed(op, spin_slot, space)
    _check_keys(spec, path, required=("matrix",))
    mat = _complex_matrix(spec["matrix"], f"{path}.matrix")
    if mat.shape[0] != space.total_dim:
        raise SchemaError(
            f"{path}.matrix", f"dimension {mat.shape[0]} does not match system {space.total_dim}"
        )
    hermitian = bool(np.abs(mat - mat.conj().T).max() <= 1e-12 * max(np.abs(mat).max(), 1e-30))
    return QOperator(space, mat, hermitian_hint=hermitian)


def _build_system(spec, path, grid: TimeGrid):
    _check_keys(
        spec, path,
        required=("spin_energy", "initial"),
        optional=("modes", "decay_rate", "dephasing_rate"),
    )
    eps = _number(spec["spin_energy"], f"{path}.spin_energy")
    modes = spec.get("modes", [])
    if not isinstance(modes, list):
        raise SchemaError(f"{path}.modes", "expected a list")
    dims = [2]
    mode_params = []
    for k, mode in enumerate(modes):
        mpath = f"{path}.modes.{k}"
        _check_keys(mode, mpath, required=("frequency", "coupling", "truncation"))
        freq = _number(mode["frequency"], f"{mpath}.frequency", strict_min=0.0)
        coup = _number(mode["coupling"], f"{mpath}.coupling")
        trunc = _integer(mode["truncation"], f"{mpath}.truncation", minimum=2)
        dims.append(trunc)
        mode_params.append((freq, coup, trunc))
    space = CompositeSpace(tuple(dims))

    sz = embed(pauli("z"), 0, space)
    sx = embed(pauli("x"), 0, space)
    h_mat = 0.5 * eps * sz.elements
    for slot, (freq, coup, trunc) in enumerate(mode_params, start=1):
        b = boson_annihilation(trunc)
        number = embed(b.dag() @ b, slot, space)
        pos = embed(
            QOperator(b.space, b.elements + b.elements.conj().T, hermitian_hint=True),
            slot, space,
        )
        h_mat = h_mat + freq * number.elements + coup * (sx.elements @ pos.elements)
    h_mat = 0.5 * (h_mat + h_mat.conj().T)
    hamiltonian = PiecewiseHamiltonian.constant(
        QOperator(space, h_mat, hermitian_hint=True), grid.t0, grid.t
    )

    jump_ops = []
    decay = _number(spec.get("decay_rate", 0.0), f"{path}.decay_rate", minimum=0.0)
    if decay > 0:
        lower = QOperator(CompositeSpace((2,)), np.array([[0, 0], [1, 0]], dtype=complex))
        jump_ops.append((embed(lower, 0, space), decay))
    dephasing = _number(spec.get("dephasing_rate", 0.0), f"{path}.dephasing_rate", minimum=0.0)
    if dephasing > 0:
        jump_ops.append((sz, dephasing))

    init = spec["initial"]
    _check_keys(init, f"{path}.initial", required=(), optional=("excited_population", "matrix"))
    if ("excited_population" in init) == ("matrix" in init):
        raise SchemaError(
            f"{path}.initial", "give exactly one of excited_population or matrix"
        )
    if "excited_population" in init:
        a = _number(init["excited_population"], f"{path}.initial.excited_population", minimum=0.0)
        if a > 1.0:
            raise SchemaError(f"{path}.initial.excited_population", "must be <= 1")
        rho_mat = np.diag([a, 1.0 - a]).astype(complex)
    else:
        rho_mat = _complex_matrix(init["matrix"], f"{path}.initial.matrix")
        if rho_mat.shape[0] not in (2, space.total_dim):
            raise SchemaError(
                f"{path}.initial.matrix",
                f"dimension must be 2 or {space.total_dim}",
            )
    if rho_mat.shape[0] != space.total_dim:
        for _, _, trunc in mode_params:
            vac = np.zeros((trunc, trunc), dtype=complex)
            vac[0, 0] = 1.0
            rho_mat = np.kron(rho_mat, vac)
    try:
        rho0 = DensityMatrix(space, rho_mat)
    except ValueError as err:
        raise SchemaError(f"{path}.initial", str(err))
    return space, hamiltonian, tuple(jump_ops), rho0


def _build_bath(spec, path):
    """Returns (BathCorrelator at unit coupling scale, DiscretizedBath | None)."""
    _require_mapping(spec, path)
    if "terms" in spec:
        _check_keys(spec, path, required=("terms",))
        terms = spec["terms"]
        if not isinstance(terms, list) or not terms:
            raise SchemaError(f"{path}.terms", "expected a nonempty list")
        parsed = []
        for k, term in enumerate(terms):
            tpath = f"{path}.terms.{k}"
            _check_keys(term, tpath, required=("amplitude", "decay"), optional=("frequency",))
            lam = _number(term["amplitude"], f"{tpath}.amplitude")
            gamma = _number(term["decay"], f"{tpath}.decay", strict_min=0.0)
            omega = _number(term.get("frequency", 0.0), f"{tpath}.frequency")
            parsed.append((lam, gamma, omega))
        return BathCorrelator(tuple(parsed)), None
    if "modes" in spec:
        _check_keys(spec, path, required=("modes",), optional=("truncation", "occupation"))
        modes = spec["modes"]
        if not isinstance(modes, list) or not modes:
            raise SchemaError(f"{path}.modes", "expected a nonempty list")
        parsed = []
        for k, mode in enumerate(modes):
            mpath = f"{path}.modes.{k}"
            _check_keys(mode, mpath, required=("energy", "coupling"))
            energy = _number(mode["energy"], f"{mpath}.energy", strict_min=0.0)
            coup = _number(mode["coupling"], f"{mpath}.coupling")
            parsed.append((energy, coup))
        trunc = _integer(spec.get("truncation", 3), f"{path}.truncation", minimum=2)
        occupation = _number(spec.get("occupation", 0.0), f"{path}.occupation", minimum=0.0)
        comb = DiscretizedBath(parsed, truncation_dim=trunc, occupations=occupation)
        return comb.correlator_terms(), comb
    raise SchemaError(path, "bath needs either terms or modes")


def parse_scenario(config: dict, origin: str = "config") -> Scenario:
    """Validate a configuration mapping and build the runnable scenario."""
    _check_keys(
        config, origin,
        required=("schema_version", "name", "system", "coupling", "bath", "grid", "protocol"),
        optional=("oracle", "seeds"),
    )
    version = _integer(config["schema_version"], f"{origin}.schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{origin}.schema_version", f"unsupported version {version}")
    name = config["name"]
    if not isinstance(name, str) or not name:
        raise SchemaError(f"{origin}.name", "expected a nonempty string")

    gpath = f"{origin}.grid"
    _check_keys(config["grid"], gpath, required=("t0", "t", "n_steps"))
    t0 = _number(config["grid"]["t0"], f"{gpath}.t0")
    t = _number(config["grid"]["t"], f"{gpath}.t")
    if t <= t0:
        raise SchemaError(f"{gpath}.t", f"must exceed t0 = {t0}")
    n_steps = _integer(config["grid"]["n_steps"], f"{gpath}.n_steps", minimum=1)
    grid = TimeGrid(t0, t, n_steps)

    space, hamiltonian, jump_ops, rho0 = _build_system(config["system"], f"{origin}.system", grid)
    model = LindbladModel(hamiltonian, jump_ops) if jump_ops else hamiltonian

    cpath = f"{origin}.coupling"
    _check_keys(config["coupling"], cpath, required=("operator",), optional=("scale",))
    coupling_op = _build_operator(config["coupling"]["operator"], f"{cpath}.operator", space)
    scale = _number(config["coupling"].get("scale", 1.0), f"{cpath}.scale")

    bath_unit, comb = _build_bath(config["bath"], f"{origin}.bath")
    bath = bath_unit.scaled(scale * scale) if scale != 1.0 else bath_unit

    ppath = f"{origin}.protocol"
    _check_keys(
        config["protocol"], ppath,
        required=("eta", "observables"),
        optional=("mode", "source_tag"),
    )
    eta = _number(config["protocol"]["eta"], f"{ppath}.eta")
    if not 0 < eta < 1:
        raise SchemaError(f"{ppath}.eta", f"must lie in (0, 1), got {eta}")
    mode = config["protocol"].get("mode", "full")
    if mode not in ("full", "bounded"):
        raise SchemaError(f"{ppath}.mode", f"must be full or bounded, got {mode!r}")
    source_tag = config["protocol"].get("source_tag", "ideal")
    if source_tag not in ("ideal", "perturbed-measured"):
        raise SchemaError(f"{ppath}.source_tag", f"unknown source tag {source_tag!r}")
    obs_spec = config["protocol"]["observables"]
    if not isinstance(obs_spec, list) or not obs_spec:
        raise SchemaError(f"{ppath}.observables", "expected a nonempty list")
    observables = []
    for k, entry in enumerate(obs_spec):
        opath = f"{ppath}.observables.{k}"
        op = _build_operator(entry, opath, space)
        label = entry if isinstance(entry, str) else f"observable{k}"
        observables.append((label, op))

    oracle_model = None
    oracle_scales: tuple[float, ...] = ()
    if "oracle" in config:
        opath = f"{origin}.oracle"
        _check_keys(
            config["oracle"], opath,
            required=("enabled",),
            optional=("external_modes", "truncation", "occupation", "coupling_scales"),
        )
        if not isinstance(config["oracle"]["enabled"], bool):
            raise SchemaError(f"{opath}.enabled", "expected true or false")
        if config["oracle"]["enabled"]:
            if jump_ops:
                raise SchemaError(
                    opath, "oracle validation requires a closed system (no decay channels)"
                )
            if "external_modes" in config["oracle"]:
                modes_spec = {"modes": config["oracle"]["external_modes"]}
                if "truncation" in config["oracle"]:
                    modes_spec["truncation"] = config["oracle"]["truncation"]
                if "occupation" in config["oracle"]:
                    modes_spec["occupation"] = config["oracle"]["occupation"]
                _, ext = _build_bath(modes_spec, f"{opath}.external_modes")
            elif comb is not None:
                ext = comb
            else:
                raise SchemaError(
                    opath, "oracle needs external_modes or a discretized scenario bath"
                )
            system = SystemModel(hamiltonian=hamiltonian, rho0=rho0, coupling_ops=(coupling_op,))
            oracle_model = FullModel(system, ext, coupling_scale=scale)
            scales = config["oracle"].get("coupling_scales", [scale])
            if not isinstance(scales, list) or not scales:
                raise SchemaError(f"{opath}.coupling_scales", "expected a nonempty list")
            oracle_scales = tuple(
                _number(v, f"{opath}.coupling_scales.{k}") for k, v in enumerate(scales)
            )

    if "seeds" in config:
        _require_mapping(config["seeds"], f"{origin}.seeds")

    return Scenario(
        name=name,
        model=model,
        rho0=rho0,
        observables=tuple(observables),
        coupling_op=coupling_op,
        coupling_scale=scale,
        bath=bath,
        grid=grid,
        eta=eta,
        mode=mode,
        source_tag=source_tag,
        oracle_model=oracle_model,
        oracle_scales=oracle_scales,
        raw=config,
    )


def load_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as err:
        raise SchemaError(str(path), f"not valid JSON ({err})")
    return parse_scenario(config, origin="config")
