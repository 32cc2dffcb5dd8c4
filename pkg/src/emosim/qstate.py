"""Density matrices on registers of ion qudits and truncated bosonic modes.

A register is an ordered tuple of subsystems.  States are stored as dense
``(D, D)`` complex arrays where ``D`` is the product of the subsystem
dimensions; the first subsystem is the most significant tensor factor.
Operators acting on a subset of subsystems are applied by tensor contraction
rather than by building the full Kronecker product.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

UNITARY_TOL = 1e-9
HERMITIAN_TOL = 1e-9
KRAUS_TOL = 1e-6

ION = "ion-qudit"
MODE = "boson-mode"


class StateError(ValueError):
    """Raised for malformed registers, states, or operators."""


@dataclass(frozen=True)
class SubsystemSpec:
    kind: str
    dimension: int
    label: str

    def __post_init__(self):
        if self.kind not in (ION, MODE):
            raise StateError(f"unknown subsystem kind {self.kind!r}")
        if int(self.dimension) < 2:
            raise StateError(f"subsystem {self.label!r} needs dimension >= 2")


def qudit(label: str, dimension: int = 5) -> SubsystemSpec:
    return SubsystemSpec(ION, dimension, label)


def mode(label: str, cutoff: int = 4) -> SubsystemSpec:
    """Bosonic mode keeping Fock states ``0..cutoff``."""
    return SubsystemSpec(MODE, cutoff + 1, label)


@dataclass(frozen=True)
class Register:
    subsystems: tuple[SubsystemSpec, ...]

    def __init__(self, subsystems: Sequence[SubsystemSpec]):
        subsystems = tuple(subsystems)
        if not subsystems:
            raise StateError("register needs at least one subsystem")
        labels = [s.label for s in subsystems]
        if len(set(labels)) != len(labels):
            raise StateError(f"duplicate labels in register: {labels}")
        object.__setattr__(self, "subsystems", subsystems)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.subsystems)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(s.dimension for s in self.subsystems)

    @property
    def total_dimension(self) -> int:
        return int(np.prod(self.dims))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise StateError(f"unknown subsystem label {label!r}") from None

    def spec(self, label: str) -> SubsystemSpec:
        return self.subsystems[self.index(label)]

    def subregister(self, labels: Sequence[str]) -> "Register":
        return Register([self.spec(lab) for lab in labels])

    def flat_index(self, assignment: Mapping[str, int]) -> int:
        """Row index of the product basis state given by ``assignment``.

        Subsystems missing from the assignment default to level 0.
        """
        for lab in assignment:
            self.index(lab)
        idx = 0
        for s in self.subsystems:
            level = int(assignment.get(s.label, 0))
            if not 0 <= level < s.dimension:
                raise StateError(
                    f"level {level} out of range for {s.label!r} (dimension {s.dimension})"
                )
            idx = idx * s.dimension + level
        return idx


@dataclass(frozen=True)
class QuantumState:
    register: Register
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        d = self.register.total_dimension
        if m.shape != (d, d):
            raise StateError(f"matrix shape {m.shape} does not match register dimension {d}")
        object.__setattr__(self, "matrix", m)

    @property
    def labels(self):
        return self.register.labels

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def diagonal(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()

    def check(self, tol: float = HERMITIAN_TOL) -> None:
        """Raise :class:`StateError` unless the state is a valid density matrix."""
        m = self.matrix
        if abs(np.trace(m) - 1.0) > tol:
            raise StateError(f"trace {np.trace(m).real:.12f} deviates from 1")
        if np.max(np.abs(m - m.conj().T)) > tol:
            raise StateError("matrix is not Hermitian")
        lowest = np.linalg.eigvalsh(0.5 * (m + m.conj().T))[0]
        if lowest < -tol:
            raise StateError(f"negative eigenvalue {lowest:.3e}")

    def is_valid(self, tol: float = HERMITIAN_TOL) -> bool:
        try:
            self.check(tol)
        except StateError:
            return False
        return True


def basis_state(register: Register, level_assignment: Mapping[str, int]) -> QuantumState:
    """Pure product state with the given level on each subsystem (others at 0)."""
    d = register.total_dimension
    m = np.zeros((d, d), dtype=complex)
    i = register.flat_index(level_assignment)
    m[i, i] = 1.0
    return QuantumState(register, m)


def pure_state(register: Register, amplitudes: Mapping[tuple, complex]) -> QuantumState:
    """Projector onto ``sum_k a_k |k>`` with keys given as level tuples in register order.

    The vector is normalized before the projector is formed.
    """
    psi = state_vector(register, amplitudes)
    return QuantumState(register, np.outer(psi, psi.conj()))


def state_vector(register: Register, amplitudes: Mapping[tuple, complex]) -> np.ndarray:
    psi = np.zeros(register.total_dimension, dtype=complex)
    for levels, amp in amplitudes.items():
        if len(levels) != len(register.subsystems):
            raise StateError(f"basis key {levels} does not match register {register.labels}")
        psi[register.flat_index(dict(zip(register.labels, levels)))] += amp
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise StateError("zero state vector")
    return psi / norm


def thermal_populations(n_bar: float, cutoff: int) -> np.ndarray:
    """Bose-Einstein occupation ``p(n) = n̄^n / (1+n̄)^(n+1)``, ``n = 0..cutoff``, renormalized."""
    if n_bar < 0:
        raise StateError(f"mean occupation must be non-negative, got {n_bar}")
    if cutoff < 1:
        raise StateError("cutoff must be at least 1")
    n = np.arange(cutoff + 1)
    if n_bar == 0:
        p = (n == 0).astype(float)
    else:
        p = (n_bar / (1.0 + n_bar)) ** n / (1.0 + n_bar)
    return p / p.sum()


def thermal_mode_state(n_bar: float, cutoff: int = 4, label: str = "mode") -> QuantumState:
    reg = Register([mode(label, cutoff)])
    return QuantumState(reg, np.diag(thermal_populations(n_bar, cutoff)).astype(complex))


def tensor(*states: QuantumState) -> QuantumState:
    """Tensor product; the resulting register concatenates the inputs in order."""
    subsystems = [s for st in states for s in st.register.subsystems]
    m = states[0].matrix
    for st in states[1:]:
        m = np.kron(m, st.matrix)
    return QuantumState(Register(subsystems), m)


def _as_tensor(state: QuantumState) -> np.ndarray:
    dims = state.register.dims
    return state.matrix.reshape(dims + dims)


def _from_tensor(register: Register, t: np.ndarray) -> QuantumState:
    d = register.total_dimension
    return QuantumState(register, t.reshape(d, d))


def _contract(t: np.ndarray, op: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Apply ``op`` (reshaped to out+in axes) on the given tensor axes."""
    k = len(axes)
    res = np.tensordot(op, t, axes=(list(range(k, 2 * k)), list(axes)))
    return np.moveaxis(res, list(range(k)), list(axes))


def _target_axes(register: Register, targets: Sequence[str], operator: np.ndarray):
    if isinstance(targets, str):
        targets = [targets]
    axes = [register.index(lab) for lab in targets]
    if len(set(axes)) != len(axes):
        raise StateError(f"repeated target labels {targets}")
    tdims = [register.dims[a] for a in axes]
    dt = int(np.prod(tdims))
    operator = np.asarray(operator, dtype=complex)
    if operator.shape != (dt, dt):
        raise StateError(
            f"operator shape {operator.shape} does not match targets {list(targets)} (dimension {dt})"
        )
    return axes, operator.reshape(tdims + tdims)


def _sandwich(state: QuantumState, op_t: np.ndarray, axes: list[int]) -> np.ndarray:
    n = len(state.register.dims)
    t = _contract(_as_tensor(state), op_t, axes)
    return _contract(t, op_t.conj(), [a + n for a in axes])


def embed_and_apply(state: QuantumState, operator, targets, check_unitary: bool = True) -> QuantumState:
    """Return ``U rho U^dagger`` with ``U`` acting on ``targets`` and identity elsewhere.

    The operator's row/column order follows ``targets`` (first target most
    significant), regardless of where those subsystems sit in the register.
    """
    axes, op_t = _target_axes(state.register, targets, operator)
    if check_unitary:
        u = np.asarray(operator, dtype=complex)
        if np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) > UNITARY_TOL:
            raise StateError("operator is not unitary")
    return _from_tensor(state.register, _sandwich(state, op_t, axes))


def check_kraus(kraus_set) -> None:
    kraus_set = [np.asarray(k, dtype=complex) for k in kraus_set]
    if not kraus_set:
        raise StateError("empty Kraus set")
    d = kraus_set[0].shape[1]
    total = sum(k.conj().T @ k for k in kraus_set)
    if np.max(np.abs(total - np.eye(d))) > KRAUS_TOL:
        raise StateError("Kraus operators are not trace preserving")


def apply_channel(state: QuantumState, kraus_set, targets) -> QuantumState:
    """``rho -> sum_k K_k rho K_k^dagger`` on ``targets``."""
    check_kraus(kraus_set)
    out = None
    for k in kraus_set:
        axes, op_t = _target_axes(state.register, targets, k)
        term = _sandwich(state, op_t, axes)
        out = term if out is None else out + term
    return _from_tensor(state.register, out)


def scale_coherences(state: QuantumState, label: str, factors: np.ndarray) -> QuantumState:
    """Multiply ``rho[..i.., ..j..]`` by ``factors[i, j]`` on one subsystem.

    This is a Schur-product channel; it is completely positive whenever
    ``factors`` is positive semidefinite with unit diagonal.
    """
    reg = state.register
    ax = reg.index(label)
    n = len(reg.dims)
    d = reg.dims[ax]
    factors = np.asarray(factors)
    if factors.shape != (d, d):
        raise StateError(f"factor matrix must be {d}x{d}")
    shape = [1] * (2 * n)
    shape[ax] = d
    shape[ax + n] = d
    return _from_tensor(reg, _as_tensor(state) * factors.reshape(shape))


def partial_trace(state: QuantumState, keep: Sequence[str]) -> QuantumState:
    """Reduced state on ``keep``; the kept subsystems stay in the order given."""
    if isinstance(keep, str):
        keep = [keep]
    reg = state.register
    keep_axes = [reg.index(lab) for lab in keep]
    n = len(reg.dims)
    letters = string.ascii_letters
    if 2 * n > len(letters):
        raise StateError("too many subsystems for partial trace")
    rows = list(letters[:n])
    cols = list(letters[n : 2 * n])
    for a in range(n):
        if a not in keep_axes:
            cols[a] = rows[a]
    out = "".join(rows[a] for a in keep_axes) + "".join(cols[a] for a in keep_axes)
    t = np.einsum("".join(rows) + "".join(cols) + "->" + out, _as_tensor(state))
    sub = reg.subregister(keep)
    return _from_tensor(sub, t)


def permute(state: QuantumState, order: Sequence[str]) -> QuantumState:
    """Reorder subsystems to ``order`` (a permutation of the register labels)."""
    reg = state.register
    if sorted(order) != sorted(reg.labels):
        raise StateError(f"{list(order)} is not a permutation of {list(reg.labels)}")
    axes = [reg.index(lab) for lab in order]
    n = len(axes)
    t = np.transpose(_as_tensor(state), axes + [a + n for a in axes])
    return _from_tensor(reg.subregister(order), t)


def replace_subsystem(state: QuantumState, label: str, new: QuantumState) -> QuantumState:
    """Discard subsystem ``label`` and put the single-subsystem state ``new`` in its place."""
    reg = state.register
    reg.index(label)
    if len(new.register.subsystems) != 1 or new.register.dims[0] != reg.spec(label).dimension:
        raise StateError("replacement must be a single subsystem of matching dimension")
    others = [lab for lab in reg.labels if lab != label]
    spec = reg.spec(label)
    new = QuantumState(Register([spec]), new.matrix)
    if not others:
        return new
    joined = tensor(partial_trace(state, others), new)
    return permute(joined, reg.labels)


def fidelity(state: QuantumState, reference) -> float:
    """Overlap ``<psi|rho|psi>`` with a pure reference (state vector or rank-1 state)."""
    if isinstance(reference, QuantumState):
        if reference.register.dims != state.register.dims:
            raise StateError("register mismatch")
        w, v = np.linalg.eigh(reference.matrix)
        if np.sum(w > 1e-9) != 1:
            raise StateError("reference state is not rank 1")
        psi = v[:, -1]
    else:
        psi = np.asarray(reference, dtype=complex).ravel()
        if psi.size != state.register.total_dimension:
            raise StateError("register mismatch")
        psi = psi / np.linalg.norm(psi)
    f = np.real(psi.conj() @ state.matrix @ psi)
    return float(min(max(f, 0.0), 1.0))


def coherence_element(state: QuantumState, bra_assignment, ket_assignment) -> complex:
    """Matrix element ``<bra|rho|ket>`` between two product basis states."""
    reg = state.register
    return complex(state.matrix[reg.flat_index(bra_assignment), reg.flat_index(ket_assignment)])


def population(state: QuantumState, assignment: Mapping[str, int]) -> float:
    """Probability that the listed subsystems are found at the listed levels."""
    labels = list(assignment)
    red = partial_trace(state, labels)
    return float(np.real(coherence_element(red, assignment, assignment)))
