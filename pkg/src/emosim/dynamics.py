"""Laser-pulse unitaries and noise channels for the Be+ spin / stretch-mode register.

Qudit levels are indexed as

====  ==================  =======================
idx   hyperfine level     role
====  ==================  =======================
0     |F=2, mF=2>         spin up (bright)
1     |F=2, mF=1>         spin down
2     |F=2, mF=0>         residual-population shelf
3     |F=2, mF=-1>        weakly fluorescing shelf
4     |F=2, mF=-2>        dark shelf
====  ==================  =======================

Rotations use the convention

    R(theta, phi) = [[cos(theta/2),               -i exp(-i phi) sin(theta/2)],
                     [-i exp(i phi) sin(theta/2),  cos(theta/2)]]

in the ordered basis (first level, second level).  For the red sideband the
ordered basis on the n-th manifold is (|up, n+1>, |down, n>).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import qstate as qs

UP, DOWN, SHELF_0, SHELF_M1, SHELF_M2 = range(5)
LEVEL_NAMES = ("up", "down", "2,0", "2,-1", "2,-2")
QUDIT_DIM = 5

CARRIER = "carrier"
SIDEBAND = "sideband"
SHELVING = "shelving"

# Occupation intervals of the stretch-mode superpositions in the two wells, used
# to calibrate the motional coherence time against the quoted 5 % contrast loss.
REFERENCE_DWELL_US = (250.0, 50.0)
REFERENCE_MOTIONAL_LOSS = 0.05
MEASURED_COHERENCE_US = 800.0


class DynamicsError(ValueError):
    pass


def carrier_rotation(theta: float, phi: float) -> np.ndarray:
    c = np.cos(theta / 2)
    s = np.sin(theta / 2)
    return np.array(
        [[c, -1j * np.exp(-1j * phi) * s], [-1j * np.exp(1j * phi) * s, c]], dtype=complex
    )


def level_rotation(theta: float, phi: float, levels=(UP, DOWN), dim: int = QUDIT_DIM) -> np.ndarray:
    """Rotation on one pair of qudit levels, identity on the rest."""
    a, b = levels
    if a == b or not (0 <= a < dim and 0 <= b < dim):
        raise DynamicsError(f"invalid level pair {levels} for dimension {dim}")
    u = np.eye(dim, dtype=complex)
    r = carrier_rotation(theta, phi)
    idx = [a, b]
    u[np.ix_(idx, idx)] = r
    return u


def sideband_rotation(theta: float, phi: float, cutoff: int, dim: int = QUDIT_DIM) -> np.ndarray:
    """Red-sideband unitary on qudit (x) mode, ordered qudit-major.

    Couples |up, n+1> and |down, n> with angle ``theta * sqrt(n+1)``; ``theta``
    is the nominal angle calibrated on the n = 0 manifold.  |up, 0>, the shelf
    levels and |down, cutoff> (whose partner lies above the truncation) are
    left untouched.
    """
    if cutoff < 1:
        raise DynamicsError("mode cutoff must be >= 1")
    nm = cutoff + 1
    u = np.eye(dim * nm, dtype=complex)
    for n in range(cutoff):
        r = carrier_rotation(theta * np.sqrt(n + 1), phi)
        idx = [UP * nm + n + 1, DOWN * nm + n]
        u[np.ix_(idx, idx)] = r
    return u


def phase_gate() -> np.ndarray:
    """Ideal two-qubit phase gate diag(1, i, i, 1) on the (up, down) subspaces, padded to qudits."""
    d = QUDIT_DIM
    u = np.eye(d * d, dtype=complex)
    for a, b, ph in ((UP, DOWN, 1j), (DOWN, UP, 1j)):
        u[a * d + b, a * d + b] = ph
    return u


@dataclass(frozen=True)
class Rotation:
    kind: str
    target_ion: str
    theta: float
    phi: float = 0.0
    level_pair: tuple = (UP, DOWN)
    duration: float = 1.0
    mode: Optional[str] = None

    def __post_init__(self):
        if self.kind not in (CARRIER, SIDEBAND, SHELVING):
            raise DynamicsError(f"unknown rotation kind {self.kind!r}")
        if not 0 <= self.theta <= 2 * np.pi + 1e-12:
            raise DynamicsError(f"theta {self.theta} outside [0, 2pi]")
        if self.duration <= 0:
            raise DynamicsError("rotation duration must be positive")
        if self.kind == SIDEBAND and not self.mode:
            raise DynamicsError("sideband rotation needs a mode label")


def apply_rotation(state: qs.QuantumState, rot: Rotation, angle_factor: float = 1.0) -> qs.QuantumState:
    theta = rot.theta * angle_factor
    dim = state.register.spec(rot.target_ion).dimension
    if rot.kind == SIDEBAND:
        spec = state.register.spec(rot.mode)
        if spec.kind != qs.MODE:
            raise DynamicsError(f"{rot.mode!r} is not a bosonic mode")
        u = sideband_rotation(theta, rot.phi, spec.dimension - 1, dim)
        return qs.embed_and_apply(state, u, [rot.target_ion, rot.mode], check_unitary=False)
    levels = (UP, DOWN) if rot.kind == CARRIER else tuple(rot.level_pair)
    u = level_rotation(theta, rot.phi, levels, dim)
    return qs.embed_and_apply(state, u, [rot.target_ion], check_unitary=False)


def _gaussian_tau_scale(loss, dwells):
    return np.sqrt(sum(t * t for t in dwells) / -np.log(1 - loss))


def calibrated_tau(shape: str, loss: float = REFERENCE_MOTIONAL_LOSS, dwells=REFERENCE_DWELL_US) -> float:
    """Coherence time (us) giving a joint coherence loss ``loss`` over ``dwells``."""
    if shape == "gaussian":
        return float(_gaussian_tau_scale(loss, dwells))
    if shape == "exponential":
        return float(sum(dwells) / -np.log(1 - loss))
    raise DynamicsError(f"unknown decay shape {shape!r}")


@dataclass(frozen=True)
class NoiseModel:
    """Calibrated imperfections.  Times in us, frequencies in Hz.

    ``motional_tau_scale`` multiplies ``motional_coherence_time``.  ``None``
    selects the scale that, at the measured 800 us, reproduces a 5 % loss of
    the joint stretch-mode coherence over 250 us (well A) and 50 us (well B)
    for the chosen decay shape.
    """

    prep_fidelity: float = 0.88
    motional_coherence_time: float = MEASURED_COHERENCE_US
    motional_decay_shape: str = "gaussian"
    motional_tau_scale: Optional[float] = None
    intensity_jitter_rms: float = 0.02
    field_gradient_freq: float = 1000.0
    uniform_field_jitter_rms: float = 0.0
    scatter_error_per_transfer: float = 0.09
    cooled_nbar_A: float = 0.06
    cooled_nbar_B: float = 0.02
    separation_nbar: float = 2.0
    cutoff: int = 4

    def __post_init__(self):
        for name in ("prep_fidelity", "scatter_error_per_transfer"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise DynamicsError(f"{name} must be a probability, got {v}")
        if self.motional_coherence_time <= 0:
            raise DynamicsError("motional coherence time must be positive")
        if self.motional_decay_shape not in ("gaussian", "exponential"):
            raise DynamicsError(f"unknown decay shape {self.motional_decay_shape!r}")
        if self.motional_tau_scale is not None and self.motional_tau_scale <= 0:
            raise DynamicsError("tau scale must be positive")
        for name in ("intensity_jitter_rms", "uniform_field_jitter_rms", "cooled_nbar_A",
                     "cooled_nbar_B", "separation_nbar"):
            if getattr(self, name) < 0:
                raise DynamicsError(f"{name} must be non-negative")
        if self.cutoff < 1:
            raise DynamicsError("cutoff must be >= 1")

    @property
    def motional_tau(self) -> float:
        """Effective coherence time (us) used by the decay law."""
        scale = self.motional_tau_scale
        if scale is None:
            scale = calibrated_tau(self.motional_decay_shape) / MEASURED_COHERENCE_US
        return self.motional_coherence_time * scale

    @property
    def has_motional_decay(self) -> bool:
        return np.isfinite(self.motional_tau)

    def with_(self, **changes) -> "NoiseModel":
        return replace(self, **changes)

    @classmethod
    def ideal(cls, **overrides) -> "NoiseModel":
        """No imperfections at all; the field gradient is kept (it is deterministic)."""
        base = dict(
            prep_fidelity=1.0,
            motional_tau_scale=np.inf,
            intensity_jitter_rms=0.0,
            uniform_field_jitter_rms=0.0,
            scatter_error_per_transfer=0.0,
            cooled_nbar_A=0.0,
            cooled_nbar_B=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def thermal_only(self) -> "NoiseModel":
        """Only the cooled occupations survive (field gradient kept)."""
        return NoiseModel.ideal(
            cooled_nbar_A=self.cooled_nbar_A,
            cooled_nbar_B=self.cooled_nbar_B,
            field_gradient_freq=self.field_gradient_freq,
            cutoff=self.cutoff,
        )


def spin_register(labels=("Be_A", "Be_B"), dim: int = QUDIT_DIM) -> qs.Register:
    return qs.Register([qs.qudit(lab, dim) for lab in labels])


def psi_plus_vector(dim: int = QUDIT_DIM) -> np.ndarray:
    psi = np.zeros(dim * dim, dtype=complex)
    psi[UP * dim + DOWN] = psi[DOWN * dim + UP] = 1 / np.sqrt(2)
    return psi


def werner_weight(prep_fidelity: float) -> float:
    """Mixing weight ``p`` with ``p + (1 - p)/4 = prep_fidelity``."""
    if prep_fidelity < 0.25:
        raise DynamicsError("Werner form cannot reach fidelity below 1/4")
    return (4 * prep_fidelity - 1) / 3


def prepare_psi_plus(noise: NoiseModel, labels=("Be_A", "Be_B"), dim: int = QUDIT_DIM) -> qs.QuantumState:
    """Two-spin state ``p |Psi+><Psi+| + (1-p) I/4`` on the (up, down) subspaces."""
    p = werner_weight(noise.prep_fidelity)
    psi = psi_plus_vector(dim)
    mixed = np.zeros((dim * dim, dim * dim), dtype=complex)
    for a in (UP, DOWN):
        for b in (UP, DOWN):
            mixed[a * dim + b, a * dim + b] = 0.25
    m = p * np.outer(psi, psi.conj()) + (1 - p) * mixed
    return qs.QuantumState(spin_register(labels, dim), m)


def decay_factor(t: float, noise: NoiseModel) -> float:
    if t < 0:
        raise DynamicsError("negative dwell time")
    tau = noise.motional_tau
    if not np.isfinite(tau):
        return 1.0
    if noise.motional_decay_shape == "gaussian":
        return float(np.exp(-((t / tau) ** 2)))
    return float(np.exp(-t / tau))


def motional_dephasing(state: qs.QuantumState, mode_label: str, dwell_time: float,
                       noise: NoiseModel, elapsed: float = 0.0) -> qs.QuantumState:
    """Scale Fock coherences of one mode by ``D(elapsed + dwell) / D(elapsed)``.

    With ``elapsed = 0`` this is the plain ``D(dwell)`` decay.  A nonzero
    ``elapsed`` continues the decay of a superposition that has already lived
    that long, which keeps the non-Markovian gaussian law consistent when a
    dwell is split across several steps.
    """
    if dwell_time < 0 or elapsed < 0:
        raise DynamicsError("negative dwell time")
    factor = decay_factor(elapsed + dwell_time, noise) / decay_factor(elapsed, noise)
    if factor == 1.0:
        return state
    d = state.register.spec(mode_label).dimension
    f = np.full((d, d), factor)
    np.fill_diagonal(f, 1.0)
    return qs.scale_coherences(state, mode_label, f)


def sympathetic_cooling_reset(state: qs.QuantumState, mode_label: str, target_nbar: float) -> qs.QuantumState:
    """Replace one mode by a thermal state; all other subsystems and their correlations survive."""
    spec = state.register.spec(mode_label)
    if spec.kind != qs.MODE:
        raise DynamicsError(f"{mode_label!r} is not a bosonic mode")
    thermal = qs.thermal_mode_state(target_nbar, spec.dimension - 1, mode_label)
    return qs.replace_subsystem(state, mode_label, thermal)


def free_precession(state: qs.QuantumState, duration: float, detunings: dict) -> qs.QuantumState:
    """Phase ``exp(2 pi i f t)`` on |down> of each ion, with ``f`` in Hz and ``t`` in us."""
    for ion, f in detunings.items():
        if f == 0 or duration == 0:
            continue
        dim = state.register.spec(ion).dimension
        u = np.eye(dim, dtype=complex)
        u[DOWN, DOWN] = np.exp(2j * np.pi * f * duration * 1e-6)
        state = qs.embed_and_apply(state, u, [ion], check_unitary=False)
    return state


def spin_depolarizing_kraus(p: float, dim: int = QUDIT_DIM) -> list:
    """Depolarizing channel of strength ``p`` on the (up, down) pair, identity on shelves."""
    if not 0 <= p <= 1:
        raise DynamicsError("depolarizing strength must be in [0, 1]")
    paulis = [np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.array([[1, 0], [0, -1]])]
    k0 = np.eye(dim, dtype=complex)
    k0[:2, :2] *= np.sqrt(1 - 3 * p / 4)
    out = [k0]
    if p > 0:
        for s in paulis:
            k = np.zeros((dim, dim), dtype=complex)
            k[:2, :2] = np.sqrt(p / 4) * s
            out.append(k)
    return out


def scatter_error(state: qs.QuantumState, ion: str, noise: NoiseModel) -> qs.QuantumState:
    p = noise.scatter_error_per_transfer
    if p == 0:
        return state
    dim = state.register.spec(ion).dimension
    return qs.apply_channel(state, spin_depolarizing_kraus(p, dim), [ion])


@dataclass(frozen=True)
class ShotJitter:
    angle_factor: float = 1.0
    uniform_detuning: float = 0.0  # Hz
    weight: float = field(default=1.0, compare=False)


def sample_shot_jitter(noise: NoiseModel, rng_seed) -> ShotJitter:
    rng = np.random.default_rng(rng_seed)
    factor, detuning = rng.normal(size=2)
    return ShotJitter(
        angle_factor=1.0 + noise.intensity_jitter_rms * factor,
        uniform_detuning=noise.uniform_field_jitter_rms * detuning,
    )


def jitter_quadrature(noise: NoiseModel, order: int = 5) -> list[ShotJitter]:
    """Gauss-Hermite nodes over the per-shot jitter distribution.

    Counts from independent shots, each with its own jitter draw, have the same
    distribution as counts from the jitter-averaged density matrix, so these
    nodes give the shot-averaged state without per-shot evolution.
    """
    x, w = np.polynomial.hermite_e.hermegauss(order)
    w = w / w.sum()
    ax = [(1.0, 1.0)] if noise.intensity_jitter_rms == 0 else list(zip(1 + noise.intensity_jitter_rms * x, w))
    dx = [(0.0, 1.0)] if noise.uniform_field_jitter_rms == 0 else list(zip(noise.uniform_field_jitter_rms * x, w))
    return [ShotJitter(a, d, wa * wd) for a, wa in ax for d, wd in dx]
