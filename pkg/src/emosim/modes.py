"""Axial equilibrium and normal modes of mixed-species ion chains.

Each ion sits in a harmonic well ``k (z - c)^2 / 2`` whose curvature ``k`` is
the same for every species (axial confinement is mass independent) and is
specified through the frequency of a single Be+ ion in that well.  All ions
interact through the full Coulomb potential, including ions in other wells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import constants
from scipy.optimize import brentq

AMU = constants.atomic_mass
COULOMB = constants.e**2 / (4 * np.pi * constants.epsilon_0)
HBAR = constants.hbar

MASSES = {"Be": 9.0121831, "Mg": 23.985041697}
REFERENCE_SPECIES = "Be"


class ModeError(RuntimeError):
    pass


class UnstableConfiguration(ModeError):
    pass


@dataclass(frozen=True)
class IonChainConfig:
    """Ions in order along the axis.

    ``axial_freq_mhz`` is the single-Be+ frequency of each well (one entry per
    well, or a scalar used for all wells).  ``well_of`` maps ion index to well;
    when omitted the ions are split into equal consecutive groups.
    """

    species: tuple[str, ...]
    axial_freq_mhz: tuple[float, ...] = (1.0,)
    well_centers_mm: tuple[float, ...] = (0.0,)
    well_of: tuple[int, ...] | None = None
    masses_amu: tuple[float, ...] | None = None

    def __post_init__(self):
        species = tuple(self.species)
        if not species:
            raise ModeError("chain needs at least one ion")
        object.__setattr__(self, "species", species)
        freqs = np.atleast_1d(np.asarray(self.axial_freq_mhz, dtype=float))
        centers = tuple(float(c) for c in np.atleast_1d(self.well_centers_mm))
        if len(freqs) == 1 and len(centers) > 1:
            freqs = np.repeat(freqs, len(centers))
        if len(freqs) != len(centers):
            raise ModeError("one axial frequency per well required")
        if np.any(freqs <= 0):
            raise ModeError("axial frequencies must be positive")
        if len(centers) > 1 and np.any(np.diff(centers) <= 0):
            raise ModeError("well centers must be strictly increasing")
        object.__setattr__(self, "axial_freq_mhz", tuple(float(f) for f in freqs))
        object.__setattr__(self, "well_centers_mm", centers)
        if self.well_of is None:
            nw = len(centers)
            if len(species) % nw:
                raise ModeError("ions cannot be split evenly between wells; give well_of")
            per = len(species) // nw
            object.__setattr__(self, "well_of", tuple(i // per for i in range(len(species))))
        elif len(self.well_of) != len(species) or max(self.well_of) >= len(centers):
            raise ModeError("well_of does not match ions and wells")
        if self.masses_amu is None:
            try:
                masses = tuple(MASSES[s] for s in species)
            except KeyError as exc:
                raise ModeError(f"unknown species {exc.args[0]!r}; pass masses_amu") from None
            object.__setattr__(self, "masses_amu", masses)
        elif len(self.masses_amu) != len(species) or min(self.masses_amu) <= 0:
            raise ModeError("masses must be positive, one per ion")

    @property
    def n_ions(self) -> int:
        return len(self.species)

    @property
    def masses_kg(self) -> np.ndarray:
        return np.asarray(self.masses_amu) * AMU

    @property
    def curvatures(self) -> np.ndarray:
        """Per-ion spring constant (N/m)."""
        w = 2 * np.pi * np.asarray(self.axial_freq_mhz) * 1e6
        k_well = MASSES[REFERENCE_SPECIES] * AMU * w**2
        return k_well[list(self.well_of)]

    def scaled(self, factor: float) -> "IonChainConfig":
        """Copy with every well frequency multiplied by ``factor``."""
        return replace(self, axial_freq_mhz=tuple(f * factor for f in self.axial_freq_mhz))


@dataclass
class ModeSolution:
    frequencies_mhz: np.ndarray
    mode_vectors: np.ndarray  # rows, mass-weighted, orthonormal
    positions_m: np.ndarray
    masses_kg: np.ndarray
    hessian: np.ndarray = field(repr=False)  # N/m

    @property
    def ground_state_sizes(self) -> np.ndarray:
        """rms ground-state extent (m) of each ion in each mode, shape (mode, ion)."""
        omega = 2 * np.pi * self.frequencies_mhz * 1e6
        return self.mode_vectors * np.sqrt(HBAR / (2 * self.masses_kg[None, :] * omega[:, None]))

    def mass_weighted_hessian(self) -> np.ndarray:
        m = self.masses_kg
        return self.hessian / np.sqrt(np.outer(m, m))


def _length_scale(k: float) -> float:
    return (COULOMB / k) ** (1 / 3)


def _gradient_and_hessian(z, centers, kappa):
    """Energy gradient/Hessian in units where Coulomb strength and reference curvature are 1."""
    dz = z[:, None] - z[None, :]
    np.fill_diagonal(dz, np.inf)
    grad = kappa * (z - centers) - np.sum(np.sign(dz) / dz**2, axis=1)
    h = -2.0 / np.abs(dz) ** 3
    np.fill_diagonal(h, 0.0)
    h[np.diag_indices_from(h)] = kappa - h.sum(axis=1)
    return grad, h


def _energy(z, centers, kappa):
    dz = np.abs(z[:, None] - z[None, :])
    iu = np.triu_indices(len(z), 1)
    return 0.5 * np.sum(kappa * (z - centers) ** 2) + np.sum(1.0 / dz[iu])


def equilibrium_positions(config: IonChainConfig, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Axial equilibrium positions (m), ordered as the ions in ``config``.

    Newton iteration with backtracking in scaled units; converged when the
    scaled gradient norm drops below ``tol``.
    """
    k = config.curvatures
    k0 = float(np.min(k))
    ell = _length_scale(k0)
    kappa = k / k0
    centers = np.asarray(config.well_centers_mm)[list(config.well_of)] * 1e-3 / ell
    n = config.n_ions
    z = centers.astype(float).copy()
    for w in set(config.well_of):
        idx = [i for i in range(n) if config.well_of[i] == w]
        z[idx] += (np.arange(len(idx)) - (len(idx) - 1) / 2) * 1.2 * len(idx) ** 0.5
    for _ in range(max_iter):
        g, h = _gradient_and_hessian(z, centers, kappa)
        if np.linalg.norm(g) < tol:
            break
        step = np.linalg.solve(h, g)
        e0 = _energy(z, centers, kappa)
        t = 1.0
        while t > 1e-8:
            trial = z - t * step
            if np.all(np.diff(trial) > 0) and _energy(trial, centers, kappa) <= e0 + 1e-14 * abs(e0):
                break
            t *= 0.5
        z = trial
    else:
        raise ModeError("equilibrium search did not converge")
    g, _ = _gradient_and_hessian(z, centers, kappa)
    if np.linalg.norm(g) >= tol:
        raise ModeError(f"equilibrium search stalled at gradient norm {np.linalg.norm(g):.2e}")
    return z * ell


def _hessian(config: IonChainConfig, positions: np.ndarray) -> np.ndarray:
    dz = positions[:, None] - positions[None, :]
    np.fill_diagonal(dz, np.inf)
    h = -2.0 * COULOMB / np.abs(dz) ** 3
    np.fill_diagonal(h, 0.0)
    h[np.diag_indices_from(h)] = config.curvatures - h.sum(axis=1)
    return h


def normalize_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so that its first non-negligible component is positive."""
    out = np.array(vectors, dtype=float)
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1
    return out


def axial_normal_modes(config: IonChainConfig) -> ModeSolution:
    pos = equilibrium_positions(config)
    h = _hessian(config, pos)
    m = config.masses_kg
    hw = h / np.sqrt(np.outer(m, m))
    evals, evecs = np.linalg.eigh(0.5 * (hw + hw.T))
    if evals[0] <= 0:
        raise UnstableConfiguration(f"non-positive mode eigenvalue {evals[0]:.3e}")
    freqs = np.sqrt(evals) / (2 * np.pi) / 1e6
    return ModeSolution(freqs, normalize_signs(evecs.T), pos, m, h)


def calibrate_curvature(config: IonChainConfig, target_mode_index: int, target_frequency_mhz: float,
                        rtol: float = 1e-9) -> IonChainConfig:
    """Scale all well frequencies so mode ``target_mode_index`` sits at the target."""
    if target_frequency_mhz <= 0:
        raise ModeError("target frequency must be positive")

    def mismatch(log_s):
        f = axial_normal_modes(config.scaled(math.exp(log_s))).frequencies_mhz[target_mode_index]
        return math.log(f / target_frequency_mhz)

    f0 = axial_normal_modes(config).frequencies_mhz[target_mode_index]
    guess = math.log(target_frequency_mhz / f0)
    lo, hi = guess - 0.5, guess + 0.5
    try:
        log_s = brentq(mismatch, lo, hi, xtol=1e-15, rtol=rtol * 1e-3)
    except ValueError:
        raise ModeError("no bracketing solution for curvature calibration") from None
    return config.scaled(math.exp(log_s))


def pair_config(axial_freq_mhz: float = 1.0, species=("Be", "Mg")) -> IonChainConfig:
    return IonChainConfig(tuple(species), (axial_freq_mhz,), (0.0,))


def double_well_config(spacing_mm: float = 0.24, axial_freq_mhz=(1.0, 1.0),
                       species=("Be", "Mg", "Mg", "Be")) -> IonChainConfig:
    return IonChainConfig(tuple(species), tuple(np.atleast_1d(axial_freq_mhz)),
                          (-spacing_mm / 2, spacing_mm / 2), (0, 0, 1, 1))


@dataclass(frozen=True)
class ExchangeResult:
    splitting_hz: float
    exchange_rate_hz: float
    detuning_hz: float
    stretch_mhz: tuple[float, float]


def interwell_exchange(config: IonChainConfig) -> ExchangeResult:
    """Coupling between the stretch modes of two single-pair wells.

    ``splitting_hz`` is the frequency difference of the two near-stretch
    eigenmodes of the full four-ion system.  ``exchange_rate_hz`` is the
    Coulomb coupling between the isolated-well stretch modes expressed so that
    resonant population exchange goes as ``sin^2(pi * rate * t)`` (it equals
    the splitting for identical wells).  ``detuning_hz`` is the difference of
    the isolated stretch frequencies.
    """
    if len(config.well_centers_mm) != 2 or sorted(config.well_of) != [0, 0, 1, 1]:
        raise ModeError("need exactly two wells holding one ion pair each")
    full = axial_normal_modes(config)
    pos = full.positions_m
    wa = [i for i, w in enumerate(config.well_of) if w == 0]
    wb = [i for i, w in enumerate(config.well_of) if w == 1]
    if max(pos[wa]) >= min(pos[wb]):
        raise ModeError("wells too close: ion pairs merged into one chain")
    gap = min(pos[wb]) - max(pos[wa])
    intra = max(np.ptp(pos[wa]), np.ptp(pos[wb]))
    if gap < 3 * intra:
        raise ModeError("wells too close: inter-well gap comparable to pair size")

    # isolated-well modes embedded in the four-ion coordinates
    local = np.zeros((4, 4))
    local_freq = []
    for w, idx in enumerate((wa, wb)):
        sub = IonChainConfig(tuple(config.species[i] for i in idx),
                             (config.axial_freq_mhz[w],), (config.well_centers_mm[w],),
                             masses_amu=tuple(config.masses_amu[i] for i in idx))
        sol = axial_normal_modes(sub)
        for j in range(2):
            local[2 * w + j, idx] = sol.mode_vectors[j]
        local_freq.append(sol.frequencies_mhz[1])
    hw = full.mass_weighted_hessian()
    coupling = local[1] @ hw @ local[3]
    omega = np.pi * 1e6 * (local_freq[0] + local_freq[1])
    rate = abs(coupling) / omega / (2 * np.pi)
    detuning = abs(local_freq[0] - local_freq[1]) * 1e6
    f = full.frequencies_mhz
    mean_stretch = 0.5 * (local_freq[0] + local_freq[1])
    near = np.sort(np.argsort(np.abs(f - mean_stretch))[:2])
    splitting = abs(f[near[1]] - f[near[0]]) * 1e6
    return ExchangeResult(float(splitting), float(rate), float(detuning),
                          (float(local_freq[0]), float(local_freq[1])))


def exchange_population_bound(exchange_rate_hz: float, detuning_hz: float, time_s: float | None = None) -> float:
    """Two-level transfer probability ``g^2 / (g^2 + (Delta/2)^2)``.

    With ``time_s`` the transfer after that time is returned,
    ``bound * sin^2(pi * sqrt(g^2 + (Delta/2)^2) * t)``, which reduces to
    ``sin^2(pi g t)`` on resonance.
    """
    g = float(exchange_rate_hz)
    delta = float(detuning_hz)
    if g < 0 or delta < 0:
        raise ModeError("rates must be non-negative")
    if g == 0:
        return 0.0
    gen = math.hypot(g, delta / 2)
    bound = g * g / gen**2
    if time_s is None:
        return bound
    return bound * math.sin(math.pi * gen * time_s) ** 2
