"""Fluorescence detection, population estimation, parity fitting and the witness.

Each ion ends in one of three fluorescence classes: bright (|up>), dark
(|down>, |2,0>, |2,-2>) or intermediate (|2,-1>, the shelf that holds the
residual populations).  With combined detection the photon count of a shot is
Poisson with the summed mean of both ions.  Population estimates use four
detection classes:

========  ============================  ======================
index     class                         combined mean (default)
========  ============================  ======================
0         both bright (P_upup)          2 * bright
1         one bright (P_updown+P_downup) bright + dark
2         none bright (P_downdown)      2 * dark
3         residual                      intermediate + dark
========  ============================  ======================

Shots where one ion is intermediate and the other bright cannot be told apart
from the one-bright class and are counted there; an intermediate ion with a
dark or intermediate partner belongs to the residual class.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from . import qstate as qs
from .dynamics import DOWN, SHELF_0, SHELF_M1, SHELF_M2, UP

BRIGHT, DARK, INTERMEDIATE = range(3)
LEVEL_CLASS = {UP: BRIGHT, DOWN: DARK, SHELF_0: DARK, SHELF_M1: INTERMEDIATE, SHELF_M2: DARK}
CLASS_NAMES = ("P_upup", "P_mixed", "P_downdown", "residual")
# detection class of each (ion A class, ion B class) pair
PAIR_CLASS = np.array([[0, 1, 1],
                       [1, 2, 3],
                       [1, 3, 3]])
SPINS = ("Be_A", "Be_B")


class MeasurementError(ValueError):
    pass


class FitError(MeasurementError):
    pass


@dataclass(frozen=True)
class DetectionModel:
    bright_mean: float = 10.0
    dark_mean: float = 0.2
    intermediate_mean: float = 1.0
    window_us: float = 200.0
    combined: bool = True

    def __post_init__(self):
        if min(self.bright_mean, self.dark_mean, self.intermediate_mean) <= 0:
            raise MeasurementError("Poisson means must be positive")

    @property
    def ion_means(self) -> np.ndarray:
        return np.array([self.bright_mean, self.dark_mean, self.intermediate_mean])

    @property
    def class_means(self) -> np.ndarray:
        b, d, i = self.ion_means
        return np.array([2 * b, b + d, 2 * d, i + d])


@dataclass
class PopulationEstimate:
    P_upup: float
    P_downdown: float
    P_mixed: float
    residual: float = 0.0
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    shots: int = 0

    @property
    def weights(self) -> np.ndarray:
        """Class weights in detection-class order (upup, mixed, downdown, residual)."""
        return np.array([self.P_upup, self.P_mixed, self.P_downdown, self.residual])

    def std(self) -> np.ndarray:
        """Standard errors of (P_upup, P_downdown, P_mixed)."""
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def to_dict(self) -> dict:
        s = self.std()
        return {"P_upup": self.P_upup, "P_downdown": self.P_downdown, "P_mixed": self.P_mixed,
                "residual": self.residual, "sigma": {"P_upup": s[0], "P_downdown": s[1], "P_mixed": s[2]},
                "cov": self.covariance.tolist(), "shots": self.shots}


def _from_weights(w, cov4=None, shots=0) -> PopulationEstimate:
    # reorder (upup, mixed, downdown, residual) -> covariance over (upup, downdown, mixed)
    order = [0, 2, 1]
    cov = np.zeros((3, 3)) if cov4 is None else np.asarray(cov4)[np.ix_(order, order)]
    return PopulationEstimate(float(w[0]), float(w[2]), float(w[1]), float(w[3]), cov, shots)


def ion_class_probabilities(state: qs.QuantumState, ions=SPINS) -> np.ndarray:
    """Joint probability of the fluorescence classes of the two ions, shape (3, 3)."""
    red = qs.partial_trace(state, list(ions))
    da, db = red.register.dims
    p_levels = red.diagonal().reshape(da, db)
    out = np.zeros((3, 3))
    for a in range(da):
        for b in range(db):
            out[LEVEL_CLASS[a], LEVEL_CLASS[b]] += p_levels[a, b]
    return np.clip(out, 0, None) / max(out.sum(), 1e-300)


def class_weights(state: qs.QuantumState, ions=SPINS) -> np.ndarray:
    """Exact detection-class weights (upup, mixed, downdown, residual) of a state."""
    p = ion_class_probabilities(state, ions)
    w = np.zeros(4)
    np.add.at(w, PAIR_CLASS.ravel(), p.ravel())
    return w


def exact_populations(state: qs.QuantumState, detection: Optional[DetectionModel] = None) -> PopulationEstimate:
    return _from_weights(class_weights(state))


def simulate_counts(state: qs.QuantumState, detection: DetectionModel, shots: int, seed=None) -> np.ndarray:
    """Photon counts for ``shots`` repetitions.

    Returns shape ``(shots,)`` for combined detection and ``(shots, 2)`` with
    per-ion counts otherwise.
    """
    if shots < 0:
        raise MeasurementError("shots must be non-negative")
    if shots == 0:
        return np.zeros((0,) if detection.combined else (0, 2), dtype=int)
    rng = np.random.default_rng(seed)
    p = ion_class_probabilities(state).ravel()
    pairs = rng.choice(9, size=shots, p=p / p.sum())
    means = detection.ion_means
    mu = np.stack([means[pairs // 3], means[pairs % 3]], axis=1)
    counts = rng.poisson(mu)
    return counts.sum(axis=1) if detection.combined else counts


def _poisson_logpmf(k, mu):
    return k * np.log(mu) - mu - gammaln(k + 1)


def _likelihood_table(counts, detection):
    """Unique observations, their multiplicities, and per-component likelihoods."""
    counts = np.asarray(counts)
    if detection.combined:
        if counts.ndim != 1:
            raise MeasurementError("combined detection expects a 1-D count array")
        values, mult = np.unique(counts, return_counts=True)
        loglik = _poisson_logpmf(values[:, None], detection.class_means[None, :])
        return loglik, mult, np.arange(4)
    if counts.ndim != 2 or counts.shape[1] != 2:
        raise MeasurementError("resolved detection expects counts of shape (shots, 2)")
    values, mult = np.unique(counts, axis=0, return_counts=True)
    m = detection.ion_means
    la = _poisson_logpmf(values[:, :1], m[None, :])
    lb = _poisson_logpmf(values[:, 1:], m[None, :])
    loglik = (la[:, :, None] + lb[:, None, :]).reshape(len(values), 9)
    return loglik, mult, PAIR_CLASS.ravel()


def _mixture_mle(L, h, max_em=2000, tol=1e-10):
    """Maximize sum_b h_b log(L_b . w) over the probability simplex."""
    n = h.sum()
    K = L.shape[1]
    w = np.full(K, 1.0 / K)

    def grad(w):
        return L.T @ (h / (L @ w)) / n

    for _ in range(max_em):
        g = grad(w)
        w = w * g
        w /= w.sum()
        if np.max(np.abs(g[w > 0] - 1)) < 1e-6:
            break
    # active-set Newton polish on the KKT conditions
    for _ in range(200):
        w[w < 1e-13] = 0.0
        w /= w.sum()
        g = grad(w)
        support = w > 0
        off = ~support & (g > 1 + tol)
        if not off.any() and np.max(np.abs(g[support] - 1)) < tol:
            break
        if off.any():
            k = np.argmax(np.where(off, g, -np.inf))
            support[k] = True
        S = np.flatnonzero(support)
        m = L @ w
        H = -(L[:, S] * (h / m**2)[:, None]).T @ L[:, S] / n
        kkt = np.zeros((len(S) + 1, len(S) + 1))
        kkt[:-1, :-1] = H
        kkt[:-1, -1] = 1
        kkt[-1, :-1] = 1
        rhs = np.concatenate([-g[S], [0.0]])
        step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:-1]
        obj = lambda v: float(h @ np.log(L @ v))
        f0 = obj(w)
        t = 1.0
        neg = step < 0
        if neg.any():
            t = min(1.0, float(np.min(-w[S][neg] / step[neg])))
        t = max(t, 0.0)
        while True:
            trial = w.copy()
            trial[S] = np.clip(w[S] + t * step, 0, None)
            trial /= trial.sum()
            if np.all(L @ trial > 0) and obj(trial) >= f0 - 1e-12 * abs(f0):
                break
            t *= 0.5
            if t < 1e-12:
                trial = w
                break
        if np.array_equal(trial, w):
            # Newton made no progress; fall back to EM steps
            for _ in range(50):
                w = w * grad(w)
                w /= w.sum()
        else:
            w = trial
    return w


def _constrained_covariance(L, h, w):
    m = L @ w
    info = (L * (h / m**2)[:, None]).T @ L
    K = len(w)
    J = np.vstack([np.eye(K - 1), -np.ones((1, K - 1))])
    return J @ np.linalg.pinv(J.T @ info @ J) @ J.T


def ml_populations(counts, detection: DetectionModel) -> PopulationEstimate:
    """Maximum-likelihood class weights from photon counts (Poisson mixture, fixed means)."""
    counts = np.asarray(counts)
    if counts.shape[0] == 0:
        raise MeasurementError("no counts to estimate from")
    means = detection.class_means if detection.combined else detection.ion_means
    if len(np.unique(np.round(means, 12))) < len(means):
        raise MeasurementError("detection classes have identical means and cannot be separated")
    loglik, mult, to_class = _likelihood_table(counts, detection)
    L = np.exp(loglik - loglik.max(axis=1, keepdims=True))
    w = _mixture_mle(L, mult.astype(float))
    cov = _constrained_covariance(L, mult.astype(float), w)
    agg = np.zeros((4, len(w)))
    agg[to_class, np.arange(len(w))] = 1.0
    return _from_weights(agg @ w, agg @ cov @ agg.T, int(counts.shape[0]))


def parity(populations: PopulationEstimate) -> float:
    """P_downdown + P_upup - P_mixed; the residual class is left out of both terms."""
    return populations.P_downdown + populations.P_upup - populations.P_mixed


def parity_std(populations: PopulationEstimate) -> float:
    a = np.array([1.0, 1.0, -1.0])
    return float(np.sqrt(max(a @ populations.covariance @ a, 0.0)))


def state_parity(state: qs.QuantumState) -> float:
    """Parity of the exact class weights of ``state`` (no sampling)."""
    return parity(exact_populations(state))


@dataclass(frozen=True)
class ParityPoint:
    phi_p: float
    parity: float
    std_error: float = 0.0
    shots: int = 0


def parity_point(phi_p, state, detection: DetectionModel, shots: int, seed=None) -> ParityPoint:
    """One data point: sample counts and estimate, or the exact parity when ``shots == 0``."""
    if shots == 0:
        return ParityPoint(float(phi_p), state_parity(state), 0.0, 0)
    est = ml_populations(simulate_counts(state, detection, shots, seed), detection)
    return ParityPoint(float(phi_p), parity(est), parity_std(est), shots)


PARAMS = ("C2", "C1", "C0", "phi2", "phi1")


@dataclass
class FitResult:
    C2: float
    C1: float
    C0: float
    phi2: float
    phi1: float
    cov: np.ndarray
    residual_rms: float = 0.0

    @property
    def sigma(self) -> dict:
        s = np.sqrt(np.clip(np.diag(self.cov), 0, None))
        return dict(zip(PARAMS, s.tolist()))

    def model(self, phi):
        phi = np.asarray(phi, dtype=float)
        return (self.C2 * np.cos(2 * phi + self.phi2) + self.C1 * np.cos(phi + self.phi1) + self.C0)

    def to_dict(self) -> dict:
        entangled, margin = entanglement_witness(self)
        d = {p: float(getattr(self, p)) for p in PARAMS}
        d.update(sigma=self.sigma, cov=np.asarray(self.cov).tolist(), residual_rms=self.residual_rms,
                 entangled=entangled, margin=margin)
        return d


def _amp_phase(a, b):
    """C cos(x + phi) = a cos x + b sin x  =>  C = |(a, b)|, phi = atan2(-b, a)."""
    c = float(np.hypot(a, b))
    phi = float(np.arctan2(-b, a))
    # phase is undefined at zero amplitude; also guards c**2 underflow
    if c < np.sqrt(np.finfo(float).tiny):
        return c, phi, np.zeros((2, 2))
    jac = np.array([[a / c, b / c], [b / c**2, -a / c**2]])
    return c, phi, jac


def fit_parity(points: Sequence[ParityPoint]) -> FitResult:
    """Least-squares fit of ``C2 cos(2 phi + phi2) + C1 cos(phi + phi1) + C0``.

    Linear in the basis (cos 2phi, sin 2phi, cos phi, sin phi, 1).  Points are
    weighted by ``1/std_error^2`` when every point carries a positive error;
    zero errors are replaced by the smallest positive one; with no positive
    errors the fit is unweighted and the covariance is scaled by the residual
    variance.
    """
    phi = np.array([p.phi_p for p in points], dtype=float)
    y = np.array([p.parity for p in points], dtype=float)
    s = np.array([p.std_error for p in points], dtype=float)
    X = np.column_stack([np.cos(2 * phi), np.sin(2 * phi), np.cos(phi), np.sin(phi), np.ones_like(phi)])
    if len(points) < 5 or np.linalg.matrix_rank(X, tol=1e-9) < 5:
        raise FitError("design matrix is rank deficient: need at least 5 distinct analysis phases")
    weighted = bool(np.any(s > 0))
    if weighted:
        s = np.where(s > 0, s, s[s > 0].min())
    else:
        s = np.ones_like(y)
    Xw = X / s[:, None]
    yw = y / s
    beta, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = y - X @ beta
    cov_beta = np.linalg.pinv(Xw.T @ Xw)
    if not weighted:
        dof = len(y) - 5
        cov_beta = cov_beta * (resid @ resid / dof if dof > 0 else 0.0)
    C2, phi2, j2 = _amp_phase(beta[0], beta[1])
    C1, phi1, j1 = _amp_phase(beta[2], beta[3])
    # parameter order (C2, C1, C0, phi2, phi1) from beta order (a2, b2, a1, b1, c)
    J = np.zeros((5, 5))
    J[0, 0:2] = j2[0]
    J[3, 0:2] = j2[1]
    J[1, 2:4] = j1[0]
    J[4, 2:4] = j1[1]
    J[2, 4] = 1.0
    cov = J @ cov_beta @ J.T
    return FitResult(C2, C1, float(beta[4]), phi2, phi1, cov, float(np.sqrt(np.mean(resid**2))))


WITNESS_THRESHOLD = 0.5


def entanglement_witness(fit: FitResult) -> tuple[bool, float]:
    """Entangled when the twice-phase parity amplitude exceeds 1/2 (strictly)."""
    margin = float(fit.C2 - WITNESS_THRESHOLD)
    return bool(margin > 0), margin


# -- file formats -------------------------------------------------------------

CSV_HEADER = ("phi_p", "parity", "std_error", "shots")


def write_parity_csv(points: Sequence[ParityPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for p in points:
            w.writerow([repr(float(p.phi_p)), repr(float(p.parity)), repr(float(p.std_error)), int(p.shots)])


def read_parity_csv(path) -> list[ParityPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise MeasurementError(f"expected CSV header {','.join(CSV_HEADER)}")
        return [ParityPoint(float(r["phi_p"]), float(r["parity"]), float(r["std_error"]), int(r["shots"]))
                for r in reader]


def write_fit_json(fit: FitResult, path) -> None:
    Path(path).write_text(json.dumps(fit.to_dict(), indent=2, sort_keys=True) + "\n")


def read_fit_json(path) -> FitResult:
    d = json.loads(Path(path).read_text())
    return FitResult(d["C2"], d["C1"], d["C0"], d["phi2"], d["phi1"], np.array(d["cov"]), d.get("residual_rms", 0.0))
