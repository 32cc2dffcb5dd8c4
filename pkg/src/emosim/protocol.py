"""Experiment sequences and the executor that evolves a state through them.

A plan is an ordered list of :class:`SequenceStep` rows mirroring the
experimental procedure table (durations in us).  The executor keeps a density
matrix over ``Be_A, Be_B, stretch_A, stretch_B`` until the ions are
recombined; after that only the two spins are kept, since every later
operation acts on internal states alone.

Magnetic-field model: while the pairs sit in separate wells, ion A sees a
detuning ``uniform + gradient/2`` and ion B ``uniform - gradient/2`` (Hz) on
|down>.  The relative phase picked up by ``|up,down> + |down,up>`` is the
phase called xi in the timeline.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import measurement as meas
from . import qstate as qs
from .dynamics import DOWN, SHELF_0, SHELF_M1, SHELF_M2, UP

log = logging.getLogger(__name__)

ION = {"A": "Be_A", "B": "Be_B"}
MODE = {"A": "stretch_A", "B": "stretch_B"}
SPINS = (ION["A"], ION["B"])

VARIANTS = ("emo", "spin_motion", "control_after_state4", "control_after_state5")
OPERATIONS = ("rotation", "prepare", "separate", "recombine", "cool", "dephase_dwell", "shelve", "measure")
SYMBOLIC_PHASES = ("phi_A", "phi_p")
SPIN_MOTION_DELAY_US = 90.0


class ProtocolError(RuntimeError):
    pass


class InvariantViolation(ProtocolError):
    def __init__(self, step_index: int, label: str, cause: Exception):
        super().__init__(f"state invariant violated after step {step_index} ({label}): {cause}")
        self.step_index = step_index


@dataclass(frozen=True)
class SequenceStep:
    operation: str
    duration: float
    well: str = "single"
    label: str = ""
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.operation not in OPERATIONS:
            raise ProtocolError(f"unknown operation {self.operation!r}")
        if self.duration < 0:
            raise ProtocolError(f"negative duration in step {self.label!r}")
        if self.well not in ("A", "B", "single", "both"):
            raise ProtocolError(f"unknown well {self.well!r}")
        object.__setattr__(self, "params", dict(self.params))

    @property
    def is_pulse(self) -> bool:
        return self.operation in ("rotation", "shelve")

    def to_dict(self) -> dict:
        return {"operation": self.operation, "duration": self.duration, "well": self.well,
                "label": self.label, "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SequenceStep":
        params = dict(d.get("params", {}))
        if "levels" in params:
            params["levels"] = tuple(params["levels"])
        return cls(d["operation"], float(d["duration"]), d.get("well", "single"), d.get("label", ""), params)


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass(frozen=True)
class ExperimentPlan:
    variant: str
    steps: tuple[SequenceStep, ...]
    phi_p: float = 0.0
    phi_A: object = "auto"

    @property
    def total_duration(self) -> float:
        return float(sum(s.duration for s in self.steps))

    @property
    def pulse_count(self) -> int:
        return sum(s.is_pulse for s in self.steps)

    def index_of(self, predicate) -> int:
        for i, s in enumerate(self.steps):
            if predicate(s):
                return i
        raise ProtocolError("step not found in plan")

    def analysis_index(self) -> int:
        return self.index_of(lambda s: s.params.get("phi") == "phi_p")

    def with_phases(self, phi_p=None, phi_A=None) -> "ExperimentPlan":
        return replace(self, phi_p=self.phi_p if phi_p is None else float(phi_p),
                       phi_A=self.phi_A if phi_A is None else phi_A)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "phi_p": self.phi_p, "phi_A": self.phi_A,
                "steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentPlan":
        phi_A = d.get("phi_A", "auto")
        if phi_A != "auto":
            phi_A = float(phi_A)
        return cls(d["variant"], tuple(SequenceStep.from_dict(s) for s in d["steps"]),
                   float(d.get("phi_p", 0.0)), phi_A)


def save_plan(plan: ExperimentPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n")


def load_plan(path) -> ExperimentPlan:
    return ExperimentPlan.from_dict(json.loads(Path(path).read_text()))


# -- plan construction ------------------------------------------------------

def _dwell(duration, well="single", label="--"):
    return SequenceStep("dephase_dwell", duration, well, label)


def _pulse(kind, wells, theta, phi, duration, label, **extra):
    return SequenceStep("rotation", duration, wells, label,
                        {"kind": kind, "theta": theta, "phi": phi, **extra})


def _shelve(wells, levels, duration, label):
    return SequenceStep("shelve", duration, wells, label,
                        {"kind": dyn.SHELVING, "theta": np.pi, "phi": 0.0, "levels": tuple(levels)})


def _initial_steps():
    return [
        _dwell(935, label="order ions Be-Mg-Mg-Be"),
        _dwell(406),
        SequenceStep("cool", 3500, "single", "Doppler cool (Be & Mg)", {"reset": False}),
        SequenceStep("cool", 500, "single", "Doppler cool (Be only)", {"reset": False}),
        _dwell(2),
        _dwell(2, label="repump Mg"),
        _dwell(25, label="repump Be"),
        SequenceStep("cool", 2753, "single", "Be sideband cool", {"reset": False}),
        SequenceStep("prepare", 266, "single", "prepare Psi+", {"checkpoint": 1}),
        SequenceStep("separate", 819, "both", "move and separate", {"checkpoint": 2}),
        SequenceStep("cool", 400, "both", "Mg Doppler cool", {"reset": False}),
        SequenceStep("cool", 1078, "both", "Mg second-sideband cool", {"reset": False}),
        SequenceStep("cool", 1277, "both", "Mg first-sideband cool", {"reset": True, "checkpoint": 3}),
        _dwell(22, "both"),
        _pulse(dyn.SIDEBAND, "A", np.pi, 0.0, 12, "spin->motion A", checkpoint=4),
        _dwell(14, "both"),
        _shelve("A", (DOWN, SHELF_0), 3, "eps_A transfer down->2,0"),
        _dwell(22, "both"),
        _pulse(dyn.CARRIER, "B", np.pi, 0.0, 4, "spin echo B"),
    ]


def _well_b_transfer_steps():
    return [
        _dwell(38, "both"),
        _pulse(dyn.SIDEBAND, "B", np.pi, 0.0, 14, "spin->motion B", checkpoint=5),
        _dwell(24, "both"),
        _shelve("B", (DOWN, SHELF_0), 4, "eps_B transfer down->2,0"),
        _dwell(24, "both"),
        _pulse(dyn.SIDEBAND, "B", np.pi, 0.0, 14, "motion->spin B"),
        _dwell(38, "both"),
    ]


def _residual_transfer_steps():
    return [
        _dwell(22),
        _shelve("both", (SHELF_0, SHELF_M1), 3, "eps 2,0->2,-1"),
        _dwell(22),
        _shelve("both", (SHELF_M1, SHELF_M2), 4, "eps 2,-1->2,-2"),
        _dwell(22),
    ]


def _final_transfer_steps():
    return [
        _shelve("both", (DOWN, SHELF_0), 3, "down->2,0"),
        _dwell(22),
        _shelve("both", (SHELF_0, SHELF_M1), 3, "2,0->2,-1"),
        _dwell(22),
        _shelve("both", (SHELF_M1, SHELF_M2), 4, "2,-1<->2,-2"),
        _dwell(43),
        SequenceStep("measure", 200, "single", "measure"),
    ]


def _analysis_steps():
    return [
        _pulse(dyn.CARRIER, "B", np.pi, 0.0, 4, "spin echo B"),
        _dwell(39, "both"),
        _pulse(dyn.SIDEBAND, "A", np.pi, "phi_A", 11, "motion->spin A"),
        SequenceStep("recombine", 1219, "both", "recombine"),
        SequenceStep("cool", 400, "single", "Mg Doppler cool", {"reset": False}),
        *_residual_transfer_steps(),
        _pulse(dyn.CARRIER, "both", np.pi / 2, -3 * np.pi / 4, 1, "rotate to measurement basis"),
        _dwell(6),
        _pulse(dyn.CARRIER, "both", np.pi / 2, "phi_p", 1, "analysis pulse"),
        _dwell(79),
        *_final_transfer_steps(),
    ]


def build_plan(variant: str, noise: Optional[dyn.NoiseModel] = None, overrides: Optional[Mapping] = None) -> ExperimentPlan:
    """Ordered step list for one experiment variant.

    ``overrides`` may set ``phi_p``, ``phi_A`` (radians or ``"auto"``) and
    ``spin_motion_delay`` (us).  ``noise`` is accepted for interface symmetry;
    plans do not depend on it.
    """
    overrides = dict(overrides or {})
    variant = variant.replace("-", "_")
    if variant not in VARIANTS:
        raise ProtocolError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    head = _initial_steps()
    if variant == "emo":
        steps = head + _well_b_transfer_steps() + _analysis_steps()
    elif variant == "spin_motion":
        delay = float(overrides.pop("spin_motion_delay", SPIN_MOTION_DELAY_US))
        steps = head + [_dwell(delay, "both", "spin-motion hold")] + _analysis_steps()
    elif variant == "control_after_state4":
        steps = head[:-1] + _residual_transfer_steps() + _final_transfer_steps()
    else:
        steps = head + _well_b_transfer_steps()[:5] + _residual_transfer_steps() + _final_transfer_steps()
    phi_p = float(overrides.pop("phi_p", 0.0))
    phi_A = overrides.pop("phi_A", "auto")
    if phi_A != "auto":
        phi_A = float(phi_A)
    overrides.pop("spin_motion_delay", None)
    if overrides:
        raise ProtocolError(f"unknown plan overrides {sorted(overrides)}")
    return ExperimentPlan(variant, tuple(steps), phi_p, phi_A)


# -- execution ----------------------------------------------------------------

@dataclass
class Timeline:
    elapsed_us: float = 0.0
    separated_us: float = 0.0
    xi_field: float = 0.0
    checkpoint_xi: dict = field(default_factory=dict)
    superposition_dwell_us: dict = field(default_factory=dict)
    intervals: list = field(default_factory=list)


@dataclass
class Checkpoint:
    index: int
    step_index: int
    state: qs.QuantumState
    fidelity: Optional[float] = None
    xi: Optional[float] = None


@dataclass
class ExecutionResult:
    state: qs.QuantumState
    timeline: Timeline
    checkpoints: dict
    jitter: dyn.ShotJitter
    phi_A: float


def initial_state(noise: dyn.NoiseModel) -> qs.QuantumState:
    reg = qs.Register([qs.qudit(ION["A"]), qs.qudit(ION["B"]),
                       qs.mode(MODE["A"], noise.cutoff), qs.mode(MODE["B"], noise.cutoff)])
    return qs.basis_state(reg, {})


def _targets(well: str):
    return ["A", "B"] if well in ("both", "single") else [well]


class _Runner:
    """Mutable execution context for one pass through a plan."""

    def __init__(self, plan, noise, jitter, phi_A, validate, state=None, timeline=None, context=None):
        self.plan = plan
        self.noise = noise
        self.jitter = jitter
        self.phi_A = phi_A
        self.validate = validate
        self.state = state if state is not None else initial_state(noise)
        self.timeline = timeline if timeline is not None else Timeline()
        ctx = context or {}
        self.separated = ctx.get("separated", False)
        self.clocks = dict(ctx.get("clocks", {}))
        self.checkpoints = {}

    def context(self):
        return {"separated": self.separated, "clocks": dict(self.clocks)}

    def resolve_phase(self, phi):
        if phi == "phi_p":
            return self.plan.phi_p
        if phi == "phi_A":
            return self.phi_A
        return float(phi)

    def has_modes(self):
        return MODE["A"] in self.state.register.labels

    def precess(self, duration):
        g = self.noise.field_gradient_freq if self.separated else 0.0
        u = self.jitter.uniform_detuning
        if self.separated:
            self.timeline.xi_field += 2 * np.pi * g * duration * 1e-6
        self.state = dyn.free_precession(self.state, duration, {ION["A"]: u + g / 2, ION["B"]: u - g / 2})

    def rotate(self, step):
        p = step.params
        phi = self.resolve_phase(p.get("phi", 0.0))
        for w in _targets(step.well):
            rot = dyn.Rotation(p["kind"], ION[w], float(p["theta"]), phi,
                               tuple(p.get("levels", (UP, DOWN))), max(step.duration, 1e-9),
                               MODE[w] if p["kind"] == dyn.SIDEBAND else None)
            if rot.kind == dyn.SIDEBAND:
                m = MODE[w]
                if m in self.clocks:
                    self.timeline.superposition_dwell_us.setdefault(m, []).append(self.clocks.pop(m))
                else:
                    self.clocks[m] = 0.0
            self.state = dyn.apply_rotation(self.state, rot, self.jitter.angle_factor)
            if rot.kind == dyn.SIDEBAND:
                self.state = dyn.scatter_error(self.state, ION[w], self.noise)

    def run_step(self, i, step):
        op = step.operation
        started = set(self.clocks)
        if op == "prepare":
            spins = dyn.prepare_psi_plus(self.noise, SPINS)
            modes = qs.partial_trace(self.state, [MODE["A"], MODE["B"]])
            self.state = qs.tensor(spins, modes)
        elif op == "separate":
            for w in "AB":
                self.state = dyn.sympathetic_cooling_reset(self.state, MODE[w], self.noise.separation_nbar)
            self.separated = True
            self.precess(step.duration)
        elif op == "cool":
            self.precess(step.duration)
            if step.params.get("reset") and self.has_modes():
                for w, nbar in (("A", self.noise.cooled_nbar_A), ("B", self.noise.cooled_nbar_B)):
                    self.state = dyn.sympathetic_cooling_reset(self.state, MODE[w], nbar)
                    self.clocks.pop(MODE[w], None)
        elif op in ("rotation", "shelve"):
            # the field keeps acting during a pulse; split its precession around the rotation
            self.precess(step.duration / 2)
            self.rotate(step)
            self.precess(step.duration / 2)
        elif op == "dephase_dwell":
            self.precess(step.duration)
        elif op == "recombine":
            self.precess(step.duration)
            self.separated = False
            self.state = qs.partial_trace(self.state, SPINS)
            self.clocks.clear()
        # measure: no state change

        if self.has_modes():
            for m in list(self.clocks):
                if m in started:
                    self.state = dyn.motional_dephasing(self.state, m, step.duration, self.noise, self.clocks[m])
                    self.clocks[m] += step.duration
        self.timeline.elapsed_us += step.duration
        if self.separated or op == "recombine":
            self.timeline.separated_us += step.duration
            self.timeline.intervals.append((step.label or op, step.duration))
        if self.validate != "off":
            try:
                if self.validate == "full":
                    self.state.check()
                else:
                    m = self.state.matrix
                    if abs(np.trace(m) - 1) > qs.HERMITIAN_TOL or np.max(np.abs(m - m.conj().T)) > qs.HERMITIAN_TOL:
                        raise qs.StateError("trace or Hermiticity violated")
            except qs.StateError as exc:
                raise InvariantViolation(i, step.label or op, exc) from exc
        if "checkpoint" in step.params:
            k = int(step.params["checkpoint"])
            self.checkpoints[k] = Checkpoint(k, i, self.state)

    def run(self, start=0, stop=None):
        steps = self.plan.steps
        stop = len(steps) if stop is None else stop
        for i in range(start, stop):
            self.run_step(i, steps[i])
        return self


# Reference forms of the checkpoint states: (pair of basis assignments, relative coefficient)
# such that the ideal state is (|first> + coef * exp(i xi) |second>) / sqrt(2).
_CHECKPOINT_FORMS = {
    1: (((UP, DOWN, 0, 0), (DOWN, UP, 0, 0)), 1.0),
    2: (((UP, DOWN), (DOWN, UP)), 1.0),
    3: (((UP, DOWN, 0, 0), (DOWN, UP, 0, 0)), 1.0),
    4: (((UP, DOWN, 0, 0), (UP, UP, 1, 0)), -1j),
    5: (((UP, UP, 0, 0), (UP, UP, 1, 1)), -1.0),
}


def _audit_state(k: int, state: qs.QuantumState) -> qs.QuantumState:
    return qs.partial_trace(state, SPINS) if k == 2 else state


def checkpoint_reference(k: int, xi: float, register: qs.Register) -> np.ndarray:
    """State vector of the ideal checkpoint-``k`` state with phase ``xi``."""
    (first, second), coef = _CHECKPOINT_FORMS[k]
    return qs.state_vector(register, {first: 1.0, second: coef * np.exp(1j * xi)})


def checkpoint_xi(k: int, state: qs.QuantumState) -> float:
    """Read the relative phase of checkpoint form ``k`` off a (near-ideal) state."""
    st = _audit_state(k, state)
    (first, second), coef = _CHECKPOINT_FORMS[k]
    labels = st.register.labels
    c = qs.coherence_element(st, dict(zip(labels, second)), dict(zip(labels, first)))
    return float(np.angle(c / coef))


def compensation_phase(plan: ExperimentPlan, noise: dyn.NoiseModel) -> float:
    """phi_A that cancels the deterministic relative phase accumulated up to recombination."""
    try:
        stop = plan.index_of(lambda s: s.operation == "recombine") + 1
    except ProtocolError:
        return 0.0
    ideal = dyn.NoiseModel.ideal(field_gradient_freq=noise.field_gradient_freq, cutoff=noise.cutoff)
    r = _Runner(replace(plan, phi_A=0.0), ideal, dyn.ShotJitter(), 0.0, "off").run(0, stop)
    c = qs.coherence_element(r.state, {ION["A"]: DOWN, ION["B"]: UP}, {ION["A"]: UP, ION["B"]: DOWN})
    return float(-np.angle(c))


def _resolve_phi_A(plan, noise):
    return compensation_phase(plan, noise) if plan.phi_A == "auto" else float(plan.phi_A)


def execute(plan: ExperimentPlan, noise: dyn.NoiseModel, seed=None, *, jitter: Optional[dyn.ShotJitter] = None,
            validate: str = "full", audit: bool = True) -> ExecutionResult:
    """Evolve the initial state through ``plan``.

    Per-shot jitter is drawn once from ``seed`` unless ``jitter`` is given.
    With ``audit`` the checkpoint fidelities are computed against the ideal
    checkpoint forms, whose phase xi comes from a noiseless pass with the same
    field gradient (stored in ``timeline.checkpoint_xi``).
    """
    if jitter is None:
        jitter = dyn.sample_shot_jitter(noise, seed)
    phi_A = _resolve_phi_A(plan, noise)
    r = _Runner(plan, noise, jitter, phi_A, validate).run()
    if audit and r.checkpoints:
        ideal = dyn.NoiseModel.ideal(field_gradient_freq=noise.field_gradient_freq, cutoff=noise.cutoff)
        twin = _Runner(plan, ideal, dyn.ShotJitter(), phi_A, "off").run(0, max(c.step_index for c in r.checkpoints.values()) + 1)
        for k, cp in r.checkpoints.items():
            xi = checkpoint_xi(k, twin.checkpoints[k].state)
            st = _audit_state(k, cp.state)
            cp.xi = xi
            cp.fidelity = qs.fidelity(st, checkpoint_reference(k, xi, st.register))
            r.timeline.checkpoint_xi[k] = xi
    return ExecutionResult(r.state, r.timeline, r.checkpoints, jitter, phi_A)


def averaged_final_states(plan: ExperimentPlan, noise: dyn.NoiseModel, phases: Sequence[float] = (None,),
                          order: int = 5, validate: str = "cheap") -> list:
    """Jitter-averaged final states, one per analysis phase.

    The part of the plan before the analysis pulse is run once per quadrature
    node; only the short tail is repeated for each phase.
    """
    phi_A = _resolve_phi_A(plan, noise)
    nodes = dyn.jitter_quadrature(noise, order)
    try:
        split = plan.analysis_index()
    except ProtocolError:
        split = len(plan.steps)
    out = [None] * len(phases)
    for node in nodes:
        head = _Runner(plan, noise, node, phi_A, validate).run(0, split)
        for j, phi in enumerate(phases):
            p = plan if phi is None else plan.with_phases(phi_p=phi)
            tail = _Runner(p, noise, node, phi_A, validate, head.state, head.timeline, head.context())
            tail.run(split)
            m = node.weight * tail.state.matrix
            out[j] = m if out[j] is None else out[j] + m
    reg = head.state.register if split == len(plan.steps) else tail.state.register
    return [qs.QuantumState(reg, m) for m in out]


def residual_shelved_population(state: qs.QuantumState) -> tuple[float, float]:
    """Population of each ion outside the (up, down) qubit levels."""
    eps = []
    for ion in SPINS:
        red = qs.partial_trace(state, [ion]).diagonal()
        eps.append(float(max(0.0, 1.0 - red[UP] - red[DOWN])))
    return tuple(eps)


def run_control(variant: str, noise: dyn.NoiseModel, shots: int, seed=None,
                detection: Optional[meas.DetectionModel] = None) -> meas.PopulationEstimate:
    """Populations after the control sequences.

    ``shots = 0`` returns the exact class weights of the jitter-averaged state.
    """
    variant = variant.replace("-", "_")
    if variant not in ("control_after_state4", "control_after_state5"):
        raise ProtocolError(f"{variant!r} is not a control variant")
    if shots < 0:
        raise ProtocolError("shots must be non-negative")
    detection = detection or meas.DetectionModel()
    (state,) = averaged_final_states(build_plan(variant, noise), noise)
    if shots == 0:
        return meas.exact_populations(state, detection)
    counts = meas.simulate_counts(state, detection, shots, seed)
    return meas.ml_populations(counts, detection)


def default_phases(n: int = 16) -> np.ndarray:
    return np.linspace(0.0, 2 * np.pi, n, endpoint=False)


def parity_scan(plan: ExperimentPlan, noise: dyn.NoiseModel, phases: Sequence[float], shots: int = 500,
                seed=None, detection: Optional[meas.DetectionModel] = None, states=None) -> list:
    """Parity points over analysis phases.

    ``shots = 0`` gives exact parities of the jitter-averaged states.  Each
    phase point draws counts from its own child of ``SeedSequence(seed)``.
    Precomputed final ``states`` (one per phase) may be passed to reuse them
    across repetitions.
    """
    detection = detection or meas.DetectionModel()
    if states is None:
        states = averaged_final_states(plan, noise, phases)
    seeds = np.random.SeedSequence(seed).spawn(len(phases))
    return [meas.parity_point(phi, st, detection, shots, s) for phi, st, s in zip(phases, states, seeds)]
