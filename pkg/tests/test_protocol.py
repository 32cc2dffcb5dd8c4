from dataclasses import replace

import numpy as np
import pytest

from emosim import dynamics as dyn
from emosim import measurement as meas
from emosim import protocol as proto
from emosim import qstate as qs
from emosim.dynamics import DOWN, UP

IDEAL = dyn.NoiseModel.ideal()
A, B = proto.ION["A"], proto.ION["B"]
MA, MB = proto.MODE["A"], proto.MODE["B"]


def truncated(plan, stop):
    return replace(plan, steps=plan.steps[:stop])


def label_index(plan, label):
    return plan.index_of(lambda s: s.label == label)


@pytest.fixture(scope="module")
def emo():
    return proto.build_plan("emo")


@pytest.fixture(scope="module")
def ideal_run(emo):
    return proto.execute(emo, IDEAL)


@pytest.fixture(scope="module")
def ideal_scan_states(emo):
    phases = proto.default_phases(16)
    return phases, proto.averaged_final_states(emo, IDEAL, phases, validate="full")


class TestPlans:
    def test_variants_build(self):
        for v in proto.VARIANTS:
            plan = proto.build_plan(v)
            assert plan.variant == v
            assert plan.steps[-1].operation == "measure"

    def test_spin_motion_replaces_seven_steps(self, emo):
        sm = proto.build_plan("spin-motion")
        assert len(emo.steps) - len(sm.steps) == 6
        holds = [s for s in sm.steps if s.label == "spin-motion hold"]
        assert len(holds) == 1 and holds[0].duration == 90
        assert sum(s.params.get("kind") == dyn.SIDEBAND and s.well == "B" for s in sm.steps) == 0

    def test_total_duration(self, emo):
        assert emo.total_duration == pytest.approx(14_000, rel=0.10)

    def test_overrides(self):
        plan = proto.build_plan("emo", overrides={"phi_p": 0.3, "phi_A": 1.1})
        assert plan.phi_p == 0.3 and plan.phi_A == 1.1
        assert plan.steps[plan.analysis_index()].params["phi"] == "phi_p"

    def test_spin_motion_delay_override(self):
        plan = proto.build_plan("spin_motion", overrides={"spin_motion_delay": 120})
        assert any(s.duration == 120 and s.label == "spin-motion hold" for s in plan.steps)

    @pytest.mark.parametrize("variant,overrides", [("bell", None), ("emo", {"theta": 1})])
    def test_rejects(self, variant, overrides):
        with pytest.raises(proto.ProtocolError):
            proto.build_plan(variant, overrides=overrides)

    def test_step_validation(self):
        with pytest.raises(proto.ProtocolError):
            proto.SequenceStep("teleport", 1.0)
        with pytest.raises(proto.ProtocolError):
            proto.SequenceStep("dephase_dwell", -1.0)

    def test_json_round_trip(self, emo, tmp_path):
        path = tmp_path / "plan.json"
        proto.save_plan(emo.with_phases(phi_p=0.25), path)
        back = proto.load_plan(path)
        assert back == emo.with_phases(phi_p=0.25)

    def test_echo_spacing_near_40us(self, emo):
        i = label_index(emo, "spin echo B")
        assert emo.steps[i - 1].duration + emo.steps[i - 2].duration + emo.steps[i - 3].duration == pytest.approx(
            40, abs=2)


class TestIdealExecution:
    def test_checkpoint_fidelities(self, ideal_run):
        assert sorted(ideal_run.checkpoints) == [1, 2, 3, 4, 5]
        for cp in ideal_run.checkpoints.values():
            assert cp.fidelity == pytest.approx(1.0, abs=1e-9)

    def test_state4_structure(self, ideal_run):
        s4 = ideal_run.checkpoints[4].state
        assert qs.population(s4, {A: UP}) == pytest.approx(1, abs=1e-12)
        assert qs.population(s4, {MB: 0}) == pytest.approx(1, abs=1e-12)
        red = qs.partial_trace(s4, [B, MA])
        purity_b = np.real(np.trace(qs.partial_trace(red, [B]).matrix @ qs.partial_trace(red, [B]).matrix))
        assert purity_b == pytest.approx(0.5, abs=1e-12)
        assert np.real(np.trace(red.matrix @ red.matrix)) == pytest.approx(1, abs=1e-12)

    def test_dwell_times(self, ideal_run):
        d = ideal_run.timeline.superposition_dwell_us
        assert d[MA][0] == pytest.approx(250, rel=0.1)
        assert d[MB][0] == pytest.approx(50, rel=0.1)

    def test_xi_only_while_separated(self, emo):
        n = dyn.NoiseModel.ideal(field_gradient_freq=700.0)
        r = proto.execute(emo, n, audit=False, validate="off")
        assert r.timeline.separated_us < r.timeline.elapsed_us
        assert r.timeline.xi_field == pytest.approx(2 * np.pi * 700.0 * r.timeline.separated_us * 1e-6)

    def test_parity_is_minus_sin(self, ideal_scan_states):
        phases, states = ideal_scan_states
        for phi, st in zip(phases, states):
            assert meas.state_parity(st) == pytest.approx(-np.sin(2 * phi), abs=1e-9)

    def test_parity_amplitude_equals_coherence(self, emo, ideal_scan_states):
        phases, states = ideal_scan_states
        st = proto.execute(truncated(emo, emo.analysis_index()), IDEAL, audit=False).state
        c = qs.coherence_element(st, {A: DOWN, B: DOWN}, {A: UP, B: UP})
        fit = meas.fit_parity([meas.ParityPoint(p, meas.state_parity(s)) for p, s in zip(phases, states)])
        assert fit.C2 == pytest.approx(2 * abs(c), abs=1e-9)
        assert 2 * abs(c) == pytest.approx(1.0, abs=1e-9)

    def test_no_down_population_after_shelving(self, ideal_scan_states):
        _, states = ideal_scan_states
        for st in states:
            assert qs.population(st, {A: DOWN}) == pytest.approx(0, abs=1e-12)
            assert qs.population(st, {B: DOWN}) == pytest.approx(0, abs=1e-12)

    def test_entanglement_resides_in_motion(self, emo):
        stop = label_index(emo, "motion->spin B")
        st = proto.execute(truncated(emo, stop), IDEAL, audit=False).state
        spins = qs.partial_trace(st, [A, B])
        assert qs.population(spins, {A: UP, B: UP}) == pytest.approx(1, abs=1e-12)
        motion = qs.partial_trace(st, [MA, MB])
        assert abs(qs.coherence_element(motion, {MA: 0, MB: 0}, {MA: 1, MB: 1})) == pytest.approx(0.5, abs=1e-12)

    def test_residual_zero(self):
        assert proto.residual_shelved_population(proto.execute(
            truncated(proto.build_plan("emo"), 17), IDEAL, audit=False).state) == pytest.approx((0, 0), abs=1e-12)


class TestImperfectTransfer:
    def _plan(self):
        emo = proto.build_plan("emo")
        i = label_index(emo, "spin->motion A")
        steps = list(emo.steps)
        steps[i] = replace(steps[i], params={**steps[i].params, "theta": 0.9 * np.pi})
        stop = label_index(emo, "eps_A transfer down->2,0") + 1
        return replace(emo, steps=tuple(steps[:stop]))

    def test_eps_a_from_state3(self):
        eps_a, eps_b = proto.residual_shelved_population(proto.execute(self._plan(), IDEAL, audit=False).state)
        # |down>_A carries weight 1/2 in state (3); a 0.9 pi pulse leaves cos^2(0.45 pi) of it behind
        assert eps_a == pytest.approx(0.5 * 0.024472, abs=1e-6)
        assert eps_a == pytest.approx(0.5 * np.cos(0.45 * np.pi) ** 2, abs=1e-12)
        assert eps_b == pytest.approx(0, abs=1e-12)

    def test_remnant_of_pure_down(self):
        reg = qs.Register([qs.qudit(A), qs.mode(MA)])
        s = qs.basis_state(reg, {A: DOWN})
        s = dyn.apply_rotation(s, dyn.Rotation(dyn.SIDEBAND, A, 0.9 * np.pi, mode=MA))
        s = dyn.apply_rotation(s, dyn.Rotation(dyn.SHELVING, A, np.pi, level_pair=(DOWN, dyn.SHELF_0)))
        assert qs.population(s, {A: dyn.SHELF_0}) == pytest.approx(0.024472, abs=1e-6)


class TestPhaseCompensation:
    @pytest.mark.parametrize("gradient", [0.0, 1000.0, 2500.0, 5000.0])
    def test_fit_independent_of_gradient(self, gradient, ideal_scan_states):
        phases, ref_states = ideal_scan_states
        ref = meas.fit_parity([meas.ParityPoint(p, meas.state_parity(s)) for p, s in zip(phases, ref_states)])
        plan = proto.build_plan("emo")
        n = dyn.NoiseModel.ideal(field_gradient_freq=gradient)
        states = proto.averaged_final_states(plan, n, phases)
        fit = meas.fit_parity([meas.ParityPoint(p, meas.state_parity(s)) for p, s in zip(phases, states)])
        assert fit.C2 == pytest.approx(ref.C2, abs=1e-6)
        assert np.angle(np.exp(1j * (fit.phi2 - ref.phi2))) == pytest.approx(0, abs=1e-6)

    def test_uncompensated_phase_costs_contrast(self, ideal_scan_states):
        phases, ref_states = ideal_scan_states
        ref = meas.fit_parity([meas.ParityPoint(p, meas.state_parity(s)) for p, s in zip(phases, ref_states)])
        plan = proto.build_plan("emo")
        auto = proto.compensation_phase(plan, IDEAL)
        off = proto.averaged_final_states(plan.with_phases(phi_A=auto + 0.8), IDEAL, phases)
        fit = meas.fit_parity([meas.ParityPoint(p, meas.state_parity(s)) for p, s in zip(phases, off)])
        # an uncompensated DFS phase delta leaves a singlet admixture: contrast cos^2(delta / 2)
        assert fit.C2 == pytest.approx(np.cos(0.4) ** 2, abs=1e-9)
        assert fit.C2 < ref.C2


class TestNoisyExecution:
    def test_deterministic(self, emo):
        n = dyn.NoiseModel()
        a = proto.execute(emo, n, seed=11, validate="cheap")
        b = proto.execute(emo, n, seed=11, validate="cheap")
        assert [c.fidelity for c in a.checkpoints.values()] == [c.fidelity for c in b.checkpoints.values()]
        assert np.array_equal(a.state.matrix, b.state.matrix)
        assert a.jitter == b.jitter

    def test_every_step_valid_both_protocols(self):
        for v in ("emo", "spin_motion"):
            proto.execute(proto.build_plan(v), dyn.NoiseModel(), seed=3, validate="full", audit=False)

    def test_invariant_violation_reports_step(self, emo, monkeypatch):
        def broken(noise, labels, dim=5):
            s = dyn.spin_register(labels, dim)
            return qs.QuantumState(s, 2 * qs.basis_state(s, {}).matrix)

        monkeypatch.setattr(proto.dyn, "prepare_psi_plus", broken)
        with pytest.raises(proto.InvariantViolation) as info:
            proto.execute(emo, IDEAL, audit=False)
        assert info.value.step_index == label_index(emo, "prepare Psi+")

    def test_thermal_reduces_fidelity(self, emo):
        r = proto.execute(emo, dyn.NoiseModel().thermal_only(), jitter=dyn.ShotJitter(), validate="cheap")
        assert r.checkpoints[3].fidelity < 1
        assert r.checkpoints[5].fidelity <= r.checkpoints[4].fidelity + 1e-12


class TestControls:
    def test_noiseless_state4(self):
        est = proto.run_control("control_after_state4", IDEAL, 0)
        assert (est.P_upup, est.P_downdown, est.P_mixed) == pytest.approx((0.5, 0, 0.5), abs=1e-12)

    def test_noiseless_state5(self):
        est = proto.run_control("control-after-state5", IDEAL, 0)
        assert est.P_upup == pytest.approx(1, abs=1e-12)

    def test_default_budget_state4(self):
        est = proto.run_control("control_after_state4", dyn.NoiseModel(), 10_000, seed=4)
        assert 0.42 <= est.P_upup <= 0.52

    def test_rejects_non_control(self):
        with pytest.raises(proto.ProtocolError):
            proto.run_control("emo", IDEAL, 10)


class TestScan:
    def test_seeded_scan_reproducible(self, emo, ideal_scan_states):
        phases, states = ideal_scan_states
        a = proto.parity_scan(emo, IDEAL, phases, shots=200, seed=5, states=states)
        b = proto.parity_scan(emo, IDEAL, phases, shots=200, seed=5, states=states)
        assert a == b
        c = proto.parity_scan(emo, IDEAL, phases, shots=200, seed=6, states=states)
        assert a != c

    def test_exact_scan(self, emo, ideal_scan_states):
        phases, states = ideal_scan_states
        pts = proto.parity_scan(emo, IDEAL, phases, shots=0, states=states)
        assert [p.parity for p in pts] == pytest.approx(-np.sin(2 * phases), abs=1e-9)
