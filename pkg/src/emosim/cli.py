"""Command-line front end.

Subcommands
-----------
run      simulate a parity scan and write ``parity.csv``, ``fit.json`` and
         ``checkpoints.json``
modes    axial normal modes of a chain, or stretch-mode exchange of a double well
control  populations after the control sequences
fit      refit an existing parity CSV

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dynamics as dyn
from . import measurement as meas
from . import modes as md
from . import protocol as proto

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
SEED_ENV = "EMOSIM_SEED"
NOISE_PRESETS = ("default", "off", "thermal")


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Everything that determines the output of ``run`` and ``control``."""

    variant: str = "emo"
    shots: int = 500
    phases: int = 16
    noise: str = "default"
    noise_overrides: dict = field(default_factory=dict)
    seed: Optional[int] = None
    out_dir: str = "."
    analytic: bool = False
    quadrature_order: int = 5
    svg: bool = False

    def validate(self, fitting: bool = True) -> None:
        variant = self.variant.replace("-", "_")
        if variant not in proto.VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.noise not in NOISE_PRESETS:
            raise ConfigError(f"noise preset must be one of {NOISE_PRESETS}")
        if not self.analytic and self.shots < 1:
            raise ConfigError("shots must be >= 1 (use --analytic for the exact path)")
        if fitting and self.phases < 5:
            raise ConfigError("a parity fit needs at least 5 phase points")
        if self.quadrature_order < 1:
            raise ConfigError("quadrature order must be >= 1")
        self.noise_model()

    def noise_model(self) -> dyn.NoiseModel:
        base = dyn.NoiseModel()
        if self.noise == "off":
            base = dyn.NoiseModel.ideal()
        elif self.noise == "thermal":
            base = base.thermal_only()
        known = {f.name: f for f in dataclasses.fields(dyn.NoiseModel)}
        changes = {}
        for key, raw in self.noise_overrides.items():
            if key not in known:
                raise ConfigError(f"unknown noise parameter {key!r}")
            changes[key] = _coerce(key, raw, getattr(base, key))
        try:
            return base.with_(**changes)
        except (dyn.DynamicsError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _coerce(key, raw, current):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, str):
        return raw
    if raw.lower() in ("none", "auto"):
        return None
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r}") from None
    return int(value) if isinstance(current, int) and value.is_integer() else value


def _parse_assignments(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"expected key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return data


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw in (None, ""):
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer") from None


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then the environment seed, then flags."""
    values = {}
    if getattr(args, "config", None):
        values.update(_load_config_file(args.config))
    if "seed" not in values:
        values["seed"] = _default_seed()
    for name in ("variant", "shots", "phases", "noise", "seed", "out_dir", "quadrature_order"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for name in ("analytic", "svg"):
        if getattr(args, name, False):
            values[name] = True
    overrides = dict(values.get("noise_overrides") or {})
    overrides.update(_parse_assignments(getattr(args, "set", None)))
    values["noise_overrides"] = overrides
    cfg = RunConfig(**values)
    if cfg.analytic:
        cfg.shots = 0
    return cfg


# -- subcommands --------------------------------------------------------------

def _checkpoint_report(plan, noise) -> dict:
    res = proto.execute(plan, noise, jitter=dyn.ShotJitter(), validate="cheap")
    return {
        "phi_A": res.phi_A,
        "checkpoints": {str(k): {"fidelity": cp.fidelity, "xi": cp.xi, "step_index": cp.step_index}
                        for k, cp in sorted(res.checkpoints.items())},
        "residual_shelved": list(proto.residual_shelved_population(res.state)),
    }


def _write_svg(points, fit, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    phi = np.array([p.phi_p for p in points])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.errorbar(phi, [p.parity for p in points], yerr=[p.std_error for p in points], fmt="o", ms=4)
    grid = np.linspace(0, 2 * np.pi, 400)
    ax.plot(grid, fit.model(grid), lw=1.2)
    ax.set_xlabel("analysis phase (rad)")
    ax.set_ylabel("parity")
    ax.set_ylim(-1.1, 1.1)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_run(cfg: RunConfig) -> dict:
    cfg.validate(fitting=True)
    noise = cfg.noise_model()
    plan = proto.build_plan(cfg.variant, noise)
    if plan.variant.startswith("control"):
        raise ConfigError("control variants have no analysis phase; use the control subcommand")
    phases = proto.default_phases(cfg.phases)
    states = proto.averaged_final_states(plan, noise, phases, order=cfg.quadrature_order)
    points = proto.parity_scan(plan, noise, phases, shots=cfg.shots, seed=cfg.seed, states=states)
    try:
        fit = meas.fit_parity(points)
    except meas.FitError as exc:
        raise NumericalFailure(f"parity fit failed: {exc}") from None
    if not np.all(np.isfinite(fit.cov)):
        raise NumericalFailure("parity fit produced a non-finite covariance")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meas.write_parity_csv(points, out / "parity.csv")
    meas.write_fit_json(fit, out / "fit.json")
    report = _checkpoint_report(plan, noise)
    report["config"] = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "out_dir"}
    (out / "checkpoints.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if cfg.svg:
        _write_svg(points, fit, out / "parity.svg")
    return fit.to_dict()


def cmd_control(cfg: RunConfig) -> dict:
    cfg.validate(fitting=False)
    variant = cfg.variant.replace("-", "_")
    if variant not in ("control_after_state4", "control_after_state5"):
        raise ConfigError("control needs variant control_after_state4 or control_after_state5")
    est = proto.run_control(variant, cfg.noise_model(), cfg.shots, seed=cfg.seed)
    d = est.to_dict()
    d["variant"] = variant
    return d


_FREQ_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*(MHz|kHz|Hz)?\s*$")
_LEN_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*(mm|um|m)?\s*$")
_MODE_ALIASES = {"common": 0, "inphase": 0, "in-phase": 0, "stretch": -1}


def _parse_frequency(text, default_unit="MHz") -> float:
    """Frequency in Hz."""
    m = _FREQ_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse frequency {text!r}")
    scale = {"MHz": 1e6, "kHz": 1e3, "Hz": 1.0}[m.group(2) or default_unit]
    return float(m.group(1)) * scale


def _parse_length_mm(text) -> float:
    m = _LEN_RE.match(text)
    if not m:
        raise ConfigError(f"cannot parse length {text!r}")
    scale = {"mm": 1.0, "um": 1e-3, "m": 1e3}[m.group(2) or "mm"]
    return float(m.group(1)) * scale


def _parse_calibration(text, n_modes):
    key, sep, val = text.partition("=")
    if not sep:
        raise ConfigError("calibration must look like common=2.3MHz")
    key = key.strip().lower()
    if key in _MODE_ALIASES:
        idx = _MODE_ALIASES[key] % n_modes
    else:
        try:
            idx = int(key)
        except ValueError:
            raise ConfigError(f"unknown mode name {key!r}") from None
    if not 0 <= idx < n_modes:
        raise ConfigError(f"mode index {idx} out of range")
    return idx, _parse_frequency(val) / 1e6


def _mode_table(sol: md.ModeSolution) -> dict:
    return {
        "frequencies_mhz": sol.frequencies_mhz.tolist(),
        "mode_vectors": sol.mode_vectors.tolist(),
        "ground_state_sizes_nm": (sol.ground_state_sizes * 1e9).tolist(),
        "positions_um": (sol.positions_m * 1e6).tolist(),
    }


def cmd_modes(args: argparse.Namespace) -> dict:
    species = tuple(s.strip() for s in args.chain.split(",") if s.strip())
    unknown = [s for s in species if s not in md.MASSES]
    if unknown:
        raise ConfigError(f"unknown species {unknown}; known {sorted(md.MASSES)}")
    if args.double_well:
        if len(species) != 4:
            species = ("Be", "Mg", "Mg", "Be")
        config = md.double_well_config(_parse_length_mm(args.spacing), species=species)
    else:
        if not species:
            raise ConfigError("empty chain")
        config = md.IonChainConfig(species, (1.0,), (0.0,))
    n_modes = len(species)
    calibration = args.calibrate
    if calibration is None:
        calibration = "stretch=4.9MHz" if args.double_well else ("common=2.3MHz" if n_modes == 2 else "common=2.0MHz")
    idx, target = _parse_calibration(calibration, 2 if args.double_well else n_modes)
    if args.double_well:
        # the calibration refers to a single well's own pair
        pair = md.IonChainConfig(species[:2], (1.0,), (0.0,))
        scale = md.calibrate_curvature(pair, idx, target).axial_freq_mhz[0]
        config = config.scaled(scale)
    else:
        config = md.calibrate_curvature(config, idx, target)
    sol = md.axial_normal_modes(config)
    result = {"species": list(species), "well_frequency_mhz": list(config.axial_freq_mhz), **_mode_table(sol)}
    if args.double_well:
        ex = md.interwell_exchange(config)
        detuning = _parse_frequency(args.detuning, "kHz")
        result["exchange"] = {
            "spacing_mm": _parse_length_mm(args.spacing),
            "splitting_hz": ex.splitting_hz,
            "exchange_rate_hz": ex.exchange_rate_hz,
            "detuning_hz": detuning,
            "transfer_bound": md.exchange_population_bound(ex.exchange_rate_hz, detuning),
            "resonant_transfer_1us": md.exchange_population_bound(ex.exchange_rate_hz, 0.0, 1e-6),
        }
    return result


def cmd_fit(args: argparse.Namespace) -> dict:
    try:
        points = meas.read_parity_csv(args.csv)
    except (OSError, meas.MeasurementError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read {args.csv}: {exc}") from None
    try:
        fit = meas.fit_parity(points)
    except meas.FitError as exc:
        raise NumericalFailure(str(exc)) from None
    if args.out:
        meas.write_fit_json(fit, args.out)
    return fit.to_dict()


# -- text rendering -----------------------------------------------------------

def _format_modes(result: dict) -> str:
    lines = ["mode  freq (MHz)  vector" + " " * 20 + "ground-state size (nm)"]
    for i, (f, v, s) in enumerate(zip(result["frequencies_mhz"], result["mode_vectors"],
                                      result["ground_state_sizes_nm"])):
        vec = " ".join(f"{x:+.3f}" for x in v)
        size = " ".join(f"{x:6.2f}" for x in s)
        lines.append(f"{i:>4}  {f:10.4f}  {vec:<26}  {size}")
    ex = result.get("exchange")
    if ex:
        lines.append(f"exchange rate {ex['exchange_rate_hz']:.3g} Hz, splitting {ex['splitting_hz']:.3g} Hz")
        lines.append(f"transfer bound at {ex['detuning_hz']:.3g} Hz detuning: {ex['transfer_bound']:.3g}")
    return "\n".join(lines)


def _format_fit(d: dict) -> str:
    s = d["sigma"]
    verdict = "entangled" if d["entangled"] else "not entangled"
    return (f"C2 = {d['C2']:.4f} +/- {s['C2']:.4f}  C1 = {d['C1']:.4f}  C0 = {d['C0']:.4f}  "
            f"({verdict}, margin {d['margin']:+.4f})")


def _format_control(d: dict) -> str:
    s = d["sigma"]
    return (f"{d['variant']}: P_upup = {d['P_upup']:.4f}({s['P_upup']:.4f})  "
            f"P_downdown = {d['P_downdown']:.4f}({s['P_downdown']:.4f})  "
            f"P_mixed = {d['P_mixed']:.4f}({s['P_mixed']:.4f})")


# -- argument parsing ---------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser, variant_default=None) -> None:
    p.add_argument("--config", help="JSON file mirroring RunConfig; flags override it")
    p.add_argument("--variant", default=variant_default, help=f"one of {', '.join(proto.VARIANTS)}")
    p.add_argument("--noise", choices=NOISE_PRESETS, help="noise preset (default: default)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one noise parameter")
    p.add_argument("--shots", type=int, help="shots per point (default 500)")
    p.add_argument("--seed", type=int, help=f"RNG seed (default from ${SEED_ENV})")
    p.add_argument("--quadrature-order", type=int, dest="quadrature_order",
                   help="Gauss-Hermite nodes for jitter averaging")
    p.add_argument("--analytic", action="store_true", help="exact values from the density matrix, no sampling")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emosim", description="Entangled mechanical oscillator simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="parity scan with fit and checkpoint report")
    _add_run_options(run)
    run.add_argument("--phases", type=int, help="number of analysis phases over [0, 2pi) (default 16)")
    run.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    run.add_argument("--svg", action="store_true", help="also write parity.svg (needs matplotlib)")

    ctl = sub.add_parser("control", help="populations after a control sequence")
    _add_run_options(ctl, variant_default=None)

    mod = sub.add_parser("modes", help="axial normal modes and inter-well exchange")
    mod.add_argument("--chain", default="Be,Mg", help="comma-separated species, e.g. Be,Mg,Mg,Be")
    mod.add_argument("--calibrate", help="mode=frequency, e.g. common=2.3MHz, inphase=2.0MHz, 1=4.9MHz")
    mod.add_argument("--double-well", action="store_true", dest="double_well")
    mod.add_argument("--spacing", default="0.24mm")
    mod.add_argument("--detuning", default="25kHz")
    mod.add_argument("--json", action="store_true")

    fit = sub.add_parser("fit", help="fit an existing parity CSV")
    fit.add_argument("csv")
    fit.add_argument("--out", help="write fit JSON here")
    fit.add_argument("--json", action="store_true")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            result = cmd_run(build_run_config(args))
            text = _format_fit(result)
        elif args.command == "control":
            cfg = build_run_config(args)
            if args.variant is None and "variant" not in (_load_config_file(args.config) if args.config else {}):
                cfg.variant = "control_after_state4"
            result = cmd_control(cfg)
            text = _format_control(result)
        elif args.command == "modes":
            result = cmd_modes(args)
            text = _format_modes(result)
        else:
            result = cmd_fit(args)
            text = _format_fit(result)
    except (ConfigError, proto.ProtocolError, dyn.DynamicsError) as exc:
        if isinstance(exc, proto.InvariantViolation):
            print(f"emosim: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"emosim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except md.UnstableConfiguration as exc:
        print(f"emosim: unstable configuration: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except md.ModeError as exc:
        print(f"emosim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, meas.MeasurementError, np.linalg.LinAlgError) as exc:
        print(f"emosim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True) if args.json else text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
