"""Command line driver: ``vlsos {roa, certify, simulate, recast-check}``.

A run is described by one YAML file (see ``RunConfig``); ``--set a.b=value``
overrides single fields.  Every output file carries the config hash and the
seed, and no output contains timestamps, so identical configs reproduce
identical files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .certify import CertificationError, Outcome, RingOptions, format_table, run_certification
from .control import Controller, ControlLaw, ControlOptions
from .poly import format_poly, parse_poly
from .power import DATA_DIR, NetworkModel, ingest_network
from .roa import RoaOptions, contour_data, estimate_roa
from .sdp import SdpOptions
from .sim import Event, LevelError, Scenario, activation_report, fault_scenario, integrate, levels_at

log = logging.getLogger("vlsos")

EXIT = {Outcome.ASYMPTOTICALLY_STABLE: 0, Outcome.LYAPUNOV_STABLE_ONLY: 2, Outcome.NOT_CERTIFIED: 3}
EXIT_ERROR = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: str = "wscc9"  # bundled name or path to a network YAML file
    decomposition: str = "per-node"
    output: str = "out"
    seed: int = 0
    workers: int = 1
    roa: dict = field(default_factory=dict)  # RoaOptions fields
    certify: dict = field(default_factory=dict)  # RingOptions fields
    control: dict = field(default_factory=lambda: {"enabled": True})
    sdp: dict = field(default_factory=dict)
    # scenario: "fault" (lines 5-7 and 7-8), "none", or {"events": [...], ...}
    scenario: object = "fault"
    horizon: float = 10.0
    dt: float = 0.01
    initial: object = "scenario"  # or an explicit list of initial levels

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.decomposition != "per-node":
            raise ConfigError("only the per-node overlapping decomposition is supported")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.dt <= 0 or self.horizon <= 0:
            raise ConfigError("dt and horizon must be positive")
        try:
            self.roa_options()
            self.ring_options()
            self.control_options()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for k, v in self.sdp.items():
            if k.endswith("_tol") and not float(v) > 0:
                raise ConfigError(f"sdp.{k} must be positive")
        if not (self.initial == "scenario" or isinstance(self.initial, list)):
            raise ConfigError("initial must be 'scenario' or a list of levels")

    def sdp_options(self) -> SdpOptions:
        return SdpOptions(**self.sdp)

    def roa_options(self) -> RoaOptions:
        return RoaOptions(**{**self.roa, "sdp": self.sdp_options()})

    def ring_options(self) -> RingOptions:
        return RingOptions(**{"workers": self.workers, **self.certify, "sdp": self.sdp_options()})

    def control_options(self) -> ControlOptions:
        c = {k: v for k, v in self.control.items() if k != "enabled"}
        for key in ("inflation", "robustness"):
            if key in c:
                c[key] = tuple(c[key]) if isinstance(c[key], (list, tuple)) else (float(c[key]),)
        return ControlOptions(**{"seed": self.seed, **c, "ring": self.ring_options()})

    def canonical(self) -> str:
        # where results are written does not change them
        d = {k: v for k, v in asdict(self).items() if k != "output"}
        return json.dumps(d, sort_keys=True, default=str)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed}


def _set_path(d: dict, path: str, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path: Optional[str], overrides=()) -> RunConfig:
    data = {}
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        _set_path(data, k, yaml.safe_load(v))
    return RunConfig.from_dict(data)


# -- pipeline pieces ---------------------------------------------------------------


def build_model(cfg: RunConfig) -> NetworkModel:
    p = Path(cfg.network)
    if not p.suffix:
        p = DATA_DIR / f"{cfg.network}.yaml"
    return NetworkModel.build(ingest_network(p))


def build_scenario(cfg: RunConfig, model: NetworkModel) -> Scenario:
    sc = cfg.scenario
    if sc == "fault":
        return fault_scenario(model, cfg.horizon, cfg.dt)
    if sc in (None, "none"):
        return Scenario(model, [], cfg.horizon, cfg.dt)
    if isinstance(sc, dict):
        ev = [Event(float(e["time"]), tuple(e["line"]), e.get("action", "trip")) for e in sc.get("events", [])]
        return Scenario(model, ev, cfg.horizon, cfg.dt, control_start=sc.get("control_start"))
    raise ConfigError(f"bad scenario {sc!r}")


def post_fault_state(cfg: RunConfig, model: NetworkModel) -> tuple[np.ndarray, float]:
    """State at the end of the last scenario event (fault clearance)."""
    sc = build_scenario(cfg, model)
    t_end = sc.control_start
    if t_end <= sc.start:
        return np.zeros(model.rel.dim), t_end
    short = Scenario(model, [e for e in sc.events if e.time <= t_end], t_end, sc.dt, sc.start, t_end)
    return integrate(short).final(), t_end


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def certificate_dict(est, model: NetworkModel, cfg: RunConfig) -> dict:
    sub = model.inter.subsystems[est.index]
    return {
        **cfg.stamp(),
        "subsystem": est.index + 1,
        "name": sub.label,
        "bus": model.subsystem_bus(est.index),
        "variables": [model.sys.space.names[v] for v in sub.variables],
        "V": format_poly(est.V),
        "gamma_max": est.gamma_max,
        "beta_history": list(est.beta_history),
        "shape": format_poly(est.shape),
        "iterations": est.iterations,
        "stalled": est.stalled,
    }


def load_certificates(outdir: Path, model: NetworkModel):
    Vs = []
    for i in range(len(model.inter.subsystems)):
        f = outdir / "certificates" / f"S{i + 1}.json"
        if not f.exists():
            return None
        Vs.append(parse_poly(json.loads(f.read_text())["V"], model.sys.space))
    return Vs


def cmd_roa(cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = Path(cfg.output)
    opts = cfg.roa_options()
    failed = []
    sp = model.sys.space
    for sub in model.inter.subsystems:
        try:
            est = estimate_roa(sub, opts)
        except Exception as exc:  # keep going, report the subsystem
            log.error("S%d: ROA estimation failed: %s", sub.index + 1, exc)
            failed.append(sub.index + 1)
            continue
        _write(out / "certificates" / f"S{sub.index + 1}.json", _json(certificate_dict(est, model, cfg)))
        k = sub.index
        pair = model.rmap.pairs[k]
        speed = model.rmap.speed[model.rel.speed_index[k] - model.rel.n_angles] if k in model.rel.speed_index else None
        grid = contour_data(est, pair, speed if speed is not None else model.rmap.speed[-1])
        lines = [f"# config_hash={cfg.digest()} seed={cfg.seed} subsystem=S{k + 1}",
                 f"# V over ({grid.x_label}, {grid.y_label}); other coordinates zero; one block per estimate"]
        for h, vals in enumerate(grid.values):
            lines.append(f"# estimate {h}")
            lines.append("x,y,V")
            for a in range(len(grid.y)):
                for b in range(len(grid.x)):
                    lines.append(f"{grid.x[b]:.6g},{grid.y[a]:.6g},{vals[a, b]:.10g}")
        _write(out / "contours" / f"S{k + 1}.csv", "\n".join(lines) + "\n")
        print(f"S{k + 1}: gamma_max={est.gamma_max:.6g} beta={est.beta_history[-1]:.6g}")
    if failed:
        print(f"ROA estimation failed for subsystems {failed}", file=sys.stderr)
        return EXIT_ERROR
    return 0


def cmd_certify(cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = Path(cfg.output)
    Vs = load_certificates(out, model)
    if Vs is None:
        log.info("certificates missing; building them")
        rc = cmd_roa(cfg)
        if rc:
            return rc
        Vs = load_certificates(out, model)
    if cfg.initial == "scenario":
        y0, t0 = post_fault_state(cfg, model)
        try:
            gamma = levels_at(y0, Vs, model.rmap)
        except LevelError as exc:
            print(f"refusing to certify: {exc}; levels {np.round(exc.levels, 4).tolist()}", file=sys.stderr)
            return EXIT_ERROR
    else:
        gamma = np.asarray(cfg.initial, dtype=float)
        if len(gamma) != len(Vs) or np.any(gamma > 1) or np.any(gamma < 0):
            print("refusing to certify: explicit levels must be one per subsystem in [0, 1]", file=sys.stderr)
            return EXIT_ERROR
    controller = Controller(model.control_channels(), cfg.control_options()) if cfg.control.get("enabled", True) else None
    try:
        verdict, state, laws = run_certification(model.inter, Vs, list(gamma), controller=controller, opts=cfg.ring_options())
    except CertificationError as exc:
        print(f"certification error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    header = f"# config_hash={cfg.digest()} seed={cfg.seed}\n"
    _write(out / "eps_table.txt", header + format_table(state))
    _write(out / "controls.json", _json({**cfg.stamp(), "laws": [l.to_dict() for l in laws]}))
    _write(
        out / "verdict.json",
        _json(
            {
                **cfg.stamp(),
                "outcome": verdict.outcome.value,
                "message": verdict.message,
                "limits": verdict.limits,
                "iterations": verdict.iterations,
                "initial_levels": [float(g) for g in gamma],
                "controlled": [[i + 1, k] for i, k in verdict.controls],
                "table": state.table,
            }
        ),
    )
    print(format_table(state), end="")
    print(f"verdict: {verdict.outcome.value} ({verdict.message})")
    return EXIT[verdict.outcome]


def cmd_simulate(cfg: RunConfig, controls: Optional[str] = None) -> int:
    model = build_model(cfg)
    out = Path(cfg.output)
    sc = build_scenario(cfg, model)
    Vs = load_certificates(out, model)
    laws = []
    if controls:
        data = json.loads(Path(controls).read_text())
        laws = [ControlLaw.from_dict(d, model.sys.space) for d in data["laws"]]
        if Vs is None:
            print("control laws need certificates (run `roa` first)", file=sys.stderr)
            return EXIT_ERROR
    traj = integrate(sc, controls=laws, Vs=Vs)
    header = [f"config_hash={cfg.digest()} seed={cfg.seed}", f"events={[(e.time, e.line, e.action) for e in sc.events]}"]
    name = "trajectory_controlled.csv" if laws else "trajectory.csv"
    _write(out / name, traj.to_csv(header))
    if laws:
        _write(out / "activation.json", _json({**cfg.stamp(), "windows": activation_report(traj, laws)}))
        for rep in activation_report(traj, laws):
            print(f"S{rep['subsystem']} k={rep['iteration']}: active {rep['windows']}")
    print(f"wrote {out / name} ({len(traj.t)} samples)")
    return 0


def cmd_recast_check(cfg: RunConfig) -> int:
    model = build_model(cfg)
    sp = model.sys.space
    print(f"recast system: m={model.sys.m} q={model.sys.q}")
    for v, f in enumerate(model.sys.F):
        print(f"d{sp.names[v]}/dt = {format_poly(f)}")
    worst = 0.0
    for g, lg in zip(model.sys.G, model.sys.constraint_lie_derivatives()):
        worst = max(worst, lg.max_abs_coeff() if not lg.is_zero() else 0.0)
        print(f"0 = {format_poly(g)}    Lie derivative: {format_poly(lg)}")
    print(f"max |coefficient| of constraint Lie derivatives: {worst:.3g}")
    return 0 if worst <= 1e-9 else EXIT_ERROR


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="vlsos", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=["roa", "certify", "simulate", "recast-check"])
    ap.add_argument("-c", "--config", help="YAML run configuration")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    ap.add_argument("-o", "--output", help="output directory")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int)
    ap.add_argument("--controls", help="control-law file for `simulate`")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    over = list(args.set)
    for key in ("output", "seed", "workers"):
        if getattr(args, key) is not None:
            over.append(f"{key}={getattr(args, key)}")
    try:
        cfg = load_config(args.config, over)
        if args.command == "roa":
            return cmd_roa(cfg)
        if args.command == "certify":
            return cmd_certify(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.controls)
        return cmd_recast_check(cfg)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.exception("execution failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
