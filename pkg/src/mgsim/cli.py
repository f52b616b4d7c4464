"""Command line front end for scenario simulation and design analysis.

Three subcommands operate on scenario JSON files:

``simulate``
    integrates a scenario and writes ``trace.csv`` (one row per sample,
    ``t`` first, floats with 9 significant digits), ``metrics.json``
    (transient metrics per inter-event window) and ``events.json`` (an
    echo of the events actually applied).

``analyze``
    evaluates the offline certificates of a scenario and writes
    ``analysis.json`` (gain margins, small-gain constants, transient
    bounds, interconnection certificate, verdict) plus three plot-ready
    tables: ``lambda_sweep.csv``, ``bode.csv`` and ``eiglocus.csv``.
    A failing certificate is a recorded verdict, not an error.

``validate``
    checks a scenario file and lists every violation without running
    anything.

Exit codes: 0 on success (including ``verdict: fail``), 2 for missing
files, schema errors or scenario violations, 3 when the integration
aborts on a non-finite state.

Scenario files are JSON objects with units spelled in the field names
(``L_t_henries``, ``dt_seconds``, ``power_watts``); the operating point
stores voltage, current and local CPL power, and the duty cycle is
derived from them. A ``seed`` field is accepted and reserved for future
use. The environment variable ``MGSIM_THREADS`` caps the kernel thread
count. Output directories are created on demand; existing output files
are only overwritten with ``--force``.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .consensus import CommGraph, SecondaryGains
from .l1ac import (ControllerGains, butterworth_filter,
                   design_lqr_gains, make_desired_dynamics,
                   validate_gains)
from .netmodel import (BusNetwork, ConverterKind, ConverterSpec, CplLoad,
                       LoadConverterSpec, Topology, UncertaintyBox,
                       augment_with_integrator, build_dgu_model,
                       effective_cpl_power, kron_reduce,
                       operating_point_for, tightly_regulated_load)
from .sim import (EVENT_KINDS, DguSetup, Event, Scenario, compute_metrics,
                  run_scenario, scenario_violations)
from .stability import (eigen_locus, global_stability_check,
                        input_admittance, lambda_condition,
                        performance_bounds)

DEFAULT_SWEEP = "100:100000:200"
EIG_LOCUS_GRID = np.linspace(-10.0, 10.0, 401)


class CliError(Exception):
    """User-facing failure; the message is printed and the run exits 2."""


class ScenarioFormatError(ValueError):
    """Scenario JSON does not match the documented schema."""


# ------------------------------------------------------------------
# scenario JSON schema


def _check_keys(obj: dict, allowed: tuple[str, ...], where: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ScenarioFormatError(f"{where}: unknown field '{key}'")


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise ScenarioFormatError(f"{where}: expected an object")
    if key not in obj:
        raise ScenarioFormatError(f"{where}: missing field '{key}'")
    return obj[key]


def _number(obj: dict, key: str, where: str, default=None) -> float:
    if default is not None and key not in obj:
        return float(default)
    val = _field(obj, key, where)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ScenarioFormatError(f"{where}.{key}: expected a number")
    return float(val)


def _vector(obj: dict, key: str, where: str, length: int) -> np.ndarray:
    val = _field(obj, key, where)
    if not isinstance(val, (list, tuple)) or len(val) != length:
        raise ScenarioFormatError(
            f"{where}.{key}: expected a list of {length} numbers")
    return np.asarray([float(v) for v in val])


def _load_converter_from(obj: dict, where: str) -> LoadConverterSpec:
    _check_keys(obj, ("R_t_ohms", "L_t_henries", "C_t_farads", "D",
                      "R_load_ohms", "k_p", "k_i"), where)
    return LoadConverterSpec(
        R_t=_number(obj, "R_t_ohms", where),
        L_t=_number(obj, "L_t_henries", where),
        C_t=_number(obj, "C_t_farads", where),
        D=_number(obj, "D", where),
        R_load=_number(obj, "R_load_ohms", where),
        k_p=_number(obj, "k_p", where),
        k_i=_number(obj, "k_i", where))


def _load_from(obj: dict, where: str) -> CplLoad:
    _check_keys(obj, ("power_watts", "R_line_ohms", "converter"), where)
    conv = obj.get("converter")
    return CplLoad(
        power_W=_number(obj, "power_watts", where),
        R_line=_number(obj, "R_line_ohms", where),
        converter=None if conv is None
        else _load_converter_from(conv, where + ".converter"))


def _dgu_from(obj: dict, where: str) -> DguSetup:
    _check_keys(obj, ("kind", "V_in_volts", "R_t_ohms", "L_t_henries",
                      "C_t_farads", "R_line_ohms", "operating_point",
                      "theta_star", "uncertainty_box", "adaptation_gain",
                      "filter_bandwidth_rad_per_s", "y_ref_volts",
                      "state_weights", "control_weight"), where)
    kind_name = _field(obj, "kind", where)
    try:
        kind = ConverterKind(kind_name)
    except ValueError:
        raise ScenarioFormatError(
            f"{where}.kind: expected 'boost' or 'buck', got {kind_name!r}")
    spec = ConverterSpec(
        kind=kind,
        V_in=_number(obj, "V_in_volts", where),
        R_t=_number(obj, "R_t_ohms", where),
        L_t=_number(obj, "L_t_henries", where),
        C_t=_number(obj, "C_t_farads", where),
        R_line=_number(obj, "R_line_ohms", where))
    opw = where + ".operating_point"
    op_obj = _field(obj, "operating_point", where)
    _check_keys(op_obj, ("V_dc_volts", "I_dc_amps", "P_cpl_watts"), opw)
    try:
        op = operating_point_for(
            spec,
            V_dc=_number(op_obj, "V_dc_volts", opw),
            I_dc=_number(op_obj, "I_dc_amps", opw),
            P_cpl=_number(op_obj, "P_cpl_watts", opw, default=0.0))
    except ValueError as exc:
        raise ScenarioFormatError(f"{opw}: {exc}")
    boxw = where + ".uncertainty_box"
    box_obj = _field(obj, "uncertainty_box", where)
    _check_keys(box_obj, ("lo", "hi"), boxw)
    box = UncertaintyBox(lo=_vector(box_obj, "lo", boxw, 3),
                         hi=_vector(box_obj, "hi", boxw, 3))
    weights = obj.get("state_weights")
    if weights is None:
        state_weights = (1.0, 1.0, 2.5e5)
    else:
        state_weights = tuple(_vector(obj, "state_weights", where, 3))
    return DguSetup(
        spec=spec, op=op,
        theta_star=_vector(obj, "theta_star", where, 3),
        uncertainty=box,
        Gamma=_number(obj, "adaptation_gain", where),
        omega_c=_number(obj, "filter_bandwidth_rad_per_s", where),
        y_ref=_number(obj, "y_ref_volts", where),
        state_weights=state_weights,
        control_weight=_number(obj, "control_weight", where, default=1.0))


def _edges_from(val, where: str) -> tuple[tuple[int, int], ...]:
    if not isinstance(val, (list, tuple)):
        raise ScenarioFormatError(f"{where}: expected a list of [i, j] pairs")
    edges = []
    for idx, pair in enumerate(val):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ScenarioFormatError(
                f"{where}[{idx}]: expected an [i, j] pair")
        edges.append((int(pair[0]), int(pair[1])))
    return tuple(edges)


def _gain_array(obj: dict, key: str, where: str) -> np.ndarray:
    val = _field(obj, key, where)
    if isinstance(val, (int, float)) and not isinstance(val, bool):
        return np.asarray([float(val)])
    if isinstance(val, (list, tuple)) and val:
        return np.asarray([float(v) for v in val])
    raise ScenarioFormatError(
        f"{where}.{key}: expected a number or a non-empty list")


def _secondary_from(obj: dict, n: int, where: str) -> SecondaryGains:
    _check_keys(obj, ("k_P_v", "k_I_v", "k_P_i", "k_I_i", "m",
                      "consensus_rate"), where)
    m = (_gain_array(obj, "m", where) if "m" in obj
         else np.ones(max(n, 1)))
    return SecondaryGains(
        k_P_v=_gain_array(obj, "k_P_v", where),
        k_I_v=_gain_array(obj, "k_I_v", where),
        k_P_i=_gain_array(obj, "k_P_i", where),
        k_I_i=_gain_array(obj, "k_I_i", where),
        m=m,
        consensus_rate=_number(obj, "consensus_rate", where))


def _event_from(obj: dict, where: str) -> Event:
    kind = _field(obj, "kind", where)
    t = _number(obj, "t_seconds", where)
    payload: dict = {}
    if kind == "plug_in":
        _check_keys(obj, ("t_seconds", "kind", "dgu", "comm_edges", "m"),
                    where)
        payload["dgu"] = _dgu_from(_field(obj, "dgu", where), where + ".dgu")
        peers = _field(obj, "comm_edges", where)
        if not isinstance(peers, (list, tuple)):
            raise ScenarioFormatError(
                f"{where}.comm_edges: expected a list of slot ids")
        payload["comm_edges"] = tuple(int(p) for p in peers)
        if "m" in obj:
            payload["m"] = _number(obj, "m", where)
    elif kind == "plug_out":
        _check_keys(obj, ("t_seconds", "kind", "slot"), where)
        payload["slot"] = int(_field(obj, "slot", where))
    elif kind in ("link_fail", "link_add"):
        _check_keys(obj, ("t_seconds", "kind", "edges"), where)
        payload["edges"] = _edges_from(_field(obj, "edges", where),
                                       where + ".edges")
    elif kind == "load_step":
        _check_keys(obj, ("t_seconds", "kind", "loads"), where)
        loads = _field(obj, "loads", where)
        if not isinstance(loads, (list, tuple)):
            raise ScenarioFormatError(f"{where}.loads: expected a list")
        payload["loads"] = tuple(
            _load_from(ld, f"{where}.loads[{i}]")
            for i, ld in enumerate(loads))
    elif kind == "setpoint_change":
        _check_keys(obj, ("t_seconds", "kind", "v_bus_ref_volts", "slot",
                          "y_ref_volts"), where)
        if "v_bus_ref_volts" in obj:
            payload["v_bus_ref"] = _number(obj, "v_bus_ref_volts", where)
        if "slot" in obj:
            payload["slot"] = int(_field(obj, "slot", where))
            payload["y_ref"] = _number(obj, "y_ref_volts", where)
    else:
        raise ScenarioFormatError(
            f"{where}.kind: unknown event kind {kind!r}")
    return Event(t=t, kind=kind, payload=payload)


_TOP_KEYS = ("name", "seed", "v_bus_ref_volts", "dt_seconds",
             "horizon_seconds", "dgus", "loads", "comm_edges", "secondary",
             "events")


def _scenario_pieces(raw: dict, collect: list[str] | None = None) -> dict:
    """Schema walk from parsed JSON to Scenario constructor arguments.

    With ``collect`` given, recoverable construction errors (bad graph
    edges, malformed events) are appended there and the offending item
    is dropped, so invariant checking can still list the rest.
    """
    if not isinstance(raw, dict):
        raise ScenarioFormatError("scenario: expected a JSON object")
    _check_keys(raw, _TOP_KEYS, "scenario")
    dgu_objs = _field(raw, "dgus", "scenario")
    if not isinstance(dgu_objs, (list, tuple)) or not dgu_objs:
        raise ScenarioFormatError("scenario.dgus: expected a non-empty list")
    dgus = tuple(_dgu_from(d, f"scenario.dgus[{i}]")
                 for i, d in enumerate(dgu_objs))
    load_objs = raw.get("loads", [])
    if not isinstance(load_objs, (list, tuple)):
        raise ScenarioFormatError("scenario.loads: expected a list")
    loads = tuple(_load_from(ld, f"scenario.loads[{i}]")
                  for i, ld in enumerate(load_objs))
    edges = _edges_from(_field(raw, "comm_edges", "scenario"),
                        "scenario.comm_edges")
    try:
        graph = CommGraph(n=len(dgus), edges=frozenset(edges))
    except ValueError as exc:
        if collect is None:
            raise ScenarioFormatError(f"scenario.comm_edges: {exc}")
        collect.append(f"scenario.comm_edges: {exc}")
        graph = CommGraph(n=len(dgus), edges=frozenset())
    sec_obj = raw.get("secondary")
    secondary = (None if sec_obj is None
                 else _secondary_from(sec_obj, len(dgus),
                                      "scenario.secondary"))
    ev_objs = raw.get("events", [])
    if not isinstance(ev_objs, (list, tuple)):
        raise ScenarioFormatError("scenario.events: expected a list")
    events = []
    for i, ev in enumerate(ev_objs):
        try:
            events.append(_event_from(ev, f"scenario.events[{i}]"))
        except (ScenarioFormatError, ValueError) as exc:
            if collect is None:
                raise ScenarioFormatError(str(exc)) from exc
            collect.append(str(exc))
    return {
        "dgus": dgus, "loads": loads, "graph": graph,
        "secondary": secondary,
        "v_bus_ref": _number(raw, "v_bus_ref_volts", "scenario"),
        "dt": _number(raw, "dt_seconds", "scenario"),
        "horizon": _number(raw, "horizon_seconds", "scenario"),
        "events": tuple(events),
        "name": str(raw.get("name", "scenario")),
    }


def load_scenario(path: Path) -> Scenario:
    """Parse and fully validate a scenario file.

    Raises ScenarioFormatError for schema problems and ValueError for
    the first invariant violation.
    """
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioFormatError(f"invalid JSON: {exc}")
    return Scenario(**_scenario_pieces(raw))


def scenario_file_violations(path: Path) -> list[str]:
    """Every violation in a scenario file, best effort, empty if valid."""
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        return [f"invalid JSON: {exc}"]
    found: list[str] = []
    try:
        pieces = _scenario_pieces(raw, collect=found)
    except (ScenarioFormatError, ValueError) as exc:
        # constructor guards inside the pieces (spec positivity, box
        # membership) surface as plain ValueError
        return found + [str(exc)]
    # a draft skips the constructor so one bad invariant cannot hide
    # the others
    draft = object.__new__(Scenario)
    for key, val in pieces.items():
        object.__setattr__(draft, key, val)
    return found + scenario_violations(draft)


# ------------------------------------------------------------------
# scenario JSON writer


def _spec_json(su: DguSetup) -> dict:
    return {
        "kind": su.spec.kind.value,
        "V_in_volts": su.spec.V_in,
        "R_t_ohms": su.spec.R_t,
        "L_t_henries": su.spec.L_t,
        "C_t_farads": su.spec.C_t,
        "R_line_ohms": su.spec.R_line,
        "operating_point": {
            "V_dc_volts": su.op.V_dc,
            "I_dc_amps": su.op.I_dc,
            "P_cpl_watts": su.op.P_cpl,
        },
        "theta_star": list(map(float, su.theta_star)),
        "uncertainty_box": {
            "lo": list(map(float, su.uncertainty.lo)),
            "hi": list(map(float, su.uncertainty.hi)),
        },
        "adaptation_gain": su.Gamma,
        "filter_bandwidth_rad_per_s": su.omega_c,
        "y_ref_volts": su.y_ref,
        "state_weights": list(map(float, su.state_weights)),
        "control_weight": su.control_weight,
    }


def _load_json(ld: CplLoad) -> dict:
    out = {"power_watts": ld.power_W, "R_line_ohms": ld.R_line}
    if ld.converter is not None:
        c = ld.converter
        out["converter"] = {
            "R_t_ohms": c.R_t, "L_t_henries": c.L_t, "C_t_farads": c.C_t,
            "D": c.D, "R_load_ohms": c.R_load, "k_p": c.k_p, "k_i": c.k_i}
    return out


def _event_json(ev: Event) -> dict:
    out: dict = {"t_seconds": ev.t, "kind": ev.kind}
    p = ev.payload
    if ev.kind == "plug_in":
        out["dgu"] = _spec_json(p["dgu"])
        out["comm_edges"] = [int(q) for q in p["comm_edges"]]
        if "m" in p:
            out["m"] = p["m"]
    elif ev.kind == "plug_out":
        out["slot"] = p["slot"]
    elif ev.kind in ("link_fail", "link_add"):
        out["edges"] = [list(e) for e in p["edges"]]
    elif ev.kind == "load_step":
        out["loads"] = [_load_json(ld) for ld in p["loads"]]
    else:
        if "v_bus_ref" in p:
            out["v_bus_ref_volts"] = p["v_bus_ref"]
        if "slot" in p:
            out["slot"] = p["slot"]
            out["y_ref_volts"] = p["y_ref"]
    return out


def scenario_to_json(sc: Scenario) -> dict:
    """Scenario as a schema-conforming JSON object (duty cycle dropped)."""
    out: dict = {
        "name": sc.name,
        "v_bus_ref_volts": sc.v_bus_ref,
        "dt_seconds": sc.dt,
        "horizon_seconds": sc.horizon,
        "dgus": [_spec_json(su) for su in sc.dgus],
        "loads": [_load_json(ld) for ld in sc.loads],
        "comm_edges": sorted(sorted(e) for e in sc.graph.edges),
    }
    if sc.secondary is not None:
        g = sc.secondary
        out["secondary"] = {
            "k_P_v": list(map(float, g.k_P_v)),
            "k_I_v": list(map(float, g.k_I_v)),
            "k_P_i": list(map(float, g.k_P_i)),
            "k_I_i": list(map(float, g.k_I_i)),
            "m": list(map(float, g.m)),
            "consensus_rate": g.consensus_rate,
        }
    if sc.events:
        out["events"] = [_event_json(ev) for ev in sc.events]
    return out


def save_scenario(sc: Scenario, path: Path) -> None:
    path.write_text(json.dumps(scenario_to_json(sc), indent=2) + "\n")


# ------------------------------------------------------------------
# output helpers


def _json_safe(val):
    """Recursive conversion to JSON-clean values; non-finite becomes null."""
    if isinstance(val, dict):
        return {str(k): _json_safe(v) for k, v in val.items()}
    if isinstance(val, (list, tuple)):
        return [_json_safe(v) for v in val]
    if isinstance(val, (bool, np.bool_)):
        return bool(val)
    if isinstance(val, (int, np.integer)):
        return int(val)
    if isinstance(val, (float, np.floating)):
        f = float(val)
        return f if math.isfinite(f) else None
    return val


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2) + "\n")


def _write_table(path: Path, header: list[str], matrix: np.ndarray) -> None:
    np.savetxt(path, matrix.reshape(-1, len(header)), fmt="%.9g",
               delimiter=",", header=",".join(header), comments="")


def _prepare_out(out_dir: Path, names: tuple[str, ...],
                 force: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if force:
        return
    for name in names:
        target = out_dir / name
        if target.exists():
            raise CliError(
                f"output file exists (use --force to overwrite): {target}")


def _scenario_from_args(args) -> Scenario:
    path = Path(args.scenario)
    if not path.is_file():
        raise CliError(f"scenario file not found: {path}")
    try:
        sc = load_scenario(path)
    except (ScenarioFormatError, ValueError) as exc:
        raise CliError(f"{path}: {exc}")
    return sc


def _sharing_weights(sc: Scenario) -> dict[int, float] | None:
    if sc.secondary is None:
        return None
    n0 = len(sc.dgus)
    marr = np.asarray(sc.secondary.m, float)
    weights = {s: float(marr[s] if marr.size == n0 else marr[0])
               for s in range(n0)}
    nxt = n0
    for ev in sc.events:
        if ev.kind == "plug_in":
            weights[nxt] = float(ev.payload.get("m", 1.0))
            nxt += 1
    return weights


# ------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    sc = _scenario_from_args(args)
    if args.dt is not None:
        try:
            sc = replace(sc, dt=args.dt)
        except ValueError as exc:
            raise CliError(str(exc))
    out_dir = Path(args.out)
    _prepare_out(out_dir, ("trace.csv", "metrics.json", "events.json"),
                 args.force)
    try:
        trace = run_scenario(sc, decimate=args.decimate)
    except ValueError as exc:
        raise CliError(str(exc))

    matrix = np.column_stack(
        [trace.t] + [trace.data[c] for c in trace.columns])
    _write_table(out_dir / "trace.csv", ["t", *trace.columns], matrix)
    metrics = compute_metrics(trace, v_bus_ref=sc.v_bus_ref,
                              m=_sharing_weights(sc))
    _write_json(out_dir / "metrics.json", metrics.to_dict())
    _write_json(out_dir / "events.json", list(trace.events_applied))
    print(f"wrote {out_dir / 'trace.csv'} "
          f"({trace.t.size} samples, {len(trace.columns)} columns)")
    print(f"wrote {out_dir / 'metrics.json'}")
    print(f"wrote {out_dir / 'events.json'}")
    if trace.aborted:
        print(f"numerical abort: {trace.abort_reason}", file=sys.stderr)
        return 3
    return 0


def _parse_sweep(text: str) -> np.ndarray:
    parts = text.split(":")
    try:
        lo, hi, points = float(parts[0]), float(parts[1]), int(parts[2])
    except (IndexError, ValueError):
        raise CliError(f"--sweep expects LO:HI:POINTS, got {text!r}")
    if len(parts) != 3 or not 0.0 < lo < hi or points < 2:
        raise CliError(f"--sweep expects 0 < LO < HI and POINTS >= 2, "
                       f"got {text!r}")
    return np.logspace(math.log10(lo), math.log10(hi), points)


def _analyze_dgu(su: DguSetup, op_eff, lines: dict[int, float],
                 sweep: np.ndarray, cache: dict):
    """Certificates of one DGU.

    Returns (report dict, model, certificate gains, lambda curve). The
    L1-norm quantities depend only on the line-free design, so repeated
    identical designs share one evaluation through ``cache``. The gains
    handed to the interconnection check pair the designed K with the
    closed loop of the line-inclusive plant, which is the system that
    actually runs.
    """
    model = build_dgu_model(su.spec, op_eff, lines)
    plant = augment_with_integrator(model, su.uncertainty)
    design = augment_with_integrator(
        build_dgu_model(su.spec, su.op, {}), su.uncertainty)
    gains = design_lqr_gains(design, su.state_weights, su.control_weight)
    dd = make_desired_dynamics(design, gains)
    theta_max = su.uncertainty.max_l1()
    key = (dd.A_m_hat.tobytes(), dd.B_m_hat.tobytes(), theta_max,
           su.omega_c, su.Gamma)
    if key not in cache:
        filt = butterworth_filter(su.omega_c)
        lam = lambda_condition(dd.A_m_hat, dd.B_m_hat, filt, theta_max)
        bounds = {"rho_0": None, "alpha": None,
                  "gamma1": None, "gamma2": None}
        if lam < 1.0:
            try:
                pb = performance_bounds(theta_max / max(su.Gamma, 1e-300),
                                        su.Gamma, dd, theta_max, filt)
                bounds = {"rho_0": pb.rho_0, "alpha": pb.alpha,
                          "gamma1": pb.gamma1, "gamma2": pb.gamma2}
            except ValueError:
                # no admissible output vector for this design; the
                # bounds stay unreported while the verdict rests on the
                # eigensolves
                pass
        curve = np.array([
            lambda_condition(dd.A_m_hat, dd.B_m_hat,
                             butterworth_filter(w), theta_max)
            for w in sweep])
        cache[key] = (lam, bounds, curve)
    lam, bounds, lam_curve = cache[key]
    report = {"kind": su.spec.kind.value, "lambda": lam, **bounds}
    gr = validate_gains(gains.K, su.spec, op_eff, lines)
    report.update(
        gains_ok=bool(gr.ok),
        gain_margins={k: float(v) for k, v in gr.margins.items()},
        routh={k: float(v) for k, v in gr.routh.items()},
        trace_condition=float(gr.trace),
        det_condition=float(gr.det),
        max_re_eigenvalue=float(np.max(gr.eigenvalues.real)))
    cert_gains = ControllerGains(
        K=gains.K,
        A_m_hat=plant.A_bar - np.outer(plant.B_bar, gains.K))
    return report, model, cert_gains, lam_curve


def cmd_analyze(args) -> int:
    sc = _scenario_from_args(args)
    sweep = _parse_sweep(args.sweep)
    out_dir = Path(args.out)
    _prepare_out(out_dir, ("analysis.json", "lambda_sweep.csv", "bode.csv",
                           "eiglocus.csv"), args.force)

    net = BusNetwork(dgus=tuple((su.spec, su.op) for su in sc.dgus),
                     loads=sc.loads, topology=Topology.BUS_CONNECTED)
    couplings, _ = kron_reduce(net)
    n = len(sc.dgus)
    reports, models, gains_list, lam_curves = [], [], [], []
    cache: dict = {}
    for k, su in enumerate(sc.dgus):
        alloc = effective_cpl_power(net, k) if sc.loads else 0.0
        op_eff = replace(su.op, P_cpl=su.op.P_cpl + alloc)
        lines = {j: couplings[(k, j)] for j in range(n) if j != k}
        report, model, gains, lam_curve = _analyze_dgu(
            su, op_eff, lines, sweep, cache)
        report["slot"] = k
        reports.append(report)
        models.append(model)
        gains_list.append(gains)
        lam_curves.append(lam_curve)

    cert = global_stability_check(models, gains_list)
    lambdas_ok = all(r["lambda"] < 1.0 for r in reports)
    gains_ok = all(r["gains_ok"] for r in reports)
    # the block-diagonal certificate is sufficient but conservative on
    # heterogeneous networks; the verdict rests on the assembled
    # eigensolve, with the certificate reported alongside
    verdict = ("pass" if cert.network_max_re < 0.0 and lambdas_ok
               and gains_ok else "fail")

    # input admittance of the regulated loads; a plain preset stands in
    # when the scenario does not pin the converter down
    crossover = None
    if sc.loads:
        convs = [ld.converter if ld.converter is not None
                 else tightly_regulated_load(ld.power_W, sc.v_bus_ref)
                 for ld in sc.loads]
        adm = input_admittance(convs, sweep)
        crossover = adm.crossover
        bode = np.column_stack([
            adm.omega, np.abs(adm.Y_in),
            np.degrees(np.angle(adm.Y_in)),
            np.abs(adm.Y_cpl_only), np.abs(adm.Y_open_only)])
    else:
        bode = np.empty((0, 5))
    _write_table(out_dir / "bode.csv",
                 ["omega_rad_per_s", "Y_in_mag_siemens", "Y_in_phase_deg",
                  "Y_cpl_mag_siemens", "Y_open_mag_siemens"], bode)

    _write_table(out_dir / "lambda_sweep.csv",
                 ["omega_c_rad_per_s",
                  *[f"lambda_dgu{k}" for k in range(n)]],
                 np.column_stack([sweep, *lam_curves]))

    # closed-loop eigenvalue locus of the first DGU against a CPL at the
    # far end of its line
    first = sc.dgus[0]
    locus_R = first.spec.R_line + (sc.loads[0].R_line if sc.loads else 0.0)
    locus = eigen_locus(first.spec, replace(first.op, P_cpl=0.0),
                        gains_list[0].K, locus_R, EIG_LOCUS_GRID)
    rows = np.array([
        (r, i, ev.real, ev.imag)
        for r, trio in zip(locus.R_cpl, locus.eigenvalues)
        for i, ev in enumerate(trio)])
    _write_table(out_dir / "eiglocus.csv",
                 ["R_cpl_ohms", "eig_index", "real_per_s", "imag_per_s"],
                 rows)

    analysis = {
        "scenario": sc.name,
        "verdict": verdict,
        "dgus": reports,
        "global_certificate": {
            "passed": cert.passed, "max_eig": cert.max_eig,
            "norm_local": cert.norm_local,
            "norm_coupling": cert.norm_coupling,
            "critical_kappa": cert.critical_kappa,
            "network_max_re": cert.network_max_re},
        "admittance_crossover_rad_per_s": crossover,
        "sweep_rad_per_s": {"lo": float(sweep[0]), "hi": float(sweep[-1]),
                            "points": int(sweep.size)},
    }
    _write_json(out_dir / "analysis.json", analysis)
    for name in ("analysis.json", "lambda_sweep.csv", "bode.csv",
                 "eiglocus.csv"):
        print(f"wrote {out_dir / name}")
    print(f"verdict: {verdict}")
    return 0


def cmd_validate(args) -> int:
    path = Path(args.scenario)
    if not path.is_file():
        raise CliError(f"scenario file not found: {path}")
    violations = scenario_file_violations(path)
    for msg in violations:
        print(msg)
    print(f"{len(violations)} violations")
    return 2 if violations else 0


# ------------------------------------------------------------------
# entry point


def _apply_thread_cap() -> None:
    cap = os.environ.get("MGSIM_THREADS")
    if not cap:
        return
    try:
        requested = int(cap)
    except ValueError:
        raise CliError(f"MGSIM_THREADS must be an integer, got {cap!r}")
    if requested < 1:
        raise CliError(f"MGSIM_THREADS must be positive, got {cap!r}")
    import numba
    numba.set_num_threads(min(requested, numba.config.NUMBA_NUM_THREADS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgsim",
        description="Simulate and analyze bus-connected DC microgrids "
                    "with adaptive primary and consensus secondary control.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="integrate a scenario")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--dt", type=float, default=None,
                     help="override the scenario step size [s]")
    sim.add_argument("--decimate", type=int, default=100,
                     help="record every Nth step (default 100)")
    sim.add_argument("--force", action="store_true",
                     help="overwrite existing output files")
    sim.set_defaults(func=cmd_simulate)

    ana = sub.add_parser("analyze", help="offline design certificates")
    ana.add_argument("--scenario", required=True, help="scenario JSON file")
    ana.add_argument("--out", required=True, help="output directory")
    ana.add_argument("--sweep", default=DEFAULT_SWEEP,
                     help="frequency sweep LO:HI:POINTS in rad/s "
                          f"(default {DEFAULT_SWEEP})")
    ana.add_argument("--force", action="store_true",
                     help="overwrite existing output files")
    ana.set_defaults(func=cmd_analyze)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True, help="scenario JSON file")
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
