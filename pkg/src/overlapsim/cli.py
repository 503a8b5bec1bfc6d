"""Command-line entry point.

Subcommands: ``analyze`` (closed-form predictions), ``simulate``
(event-driven runs with oracle verdicts and event logs), ``autotune``
(communication-SM partition sweep), ``validate`` (calibration
self-test). All randomness flows from one --seed; every CSV carries a
config-hash comment.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from typing import Optional

from . import costmodel, hwmodel, lcsc, workloads
from .engine import OverheadConfig, SyncKind, sync_cost
from .hwmodel import Functionality, MechanismKind
from .lcsc import ScheduleMode

_OVERHEAD_FLAGS = ("two_way_handshake", "staging_buffers",
                   "peer_addr_indirection")


def _parse_overheads(text: Optional[str]) -> OverheadConfig:
    cfg = OverheadConfig()
    if not text:
        return cfg
    for flag in text.replace(",", " ").split():
        if flag == "all":
            for name in _OVERHEAD_FLAGS:
                setattr(cfg, name, True)
        elif flag in _OVERHEAD_FLAGS:
            setattr(cfg, flag, True)
        else:
            raise ValueError(f"unknown overhead flag {flag!r}; "
                             f"choose from {', '.join(_OVERHEAD_FLAGS)}")
    return cfg


def _parse_mode(text: Optional[str]) -> Optional[ScheduleMode]:
    if text is None:
        return None
    try:
        return ScheduleMode(text)
    except ValueError:
        raise ValueError(f"unknown schedule mode {text!r}; choose from "
                         + ", ".join(m.value for m in ScheduleMode))


def _config_hash(args: argparse.Namespace) -> str:
    payload = {k: v for k, v in sorted(vars(args).items())
               if k != "func" and not callable(v)}
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_atomic(path: str, text: str) -> None:
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(args, header: list[str], rows: list[list[str]]) -> str:
    lines = [f"# config={_config_hash(args)} seed={args.seed}",
             ",".join(header)]
    lines += [",".join(row) for row in rows]
    return "\n".join(lines) + "\n"


def _emit(args, filename: str, text: str) -> None:
    if args.out:
        _write_atomic(os.path.join(args.out, filename), text)
    else:
        sys.stdout.write(text)


def _load_profile(name: str) -> hwmodel.HardwareProfile:
    return hwmodel.resolve_profile(name)


def _scenarios(args) -> list[workloads.Scenario]:
    selected = []
    for sel in args.scenario:
        selected.extend(workloads.expand_scenarios(sel))
    if not selected:
        raise workloads.WorkloadError("no scenarios selected")
    return selected


# -- analyze -----------------------------------------------------------------

def cmd_analyze(args) -> int:
    profile = _load_profile(args.profile)
    mode = _parse_mode(args.mode)
    threshold = costmodel.hiding_threshold(2.0, profile.tensor_throughput_R,
                                           profile.link_bandwidth_B)
    header = ["scenario", "kind"] + list(costmodel.CostReport.CSV_FIELDS) \
        + ["hiding_threshold_k"]
    rows = []
    for sc in _scenarios(args):
        kspec, plan = workloads.build_scenario(
            sc, profile, seed=args.seed, schedule_mode=mode,
            num_comm_sms=args.comm_sms)
        report = costmodel.predict(plan.analysis(kspec, profile), profile)
        rows.append([sc.name, sc.kind.value] + report.csv_row()
                    + [f"{threshold:.1f}"])
    text = _csv(args, header, rows)
    _emit(args, "analyze.csv", text)
    if args.out:
        print(f"wrote {len(rows)} prediction rows to "
              f"{os.path.join(args.out, 'analyze.csv')}")
    return 0


# -- simulate ----------------------------------------------------------------

def _oracle_verdict(sc: workloads.Scenario, plan, kspec, profile, args,
                    overheads) -> tuple[str, Optional[tuple]]:
    """Run the oracle check, on a reduced-scale twin when the scenario
    itself is too large to materialize."""
    if plan.materialized:
        target_plan, target_kspec = plan, kspec
        result = None
    else:
        dims = workloads.reduced_dims(sc.kind, profile.num_devices)
        target_kspec, target_plan = workloads.build(
            sc.kind, dims, profile, seed=args.seed, materialize=True,
            schedule_mode=kspec.schedule_mode,
            num_comm_sms=kspec.num_comm_sms or None)
        result = lcsc.execute_kernel(target_kspec, target_plan, profile,
                                     overheads=overheads, seed=args.seed)
    mismatch = workloads.check_oracle(target_plan)
    del result
    return ("pass" if mismatch is None else "fail"), mismatch


def cmd_simulate(args) -> int:
    profile = _load_profile(args.profile)
    mode = _parse_mode(args.mode)
    overheads = _parse_overheads(args.overheads)
    header = ["scenario", "kind", "oracle"] \
        + list(costmodel.CostReport.CSV_FIELDS)
    rows = []
    failures = []
    for sc in _scenarios(args):
        kspec, plan = workloads.build_scenario(
            sc, profile, seed=args.seed, schedule_mode=mode,
            num_comm_sms=args.comm_sms)
        result = lcsc.execute_kernel(kspec, plan, profile,
                                     overheads=overheads, seed=args.seed)
        if plan.materialized:
            mismatch = workloads.check_oracle(plan)
            verdict = "pass" if mismatch is None else "fail"
        else:
            verdict, mismatch = _oracle_verdict(sc, plan, kspec, profile,
                                                args, overheads)
        rows.append([sc.name, sc.kind.value, verdict] + result.report.csv_row())
        if args.out:
            _write_atomic(os.path.join(args.out, f"{sc.name}.events.log"),
                          result.event_log())
        factor = costmodel.allreduce_comm_factor(
            costmodel.AllReduceStrategy.INTRA_SM_ATOMIC_WRITES,
            profile.num_devices)
        print(f"{sc.name}: oracle {verdict}, t_total "
              f"{result.report.t_total:.0f} ns, comm_ratio "
              f"{result.report.comm_ratio:.3f}, atomic-vs-fabric "
              f"comm factor {factor}x")
        if mismatch is not None:
            name, coord = mismatch
            failures.append(f"{sc.name}: oracle mismatch in layout "
                            f"{name!r} at {coord}")
    _emit(args, "simulate.csv", _csv(args, header, rows))
    for msg in failures:
        print(msg, file=sys.stderr)
    return 1 if failures else 0


# -- autotune ----------------------------------------------------------------

def cmd_autotune(args) -> int:
    profile = _load_profile(args.profile)
    mode = _parse_mode(args.mode) or ScheduleMode.INTER_SM
    if mode is ScheduleMode.INTRA_SM:
        print("autotune: compute-embedded scheduling has no SM partition "
              "to sweep; use inter_sm", file=sys.stderr)
        return 2
    overheads = _parse_overheads(args.overheads)
    status = 0
    for sc in _scenarios(args):
        kspec, _ = workloads.build_scenario(
            sc, profile, seed=args.seed, schedule_mode=mode,
            num_comm_sms=args.comm_sms or 1)

        def factory():
            _, plan = workloads.build_scenario(sc, profile, seed=args.seed,
                                               schedule_mode=mode,
                                               num_comm_sms=args.comm_sms or 1)
            return plan

        best, table = lcsc.autotune_partition(kspec, factory, profile,
                                              stride=args.stride,
                                              overheads=overheads,
                                              seed=args.seed)
        text = (f"# config={_config_hash(args)} seed={args.seed}\n"
                + lcsc.sweep_table_csv(table))
        _emit(args, f"autotune-{sc.name}.csv", text)
        print(f"{sc.name}: best num_comm_sms = {best} "
              f"({len(table)} partitions swept)")
    return status


# -- validate ----------------------------------------------------------------

def _anchor_checks(profile) -> list[dict]:
    checks = []

    def add(name, measured, ok, expected):
        checks.append(dict(name=name, measured=measured,
                           expected=expected, ok=bool(ok)))

    thr = costmodel.hiding_threshold(2.0, profile.tensor_throughput_R,
                                     profile.link_bandwidth_B)
    add("hiding-threshold", round(thr, 2), abs(thr - 2197.8) <= 0.1, 2197.8)

    mechs = hwmodel.transfer_mechanisms(profile)
    peaks = {MechanismKind.COPY_ENGINE: 368.82e9,
             MechanismKind.TMA: 350.01e9,
             MechanismKind.REGISTER_OP: 342.68e9}
    for kind, want in peaks.items():
        got = mechs[kind].peak_bandwidth
        add(f"peak-{kind.value}", got, abs(got - want) <= 0.01e9, want)

    sat = {MechanismKind.TMA: 15, MechanismKind.REGISTER_OP: 76}
    for kind, want in sat.items():
        got = hwmodel.sms_to_saturate(mechs[kind])
        add(f"saturation-{kind.value}", got, got == want, want)

    for kind, want in ((SyncKind.INTRA_SM_BARRIER, 64.0),
                       (SyncKind.INTER_SM_HBM, 832.0)):
        got = sync_cost(kind, profile)
        add(f"sync-{kind.value}", got, got == want, want)

    matrix_ok = all(
        hwmodel.supports(mechs[m], f) == (f in hwmodel.CAPABILITIES[m])
        for m in MechanismKind for f in Functionality)
    add("capability-matrix", 15, matrix_ok, 15)

    n = profile.num_devices
    factor = costmodel.allreduce_comm_factor(
        costmodel.AllReduceStrategy.INTRA_SM_ATOMIC_WRITES, n)
    add("allreduce-factor-n", factor, factor == n, n)

    ratios = []
    for k in (512, 1024, 2048, 4096):
        kspec, plan = workloads.build(workloads.WorkloadKind.GEMM_RS,
                                      dict(M=32768, N=32768, K=k), profile,
                                      materialize=False)
        result = lcsc.execute_kernel(kspec, plan, profile)
        ratios.append(result.report.comm_ratio)
    trend_ok = (ratios[0] >= 0.5 and ratios[1] >= 0.4
                and 0.10 <= ratios[2] <= 0.40 and ratios[3] <= 0.05
                and all(a >= b for a, b in zip(ratios, ratios[1:])))
    add("comm-ratio-trend", [round(r, 3) for r in ratios], trend_ok,
        ">=0.5, >=0.4, 0.1..0.4, <=0.05, nonincreasing")
    return checks


def cmd_validate(args) -> int:
    profile = _load_profile(args.profile)
    checks = _anchor_checks(profile)
    if args.json:
        print(json.dumps(dict(profile=profile.name, checks=checks), indent=2))
    else:
        for c in checks:
            mark = "pass" if c["ok"] else "FAIL"
            print(f"{mark}  {c['name']}: measured {c['measured']} "
                  f"(expected {c['expected']})")
    return 0 if all(c["ok"] for c in checks) else 1


# -- argument plumbing ---------------------------------------------------------

def _add_common(parser, need_scenarios=True):
    parser.add_argument("--profile", default="h100-sxm-8",
                        help="built-in profile name or JSON profile file")
    if need_scenarios:
        parser.add_argument("--scenario", action="append", default=[],
                            help="scenario or group name (repeatable); "
                                 "'all' selects every built-in")
    parser.add_argument("--mode", default=None,
                        help="schedule mode override: intra_sm | inter_sm "
                             "| hybrid")
    parser.add_argument("--comm-sms", type=int, default=None,
                        help="dedicated communication SMs per device")
    parser.add_argument("--overheads", default=None,
                        help="comma-separated overhead flags, or 'all'")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--json", action="store_true",
                        help="machine-readable output where supported")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overlapsim",
        description="Analytical planner and event-driven simulator for "
                    "overlapped multi-GPU kernels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="closed-form cost predictions")
    _add_common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="event-driven simulation runs")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("autotune", help="communication-SM partition sweep")
    _add_common(p)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(func=cmd_autotune)

    p = sub.add_parser("validate", help="calibration self-test report")
    _add_common(p, need_scenarios=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (hwmodel.HwModelError, workloads.WorkloadError, lcsc.LcscError,
            costmodel.CostModelError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
