"""Command-line entry point: run sessions, sweep seeds, replay, serve.

Subcommands
-----------
run     one scripted session -> report.json, summary.txt, traces/*.csv
sweep   repeated seeded runs (optionally across noise levels) -> aggregate
        JSON + CSV of noise level vs mean test MAE
replay  re-run a stored report's scenario+seed and verify byte identity
serve   expose a live session to the browser console over a websocket
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import model as md
from .session import Scenario, ScenarioError, run_protocol, summarize, write_report


@dataclass(frozen=True)
class RunRequest:
    subcommand: str
    scenario: Path | None = None
    out: Path = Path("out")
    seed: int | None = None
    repeat: int = 1
    operator: str | None = None
    noise_levels: tuple[float, ...] | None = None
    report: Path | None = None
    port: int = 8732


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="respsteer",
        description="Respiratory-motion-compensated teleoperated insertion simulator",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p, scenario_required=True):
        p.add_argument("--scenario", type=Path, required=scenario_required,
                       help="scenario JSON document")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    run_p = sub.add_parser("run", help="run one session")
    add_common(run_p)
    run_p.add_argument("--operator", choices=["ideal", "overshooter", "hesitant", "live"],
                       default=None, help="override the scenario operator")

    sweep_p = sub.add_parser("sweep", help="batch of seeded runs")
    add_common(sweep_p)
    sweep_p.add_argument("--repeat", type=int, default=20, help="seeded runs per setting")
    sweep_p.add_argument("--noise-sigma-mm", type=str, default=None,
                         help="comma-separated sensor noise levels to sweep")

    replay_p = sub.add_parser("replay", help="verify a stored run reproduces bit-identically")
    replay_p.add_argument("--report", type=Path, required=True,
                          help="report.json produced by a previous run")
    replay_p.add_argument("--out", type=Path, default=None,
                          help="optional directory for the replayed report")

    serve_p = sub.add_parser("serve", help="serve a live session for the browser console")
    add_common(serve_p)
    serve_p.add_argument("--port", type=int, default=8732)
    return parser


def parse_args(argv: list[str]) -> RunRequest:
    ns = _build_parser().parse_args(argv)
    noise_levels = None
    if getattr(ns, "noise_sigma_mm", None):
        try:
            noise_levels = tuple(float(v) for v in ns.noise_sigma_mm.split(","))
        except ValueError:
            _build_parser().error(f"--noise-sigma-mm: not a number list: {ns.noise_sigma_mm!r}")
    repeat = getattr(ns, "repeat", 1)
    if repeat < 1:
        _build_parser().error("--repeat must be >= 1")
    return RunRequest(
        subcommand=ns.subcommand,
        scenario=getattr(ns, "scenario", None),
        out=getattr(ns, "out", Path("out")) or Path("out"),
        seed=getattr(ns, "seed", None),
        repeat=repeat,
        operator=getattr(ns, "operator", None),
        noise_levels=noise_levels,
        report=getattr(ns, "report", None),
        port=getattr(ns, "port", 8732),
    )


def _load_scenario(request: RunRequest) -> Scenario:
    try:
        text = request.scenario.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {request.scenario}: {exc}") from exc
    scenario = Scenario.from_json(text)
    if request.seed is not None:
        scenario = replace(scenario, seed=request.seed)
    if request.operator is not None:
        if request.operator == "live":
            scenario = replace(scenario, operator=replace(scenario.operator, kind="live"))
        else:
            scenario = replace(
                scenario,
                operator=replace(scenario.operator, kind="scripted", profile=request.operator),
            )
    return scenario


def _cmd_run(request: RunRequest) -> int:
    scenario = _load_scenario(request)
    report = run_protocol(scenario)
    path = write_report(report, request.out)
    print(f"report written to {path}")
    return 0 if not report.aborted else 3


def _mean_test_mae(reports) -> dict:
    out = {}
    for cls in md.PHASE_CLASSES:
        for axis in md.AXES:
            vals = [
                e.test_mae
                for rep in reports
                for bank in rep.banks
                if (e := bank.entry(cls, axis)).test_mae is not None
            ]
            out[f"{cls}.{axis}"] = float(np.mean(vals)) if vals else None
    return out


def _cmd_sweep(request: RunRequest) -> int:
    base = _load_scenario(request)
    levels = request.noise_levels if request.noise_levels is not None else (base.sensor.noise_sigma,)
    request.out.mkdir(parents=True, exist_ok=True)
    rows = []
    aggregate = []
    for sigma in levels:
        scenario = replace(base, sensor=replace(base.sensor, noise_sigma=sigma))
        reports = []
        for k in range(request.repeat):
            rep = run_protocol(replace(scenario, seed=scenario.seed + k))
            reports.append(rep)
        maes = _mean_test_mae(reports)
        eps = [r.error for rep in reports for r in rep.insertions]
        rows.append({"noise_sigma_mm": sigma, **{f"test_mae_{k}_mm": v for k, v in maes.items()}})
        aggregate.append({
            "noise_sigma_mm": sigma,
            "repeat": request.repeat,
            "mean_test_mae_mm": maes,
            "insertion_overall": summarize(eps) if eps else None,
        })
    (request.out / "sweep.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True))
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if row[c] is not None else "" for c in cols))
    (request.out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"sweep results written to {request.out}")
    return 0


def _cmd_replay(request: RunRequest) -> int:
    try:
        stored = request.report.read_text()
    except OSError as exc:
        print(f"error: cannot read report: {exc}", file=sys.stderr)
        return 2
    try:
        scenario = Scenario.from_dict(json.loads(stored)["scenario"])
    except (KeyError, json.JSONDecodeError) as exc:
        print(f"error: not a session report: {exc}", file=sys.stderr)
        return 2
    fresh = run_protocol(scenario).to_json()
    if request.out is not None:
        request.out.mkdir(parents=True, exist_ok=True)
        (request.out / "report.json").write_text(fresh)
    if fresh == stored:
        print("identical: replay reproduced the stored report byte for byte")
        return 0
    print("MISMATCH: replay differs from the stored report", file=sys.stderr)
    return 1


def _cmd_serve(request: RunRequest) -> int:
    from .bridge import serve_forever

    scenario = _load_scenario(request)
    if scenario.operator.kind != "live":
        scenario = replace(scenario, operator=replace(scenario.operator, kind="live"))
    return serve_forever(scenario, request.port, out_dir=request.out)


def execute(request: RunRequest) -> int:
    try:
        if request.subcommand == "run":
            return _cmd_run(request)
        if request.subcommand == "sweep":
            return _cmd_sweep(request)
        if request.subcommand == "replay":
            return _cmd_replay(request)
        if request.subcommand == "serve":
            return _cmd_serve(request)
        print(f"error: unknown subcommand {request.subcommand!r}", file=sys.stderr)
        return 2
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None) -> None:
    sys.exit(execute(parse_args(sys.argv[1:] if argv is None else argv)))


if __name__ == "__main__":
    main()
