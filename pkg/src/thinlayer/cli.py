"""Command line entry point: ``thinlayer <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fem
from .errors import ThinLayerError
from .geometry import write_mesh, write_tag_stats
from .problem import lambda_switches, load_config, validate_assumptions

log = logging.getLogger("thinlayer")


def _fmt(x) -> str:
    return f"{float(x):.12e}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    from .study import _jsonable

    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _snapshot_levels(n_times: int, every: int) -> list[int]:
    if every <= 0:
        return [0, n_times - 1]
    levels = list(range(0, n_times, every))
    if levels[-1] != n_times - 1:
        levels.append(n_times - 1)
    return levels


def _write_snapshots(out: Path, name: str, field: fem.TransientField, every: int) -> None:
    write_mesh(field.mesh, out / f"{name}_mesh.txt")
    for k in _snapshot_levels(len(field.times), every):
        _write_csv(out / f"{name}_t{k:05d}.csv", ["vertex", "t", "value"],
                   [[i, _fmt(field.times[k]), _fmt(v)] for i, v in enumerate(field.values[k])])


def _timing(meta, keep: bool):
    """Drop wall-clock entries at any depth unless ``keep`` is set."""
    if keep:
        return meta
    if isinstance(meta, dict):
        return {k: _timing(v, keep) for k, v in meta.items() if not k.endswith("wall_ms")}
    if isinstance(meta, list):
        return [_timing(v, keep) for v in meta]
    return meta


# ---------------------------------------------------------------- commands


def cmd_run_micro(args) -> int:
    from .micro import _region_weights, energy_report, solve_micro

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sol = solve_micro(cfg)
    write_tag_stats(sol.mesh, out / "tag_stats.csv")
    _write_snapshots(out, "micro", sol.field, cfg.time.output_every)
    Mw = fem.assemble_mass(sol.mesh, _region_weights(sol.mesh, cfg.geometry.eps, cfg.scalings.alpha))
    V = sol.field.values
    norms = np.einsum("ni,ni->n", V, (Mw @ V.T).T)
    rows = [[d["step"], _fmt(d["t"]), _fmt(d["residual"]), d["picard_iterations"],
             _fmt(d["flux_jump"]), _fmt(norms[d["step"]])] for d in sol.diagnostics]
    _write_csv(out / "diagnostics.csv",
               ["step", "t", "residual", "picard_iterations", "flux_jump", "weighted_l2_sq"], rows)
    en = energy_report(sol)
    _write_csv(out / "energy.csv", list(en), [[_fmt(v) for v in en.values()]])
    _write_json(out / "run_meta.json", {"config": cfg.summary(), **_timing(sol.meta, args.timing)})
    print(f"micro: {sol.mesh.n_vertices} vertices, {len(sol.diagnostics)} steps -> {out}")
    return 0


def cmd_run_macro(args) -> int:
    from .macro import solve_macro

    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sol = solve_macro(cfg, args.choice)
    every = cfg.time.output_every
    levels = _snapshot_levels(len(sol.times), every)
    if args.choice == "S2":
        _write_snapshots(out, "bulk", sol.field, every)
        _write_csv(out / "interface.csv", ["t", "x2", "v"],
                   [[_fmt(sol.times[k]), _fmt(y), _fmt(v)]
                    for k in levels for y, v in zip(sol.sigma, sol.interface[k])])
        _write_csv(out / "flux_balance.csv", ["step", "t", "jump_residual"],
                   [[d["step"], _fmt(d["t"]), _fmt(d["jump_residual"])] for d in sol.diagnostics])
    else:
        _write_snapshots(out, "bulk_left", sol.left, every)
        _write_snapshots(out, "bulk_right", sol.right, every)
        if args.choice == "S1":
            write_mesh(sol.cell_mesh, out / "cell_mesh.txt")
            _write_csv(out / "cell_average.csv", ["t", "x2", "cell_average"],
                       [[_fmt(sol.times[k]), _fmt(y), _fmt(v)]
                        for k in levels for y, v in zip(sol.sigma, sol.cell_average[k])])
            for k in levels:
                np.savetxt(out / f"cells_t{k:05d}.csv", sol.cell_values[k], fmt="%.12e",
                           delimiter=",", header="row: interface point, column: cell vertex")
            _write_csv(out / "flux_balance.csv",
                       ["step", "t", "sweeps", "matching_residual", "flux_residual"],
                       [[d["step"], _fmt(d["t"]), d["sweeps"], _fmt(d["matching_residual"]),
                         _fmt(d["flux_residual"])] for d in sol.diagnostics])
        else:
            rows = []
            for k in levels:
                for i, x1 in enumerate(sol.layer_x1):
                    for j, x2 in enumerate(sol.layer_x2):
                        for m, y in enumerate(sol.layer_y):
                            val = sol.layer[k, i, j, m]
                            if np.isfinite(val):
                                rows.append([_fmt(sol.times[k]), _fmt(x1), _fmt(x2), _fmt(y), _fmt(val)])
            _write_csv(out / "layer.csv", ["t", "x1", "x2", "y2", "v"], rows)
    _write_json(out / "run_meta.json", {"config": cfg.summary(), "choice": args.choice,
                                        **_timing(sol.meta, args.timing)})
    print(f"macro {args.choice}: {len(sol.times) - 1} steps -> {out}")
    return 0


def _finish_study(rep, args, parameter: str) -> None:
    from .study import plot_report

    out = Path(args.out)
    records = [_timing(r, args.timing) for r in rep.extra]
    path = rep.write(out, timing=args.timing, meta_records=records)
    plot_report(path, out / "report.svg", parameter)
    summary = {"parameter": rep.parameter, "values": rep.values, "labels": rep.labels,
               "rates": rep.rates()}
    if args.timing:
        summary["meta"] = rep.meta
    _write_json(out / "run_meta" / "summary.json", summary)
    for v, a, b in zip(rep.values, rep.err_L, rep.err_R):
        print(f"{parameter}={v:g}  err_L={a:.4e}  err_R={b:.4e}")


def cmd_study_eps(args) -> int:
    from .study import study_eps

    cfg = load_config(args.config)
    rep = study_eps(cfg, args.eps, args.choice, workers=args.workers)
    _finish_study(rep, args, "eps")
    return 0


def cmd_study_delta(args) -> int:
    from .study import study_delta

    cfg = load_config(args.config)
    rep = study_delta(cfg, args.deltas, args.level, args.choice, workers=args.workers)
    _finish_study(rep, args, "delta")
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    cfg.geometry.check()
    cls = cfg.classify()
    print(f"classification: {cls}")
    if cls in ("S3", "S4"):
        l1, l2 = lambda_switches(cfg.scalings)
        print(f"lambda1={l1} lambda2={l2}")
    found = validate_assumptions(cfg)
    for v in found:
        print(f"{v.severity}: {v.rule}: {v.message}")
    errors = [v for v in found if v.severity == "error"]
    if not found:
        print("no violations")
    return 1 if errors and not cfg.acknowledge_warnings else 0


def cmd_plot(args) -> int:
    from .study import plot_report

    out = plot_report(args.csv, args.out, args.xlabel)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thinlayer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", required=True, help="YAML or JSON configuration")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--timing", action="store_true",
                            help="include wall-clock times in CSV and metadata output")

    sp = sub.add_parser("run-micro", help="solve the perforated-layer problem")
    common(sp)
    sp.set_defaults(func=cmd_run_micro)

    sp = sub.add_parser("run-macro", help="solve a limit model")
    common(sp)
    sp.add_argument("--choice", required=True, choices=["S1", "S2", "S3", "S4"])
    sp.set_defaults(func=cmd_run_macro)

    sp = sub.add_parser("study-eps", help="micro against macro over a list of eps")
    common(sp)
    sp.add_argument("--eps", type=float, nargs="+", required=True)
    sp.add_argument("--choice", choices=["S1", "S2", "S3", "S4"])
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_study_eps)

    sp = sub.add_parser("study-delta", help="regularized against non-regularized problems")
    common(sp)
    sp.add_argument("--deltas", type=float, nargs="+", required=True)
    sp.add_argument("--level", choices=["micro", "macro"], default="micro")
    sp.add_argument("--choice", choices=["S1", "S2", "S3", "S4"])
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_study_delta)

    sp = sub.add_parser("validate-config", help="classify and check a configuration")
    common(sp, out=False)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("plot", help="log-log SVG plot of a report.csv")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--xlabel", default="sweep value")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ThinLayerError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
