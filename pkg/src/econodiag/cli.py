"""Command-line front end.

Every run writes its results plus ``manifest.json`` into ``--out-dir``.  The
manifest records the subcommand, input checksums, every effective option
and the SHA-256 of each output, so ``econodiag replay manifest.json`` can
re-run the analysis and confirm the outputs byte for byte.

Exit codes: 0 success, 1 usage error, 2 input error, 3 analysis error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace

from . import __version__, comove, dfa, lppl, series, synth, zipf

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_ANALYSIS = 0, 1, 2, 3

# options that steer execution but never change result bytes
_EXECUTION_KEYS = ("jobs", "out_dir", "config")


class InputError(Exception):
    pass


class AnalysisError(Exception):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# helpers


def _load(path, label=None, date_col=None, value_col=None) -> series.TimeSeries:
    cfg = series.CsvConfig(label=label or os.path.splitext(os.path.basename(path))[0])
    if date_col is not None:
        cfg = replace(cfg, date_col=date_col)
    if value_col is not None:
        cfg = replace(cfg, value_col=value_col)
    try:
        return series.read_csv_file(path, cfg)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except series.SeriesError as exc:
        raise InputError(f"{path}: {exc}") from exc


def _transform(s: series.TimeSeries, how: str) -> series.TimeSeries:
    """``level`` leaves the data alone, ``log`` takes logs, ``returns`` log-differences."""
    try:
        if how == "level":
            return s
        if how == "log":
            return s if s.kind == "log-level" else series.to_log(s)
        if s.kind == "return":
            return s
        if s.kind == "log-level":
            v = s.values
            return series.TimeSeries(s.label, s.times[1:], v[1:] - v[:-1], "return",
                                     None if s.dates is None else s.dates[1:])
        return series.diff_returns(s, "log")
    except series.SeriesError as exc:
        raise InputError(f"{s.label}: {exc}") from exc


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(lppl._jsonable(obj), indent=2, sort_keys=True) + "\n"


class _Run:
    """Collects outputs for one invocation and writes them with the manifest."""

    def __init__(self, args):
        self.args = args
        self.files = {}

    def add(self, name, text):
        self.files[name] = text if text.endswith("\n") else text + "\n"

    def finish(self, inputs):
        out_dir = self.args.out_dir
        os.makedirs(out_dir, exist_ok=True)
        digests = {}
        for name, text in self.files.items():
            data = text.encode("utf-8")
            with open(os.path.join(out_dir, name), "wb") as fh:
                fh.write(data)
            digests[name] = hashlib.sha256(data).hexdigest()
        manifest = {
            "subcommand": self.args.command_path,
            "version": __version__,
            "inputs": [{"path": p, "sha256": _sha256_file(p)} for p in inputs],
            "config": effective_config(self.args),
            "execution": {"jobs": self.args.jobs},
            "outputs": digests,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(_dump_json(manifest))
        return manifest


def effective_config(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items())
           if k not in _EXECUTION_KEYS and k not in ("func", "command_path")}
    return lppl._jsonable(cfg)


# --------------------------------------------------------------------------
# subcommands


def cmd_dfa(args) -> int:
    s = _transform(_load(args.input, date_col=args.date_col, value_col=args.value_col), args.transform)
    try:
        cfg = dfa.DfaConfig(min_box=args.min_box, max_box_fraction=args.max_box_fraction,
                            n_boxes=args.n_boxes, detrend_order=args.detrend_order,
                            coverage=args.coverage)
        run = _Run(args)
        if args.window is None:
            res = dfa.dfa(s, cfg)
            lines = ["box_size,fluctuation"]
            lines += [f"{int(n)},{float(f)!r}" for n, f in zip(res.box_sizes, res.fluctuations)]
            run.add("fluctuation.csv", "\n".join(lines))
            summary = {"n_obs": len(s), "transform": args.transform, **res.to_dict()}
        else:
            track = dfa.moving_dfa(s, args.window, args.step, cfg, jobs=args.jobs)
            run.add("alpha.csv", track.to_csv())
            alphas = [a for _, a, _ in track.entries if a is not None]
            summary = {
                "n_obs": len(s), "transform": args.transform, "window": args.window, "step": args.step,
                "n_windows": len(track.entries), "n_gaps": len(track.entries) - len(alphas),
                "alpha_min": min(alphas) if alphas else None,
                "alpha_max": max(alphas) if alphas else None,
            }
    except dfa.DfaError as exc:
        raise AnalysisError(str(exc)) from exc
    run.add("dfa.json", _dump_json(summary))
    run.finish([args.input])
    return EXIT_OK


def _fit_config(args) -> lppl.FitConfig:
    try:
        return lppl.FitConfig(
            tc_min_offset=args.tc_min_offset, tc_max_offset=args.tc_max_offset, tc_count=args.tc_count,
            w_band=tuple(args.w_band), w_count=args.w_count, m_band=tuple(args.m_band), m_count=args.m_count,
            refine=not args.no_refine, uncertainty=args.uncertainty, min_obs=args.min_obs, k=args.k,
            c_significance=args.c_significance, look_elsewhere=not args.no_look_elsewhere,
            exponent_sign=args.exponent_sign,
            linear_lpo=args.linear_lpo, residual_model=args.residual_model,
            warn_precision=args.warn_precision, warn_horizon=args.warn_horizon, jobs=args.jobs,
        )
    except lppl.FitError as exc:
        raise UsageError(str(exc)) from exc


def _lppl_input(args) -> series.TimeSeries:
    s = _transform(_load(args.input, date_col=args.date_col, value_col=args.value_col), args.transform)
    if args.start is not None or args.end is not None:
        try:
            lo = _resolve_bound(s, args.start, "left") if args.start is not None else s.times[0]
            hi = _resolve_bound(s, args.end, "right") if args.end is not None else s.times[-1]
            s = series.window(s, lo, hi)
        except series.SeriesError as exc:
            raise InputError(str(exc)) from exc
    return s


def _resolve_bound(s, value, side):
    if value.lstrip("-").isdigit():
        return int(value)
    return series.time_of_date(s, value, side)


def _with_date(s, t):
    return {"value": t, "date": series.project_date(s, t)}


def cmd_lppl_fit(args) -> int:
    s = _lppl_input(args)
    cfg = _fit_config(args)
    run = _Run(args)
    try:
        if args.mode == "full":
            rep = lppl.fit_full(s, args.variant, cfg)
            report = {"mode": "full", "fit": rep.to_dict(), "t_c": _with_date(s, rep.t_c)}
        else:
            env, osc, est = lppl.two_stage(s, cfg, args.variant)
            report = {"mode": "two-stage", "envelope": env.to_dict(), "oscillation": osc.to_dict(),
                      "estimate": est.to_dict(),
                      "t_c": {"envelope": _with_date(s, env.t_c), "oscillation": _with_date(s, osc.t_c),
                              "combined": None if est.tc_combined is None
                              else _with_date(s, est.tc_combined)}}
    except lppl.FitError as exc:
        raise AnalysisError(str(exc)) from exc
    report["n_obs"] = len(s)
    report["window"] = [s.date_at(0) or int(s.times[0]), s.date_at(len(s) - 1) or int(s.times[-1])]
    run.add("lppl_fit.json", _dump_json(report))
    run.finish([args.input])
    return EXIT_OK


def cmd_lppl_scan(args) -> int:
    s = _lppl_input(args)
    cfg = _fit_config(args)
    try:
        entries = lppl.scan_expanding(s, cfg, args.first_window, args.step, args.variant)
    except lppl.FitError as exc:
        raise AnalysisError(str(exc)) from exc
    run = _Run(args)
    run.add("scan.csv", lppl.scan_to_csv(entries))
    warnings = []
    for e in entries:
        if e.warning:
            tc = e.estimate.tc_combined
            line = (f"WARNING window_end={lppl._fmt(e.window_end)} tc_combined={tc:.2f} "
                    f"stderr={e.estimate.tc_combined_stderr:.2f}")
            date = series.project_date(s, tc)
            if date:
                line += f" tc_date={date}"
            warnings.append(line)
            print(line)
    summary = {"n_windows": len(entries), "n_warnings": len(warnings),
               "n_failed": sum(1 for e in entries if e.estimate is None), "warnings": warnings}
    run.add("scan.json", _dump_json(summary))
    run.finish([args.input])
    return EXIT_OK


def cmd_zipf(args) -> int:
    s = _transform(_load(args.input, date_col=args.date_col, value_col=args.value_col), "returns")
    try:
        res = zipf.zipf_analysis(s, args.m, args.alphabet, args.threshold, args.disjoint, args.jobs)
    except zipf.ZipfError as exc:
        raise AnalysisError(str(exc)) from exc
    run = _Run(args)
    run.add("zipf.csv", res.to_csv())
    run.add("zipf.json", res.to_json())
    run.finish([args.input])
    return EXIT_OK


def cmd_comove(args) -> int:
    if len(args.input) < 2:
        raise UsageError("comove needs at least two --input files")
    raw, seen = [], {}
    for path in args.input:
        s = _transform(_load(path, date_col=args.date_col, value_col=args.value_col), args.transform)
        # same file name twice: keep both, labelled by position
        seen[s.label] = seen.get(s.label, 0) + 1
        if seen[s.label] > 1:
            s = replace(s, label=f"{s.label}_{seen[s.label]}")
        raw.append(s)
    if args.transform == "level":
        print("note: correlating raw levels; shared trends inflate correlations", file=sys.stderr)
    try:
        panel = comove.align(raw)
    except comove.ComoveError as exc:
        raise InputError(str(exc)) from exc
    run = _Run(args)
    try:
        traj = comove.rolling_mean_distance(panel, args.window, args.step, jobs=args.jobs)
        d = comove.to_distance(comove.corr_matrix(panel))
        run.add("trajectory.csv", comove.trajectory_to_csv(traj))
        run.add("distance.csv", d.to_csv())
        summary = {"labels": panel.labels, "n_common": len(panel.times),
                   "dropped": panel.alignment_report, "n_windows": len(traj),
                   "n_gaps": sum(1 for _, m, _ in traj if m is None)}
        if d.mask.any():
            summary["linkage"] = None
            summary["message"] = "distance matrix has undefined entries; no clustering"
        else:
            run.add("linkage.json", comove.hierarchical_cluster(d, args.linkage).to_json())
    except comove.ComoveError as exc:
        raise AnalysisError(str(exc)) from exc
    run.add("comove.json", _dump_json(summary))
    run.finish(list(args.input))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        if args.kind == "white":
            s = synth.gen_white(args.n, args.seed, args.sigma)
        elif args.kind == "brownian":
            s = synth.gen_brownian(args.n, args.seed, args.sigma)
        else:
            m = args.m if args.variant == "power" else None
            p = lppl.LpplParams(args.variant, args.A, args.B, args.C, args.w, args.phi, args.tc, m,
                                exponent_sign=args.exponent_sign, linear_lpo=args.linear_lpo)
            s = synth.gen_lppl(p, args.n, args.noise, args.seed)
    except (series.SeriesError, lppl.FitError) as exc:
        raise UsageError(str(exc)) from exc
    if os.path.basename(args.output) != args.output or args.output in ("", ".", "..", "manifest.json"):
        raise UsageError(f"--output must be a plain file name, got {args.output!r}")
    run = _Run(args)
    run.add(args.output, series.to_csv(s))
    run.finish([])
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        with open(args.manifest, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read manifest {args.manifest}: {exc}") from exc
    for item in manifest.get("inputs", []):
        try:
            digest = _sha256_file(item["path"])
        except OSError as exc:
            raise InputError(f"input {item['path']} unavailable: {exc.strerror}") from exc
        if digest != item["sha256"]:
            raise InputError(f"input {item['path']} changed since the manifest was written")
    ns = argparse.Namespace(**manifest["config"])
    ns.command_path = manifest["subcommand"]
    ns.jobs = args.jobs if args.jobs is not None else manifest.get("execution", {}).get("jobs", 1)
    ns.out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.manifest))
    for key in ("w_band", "m_band"):
        if key in vars(ns):
            setattr(ns, key, tuple(getattr(ns, key)))
    func = _COMMANDS.get(ns.command_path)
    if func is None:
        raise InputError(f"unknown subcommand {ns.command_path!r} in manifest")
    code = func(ns)
    if code != EXIT_OK:
        return code
    with open(os.path.join(ns.out_dir, "manifest.json"), encoding="utf-8") as fh:
        fresh = json.load(fh)["outputs"]
    bad = sorted(k for k in manifest["outputs"] if fresh.get(k) != manifest["outputs"][k])
    if bad:
        print(f"replay mismatch in {', '.join(bad)}", file=sys.stderr)
        return EXIT_ANALYSIS
    print(f"reproduced {len(fresh)} output(s)")
    return EXIT_OK


_COMMANDS = {
    "dfa": cmd_dfa,
    "lppl fit": cmd_lppl_fit,
    "lppl scan": cmd_lppl_scan,
    "zipf": cmd_zipf,
    "comove": cmd_comove,
    "synth white": cmd_synth,
    "synth brownian": cmd_synth,
    "synth lppl": cmd_synth,
}


# --------------------------------------------------------------------------
# parser


def _common(p, inputs=True):
    p.add_argument("--out-dir", default="out", help="directory for results and manifest.json")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("--config", help="JSON file of option defaults (keys as the long flags, with _)")
    if inputs:
        p.add_argument("--date-col", default=None, help="date/time column (name or 0-based index)")
        p.add_argument("--value-col", default=None, help="value column (name or 0-based index)")


def _lppl_options(p):
    p.add_argument("--input", required=True)
    p.add_argument("--variant", choices=lppl.VARIANTS, default="log")
    p.add_argument("--transform", choices=("log", "level"), default="log",
                   help="fit log prices (default) or raw levels")
    p.add_argument("--start", default=None, help="first date or time of the window")
    p.add_argument("--end", default=None, help="last date or time of the window")
    p.add_argument("--tc-min-offset", type=float, default=1.0)
    p.add_argument("--tc-max-offset", type=float, default=None)
    p.add_argument("--tc-count", type=int, default=200)
    p.add_argument("--w-band", type=float, nargs=2, default=(2.0, 40.0))
    p.add_argument("--w-count", type=int, default=120)
    p.add_argument("--m-band", type=float, nargs=2, default=(0.1, 1.0))
    p.add_argument("--m-count", type=int, default=19)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--uncertainty", choices=("profile", "jacobian"), default="profile")
    p.add_argument("--residual-model", choices=("ar1", "white"), default="ar1")
    p.add_argument("--min-obs", type=int, default=30)
    p.add_argument("--k", type=float, default=2.0, help="agreement threshold in combined standard errors")
    p.add_argument("--c-significance", type=float, default=3.0)
    p.add_argument("--no-look-elsewhere", action="store_true",
                   help="compare C/se(C) with --c-significance directly, without the grid-size correction")
    p.add_argument("--exponent-sign", type=int, choices=(-1, 1), default=-1)
    p.add_argument("--linear-lpo", action="store_true",
                   help="oscillation factor 1 + C (w ln x + phi) instead of the cosine")
    p.add_argument("--warn-precision", type=float, default=10.0)
    p.add_argument("--warn-horizon", type=float, default=60.0)
    _common(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="econodiag", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"econodiag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dfa", help="DFA exponent, optionally in a moving window")
    p.add_argument("--input", required=True)
    p.add_argument("--transform", choices=("returns", "log", "level"), default="returns")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--min-box", type=int, default=4)
    p.add_argument("--max-box-fraction", type=float, default=0.25)
    p.add_argument("--n-boxes", type=int, default=16)
    p.add_argument("--detrend-order", type=int, default=1)
    p.add_argument("--coverage", choices=("forward", "both-ends"), default="both-ends")
    _common(p)
    p.set_defaults(command_path="dfa")

    lp = sub.add_parser("lppl", help="log-periodic crash fits")
    lsub = lp.add_subparsers(dest="mode_command", required=True)
    p = lsub.add_parser("fit", help="fit one window")
    _lppl_options(p)
    p.add_argument("--mode", choices=("two-stage", "full"), default="two-stage")
    p.set_defaults(command_path="lppl fit")
    p = lsub.add_parser("scan", help="expanding-window two-stage scan")
    _lppl_options(p)
    p.add_argument("--first-window", type=int, default=250)
    p.add_argument("--step", type=int, default=20)
    p.set_defaults(command_path="lppl scan")

    p = sub.add_parser("zipf", help="Zipf ranking of sign-coded returns")
    p.add_argument("--input", required=True)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--alphabet", choices=tuple(zipf.ALPHABETS), default="binary")
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--disjoint", action="store_true")
    _common(p)
    p.set_defaults(command_path="zipf")

    p = sub.add_parser("comove", help="rolling correlation distance and clustering")
    p.add_argument("--input", required=True, action="append", help="repeat once per series")
    p.add_argument("--transform", choices=("returns", "log", "level"), default="returns")
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--linkage", choices=("single", "average"), default="single")
    _common(p)
    p.set_defaults(command_path="comove")

    sp = sub.add_parser("synth", help="seeded synthetic series")
    ssub = sp.add_subparsers(dest="kind", required=True)
    for kind in ("white", "brownian", "lppl"):
        p = ssub.add_parser(kind)
        p.add_argument("--n", type=int, required=True)
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--output", default=f"{kind}.csv", help="file name inside --out-dir")
        if kind == "lppl":
            p.add_argument("--variant", choices=lppl.VARIANTS, default="log")
            p.add_argument("--A", type=float, required=True)
            p.add_argument("--B", type=float, required=True)
            p.add_argument("--C", type=float, default=0.0)
            p.add_argument("--w", type=float, default=None)
            p.add_argument("--phi", type=float, default=None)
            p.add_argument("--tc", type=float, required=True)
            p.add_argument("--m", type=float, default=None)
            p.add_argument("--exponent-sign", type=int, choices=(-1, 1), default=-1)
            p.add_argument("--linear-lpo", action="store_true")
            p.add_argument("--noise", type=float, default=0.0)
        else:
            p.add_argument("--sigma", type=float, default=1.0)
        _common(p, inputs=False)
        p.set_defaults(command_path=f"synth {kind}")

    p = sub.add_parser("replay", help="re-run a manifest and check its outputs")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(command_path="replay")
    return parser


def _subparser_for(parser, path):
    node = parser
    for word in path.split():
        action = next(a for a in node._actions if isinstance(a, argparse._SubParsersAction))
        node = action.choices[word]
    return node


def _apply_config_file(parser, args, argv):
    try:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = sorted(set(overrides) - set(vars(args)))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    _subparser_for(parser, args.command_path).set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command_path == "replay":
            return cmd_replay(args)
        if getattr(args, "config", None):
            args = _apply_config_file(parser, args, argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return _COMMANDS[args.command_path](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AnalysisError as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
