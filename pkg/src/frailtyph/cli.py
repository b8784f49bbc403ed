"""Command-line entry point: fit, compare, simulate, curves, summarize.

Every command resolves its configuration (flags over config file over
defaults), writes a manifest into the output directory before heavy work
and finalizes it afterwards, so runs are auditable and interrupted runs
are detectable.  All randomness flows from one --seed; worker streams are
derived by indexed seed-sequence spawning.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, data, hazard, inference, sampler, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SAMPLER = 4
EXIT_DIGEST = 5


class ConfigError(ValueError):
    """Bad flag/config-file input."""


class DigestMismatchError(ValueError):
    """Refusing to compare runs fitted on different data."""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _start_manifest(outdir, command, config, inputs):
    os.makedirs(outdir, exist_ok=True)
    digests = {os.path.basename(p): _sha256(p) for p in inputs}
    manifest = {
        "command": command,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()
        ).hexdigest(),
        "input_digests": digests,
        "data_digest": hashlib.sha256("".join(sorted(digests.values())).encode()).hexdigest(),
        "versions": {
            "frailtyph": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
        "status": "running",
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": [],
    }
    import scipy

    manifest["versions"]["scipy"] = scipy.__version__
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    return manifest


def _finish_manifest(outdir, manifest, outputs, t0):
    manifest["status"] = "complete"
    manifest["outputs"] = sorted(outputs)
    manifest["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    _write_json(os.path.join(outdir, "manifest.json"), manifest)


def _merge_config(args, defaults, keys):
    """Flags override config file entries, which override defaults."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        unknown = set(file_cfg) - set(keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key in keys:
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            resolved[key] = cli_val
        elif key in file_cfg:
            resolved[key] = file_cfg[key]
        else:
            resolved[key] = defaults[key]
    return resolved


def _csv_list(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


def _schema_from(cfg):
    return {
        "time": cfg["time_col"],
        "event": cfg["event_col"],
        "cluster": cfg["cluster_col"],
        "subject_covariates": _csv_list(cfg["covariates"]) if cfg["covariates"] else [],
        "cluster_covariates": _csv_list(cfg["cluster_covariates"])
        if cfg["cluster_covariates"]
        else [],
    }


def _delimiter(cfg):
    return "\t" if cfg["delimiter"] in ("tab", "\\t", "\t") else cfg["delimiter"]


def _parse_cuts(text, dataset, events_only=False):
    text = str(text)
    if text.startswith("quantile:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad cut spec {text!r}") from exc
        try:
            return hazard.quantile_cutpoints(dataset, k, events_only=events_only)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        values = [float(v) for v in _csv_list(text)]
    except ValueError as exc:
        raise ConfigError(f"bad cut spec {text!r}") from exc
    try:
        return hazard.explicit_cutpoints(values, dataset)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_table(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


_FIT_DEFAULTS = {
    "data": None,
    "clusters": None,
    "time_col": "time",
    "event_col": "event",
    "cluster_col": "cluster",
    "covariates": "",
    "cluster_covariates": "",
    "delimiter": ",",
    "standardize": False,
    "frailty": "ldtfp",
    "cuts": "quantile:10",
    "events_only": False,
    "depth": 4,
    "tau1": 1.001,
    "tau2": None,
    "a_c": 1.0,
    "b_c": 1.0,
    "s0": 1000.0,
    "iterations": 55000,
    "burn_in": 5000,
    "thin": 10,
    "seed": 0,
    "loglik_format": "npy",
    "dump_expansion": False,
}


def cmd_fit(args) -> int:
    cfg = _merge_config(args, _FIT_DEFAULTS, _FIT_DEFAULTS.keys())
    for key in ("data", "clusters"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
        if not os.path.exists(cfg[key]):
            raise ConfigError(f"{key} file not found: {cfg[key]}")
    dataset = data.load_dataset(
        cfg["data"],
        cfg["clusters"],
        _schema_from(cfg),
        delimiter=_delimiter(cfg),
        standardize=bool(cfg["standardize"]),
    )
    cuts = _parse_cuts(cfg["cuts"], dataset, events_only=bool(cfg["events_only"]))
    try:
        spec = sampler.ModelSpec(
            dataset=dataset,
            cuts=cuts,
            frailty=cfg["frailty"],
            depth=int(cfg["depth"]),
            hyper=sampler.Hyperparameters(
                tau1=float(cfg["tau1"]),
                tau2=None if cfg["tau2"] is None else float(cfg["tau2"]),
                a_c=float(cfg["a_c"]),
                b_c=float(cfg["b_c"]),
                s0=float(cfg["s0"]),
            ),
        )
        controls = sampler.ChainControls(
            iterations=int(cfg["iterations"]),
            burn_in=int(cfg["burn_in"]),
            thin=int(cfg["thin"]),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    t0 = time.perf_counter()
    manifest = _start_manifest(args.outdir, "fit", cfg, [cfg["data"], cfg["clusters"]])
    chain = sampler.run_chain(spec, controls)
    outputs = []

    chain_dir = os.path.join(args.outdir, "chain")
    sampler.save_chain(chain, chain_dir, loglik_format=cfg["loglik_format"])
    outputs.extend(
        os.path.join("chain", f)
        for f in ("gamma.csv", "frailties.csv", "scalars.csv", "forest.csv", "chain_meta.json")
    )
    outputs.append(os.path.join("chain", f"loglik.{cfg['loglik_format']}"))

    if cfg["dump_expansion"]:
        expansion = hazard.expand_poisson(dataset, cuts)
        hazard.write_expansion(expansion, os.path.join(args.outdir, "expansion.csv"))
        outputs.append("expansion.csv")

    rows = inference.summarize_posterior(chain)
    _write_table(
        os.path.join(args.outdir, "posterior_summary.csv"),
        ["parameter", "mean", "median", "lower", "upper"],
        [
            [r["parameter"], repr(r["mean"]), repr(r["median"]), repr(r["lower"]), repr(r["upper"])]
            for r in rows
        ],
    )
    outputs.append("posterior_summary.csv")

    expansion = hazard.expand_poisson(dataset, cuts)
    report = inference.model_comparison(
        chain, lambda g, e: hazard.poisson_loglik(expansion, g, e)
    )
    _write_json(
        os.path.join(args.outdir, "report.json"),
        {
            "lpml": report.lpml,
            "dic": report.dic,
            "p_d": report.p_d,
            "d_bar": report.d_bar,
            "n_obs": int(dataset.n_records),
            "acceptance": chain.acceptance,
        },
    )
    _write_table(
        os.path.join(args.outdir, "cpo.csv"),
        ["obs", "cpo"],
        [[j, repr(float(v))] for j, v in enumerate(report.cpo)],
    )
    outputs.extend(["report.json", "cpo.csv"])
    _finish_manifest(args.outdir, manifest, outputs, t0)
    print(f"fit complete: LPML {report.lpml:.1f}, DIC {report.dic:.1f} -> {args.outdir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("compare needs at least two run directories")
    runs = []
    for d in args.runs:
        manifest_path = os.path.join(d, "manifest.json")
        report_path = os.path.join(d, "report.json")
        if not (os.path.exists(manifest_path) and os.path.exists(report_path)):
            raise ConfigError(f"{d} is not a completed fit run")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if manifest.get("status") != "complete":
            raise ConfigError(f"{d} is not a completed fit run")
        with open(report_path) as fh:
            report = json.load(fh)
        runs.append((os.path.basename(os.path.normpath(d)), manifest, report))
    digests = {m["data_digest"] for _, m, _ in runs}
    if len(digests) > 1:
        raise DigestMismatchError(
            "runs were fitted on different data (digest mismatch); refusing to compare"
        )
    header = f"{'run':<28}{'LPML':>12}{'DIC':>12}{'p_D':>10}"
    lines = [header, "-" * len(header)]
    for name, _, rep in runs:
        lines.append(f"{name:<28}{rep['lpml']:>12.2f}{rep['dic']:>12.2f}{rep['p_d']:>10.2f}")
    lines.append("")
    pbf = {}
    for i, (na, _, ra) in enumerate(runs):
        for nb, _, rb in (runs[:i] + runs[i + 1 :]):
            pbf[f"{na}_vs_{nb}"] = inference.pseudo_bayes_factor(ra["lpml"], rb["lpml"])
    for key, val in pbf.items():
        lines.append(f"PBF {key}: {val:.3g}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        _write_json(
            args.out,
            {
                "runs": {name: {"lpml": r["lpml"], "dic": r["dic"], "p_d": r["p_d"]} for name, _, r in runs},
                "pbf": pbf,
            },
        )
    return EXIT_OK


_SIM_DEFAULTS = {
    "scenario": "I",
    "replicates": 200,
    "clusters": 100,
    "cluster_size": 10,
    "methods": "ldtfp,gaussian",
    "cuts_k": 10,
    "depth": 4,
    "iterations": 55000,
    "burn_in": 5000,
    "thin": 10,
    "seed": 0,
    "jobs": None,
    "profiles": None,
}


def cmd_simulate(args) -> int:
    cfg = _merge_config(args, _SIM_DEFAULTS, _SIM_DEFAULTS.keys())
    try:
        scenario = simulate.ScenarioSpec(
            scenario=str(cfg["scenario"]),
            n_clusters=int(cfg["clusters"]),
            cluster_size=int(cfg["cluster_size"]),
            replicates=int(cfg["replicates"]),
            seed=int(cfg["seed"]),
        )
        methods = [
            simulate.StudyMethod(name=m, frailty=m, n_intervals=int(cfg["cuts_k"]), depth=int(cfg["depth"]))
            for m in _csv_list(cfg["methods"])
        ]
        controls = sampler.ChainControls(
            iterations=int(cfg["iterations"]),
            burn_in=int(cfg["burn_in"]),
            thin=int(cfg["thin"]),
            seed=int(cfg["seed"]),
        )
        profiles = None
        if cfg["profiles"]:
            profiles = [
                tuple(float(v) for v in _csv_list(p))
                for p in str(cfg["profiles"]).split(";")
                if p.strip()
            ]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    t0 = time.perf_counter()
    manifest = _start_manifest(args.outdir, "simulate", cfg, [])
    result = simulate.run_study(
        scenario,
        methods,
        controls,
        jobs=None if cfg["jobs"] is None else int(cfg["jobs"]),
        profiles=profiles,
    )
    outputs = []

    _write_table(
        os.path.join(args.outdir, "replicates.csv"),
        ["replicate", "method", "profile", "status", "ise", "seed"],
        [
            [r["replicate"], r["method"], f"\"{r['profile']}\"", f"\"{r['status']}\"", repr(r["ise"]), r["seed"]]
            for r in result.table()
        ],
    )
    outputs.append("replicates.csv")

    agg = result.aggregate()
    _write_json(os.path.join(args.outdir, "aggregate.json"), agg)
    outputs.append("aggregate.json")

    coef_rows = []
    for mname, entry in agg["methods"].items():
        for cname, row in entry["coefficients"].items():
            coef_rows.append(
                [
                    mname,
                    cname,
                    row.get("true", ""),
                    row.get("bias", ""),
                    row["mean_sd"],
                    row["sd_mean"],
                    row.get("cp", ""),
                ]
            )
    _write_table(
        os.path.join(args.outdir, "aggregate_coefficients.csv"),
        ["method", "parameter", "true", "bias", "mean_sd", "sd_mean", "cp"],
        coef_rows,
    )
    ise_rows = []
    for mname, entry in agg["methods"].items():
        for key, row in entry["ise"].items():
            ise_rows.append([mname, f"\"{key}\"", row["mean"], row["sd"]])
    _write_table(
        os.path.join(args.outdir, "aggregate_ise.csv"),
        ["method", "profile", "ise_mean", "ise_sd"],
        ise_rows,
    )
    outputs.extend(["aggregate_coefficients.csv", "aggregate_ise.csv"])
    _finish_manifest(args.outdir, manifest, outputs, t0)
    print(
        f"simulate complete: {scenario.replicates} replicates, "
        f"{result.n_failed} failed -> {args.outdir}"
    )
    return EXIT_OK


def _parse_profile(text, names):
    values = {}
    for part in _csv_list(text):
        if "=" not in part:
            raise ConfigError(f"bad profile entry {part!r}, expected name=value")
        key, val = part.split("=", 1)
        key = key.strip()
        if key not in names:
            raise ConfigError(f"unknown covariate name {key!r}; known: {list(names)}")
        try:
            values[key] = float(val)
        except ValueError as exc:
            raise ConfigError(f"bad numeric value in {part!r}") from exc
    missing = [n for n in names if n not in values]
    if missing:
        raise ConfigError(f"profile is missing covariates: {missing}")
    return np.array([values[n] for n in names])


def _parse_grid(text):
    try:
        start, stop, num = str(text).split(":")
        return np.linspace(float(start), float(stop), int(num))
    except ValueError as exc:
        raise ConfigError(f"bad grid spec {text!r}, expected start:stop:num") from exc


def cmd_curves(args) -> int:
    run_dir = args.run
    manifest_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"{run_dir} has no manifest")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("status") != "complete":
        raise ConfigError(f"{run_dir} is not a completed run")
    chain = sampler.load_chain(os.path.join(run_dir, "chain"))
    names = chain.covariate_names
    if not args.profile:
        print("no profiles requested; nothing to do")
        return EXIT_OK

    grid = _parse_grid(args.grid) if args.grid else np.linspace(0.0, float(chain.cuts[-1]), 201)
    if args.frailty_grid:
        e_grid = _parse_grid(args.frailty_grid)
    else:
        s = float(np.median(np.sqrt(chain.theta)))
        e_grid = np.linspace(-4.0 * s, 4.0 * s, 241)

    os.makedirs(args.outdir, exist_ok=True)
    q = chain.n_cluster_covariates
    outputs = []
    for i, text in enumerate(args.profile, start=1):
        profile = _parse_profile(text, names)
        if chain.transform is not None:
            center = np.asarray(chain.transform.center)
            scale = np.asarray(chain.transform.scale)
            profile_model = (profile - center) / scale
        else:
            profile_model = profile
        curve = inference.predictive_survival(chain, profile_model, grid)
        path = os.path.join(args.outdir, f"survival_{i}.csv")
        _write_table(
            path,
            ["time", "mean", "lower", "upper"],
            [
                [repr(float(t)), repr(float(m)), repr(float(lo)), repr(float(hi))]
                for t, m, lo, hi in zip(curve.grid, curve.mean, curve.lower, curve.upper)
            ],
        )
        outputs.append(path)
        x = profile_model[len(names) - q :] if q else np.empty(0)
        dens = inference.predictive_frailty_density(chain, x, e_grid)
        path = os.path.join(args.outdir, f"frailty_density_{i}.csv")
        _write_table(
            path,
            ["e", "mean", "lower", "upper"],
            [
                [repr(float(t)), repr(float(m)), repr(float(lo)), repr(float(hi))]
                for t, m, lo, hi in zip(dens.grid, dens.mean, dens.lower, dens.upper)
            ],
        )
        outputs.append(path)
        if args.shifted:
            dens = inference.predictive_frailty_density(chain, x, e_grid, shifted=True)
            path = os.path.join(args.outdir, f"frailty_density_shifted_{i}.csv")
            _write_table(
                path,
                ["e", "mean", "lower", "upper"],
                [
                    [repr(float(t)), repr(float(m)), repr(float(lo)), repr(float(hi))]
                    for t, m, lo, hi in zip(dens.grid, dens.mean, dens.lower, dens.upper)
                ],
            )
            outputs.append(path)
    print(f"wrote {len(outputs)} curve files -> {args.outdir}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    cfg = _merge_config(args, _FIT_DEFAULTS, _FIT_DEFAULTS.keys())
    for key in ("data", "clusters"):
        if not cfg[key]:
            raise ConfigError(f"--{key} is required")
    dataset = data.load_dataset(
        cfg["data"], cfg["clusters"], _schema_from(cfg), delimiter=_delimiter(cfg)
    )
    summary = data.summarize(dataset)
    print(data.format_summary(summary))
    if args.json:
        _write_json(args.json, summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frailtyph",
        description="Piecewise-exponential PH model with covariate-dependent tailfree frailties",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_flags(p):
        p.add_argument("--data", help="subject-level delimited file")
        p.add_argument("--clusters", help="cluster-level delimited file")
        p.add_argument("--time-col", dest="time_col")
        p.add_argument("--event-col", dest="event_col")
        p.add_argument("--cluster-col", dest="cluster_col")
        p.add_argument("--covariates", help="comma-separated subject covariate columns")
        p.add_argument(
            "--cluster-covariates",
            dest="cluster_covariates",
            help="comma-separated cluster covariate columns",
        )
        p.add_argument("--delimiter", help="field delimiter (',' default; 'tab')")
        p.add_argument("--config", help="JSON config file (flags override it)")

    p_fit = sub.add_parser("fit", help="fit one model and persist the chain")
    add_data_flags(p_fit)
    p_fit.add_argument("--standardize", action="store_const", const=True, default=None)
    p_fit.add_argument("--frailty", choices=list(sampler.ldtfp.FRAILTY_VARIANTS))
    p_fit.add_argument("--cuts", help="'quantile:K' or comma-separated cut-points")
    p_fit.add_argument(
        "--events-only",
        dest="events_only",
        action="store_const",
        const=True,
        default=None,
        help="pool only event times for quantile cut-points",
    )
    p_fit.add_argument("--J", dest="depth", type=int, help="tailfree depth")
    p_fit.add_argument("--tau1", type=float)
    p_fit.add_argument("--tau2", type=float)
    p_fit.add_argument("--ac", dest="a_c", type=float)
    p_fit.add_argument("--bc", dest="b_c", type=float)
    p_fit.add_argument("--s0", type=float)
    p_fit.add_argument("--iters", dest="iterations", type=int)
    p_fit.add_argument("--burnin", dest="burn_in", type=int)
    p_fit.add_argument("--thin", type=int)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--loglik-format", dest="loglik_format", choices=["npy", "csv"])
    p_fit.add_argument("--dump-expansion", dest="dump_expansion", action="store_const", const=True, default=None)
    p_fit.add_argument("--outdir", required=True)
    p_fit.set_defaults(func=cmd_fit)

    p_cmp = sub.add_parser("compare", help="DIC/LPML grid and pairwise PBFs")
    p_cmp.add_argument("runs", nargs="+", help="completed fit run directories")
    p_cmp.add_argument("--out", help="optional JSON output path")
    p_cmp.set_defaults(func=cmd_compare)

    p_sim = sub.add_parser("simulate", help="replicated generate-fit-score study")
    p_sim.add_argument("--scenario", choices=["I", "II"])
    p_sim.add_argument("--replicates", type=int)
    p_sim.add_argument("--clusters", type=int)
    p_sim.add_argument("--cluster-size", dest="cluster_size", type=int)
    p_sim.add_argument("--methods", help="comma list from: ldtfp,exchangeable_tailfree,gaussian")
    p_sim.add_argument("--cuts-k", dest="cuts_k", type=int)
    p_sim.add_argument("--J", dest="depth", type=int)
    p_sim.add_argument("--iters", dest="iterations", type=int)
    p_sim.add_argument("--burnin", dest="burn_in", type=int)
    p_sim.add_argument("--thin", type=int)
    p_sim.add_argument("--seed", type=int)
    p_sim.add_argument("--jobs", type=int)
    p_sim.add_argument("--profiles", help="semicolon-separated comma-vectors, e.g. '2,1,-2;0,1,2'")
    p_sim.add_argument("--config", help="JSON config file (flags override it)")
    p_sim.add_argument("--outdir", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_cur = sub.add_parser("curves", help="predictive survival/frailty-density curves")
    p_cur.add_argument("--run", required=True, help="completed fit run directory")
    p_cur.add_argument(
        "--profile",
        action="append",
        default=[],
        help="comma list name=value covering every covariate; repeatable",
    )
    p_cur.add_argument("--grid", help="time grid start:stop:num")
    p_cur.add_argument("--frailty-grid", dest="frailty_grid", help="frailty grid start:stop:num")
    p_cur.add_argument("--shifted", action="store_true", help="also write location-shifted densities")
    p_cur.add_argument("--outdir", required=True)
    p_cur.set_defaults(func=cmd_curves)

    p_sum = sub.add_parser("summarize", help="dataset summary table")
    add_data_flags(p_sum)
    p_sum.add_argument("--json", help="optional JSON output path")
    p_sum.set_defaults(func=cmd_summarize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.SchemaError, data.RowValidationError, data.ReferentialError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (sampler.ChainInitializationError, sampler.ChainDivergenceError) as exc:
        print(f"sampler error: {exc}", file=sys.stderr)
        return EXIT_SAMPLER
    except DigestMismatchError as exc:
        print(f"digest mismatch: {exc}", file=sys.stderr)
        return EXIT_DIGEST


if __name__ == "__main__":
    raise SystemExit(main())
