"""Command-line entry point: simulate, fit, decode, select, report.

Exit codes: 0 success, 2 validation failure, 3 numerical failure, 4 bad flags.
Diagnostics go to stderr; results go to files only.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ModelSpec,
    NumericalError,
    SequenceDataset,
    ValidationError,
    dataset_to_dict,
    dumps,
    fit_from_dict,
    fit_to_dict,
    load_dataset,
    model_from_dict,
    model_to_dict,
    read_json,
    validate_dataset,
    validate_parameters,
    write_json,
)
from .em import FitOptions, check_inputs
from .inference import batch_log_emissions, batch_viterbi, stack
from .mixture import assign_clusters, build_block_diagonal
from .report import (
    align_parameters,
    cluster_purity,
    export_trajectories,
    group_summary,
    load_groups,
    recovery_errors,
    summary_csv,
    trajectories_jsonl,
)
from .selection import SelectionError, parse_k_range, select
from .synthdata import EffectsConfig, GroundTruth, NoiseConfig, simulate, simulate_paper_experiment
from .variational import fit_model

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_FLAGS = 0, 2, 3, 4

log = logging.getLogger("mixhmm")


class FlagError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise FlagError(f"{self.prog}: {message}")


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _metadata(command: str) -> dict:
    return {"tool": "mixhmm", "version": __version__, "command": command}


def _states(text: str, K: int) -> tuple[int, ...]:
    parts = [int(x) for x in text.split(",") if x.strip()]
    if len(parts) == 1:
        return tuple(parts) * K
    if len(parts) != K:
        raise FlagError(f"--states lists {len(parts)} sizes for {K} components")
    return tuple(parts)


def _options(args) -> FitOptions:
    try:
        return FitOptions(
            max_iters=args.max_iters,
            rel_tol=args.tol,
            n_restarts=args.restarts,
            seed=args.seed,
            init_strategy=args.init,
            alpha_mode=args.alpha,
            n_jobs=args.threads or (os.cpu_count() or 1),
        )
    except ValueError as exc:
        raise FlagError(str(exc)) from exc


def _add_fit_flags(p):
    p.add_argument("--data", required=True, help="dataset JSON or long-format CSV")
    p.add_argument("--states", default="2", help="states per component: L or L1,L2,...")
    p.add_argument("--inputs", action="store_true", help="use dose inputs (IOHMM family)")
    p.add_argument("--personal-r", action="store_true", help="personal state offset r")
    p.add_argument("--personal-m", action="store_true", help="personal input-effect offset m")
    p.add_argument("--left-to-right", action="store_true")
    p.add_argument("--prior-var-r", type=float, default=1.0)
    p.add_argument("--prior-var-m", type=float, default=1.0)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--init", choices=["spread-quantile", "random-obs"], default="spread-quantile")
    p.add_argument("--alpha", choices=["hard", "soft"], default="hard", help="mixing-weight estimate")
    p.add_argument("--threads", type=int, default=None, help="parallel restarts (default: all cores)")


def _spec(args, K: int, dim: int) -> ModelSpec:
    return ModelSpec(
        n_components=K,
        states_per_component=_states(args.states, K),
        obs_dim=dim,
        use_inputs=args.inputs,
        personal_state_offset=args.personal_r,
        personal_input_effect=args.personal_m,
        left_to_right=args.left_to_right,
        prior_var_r=args.prior_var_r,
        prior_var_m=args.prior_var_m,
    )


def _load_checked(path) -> SequenceDataset:
    ds = load_dataset(path)
    problems = validate_dataset(ds)
    if problems:
        raise ValidationError(problems)
    return ds


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out)
    if args.paper_experiment:
        ds, truth = simulate_paper_experiment(args.seed, -args.offset_bound, args.offset_bound)
    else:
        if not args.model:
            raise FlagError("simulate needs --paper-experiment or --model")
        spec, params, _ = model_from_dict(read_json(args.model))
        problems = validate_parameters(params, spec)
        if problems:
            raise ValidationError(problems)
        eff = EffectsConfig(
            r_dist="normal" if spec.personal_state_offset else "none",
            r_scale=float(np.sqrt(spec.prior_var_r)),
            m_dist="normal" if spec.personal_input_effect else "none",
            m_scale=float(np.sqrt(spec.prior_var_m)),
            doses=args.doses,
        )
        noise = NoiseConfig("se_kernel", args.length_scale, args.sigma) if args.noise == "se" else NoiseConfig()
        ds, truth = simulate(spec, params, eff, args.n, args.len, args.seed, noise)
    write_json(dataset_to_dict(ds), out)
    write_json(truth.to_dict(), _sidecar(out, ".truth.json"))
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _load_checked(args.data)
    spec = _spec(args, args.components, ds.dim)
    opts = _options(args)
    check_inputs(ds, spec)
    fit = fit_model(ds, spec, opts)
    out = Path(args.out)
    write_json(fit_to_dict(fit, _metadata("fit")), out)
    write_json(model_to_dict(spec, fit.params, fit.effects), _sidecar(out, ".model.json"))
    lines = [f"iteration,{fit.objective}"] + [f"{i},{v!r}" for i, v in enumerate(fit.objective_trace)]
    _sidecar(out, ".trace.csv").write_text("\n".join(lines) + "\n")
    print(
        f"fit: K={spec.n_components} L={list(spec.states_per_component)} loglik={fit.loglik:.6g} "
        f"map_loglik={fit.map_loglik:.6g} iterations={fit.n_iters} converged={fit.converged}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_decode(args) -> int:
    ds = _load_checked(args.data)
    obj = read_json(args.model)
    if "model" in obj and "objective_trace" in obj:
        obj = obj["model"]
    spec, params, effects = model_from_dict(obj)
    problems = validate_parameters(params, spec)
    if problems:
        raise ValidationError(problems)
    check_inputs(ds, spec)
    if effects is not None and tuple(effects.ids) != tuple(ds.ids):
        print("decode: stored personal offsets do not match dataset ids; using zero offsets", file=sys.stderr)
        effects = None
    flat, bm = build_block_diagonal(params)
    batch = stack(ds)
    paths, scores = batch_viterbi(batch, flat, batch_log_emissions(batch, flat, effects))
    labels = assign_clusters(paths, bm)
    with open(args.out, "w") as fh:
        for seq, p, s, z in zip(ds, paths, scores, labels):
            rec = {"id": seq.id, "label": int(z), "path": p.tolist(), "map_loglik": float(s)}
            fh.write(json.dumps(rec) + "\n")
    return EXIT_OK


def cmd_select(args) -> int:
    ds = _load_checked(args.data)
    try:
        ks = parse_k_range(args.k_range)
    except ValueError as exc:
        raise FlagError(f"--k-range: {exc}") from exc
    template = _spec(args, 1, ds.dim)
    table = select(ds, template, ks, _options(args), n_mode=args.n_mode, structured=args.structured_k)
    Path(args.out).write_text(table.to_csv())
    _sidecar(Path(args.out), ".txt").write_text(table.to_text())
    sys.stderr.write(table.to_text())
    return EXIT_OK


def cmd_report(args) -> int:
    fit = fit_from_dict(read_json(args.fit))
    ds = _load_checked(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    groups = load_groups(args.groups) if args.groups else {"all": list(range(ds.dim))}
    (out / "summary.csv").write_text(summary_csv(group_summary(fit.params, groups)))
    (out / "trajectories.jsonl").write_text(trajectories_jsonl(export_trajectories(fit, ds)))
    if args.reference:
        ref = read_json(args.reference)
        truth = GroundTruth.from_dict(ref) if "labels" in ref and "paths" in ref else None
        ref_params = truth.params if truth is not None else model_from_dict(ref)[1]
        al = align_parameters(fit.params, ref_params)
        report = {
            "component_perm": list(al.component_perm),
            "state_perms": [list(p) for p in al.state_perms],
            "transition_distance": al.transition_distance,
            "mean_distance": al.mean_distance,
            "max_abs_error": recovery_errors(al.aligned, ref_params),
            "aligned": model_to_dict(fit.spec, al.aligned),
        }
        if truth is not None and tuple(truth.ids) == tuple(ds.ids):
            report["cluster_purity"] = cluster_purity(fit.labels, truth.labels, al)
        (out / "alignment.json").write_text(dumps(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mixhmm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mixhmm {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    s.add_argument("--paper-experiment", action="store_true", help="two-regime personalized benchmark")
    s.add_argument("--offset-bound", type=float, default=1.0, help="r ~ Uniform(-b, b)")
    s.add_argument("--model", help="model JSON to sample from")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--len", type=int, default=30)
    s.add_argument("--doses", action="store_true", help="generate dose series (needs use_inputs)")
    s.add_argument("--noise", choices=["iid", "se"], default="iid")
    s.add_argument("--length-scale", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a (mixture of) HMM variant(s)")
    _add_fit_flags(f)
    f.add_argument("--components", type=int, default=1)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("decode", help="Viterbi paths and cluster labels")
    d.add_argument("--data", required=True)
    d.add_argument("--model", required=True, help="model JSON or fit JSON")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_decode)

    c = sub.add_parser("select", help="sweep K and tabulate AIC/BIC/ICL")
    _add_fit_flags(c)
    c.add_argument("--k-range", required=True, help="e.g. 1..5 or 2,3,5")
    c.add_argument("--n-mode", choices=["sequences", "visits"], default="sequences", help="BIC sample size")
    c.add_argument("--structured-k", action="store_true", help="count only block-diagonal transitions")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_select)

    r = sub.add_parser("report", help="group summaries, trajectories, alignment to a reference")
    r.add_argument("--fit", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--groups", help="JSON {name: [feature indices]}")
    r.add_argument("--reference", help="ground-truth sidecar or model JSON")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except FlagError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FLAGS
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except FlagError as exc:
        print(exc, file=sys.stderr)
        return EXIT_FLAGS
    except ValidationError as exc:
        for v in exc.violations:
            print(v, file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, SelectionError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
