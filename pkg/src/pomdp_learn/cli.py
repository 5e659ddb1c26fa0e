"""Command-line entry point: data generation through planning and bound checks.

Every JSON written embeds the tool version and the fully resolved
configuration, including seeds, so a run can be repeated byte for byte.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bnp import BpHmmHyperparams, FitResult, PosteriorSample, SamplerConfig, fit_bphmm, match_states
from .bounds import BoundsConfig, verify
from .core import (ModelParseError, ModelValidationError, PolicyTree, PomdpModel, load_model,
                   model_to_dict, read_labels_csv, read_series_csv, save_model, validate_model,
                   write_labels_csv, write_series_csv)
from .obsfn import ObservationMatrix, estimate_observation_matrix
from .planner import CapExceeded, evaluate_policy_exact, solve_optimal_dp, solve_optimal_enum
from .simgen import load_scenario, simulate_continuous, simulate_discrete
from .transest import (PUBLISHED_EXAMPLE_SAMPLES, confidence_of, count_transitions,
                       estimate_transitions, required_samples)

log = logging.getLogger("pomdp_learn")

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

PER_ENTRY_CAVEAT = ("note: the Chernoff guarantee holds for each transition entry separately; "
                    "no union bound over entries or state-action pairs is applied")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class CliError(Exception):
    """Invariant or input problem, reported as '<module>: <detail>'."""

    def __init__(self, module: str, detail: str):
        super().__init__(f"{module}: {detail}")


def _envelope(command: str, config: dict, **payload) -> dict:
    return {"tool": "pomdp-learn", "version": __version__, "command": command,
            "config": config, **payload}


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _config(args, drop=("func", "config_file")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    scenario = load_scenario(args.scenario)
    series = simulate_continuous(scenario, args.sequences, args.length, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_series_csv(series, out / "series.csv")
    _write_json(out / "ground_truth.json",
                _envelope("gen-data", _config(args), scenario=scenario.to_dict()))
    print(f"wrote {len(series)} sequences of length {args.length} to {out}")
    return EXIT_OK


def _hyper_from_args(args, dataset) -> BpHmmHyperparams:
    return BpHmmHyperparams.default(dataset, mass=args.mass, gamma=args.gamma, kappa=args.kappa,
                                    ar_order=args.ar_order, k0=args.k0)


def _sampler_from_args(args) -> SamplerConfig:
    return SamplerConfig(sweeps=args.sweeps, burn_in=args.burn_in, seed=args.seed,
                         birth_death_proposals_per_sweep=args.birth_proposals)


def _posterior_doc(command, config, fit: FitResult, series) -> dict:
    return _envelope(command, config, series_ids=[s.id for s in series], **fit.summary())


def _label_rows(sample: PosteriorSample, series):
    return [(s.id, lab, s.actions) for s, lab in zip(series, sample.labels)]


def cmd_learn_states(args) -> int:
    series = read_series_csv(args.data)
    fit = fit_bphmm(series, _hyper_from_args(args, series), _sampler_from_args(args))
    _write_json(args.out, _posterior_doc("learn-states", _config(args), fit, series))
    if args.labels_out:
        write_labels_csv(_label_rows(fit.map_sample, series), args.labels_out)
    print(f"MAP sample: {fit.map_sample.num_states} states "
          f"(log joint {fit.map_sample.log_joint:.3f}, sweep {fit.map_sample.sweep})")
    return EXIT_OK


def cmd_obs_matrix(args) -> int:
    doc = json.loads(Path(args.posterior).read_text())
    sample = PosteriorSample.from_dict(doc["map_sample"])
    obs = estimate_observation_matrix(list(sample.emissions), args.n_mc, args.seed)
    _write_json(args.out, _envelope("obs-matrix", _config(args), **obs.to_dict()))
    print(np.array2string(obs.probs, precision=4))
    return EXIT_OK


def cmd_estimate_trans(args) -> int:
    rows = read_labels_csv(args.labels)
    if any(a is None for _, _, a in rows):
        raise CliError("transest", "label file has no action column")
    n = args.num_states or int(max(lab.max() for _, lab, _ in rows)) + 1
    actions = args.actions.split(",") if args.actions else sorted({a for _, _, acts in rows for a in acts})
    counts = count_transitions([(lab, acts) for _, lab, acts in rows], n, actions)
    T, coverage = estimate_transitions(counts)
    need = required_samples(args.alpha, args.delta)
    short = coverage.insufficient(need)
    for a, s in coverage.unvisited:
        log.warning("no transitions observed from state %d under %s; row set uniform", s, actions[a])
    payload = dict(actions=actions, num_states=n, transition=T.tolist(),
                   counts=counts.counts.tolist(), totals=counts.totals.tolist(),
                   required_samples=need, unvisited=[list(p) for p in coverage.unvisited],
                   insufficient=[list(p) for p in short], caveat=PER_ENTRY_CAVEAT)
    if args.model:
        model = load_model(args.model)
        if model.transition.shape != T.shape:
            raise CliError("transest", f"model transition shape {model.transition.shape} != {T.shape}")
        updated = model.replace(transition=T)
        problems = validate_model(updated)
        if problems:
            raise CliError("core", "; ".join(problems))
        save_model(updated, args.model_out or args.model)
    _write_json(args.out, _envelope("estimate-trans", _config(args), **payload))
    print(f"min w(s,a) = {coverage.min_count}; required for alpha={args.alpha}, delta={args.delta}: {need}")
    if short:
        print(f"{len(short)} state-action pairs below the required count")
    print(PER_ENTRY_CAVEAT)
    return EXIT_OK


def cmd_sample_size(args) -> int:
    w = required_samples(args.alpha, args.delta)
    print(w)
    print(f"confidence_of(alpha={args.alpha}, w={w}) = {confidence_of(args.alpha, w):.6f}")
    if (args.alpha, args.delta) == (0.01, 0.95):
        print(f"deviation note: the published worked example prints {PUBLISHED_EXAMPLE_SAMPLES}; "
              f"the exact ceiling is {w} "
              f"(confidence at {PUBLISHED_EXAMPLE_SAMPLES} is "
              f"{confidence_of(args.alpha, PUBLISHED_EXAMPLE_SAMPLES):.6f} < {args.delta})")
    print(PER_ENTRY_CAVEAT)
    return EXIT_OK


def _solve(model, horizon, solver):
    return solve_optimal_dp(model, horizon) if solver == "dp" else solve_optimal_enum(model, horizon)


def cmd_plan(args) -> int:
    model = load_model(args.model)
    policy, value = _solve(model, args.horizon, args.solver)
    doc = _envelope("plan", _config(args), value=value, policy=policy.to_dict(model))
    if args.out:
        _write_json(args.out, doc)
    print(f"optimal {args.horizon}-step value ({args.solver}): {value:.12g}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_model(args.model)
    pdoc = json.loads(Path(args.policy).read_text())
    policy = PolicyTree.from_dict(pdoc.get("policy", pdoc), model)
    H = args.horizon or policy.horizon
    res = evaluate_policy_exact(model, policy, H)
    payload = {"value": res.value, "num_sequences": res.num_sequences, "horizon": H}
    if args.episodes:
        mean, se = simulate_discrete(model, policy, H, args.episodes, args.seed)
        payload["monte_carlo"] = {"mean": mean, "std_err": se, "episodes": args.episodes}
    if args.out:
        _write_json(args.out, _envelope("evaluate", _config(args), **payload))
    print(f"exact value: {res.value:.12g} over {res.num_sequences} sequences")
    if args.episodes:
        print(f"monte carlo: {mean:.6g} +/- {se:.3g}")
    return EXIT_OK


def cmd_verify_bounds(args) -> int:
    cfg = BoundsConfig(epsilon=args.epsilon, horizon=args.horizon, trials=args.trials, seed=args.seed,
                       num_states=args.states, num_actions=args.actions,
                       num_observations=args.observations, r_max=args.r_max, theorem=args.theorem,
                       random_policies=args.random_policies, enum_cross_check=args.enum_cross_check)
    report = verify(cfg)
    if args.out:
        _write_json(args.out, _envelope("verify-bounds", _config(args), report=report.to_dict()))
    status = "PASS" if report.ok else "FAIL"
    slack = "inf" if report.max_gap == 0 else f"{report.slack_ratio:.3g}"
    extra = f", order violations {report.order_violations}" if cfg.theorem == 2 else ""
    print(f"{status} theorem {cfg.theorem}: max gap {report.max_gap:.6g} <= epsilon {cfg.epsilon} "
          f"over {cfg.trials} trials (alpha {cfg.alpha():.6g}, slack {slack}{extra})")
    return EXIT_OK if report.ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# pipeline

PIPELINE_DEFAULTS = {
    "scenario": None,
    "sequences": 4,
    "length": 5000,
    "seed": 0,
    "sweeps": 150,
    "burn_in": None,
    "mass": 1.0,
    "gamma": 1.0,
    "kappa": None,
    "ar_order": 0,
    "k0": 0.01,
    "birth_proposals": 2,
    "n_mc": 100_000,
    "horizon": 3,
    "solver": "dp",
    "alpha": 0.05,
    "delta": 0.9,
    "label_source": "map",
    "episodes": 100_000,
}


def _map_rewards(scenario_model: PomdpModel, mapping: dict, L: int) -> np.ndarray:
    R = np.zeros((L, scenario_model.num_actions))
    for learned, true in mapping.items():
        R[learned] = scenario_model.reward[true]
    return R


def run_pipeline(cfg: dict, out: Path) -> dict:
    """Generate data, learn states, build E and T, plan, evaluate; return the report."""
    out.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(cfg["scenario"])
    truth = scenario.pomdp
    series = simulate_continuous(scenario, cfg["sequences"], cfg["length"], seed=cfg["seed"])
    write_series_csv(series, out / "series.csv")
    _write_json(out / "ground_truth.json", _envelope("pipeline", cfg, scenario=scenario.to_dict()))

    hyper = BpHmmHyperparams.default(series, mass=cfg["mass"], gamma=cfg["gamma"], kappa=cfg["kappa"],
                                     ar_order=cfg["ar_order"], k0=cfg["k0"])
    fit = fit_bphmm(series, hyper, SamplerConfig(sweeps=cfg["sweeps"], burn_in=cfg["burn_in"],
                                                 seed=cfg["seed"],
                                                 birth_death_proposals_per_sweep=cfg["birth_proposals"]))
    sample = fit.map_sample
    _write_json(out / "posterior.json", _posterior_doc("pipeline", cfg, fit, series))
    write_labels_csv(_label_rows(sample, series), out / "labels.csv")
    L = sample.num_states

    obs = estimate_observation_matrix(list(sample.emissions), cfg["n_mc"], cfg["seed"])
    _write_json(out / "obs_matrix.json", _envelope("pipeline", cfg, **obs.to_dict()))

    est_all = np.concatenate(sample.labels)
    ref_all = np.concatenate([s.latent_states for s in series])
    mapping, hamming = match_states(est_all, ref_all)

    if cfg["label_source"] == "truth":
        if L != truth.num_states:
            raise CliError("pipeline", "ground-truth labels need the learned state count to match")
        inv = {t: l for l, t in mapping.items()}
        labels = [np.array([inv[z] for z in s.latent_states]) for s in series]
    else:
        labels = list(sample.labels)
    counts = count_transitions([(lab, s.actions) for lab, s in zip(labels, series)], L, truth.actions)
    T_hat, coverage = estimate_transitions(counts)

    model = PomdpModel(
        states=[f"z{k}" for k in range(L)],
        actions=truth.actions,
        observations=[f"z{k}" for k in range(L)],
        transition=T_hat,
        observation_fn=obs.probs,
        reward=_map_rewards(truth, mapping, L),
        r_max=truth.r_max,
        initial_belief=np.full(L, 1.0 / L),
    )
    problems = validate_model(model)
    save_model(model, out / "model.json")

    policy, value = _solve(model, cfg["horizon"], cfg["solver"])
    _write_json(out / "policy.json", _envelope("pipeline", cfg, value=value, policy=policy.to_dict(model)))
    exact = evaluate_policy_exact(model, policy, cfg["horizon"])
    mc_mean, mc_se = simulate_discrete(model, policy, cfg["horizon"], cfg["episodes"], cfg["seed"])
    evaluation = {"value": exact.value, "num_sequences": exact.num_sequences,
                  "monte_carlo": {"mean": mc_mean, "std_err": mc_se, "episodes": cfg["episodes"]}}
    _write_json(out / "evaluation.json", _envelope("pipeline", cfg, **evaluation))

    need = required_samples(cfg["alpha"], cfg["delta"])
    check = {"alpha": cfg["alpha"], "delta": cfg["delta"], "required_samples": need,
             "min_count": coverage.min_count, "sufficient_data": coverage.min_count >= need,
             "comparable": L == truth.num_states and len(mapping) == L}
    if check["comparable"]:
        perm = [mapping[k] for k in range(L)]
        aligned = np.empty_like(T_hat)
        aligned[np.ix_(range(T_hat.shape[0]), perm, perm)] = T_hat
        err = np.abs(aligned - truth.transition)
        check["max_entry_error"] = float(err.max())
        check["row_max_error"] = err.max(axis=2).tolist()
        check["within_alpha"] = bool(err.max() <= cfg["alpha"])
    report = _envelope("pipeline", cfg, num_states=L, hamming_error=hamming,
                       state_matching={str(k): v for k, v in mapping.items()},
                       model_violations=problems, transition_check=check,
                       value=exact.value, caveat=PER_ENTRY_CAVEAT)
    _write_json(out / "report.json", report)
    return report


def cmd_pipeline(args) -> int:
    cfg = dict(PIPELINE_DEFAULTS)
    if args.config_file:
        try:
            file_cfg = json.loads(Path(args.config_file).read_text())
        except json.JSONDecodeError as exc:
            raise CliError("cli", f"config file is not valid JSON: {exc}") from None
        unknown = set(file_cfg) - set(cfg) - {"out"}
        if unknown:
            raise CliError("cli", f"unknown config keys {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    out = Path(args.out or cfg.get("out") or "pipeline_out")
    cfg.pop("out", None)
    report = run_pipeline(cfg, out)
    chk = report["transition_check"]
    print(f"learned {report['num_states']} states (hamming error {report['hamming_error']:.4f}); "
          f"min w(s,a) = {chk['min_count']} (need {chk['required_samples']})")
    if "max_entry_error" in chk:
        print(f"max transition error vs ground truth: {chk['max_entry_error']:.4f} (alpha {chk['alpha']})")
    print(f"planned value: {report['value']:.6g}; outputs in {out}")
    if report["model_violations"]:
        for v in report["model_violations"]:
            print(f"core: {v}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pomdp-learn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker count (results do not depend on it)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def bnp_flags(sp, defaults=True):
        d = (lambda v: v) if defaults else (lambda v: None)
        sp.add_argument("--sweeps", type=int, default=d(1000))
        sp.add_argument("--burn-in", type=int, default=None)
        sp.add_argument("--mass", type=float, default=d(1.0))
        sp.add_argument("--gamma", type=float, default=d(1.0))
        sp.add_argument("--kappa", type=float, default=None, help="default 25 * gamma")
        sp.add_argument("--ar-order", type=int, default=d(0))
        sp.add_argument("--k0", type=float, default=d(0.01))
        sp.add_argument("--birth-proposals", type=int, default=d(2))

    sp = sub.add_parser("gen-data", help="simulate continuous trajectories from a scenario")
    sp.add_argument("--scenario", default=None, help="scenario JSON (default: bundled benchmark)")
    sp.add_argument("--sequences", type=int, default=4)
    sp.add_argument("--length", type=int, default=500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("learn-states", help="discover hidden states with the BP-HMM sampler")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels-out")
    sp.add_argument("--seed", type=int, default=0)
    bnp_flags(sp)
    sp.set_defaults(func=cmd_learn_states)

    sp = sub.add_parser("obs-matrix", help="Monte Carlo observation matrix from learned emissions")
    sp.add_argument("--posterior", required=True)
    sp.add_argument("--n-mc", type=int, default=10**6)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_obs_matrix)

    sp = sub.add_parser("estimate-trans", help="sample-mean transitions from labelled sequences")
    sp.add_argument("--labels", required=True)
    sp.add_argument("--num-states", type=int)
    sp.add_argument("--actions", help="comma-separated action ids in model order")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--delta", type=float, default=0.9)
    sp.add_argument("--model", help="model JSON whose transition matrix is replaced")
    sp.add_argument("--model-out")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_estimate_trans)

    sp = sub.add_parser("sample-size", help="Chernoff sample requirement per state-action pair")
    sp.add_argument("--alpha", type=float, required=True)
    sp.add_argument("--delta", type=float, required=True)
    sp.set_defaults(func=cmd_sample_size)

    sp = sub.add_parser("plan", help="optimal finite-horizon policy tree")
    sp.add_argument("--model", required=True)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--solver", choices=("dp", "enum"), default="dp")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("evaluate", help="exact (and optional Monte Carlo) value of a policy")
    sp.add_argument("--model", required=True)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--episodes", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("verify-bounds", help="randomized check of the value-gap bounds")
    sp.add_argument("--theorem", type=int, choices=(1, 2), required=True)
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--states", type=int, default=3)
    sp.add_argument("--actions", type=int, default=2)
    sp.add_argument("--observations", type=int, default=2)
    sp.add_argument("--r-max", type=float, default=1.0)
    sp.add_argument("--random-policies", type=int, default=10)
    sp.add_argument("--enum-cross-check", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify_bounds)

    sp = sub.add_parser("pipeline", help="run every stage on synthetic data")
    sp.add_argument("--config", dest="config_file", help="JSON config; flags override it")
    sp.add_argument("--out")
    sp.add_argument("--scenario")
    sp.add_argument("--sequences", type=int)
    sp.add_argument("--length", type=int)
    sp.add_argument("--seed", type=int)
    bnp_flags(sp, defaults=False)
    sp.add_argument("--n-mc", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--solver", choices=("dp", "enum"))
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--delta", type=float)
    sp.add_argument("--label-source", choices=("map", "truth"))
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_pipeline)
    return p


_MODULE_OF = {"bnp": "bnp-learn", "obsfn": "obsfn", "transest": "transest", "planner": "planner",
              "bounds": "bounds", "simgen": "simgen", "core": "core-model"}


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    module = "cli"
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("pomdp_learn."):
            module = _MODULE_OF.get(name.split(".")[1], module)
        tb = tb.tb_next
    return module


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelParseError, ModelValidationError, CapExceeded, ValueError, KeyError) as exc:
        print(f"error: {_origin(exc)}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: cli: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
