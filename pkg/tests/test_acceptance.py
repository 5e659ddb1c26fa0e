"""Acceptance criteria 1-10, one reported line each (see the summary section of the run)."""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pomdp_learn.bnp import SamplerConfig, fit_bphmm, match_states
from pomdp_learn.bounds import BoundsConfig, verify_theorem1, verify_theorem2
from pomdp_learn.cli import run
from pomdp_learn.core import GaussianEmission, load_model, validate_model
from pomdp_learn.obsfn import estimate_observation_matrix
from pomdp_learn.planner import (evaluate_policy_exact, num_policy_trees, random_policy,
                                 solve_optimal_dp, solve_optimal_enum)
from pomdp_learn.simgen import load_scenario, random_pomdp, simulate_continuous, simulate_discrete
from pomdp_learn.transest import required_samples

ROW6 = np.array([0.02, 0.03, 0.05, 0.08, 0.12, 0.7])
BNP_SEEDS = range(10)
PIPELINE_SEEDS = range(10)

# artifacts kept for the determinism criterion
_record: dict = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def chernoff_coverage(seed=2024, reps=500, w=73778, alpha=0.01):
    rng = np.random.default_rng(seed)
    est = rng.multinomial(w, ROW6, size=reps) / w
    return est, float(np.mean(np.all(np.abs(est - ROW6) <= alpha, axis=1)))


def test_c1_chernoff_example():
    t = time.perf_counter()
    est, frac = chernoff_coverage()
    elapsed = time.perf_counter() - t
    _record["c1"] = est.tobytes()
    ok = frac >= 0.95 and elapsed < 60
    report(1, ok, f"coverage {frac:.3f} >= 0.95 over 500 repetitions of w=73778 ({elapsed:.1f}s)")
    assert ok


def test_c2_sample_size(capsys):
    w = required_samples(0.01, 0.95)
    code = run(["sample-size", "--alpha", "0.01", "--delta", "0.95"])
    out = capsys.readouterr().out
    ok = w == 73778 and code == 0 and out.splitlines()[0] == "73778" and "73777" in out
    report(2, ok, f"required_samples(0.01, 0.95) = {w}, deviation note printed: {'73777' in out}")
    assert ok


def obs_oracle(seed=0):
    em = [GaussianEmission([0.0], [[1.0]]), GaussianEmission([2.0], [[1.0]])]
    return estimate_observation_matrix(em, 10**6, seed)


def test_c3_observation_matrix():
    t = time.perf_counter()
    obs = obs_oracle()
    elapsed = time.perf_counter() - t
    _record["c3"] = obs.probs.tobytes()
    truth = np.array([[0.841344746, 0.158655254], [0.158655254, 0.841344746]])
    dev = np.abs(obs.probs - truth) / obs.std_err
    ok = bool(np.all(dev <= 3)) and elapsed < 10
    report(3, ok, f"max deviation {dev.max():.2f} standard errors (se {obs.std_err.max():.5f}, "
                  f"{elapsed:.1f}s)")
    assert ok


def test_c4_theorem1():
    cfg = BoundsConfig(theorem=1, epsilon=0.5, horizon=3, trials=100, seed=0)
    t = time.perf_counter()
    rep = verify_theorem1(cfg)
    elapsed = time.perf_counter() - t
    _record["c4"] = (cfg, rep.to_dict())
    bad = sum(r.gap > cfg.epsilon for r in rep.records)
    ok = bad == 0 and abs(cfg.alpha() - 0.5 / 27) < 1e-15 and elapsed < 120
    report(4, ok, f"{bad} of 100 trials over epsilon, max gap {rep.max_gap:.4g}, "
                  f"alpha {cfg.alpha():.6g} ({elapsed:.1f}s)")
    assert ok


def test_c5_theorem2():
    cfg = BoundsConfig(theorem=2, epsilon=0.5, horizon=3, trials=100, seed=0, enum_cross_check=10)
    t = time.perf_counter()
    rep = verify_theorem2(cfg)
    elapsed = time.perf_counter() - t
    _record["c5"] = (cfg, rep.to_dict())
    bad = sum(r.gap > cfg.epsilon for r in rep.records)
    ok = bad == 0 and rep.order_violations == 0 and abs(cfg.alpha() - 0.5 / 54) < 1e-15 and elapsed < 300
    report(5, ok, f"{bad} trials over epsilon, {rep.order_violations} order violations, "
                  f"max gap {rep.max_gap:.4g} ({elapsed:.1f}s)")
    assert ok


def test_c6_solver_equivalence():
    rng = np.random.default_rng(6)
    worst, done = 0.0, 0
    while done < 50:
        n, a, o, h = (int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
                      int(rng.integers(1, 4)))
        m = random_pomdp(n, a, o, float(rng.uniform(0.5, 3)), seed=int(rng.integers(2**32)))
        if num_policy_trees(m, h) > 10**6:
            continue
        _, v_dp = solve_optimal_dp(m, h)
        _, v_enum = solve_optimal_enum(m, h)
        worst = max(worst, abs(v_dp - v_enum))
        done += 1
    ok = worst <= 1e-9
    report(6, ok, f"max |dp - enum| = {worst:.2e} over 50 instances")
    assert ok


def eval_pair(k):
    rng = np.random.default_rng([7, k])
    m = random_pomdp(int(rng.integers(2, 4)), 2, 2, seed=int(rng.integers(2**32)))
    h = int(rng.integers(1, 4))
    pol = random_policy(m, h, rng)
    return m, pol, h, simulate_discrete(m, pol, h, 10**6, seed=k)


def test_c7_evaluation_equivalence():
    worst = 0.0
    for k in range(20):
        m, pol, h, (mean, se) = eval_pair(k)
        if k == 0:
            _record["c7"] = (mean, se)
        worst = max(worst, abs(mean - evaluate_policy_exact(m, pol, h).value) / se)
    ok = worst <= 3
    report(7, ok, f"max deviation {worst:.2f} standard errors over 20 pairs at 10^6 episodes")
    assert ok


def bnp_fit(seed):
    data = simulate_continuous(load_scenario(), 4, 500, seed=seed)
    fit = fit_bphmm(data, config=SamplerConfig(sweeps=1000, seed=seed))
    est = np.concatenate(fit.map_sample.labels)
    ref = np.concatenate([s.latent_states for s in data])
    return fit.map_sample, match_states(est, ref)[1]


def test_c8_bnp_state_count():
    t = time.perf_counter()
    results = []
    for seed in BNP_SEEDS:
        sample, err = bnp_fit(seed)
        if seed == 0:
            _record["c8"] = json.dumps(sample.to_dict())
        results.append((sample.num_states, err))
    elapsed = time.perf_counter() - t
    good = sum(L == 3 and err <= 0.05 for L, err in results)
    ok = good >= 8 and elapsed < 600
    counts = [L for L, _ in results]
    report(8, ok, f"{good}/10 seeds with MAP count 3 and hamming <= 5% "
                  f"(counts {counts}, worst error {max(e for _, e in results):.4f}, {elapsed:.0f}s)")
    assert ok


def pipeline_run(seed, out):
    code = run(["pipeline", "--seed", str(seed), "--out", str(out)])
    return code, json.loads((out / "report.json").read_text())


def test_c9_pipeline(tmp_path):
    need = required_samples(0.05, 0.9)
    good, lines = 0, []
    for seed in PIPELINE_SEEDS:
        out = tmp_path / f"seed{seed}"
        code, rep = pipeline_run(seed, out)
        chk = rep["transition_check"]
        valid = code == 0 and validate_model(load_model(out / "model.json")) == []
        hit = valid and chk["sufficient_data"] and chk.get("within_alpha", False)
        good += hit
        lines.append(f"{seed}:{rep['num_states']}/{chk['min_count']}/{chk.get('max_entry_error', float('nan')):.4f}")
        if seed == 0:
            _record["c9"] = {f.name: f.read_bytes() for f in sorted(out.iterdir())}
    ok = good >= 9
    report(9, ok, f"{good}/10 seeds valid with rows within alpha 0.05 and w >= {need} "
                  f"(seed:states/min w/max error {' '.join(lines)})")
    assert ok


def test_c10_determinism(tmp_path):
    checks = {}
    if "c1" in _record:
        checks["1"] = chernoff_coverage()[0].tobytes() == _record["c1"]
    if "c3" in _record:
        checks["3"] = obs_oracle().probs.tobytes() == _record["c3"]
    for key, fn in (("c4", verify_theorem1), ("c5", verify_theorem2)):
        if key in _record:
            cfg, full = _record[key]
            # trials draw from per-trial substreams, so a prefix rerun must match the full run
            part = fn(BoundsConfig(**{**full["config"], "trials": 10})).to_dict()
            checks[key[1:]] = json.dumps(part["records"]) == json.dumps(full["records"][:10])
    if "c7" in _record:
        checks["7"] = eval_pair(0)[3] == _record["c7"]
    if "c8" in _record:
        checks["8"] = json.dumps(bnp_fit(0)[0].to_dict()) == _record["c8"]
    if "c9" in _record:
        out = tmp_path / "again"
        pipeline_run(0, out)
        checks["9"] = {f.name: f.read_bytes() for f in sorted(out.iterdir())} == _record["c9"]
    if not checks:
        pytest.skip("no randomized criterion ran in this session")
    ok = all(checks.values())
    report(10, ok, "byte-identical reruns for criteria " +
           ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in checks.items()))
    assert ok
