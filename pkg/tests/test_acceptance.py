"""Acceptance criteria, each run at its stated tolerance and time budget.

Every test records one PASS/FAIL line (see ``conftest.report_criterion``); the
lines are repeated in the terminal summary. The mask-learning runs on the
reference environments are shared between criteria 6, 7 and 8; a criterion
that reuses a run is charged the time that run originally took.
"""

import time

import numpy as np
import pytest

from cids.causal_graph import build_temporal_dag, cmi_from_joint, d_separated
from cids.causal_graph import verify_aia_characterization, verify_dais_characterization
from cids.cmi_learner import LearnerConfig, TransitionBatch, cmi_dais_batch, train_masks
from cids.env import binary_policy, collect, copy_config, ctr, generate_config, make_env, tabular_scm
from cids.env import ci_triples, tabular_variables
from cids.harness import main
from cids.nn import GaussianHead, finite_diff_check, gaussian_nll, gaussian_nll_grad, head_size, init_mlp, mixture_nll
from cids.policy import PolicyConfig, StateSelector, evaluate, train_policy
from cids.structures import StructureMasks, random_masks
from oracles import all_mask_pairs, d_separated_by_paths

SEEDS = (0, 1, 2, 3, 4)
LAMBDA_GRID = (0.0, 1e-4, 5e-4, 9e-4)
REFERENCE_EPISODES = 2500  # 50k transitions at episode length 20

_logs = {}
_mask_runs = {}


def _reference(seed):
    """The d=8 reference env for ``seed`` and its 50k-transition uniform-action log."""
    if seed not in _logs:
        config = generate_config(d=8, n_dais=3, n_aia_edges=2, seed=seed)
        start = time.perf_counter()
        log = collect(make_env(config), episodes=REFERENCE_EPISODES)
        _logs[seed] = (config, log, time.perf_counter() - start)
    return _logs[seed]


def _learned(seed, lambda1=5e-4):
    """``(report, seconds)`` for mask learning on the reference log, cached."""
    key = (seed, lambda1)
    if key not in _mask_runs:
        config, log, collect_time = _reference(seed)
        start = time.perf_counter()
        report, _, _ = train_masks(log, LearnerConfig(lambda1=lambda1, seed=seed), truth=config.masks)
        _mask_runs[key] = (report, time.perf_counter() - start + collect_time)
    return _mask_runs[key]


def _random_graph(rng, max_d=8, horizons=(2, 3, 4)):
    d = int(rng.integers(1, max_d + 1))
    return build_temporal_dag(random_masks(d, rng), int(rng.choice(horizons)))


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_01_d_separation_vs_path_enumeration(report_criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    queries = agree = 0
    for _ in range(1000):
        g = _random_graph(rng)
        nodes = sorted(g.nodes)
        edges = list(g.edges)
        for _ in range(10):
            perm = rng.permutation(len(nodes))
            n_a, n_b = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            n_s = int(rng.integers(0, 4))
            if n_a + n_b + n_s > len(nodes):
                n_a, n_b, n_s = 1, 1, len(nodes) - 2
            picked = [nodes[i] for i in perm]
            A = set(picked[:n_a])
            B = set(picked[n_a : n_a + n_b])
            S = set(picked[n_a + n_b : n_a + n_b + n_s])
            queries += 1
            agree += d_separated(g, A, B, S) == d_separated_by_paths(nodes, edges, A, B, S)
    elapsed = time.perf_counter() - start
    ok = queries == 10_000 and agree == queries and elapsed < 60
    report_criterion(1, "d-separation vs path enumeration", ok, f"{agree}/{queries} agree in {elapsed:.1f}s (< 60s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_02_markov_faithfulness_bridge(report_criterion):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    checks = mismatches = 0
    for k in range(200):
        d = int(rng.integers(1, 3))
        arity = int(rng.integers(2, 4))
        masks = random_masks(d, rng)
        table = tabular_scm(d, masks, arity=arity, seed=k)
        g = build_temporal_dag(masks, 2)
        labels = tabular_variables(d)
        for x, y, z in ci_triples(len(labels)):
            sep = d_separated(g, {labels[x]}, {labels[y]}, {labels[v] for v in z})
            zero = cmi_from_joint(table, [x], [y], z) < 1e-9
            checks += 1
            mismatches += sep != zero
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 300
    report_criterion(2, "CMI zero iff d-separated", ok, f"{checks - mismatches}/{checks} agree over 200 SCMs in {elapsed:.1f}s (< 300s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def test_criterion_03_characterizations(report_criterion):
    # Each mask pair is checked on its own two-slice graph (one transition).
    # On longer unrollings the AIA equivalence can fail through a fork; see
    # test_causal_graph.test_aia_characterization_fails_through_a_fork.
    start = time.perf_counter()
    total = ok_count = 0
    for d in (1, 2, 3):
        for ss, am in all_mask_pairs(d):
            g = build_temporal_dag(StructureMasks(ss, am), 2)
            total += 1
            ok_count += verify_dais_characterization(g) and verify_aia_characterization(g)
    rng = np.random.default_rng(99)
    for _ in range(1000):
        g = _random_graph(rng, horizons=(2,))
        total += 1
        ok_count += verify_dais_characterization(g) and verify_aia_characterization(g)
    elapsed = time.perf_counter() - start

    rng = np.random.default_rng(100)
    longer = [_random_graph(rng, horizons=(3,)) for _ in range(200)]
    aia_long = sum(verify_aia_characterization(g) for g in longer)
    dais_long = sum(verify_dais_characterization(g) for g in longer)

    ok = ok_count == total and elapsed < 120
    report_criterion(
        3,
        "DAIS/AIA characterizations",
        ok,
        f"{ok_count}/{total} two-slice graphs verified in {elapsed:.1f}s (< 120s); "
        f"three-slice graphs: DAIS {dais_long}/200, AIA {aia_long}/200 (fork counterexamples)",
    )
    assert ok


# -- 4 ---------------------------------------------------------------------------------


def _gaussian_loss(target):
    d = target.shape[1]

    def loss_fn(out):
        head = GaussianHead(out[:, :d], out[:, d:])
        d_mean, d_lv = gaussian_nll_grad(target, head, out[:, d:])
        return gaussian_nll(target, head).sum(), np.concatenate([d_mean, d_lv], axis=1)

    return loss_fn


def _mixture_loss(target, k):
    def loss_fn(out):
        nll, jac = mixture_nll(target, out, k)
        return nll.sum(), jac(np.ones_like(nll))

    return loss_fn


def test_criterion_04_finite_differences(report_criterion):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    errors = []
    for i in range(20):
        in_dim, d = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        k = 1 if i % 2 == 0 else int(rng.integers(2, 4))
        net = init_mlp(in_dim, head_size(d, k), hidden=int(rng.integers(3, 9)), hidden_layers=3, seed=i)
        # random biases keep every ReLU preactivation away from the kink at 0, where no gradient exists
        for b in net.params[1::2]:
            b[:] = rng.normal(scale=0.5, size=b.shape)
        x = rng.normal(size=(4, in_dim))
        target = rng.normal(size=(4, d))
        loss = _gaussian_loss(target) if k == 1 else _mixture_loss(target, k)
        errors.append(finite_diff_check(net, loss, x))
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    report_criterion(4, "finite-difference gradients", ok, f"max relative error {max(errors):.2e} (< 1e-4) in {elapsed:.1f}s")
    assert ok


# -- 5 ---------------------------------------------------------------------------------


def _copy_env_estimate(effect, seed):
    config = copy_config(effect=effect, seed=seed)
    log = collect(make_env(config), binary_policy(1), episodes=REFERENCE_EPISODES, epsilon=0.0, seed=seed)
    _, models, gates = train_masks(log, LearnerConfig(epochs=10, seed=seed))
    fresh = collect(make_env(config), binary_policy(1), episodes=500, epsilon=0.0, seed=10_000 + seed)
    return cmi_dais_batch(models, gates, TransitionBatch(fresh.states, fresh.actions, fresh.next_states))


def test_criterion_05_cmi_calibration(report_criterion):
    start = time.perf_counter()
    copies = [_copy_env_estimate(True, s) for s in SEEDS]
    nulls = [_copy_env_estimate(False, s) for s in SEEDS]
    elapsed = time.perf_counter() - start
    ln2 = np.log(2.0)
    copy_ok = all(abs(v - ln2) <= 0.1 * ln2 for v in copies)
    null_ok = all(abs(v) < 0.02 for v in nulls)
    ok = copy_ok and null_ok and elapsed < 900
    report_criterion(
        5,
        "CMI calibration",
        ok,
        f"copy env {np.round(copies, 4).tolist()} vs ln2={ln2:.4f} (+-10%); "
        f"no-effect env {np.round(nulls, 4).tolist()} (|.| < 0.02); {elapsed:.0f}s (< 900s)",
    )
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_06_mask_recovery(report_criterion):
    runs = [_learned(s) for s in SEEDS]
    elapsed = sum(t for _, t in runs)
    f1_a = [r.metrics["a_to_s"]["f1"] for r, _ in runs]
    f1_s = [r.metrics["s_to_s"]["f1"] for r, _ in runs]
    ok = min(f1_a) >= 0.9 and min(f1_s) >= 0.7 and elapsed < 1200
    report_criterion(
        6,
        "mask recovery on the reference env",
        ok,
        f"a->s F1 per seed {np.round(f1_a, 3).tolist()} (>= 0.9); s->s cross-edge F1 {np.round(f1_s, 3).tolist()} "
        f"(>= 0.7); {elapsed:.0f}s (< 1200s)",
    )
    assert ok


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_07_policy_trend(report_criterion):
    mask_time = 0.0
    start = time.perf_counter()
    finals = {mode: [] for mode in ("FULL", "CIDS", "AIA")}
    fallbacks = []
    for seed in SEEDS:
        config, _, _ = _reference(seed)
        report, t = _learned(seed)
        mask_time += t
        for mode in finals:
            selector = StateSelector.from_masks(mode, report.masks)
            if selector.is_degenerate():
                fallbacks.append(f"{mode}@seed{seed}")
                selector = StateSelector.full(config.d)
            env = make_env(config)
            bundle, _ = train_policy(env, selector, PolicyConfig(seed=seed))
            finals[mode].append(evaluate(env, bundle.actor, selector, episodes=50, seed=10_000 + seed)["return_mean"])
    elapsed = time.perf_counter() - start + mask_time
    full, cids, aia = (np.array(finals[m]) for m in ("FULL", "CIDS", "AIA"))
    cids_wins = int(np.sum(cids >= full))
    aia_behind = int(np.sum(aia <= full))
    ok = cids_wins >= 4 and aia_behind >= 4 and elapsed < 2700
    report_criterion(
        7,
        "policy trend",
        ok,
        f"CIDS >= FULL in {cids_wins}/5, AIA <= FULL in {aia_behind}/5 (need 4/5); "
        f"FULL {np.round(full, 2).tolist()} CIDS {np.round(cids, 2).tolist()} AIA {np.round(aia, 2).tolist()}; "
        f"empty selectors run as FULL: {', '.join(fallbacks) or 'none'}; {elapsed:.0f}s (< 2700s)",
    )
    assert ok


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_08_sparsity_trend(report_criterion):
    medians = []
    elapsed = 0.0
    for lam in LAMBDA_GRID:
        runs = [_learned(s, lam) for s in SEEDS]
        elapsed += sum(t for _, t in runs)
        medians.append(float(np.median([r.active_gates_a for r, _ in runs])))
    non_increasing = all(b <= a for a, b in zip(medians, medians[1:]))
    sparsest = medians[-1] <= min(medians)
    ties = len(set(medians)) < len(medians)
    ok = non_increasing and sparsest and elapsed < 1800
    report_criterion(
        8,
        "sparsity trend over lambda1",
        ok,
        f"median active a->s gates {dict(zip(LAMBDA_GRID, medians))} "
        f"(non-increasing, 9e-4 sparsest{', ties present' if ties else ''}); {elapsed:.0f}s (< 1800s)",
    )
    assert ok


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_09_ctr_examples(report_criterion):
    values = [ctr(12, 4, 5), ctr(0, 4, 5), ctr(4 * 5, 4, 5)]
    ok = values == [0.6, 0.0, 1.0]
    report_criterion(9, "CTR formula", ok, f"{values} == [0.6, 0.0, 1.0]")
    assert ok


# -- 10 --------------------------------------------------------------------------------


def _snapshot(directory):
    return {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.mark.filterwarnings("ignore::cids.exceptions.DegenerateMaskWarning")
def test_criterion_10_reproducibility(report_criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    env_json = str(tmp_path / "env" / "env.json")
    log_txt = str(tmp_path / "data" / "log.txt")
    masks_json = str(tmp_path / "masks" / "masks.json")
    stages = {
        "env": ["gen-env", "--d", "6", "--dais", "2", "--aia-edges", "1", "--seed", "5"],
        "data": ["collect", "--config", env_json, "--episodes", "100"],
        "masks": ["learn-masks", "--log", log_txt, "--config", env_json, "--epochs", "2", "--batch-size", "64"],
        "train": ["train", "--config", env_json, "--masks", masks_json, "--mode", "CIDS", "--episodes", "10",
                  "--warmup-steps", "100"],
        "eval": ["evaluate", "--config", env_json, "--policy", str(tmp_path / "train" / "policy.ckpt"), "--episodes", "3"],
        "ablate": ["ablate", "--config", env_json, "--masks", masks_json, "--seeds", "0,1", "--episodes", "3",
                   "--warmup-steps", "20", "--eval-episodes", "2"],
        "sweep": ["sweep-lambda", "--config", env_json, "--log", log_txt, "--grid", "0,9e-4", "--seeds", "0",
                  "--epochs", "1", "--batch-size", "64", "--episodes", "4", "--warmup-steps", "20",
                  "--checkpoints", "2", "--eval-episodes", "1"],
    }
    start = time.perf_counter()
    identical = []
    for name, argv in stages.items():
        out = tmp_path / name
        assert main([*argv, "--out", str(out)]) == 0
        first = _snapshot(out)
        assert main([*argv, "--out", str(out)]) == 0
        identical.append((name, first == _snapshot(out) and len(first) > 1))
    report_dir = tmp_path / "report"
    argv = ["report", "--run-dir", str(tmp_path), "--config", env_json, "--episodes", "5", "--out", str(report_dir)]
    assert main(argv) == 0
    first = _snapshot(report_dir)
    assert main(argv) == 0
    identical.append(("report", first == _snapshot(report_dir)))
    elapsed = time.perf_counter() - start
    ok = all(same for _, same in identical)
    bad = [n for n, same in identical if not same]
    report_criterion(
        10,
        "byte-identical reruns",
        ok,
        f"{sum(s for _, s in identical)}/{len(identical)} stages identical"
        + (f" (differ: {bad})" if bad else "")
        + f" in {elapsed:.0f}s",
    )
    assert ok
