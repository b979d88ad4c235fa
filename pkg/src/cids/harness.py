"""Command-line orchestration: env generation, collection, mask learning,
policy training, evaluation, ablations, the sparsity sweep and reports.

Every command writes its artifacts plus a ``manifest.json`` into ``--out``.
Outputs depend only on the inputs and seeds, so rerunning a command with the
same manifest inputs rewrites byte-identical artifacts. The manifest itself
records timestamps (taken from ``SOURCE_DATE_EPOCH`` when set) and is
therefore not part of its own output index.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .cmi_learner import LearnerConfig, train_masks
from .env import (
    EnvConfig,
    collect,
    generate_config,
    load_config,
    make_env,
    read_log,
    save_config,
    write_log,
)
from .exceptions import CIDSError, ConfigError, DataError, DegenerateMaskWarning, StageError
from .nn import DenseNet
from .policy import (
    MODES,
    PolicyConfig,
    StateSelector,
    act,
    aia_vector,
    curve_csv,
    evaluate,
    load_policy,
    save_policy,
    select_state,
    train_policy,
)
from .structures import StructureMasks

log = logging.getLogger("cids")

MANIFEST = "manifest.json"
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_GRID = (0.0, 1e-4, 5e-4, 9e-4)
SWEEP_COLUMNS = ("lambda1", "seed", "checkpoint_step", "ctr_mean", "ctr_std", "active_gates")
SUMMARY_COLUMNS = ("mode", "n_runs", "final_return_mean", "final_return_std", "final_ctr_mean", "final_ctr_std")
OFFLINE_COLUMNS = ("run", "mode", "n", "precision", "recall", "accuracy", "hit_cosine", "reward_threshold")

# Resolved design choices recorded in every manifest and reprinted by `report`.
DECISIONS = {
    "next_state_masking": "both s_t and s_t+1 are masked before entering the replay buffer",
    "td_bootstrap": "episode ends are time limits; the TD target always bootstraps",
    "degenerate_mask_fallback": "an empty selector falls back to the full state with a warning",
    "masked_dims": "excluded dims are zeroed, not dropped",
    "offline_metrics": (
        "synthetic protocol: a logged transition is positive when its reward is > 0; the policy hits "
        "when cos(policy action, logged action) >= hit_cosine; not equivalent to dataset "
        "precision/recall/accuracy"
    ),
}


class UsageError(CIDSError):
    """Bad command-line flags (exit code 1)."""


# -- manifests --------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    """Snapshot of one command invocation and the artifacts it produced."""

    command: str
    config: dict
    seed: Optional[int]
    software_version: str = __version__
    timestamps: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    decisions: Dict[str, str] = field(default_factory=lambda: dict(DECISIONS))

    @property
    def config_hash(self) -> str:
        canon = json.dumps({"command": self.command, "config": self.config}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def index(self, out_dir: Path, names: Sequence[str]) -> None:
        for name in sorted(names):
            self.outputs[name] = _sha256(out_dir / name)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["config_hash"] = self.config_hash
        return out

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / MANIFEST
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        data.pop("config_hash", None)
        return cls(**data)


@dataclass
class ExperimentConfig:
    """Inputs shared by the multi-run commands (ablate, sweep-lambda)."""

    env_config_path: str
    learner: LearnerConfig
    policy: PolicyConfig
    selector_mode: str = "CIDS"
    seeds: Sequence[int] = DEFAULT_SEEDS
    out_dir: str = "."

    def __post_init__(self):
        if not self.seeds:
            raise UsageError("the seed list is empty")
        if self.selector_mode not in MODES:
            raise UsageError(f"unknown selector mode {self.selector_mode!r}")

    def to_dict(self) -> dict:
        return {
            "env_config_path": self.env_config_path,
            "learner": asdict(self.learner),
            "policy": asdict(self.policy),
            "selector_mode": self.selector_mode,
            "seeds": list(self.seeds),
        }


# -- helpers ----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, stage: str, what: str) -> Path:
    if path is None:
        raise StageError(f"missing {what}; run `cids {stage}` first and pass its output")
    p = Path(path)
    if not p.exists():
        raise StageError(f"{what} {str(p)!r} not found; run `cids {stage}` first")
    return p


def _load_env_config(path) -> EnvConfig:
    return load_config(_require(path, "gen-env", "env config"))


def _load_masks(path) -> StructureMasks:
    p = _require(path, "learn-masks", "mask report")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
        return StructureMasks.from_dict(data["binary_masks"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{p}: not a mask report ({exc})") from exc


def _selector_for(mode: str, masks: Optional[StructureMasks], d: int):
    """Selector for ``mode``; an empty structured selector falls back to FULL."""
    if mode == "FULL":
        return StateSelector.full(d), False
    if masks is None:
        raise StageError(f"selector mode {mode} needs learned masks; run `cids learn-masks` first")
    selector = StateSelector.from_masks(mode, masks)
    if selector.is_degenerate():
        warnings.warn(f"{mode} selector is empty; falling back to the full state", DegenerateMaskWarning, stacklevel=2)
        return StateSelector.full(d), True
    return selector, False


def _write_selector(path: Path, selector: StateSelector, requested: str, fallback: bool) -> None:
    payload = {"mode": selector.mode, "mask": selector.mask.tolist(), "requested_mode": requested, "fallback": fallback}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_selector(path) -> StateSelector:
    p = _require(path, "train", "selector file")
    data = json.loads(p.read_text(encoding="utf-8"))
    return StateSelector(data["mode"], data["mask"])


def _seeds(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc


def _floats(text: str) -> List[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _learner_config(args, seed=None, lambda1=None) -> LearnerConfig:
    return LearnerConfig(
        lambda1=args.lambda1 if lambda1 is None else lambda1,
        lambda2=args.lambda2,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed if seed is None else seed,
    )


def _policy_config(args, seed=None) -> PolicyConfig:
    return PolicyConfig(
        episodes=args.episodes,
        warmup_steps=args.warmup_steps,
        exploration_noise_sigma=args.noise,
        seed=args.seed if seed is None else seed,
    )


def _set_csv(rows: List[Sequence], columns: Sequence[str]) -> str:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def _vars(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "verbose")}


# -- commands ---------------------------------------------------------------------


def cmd_gen_env(args) -> int:
    try:
        config = generate_config(
            d=args.d,
            n_dais=args.dais,
            n_aia_edges=args.aia_edges,
            action_dim=args.action_dim,
            noise_sigma=args.noise,
            episode_length=args.episode_length,
            seed=args.seed,
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out = _out_dir(args)
    save_config(out / "env.json", config)
    manifest = RunManifest("gen-env", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.index(out, ["env.json"])
    manifest.write(out)
    masks = config.masks
    dais = sorted(masks.dais_dims())
    aia = np.flatnonzero(aia_vector(masks) * (1 - masks.m_a_to_s)).tolist()
    print(f"wrote {out / 'env.json'} (fingerprint {config.fingerprint()})")
    print(f"DAIS dims: {dais}")
    print(f"AIA dims:  {aia}")
    print(f"cross edges (source -> destination): {sorted(masks.cross_edges())}")
    return 0


def cmd_collect(args) -> int:
    config = _load_env_config(args.config)
    env = make_env(config)
    behavior = None
    if args.actor is not None:
        nets = load_policy(_require(args.actor, "train", "policy checkpoint"))
        selector = _read_selector(args.selector or Path(args.actor).with_name("selector.json"))
        actor = nets["actor"]
        behavior = lambda s, rng: act(actor, select_state(s, selector))  # noqa: E731
    seed = args.seed if args.seed is not None else None
    trajectories = collect(env, behavior, episodes=args.episodes, epsilon=args.epsilon, seed=seed)
    out = _out_dir(args)
    write_log(out / "log.txt", trajectories)
    manifest = RunManifest("collect", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.config["env_fingerprint"] = config.fingerprint()
    manifest.index(out, ["log.txt"])
    manifest.write(out)
    print(f"wrote {len(trajectories)} transitions from {args.episodes} episodes to {out / 'log.txt'}")
    return 0


def _print_metrics(metrics: dict) -> None:
    for name in ("a_to_s", "s_to_s"):
        m = metrics[name]
        print(f"{name}: precision={m['precision']:.3f} recall={m['recall']:.3f} f1={m['f1']:.3f}")


def cmd_learn_masks(args) -> int:
    config = _load_env_config(args.config) if args.config is not None else None
    data = read_log(_require(args.log, "collect", "trajectory log"), config)
    truth = config.masks if config is not None else None
    report, _, _ = train_masks(data, _learner_config(args), truth=truth)
    out = _out_dir(args)
    (out / "masks.json").write_text(report.dumps(), encoding="utf-8")
    (out / "history.csv").write_text(report.history_csv(), encoding="utf-8")
    manifest = RunManifest("learn-masks", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.index(out, ["masks.json", "history.csv"])
    manifest.write(out)
    print(f"m_a_to_s: {report.masks.m_a_to_s.tolist()}")
    print(f"cross edges (source -> destination): {sorted(report.masks.cross_edges())}")
    if report.metrics is not None:
        _print_metrics(report.metrics)
    return 0


def cmd_train(args) -> int:
    config = _load_env_config(args.config)
    masks = _load_masks(args.masks) if args.masks is not None else None
    selector, fallback = _selector_for(args.mode, masks, config.d)
    env = make_env(config)
    bundle, curve = train_policy(env, selector, _policy_config(args))
    out = _out_dir(args)
    (out / "curve.csv").write_text(curve_csv(curve), encoding="utf-8")
    save_policy(out / "policy.ckpt", bundle)
    _write_selector(out / "selector.json", selector, args.mode, fallback)
    manifest = RunManifest("train", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.index(out, ["curve.csv", "policy.ckpt", "selector.json"])
    manifest.write(out)
    tail = curve[-10:]
    print(f"trained {selector.mode} policy for {len(curve)} episodes; mean return of the last {len(tail)}: "
          f"{np.mean([r['return'] for r in tail]):.4f}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_env_config(args.config)
    policy_path = _require(args.policy, "train", "policy checkpoint")
    nets = load_policy(policy_path)
    selector = _read_selector(args.selector or policy_path.with_name("selector.json"))
    result = evaluate(make_env(config), nets["actor"], selector, args.episodes, seed=args.seed)
    result["selector_mode"] = selector.mode
    out = _out_dir(args)
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest = RunManifest("evaluate", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.index(out, ["eval.json"])
    manifest.write(out)
    print(
        f"{selector.mode}: return {result['return_mean']:.4f} +- {result['return_std']:.4f}, "
        f"CTR {result['ctr_mean']:.4f} +- {result['ctr_std']:.4f} over {args.episodes} episodes"
    )
    return 0


def run_ablation(config: EnvConfig, masks: StructureMasks, policy: PolicyConfig, seeds: Sequence[int], eval_episodes=20):
    """Train every selector mode on every seed; returns ``(run_rows, curves)``.

    Run rows are ``(mode, seed, final_return, final_ctr, fallback)`` with the
    final numbers from greedy evaluation after training.
    """
    rows, curves = [], []
    for mode in MODES:
        selector, fallback = _selector_for(mode, masks, config.d)
        for seed in seeds:
            env = make_env(config)
            cfg = PolicyConfig(**{**asdict(policy), "seed": int(seed)})
            bundle, curve = train_policy(env, selector, cfg)
            ev = evaluate(env, bundle.actor, selector, eval_episodes, seed=10_000 + int(seed))
            for rec in curve:
                rec["selector_mode"] = mode
            curves.extend(curve)
            rows.append((mode, int(seed), ev["return_mean"], ev["ctr_mean"], fallback))
            log.info("ablate mode=%s seed=%d return=%.4f", mode, seed, ev["return_mean"])
    return rows, curves


def cmd_ablate(args) -> int:
    config = _load_env_config(args.config)
    masks = _load_masks(args.masks)
    seeds = _seeds(args.seeds)
    exp = ExperimentConfig(args.config, _learner_config(args), _policy_config(args), "CIDS", seeds, args.out)
    rows, curves = run_ablation(config, masks, exp.policy, seeds, args.eval_episodes)
    out = _out_dir(args)
    (out / "ablation_curves.csv").write_text(curve_csv(curves), encoding="utf-8")
    (out / "ablation_runs.csv").write_text(
        _set_csv([r[:4] + (int(r[4]),) for r in rows], ("mode", "seed", "final_return", "final_ctr", "fallback")),
        encoding="utf-8",
    )
    summary = []
    for mode in MODES:
        rets = np.array([r[2] for r in rows if r[0] == mode])
        ctrs = np.array([r[3] for r in rows if r[0] == mode])
        summary.append((mode, len(rets), float(rets.mean()), float(rets.std()), float(ctrs.mean()), float(ctrs.std())))
    (out / "ablation_summary.csv").write_text(_set_csv(summary, SUMMARY_COLUMNS), encoding="utf-8")
    manifest = RunManifest("ablate", {**_vars(args), "experiment": exp.to_dict()}, None, timestamps={"finished": _now()})
    manifest.index(out, ["ablation_curves.csv", "ablation_runs.csv", "ablation_summary.csv"])
    manifest.write(out)
    for row in summary:
        print(f"{row[0]:>4}: final return {row[2]:.4f} +- {row[3]:.4f} over {row[1]} seeds")
    return 0


def run_sweep(
    config: EnvConfig,
    data,
    grid: Sequence[float],
    seeds: Sequence[int],
    learner: LearnerConfig,
    policy: PolicyConfig,
    checkpoints: int = 5,
    eval_episodes: int = 10,
):
    """Mask learning plus CIDS policy training for every ``(lambda1, seed)``.

    Each run is evaluated greedily at ``checkpoints`` evenly spaced episodes.
    Returns rows ``(lambda1, seed, checkpoint_step, ctr_mean, ctr_std, active_gates)``.
    """
    if checkpoints < 1:
        raise UsageError("checkpoints must be >= 1")
    marks = sorted({max(1, round(policy.episodes * (c + 1) / checkpoints)) for c in range(checkpoints)})
    rows = []
    for lam in grid:
        for seed in seeds:
            report, _, _ = train_masks(data, LearnerConfig(**{**asdict(learner), "lambda1": float(lam), "seed": int(seed)}))
            active = report.active_gates_a
            selector, _ = _selector_for("CIDS", report.masks, config.d)
            env = make_env(config)
            done_at = {}

            def on_episode(rec, bundle, _selector=selector, _env=env, _seed=seed):
                if rec["episode"] + 1 in marks:
                    ev = evaluate(_env, bundle.actor, _selector, eval_episodes, seed=20_000 + int(_seed))
                    done_at[rec["episode"] + 1] = ev

            train_policy(env, selector, PolicyConfig(**{**asdict(policy), "seed": int(seed)}), callback=on_episode)
            for ep in marks:
                ev = done_at[ep]
                rows.append((float(lam), int(seed), ep * config.episode_length, ev["ctr_mean"], ev["ctr_std"], active))
            log.info("sweep lambda1=%g seed=%d active_gates=%d", lam, seed, active)
    return rows


def cmd_sweep_lambda(args) -> int:
    config = _load_env_config(args.config)
    grid = _floats(args.grid)
    if not grid or any(g < 0 for g in grid):
        raise UsageError("the lambda1 grid must be a non-empty list of non-negative numbers")
    seeds = _seeds(args.seeds)
    exp = ExperimentConfig(args.config, _learner_config(args), _policy_config(args), "CIDS", seeds, args.out)
    data = read_log(_require(args.log, "collect", "trajectory log"), config)
    rows = run_sweep(config, data, grid, seeds, exp.learner, exp.policy, args.checkpoints, args.eval_episodes)
    out = _out_dir(args)
    (out / "sweep.csv").write_text(_set_csv(rows, SWEEP_COLUMNS), encoding="utf-8")
    manifest = RunManifest("sweep-lambda", {**_vars(args), "experiment": exp.to_dict()}, None, timestamps={"finished": _now()})
    manifest.index(out, ["sweep.csv"])
    manifest.write(out)
    for lam in grid:
        gates = [r[5] for r in rows if r[0] == lam]
        print(f"lambda1={lam:g}: median active a->s gates {float(np.median(gates)):g}")
    return 0


def offline_metrics(config: EnvConfig, actor: DenseNet, selector: StateSelector, episodes=50, seed=0, hit_cosine=0.9):
    """Synthetic precision/recall/accuracy of a policy on a held-out random-action log.

    A logged transition is a positive (a "click") when its reward is > 0. The
    policy "recommends" the logged action when the cosine between its greedy
    action and the logged action is at least ``hit_cosine``. Precision, recall
    and accuracy then follow from the usual confusion counts.
    """
    data = collect(make_env(config), None, episodes=episodes, seed=seed)
    pred = act(actor, select_state(data.states, selector))
    logged = data.actions
    num = np.sum(pred * logged, axis=1)
    den = np.linalg.norm(pred, axis=1) * np.linalg.norm(logged, axis=1)
    cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    hit = cos >= hit_cosine
    pos = data.rewards > 0
    tp = int(np.sum(hit & pos))
    fp = int(np.sum(hit & ~pos))
    fn = int(np.sum(~hit & pos))
    tn = int(np.sum(~hit & ~pos))
    n = len(pos)
    return {
        "n": n,
        "precision": tp / (tp + fp) if tp + fp else 1.0,
        "recall": tp / (tp + fn) if tp + fn else 1.0,
        "accuracy": (tp + tn) / n,
    }


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise StageError(f"run directory {str(run_dir)!r} does not exist")
    manifests = sorted(p for p in run_dir.rglob(MANIFEST))
    loaded = [(p, RunManifest.read(p)) for p in manifests]
    loaded = [(p, m) for p, m in loaded if m.command != "report"]
    if not loaded:
        raise StageError(f"no run manifests under {str(run_dir)!r}; run a pipeline command first")
    config = _load_env_config(args.config) if args.config is not None else None

    lines = [f"run directory: {run_dir}", f"runs: {len(loaded)}", ""]
    offline_rows = []
    decisions: Dict[str, str] = {}
    for path, m in loaded:
        rel = path.parent.relative_to(run_dir)
        lines.append(f"[{rel}] {m.command} seed={m.seed} version={m.software_version} config_hash={m.config_hash[:12]}")
        for name, digest in sorted(m.outputs.items()):
            lines.append(f"    {name}  sha256={digest[:16]}")
        decisions.update(m.decisions)
        if m.command == "train":
            curve_path = path.parent / "curve.csv"
            if curve_path.exists():
                returns = [float(r.split(",")[1]) for r in curve_path.read_text().splitlines()[1:]]
                tail = returns[-10:]
                lines.append(f"    mean return over the last {len(tail)} training episodes: {np.mean(tail):.4f}")
            if config is not None and (path.parent / "policy.ckpt").exists():
                nets = load_policy(path.parent / "policy.ckpt")
                selector = _read_selector(path.parent / "selector.json")
                met = offline_metrics(config, nets["actor"], selector, args.episodes, args.seed, args.hit_cosine)
                offline_rows.append(
                    (str(rel), selector.mode, met["n"], met["precision"], met["recall"], met["accuracy"],
                     args.hit_cosine, 0.0)
                )
                lines.append(
                    f"    offline (synthetic): precision={met['precision']:.4f} recall={met['recall']:.4f} "
                    f"accuracy={met['accuracy']:.4f}"
                )
        if m.command == "ablate" and (path.parent / "ablation_summary.csv").exists():
            lines.append("    " + (path.parent / "ablation_summary.csv").read_text().strip().replace("\n", "\n    "))
        if m.command == "learn-masks" and (path.parent / "masks.json").exists():
            rep = json.loads((path.parent / "masks.json").read_text())
            lines.append(f"    m_a_to_s={rep['binary_masks']['m_a_to_s']}")
            if "metrics" in rep:
                for name, met in sorted(rep["metrics"].items()):
                    lines.append(f"    {name}: precision={met['precision']:.3f} recall={met['recall']:.3f} f1={met['f1']:.3f}")
        if m.command == "sweep-lambda" and (path.parent / "sweep.csv").exists():
            rows = [r.split(",") for r in (path.parent / "sweep.csv").read_text().splitlines()[1:]]
            for lam in sorted({float(r[0]) for r in rows}):
                gates = [int(r[5]) for r in rows if float(r[0]) == lam]
                lines.append(f"    lambda1={lam:g}: median active a->s gates {float(np.median(gates)):g}")
        if m.command == "evaluate" and (path.parent / "eval.json").exists():
            ev = json.loads((path.parent / "eval.json").read_text())
            lines.append(f"    eval: CTR {ev['ctr_mean']:.4f} +- {ev['ctr_std']:.4f}")
    lines.append("")
    lines.append("design decisions in effect:")
    for key, text in sorted(decisions.items()):
        lines.append(f"  - {key}: {text}")
    text = "\n".join(lines) + "\n"

    out = _out_dir(args)
    (out / "report.txt").write_text(text, encoding="utf-8")
    names = ["report.txt"]
    if offline_rows:
        (out / "offline_metrics.csv").write_text(_set_csv(offline_rows, OFFLINE_COLUMNS), encoding="utf-8")
        names.append("offline_metrics.csv")
    manifest = RunManifest("report", _vars(args), args.seed, timestamps={"finished": _now()})
    manifest.index(out, names)
    manifest.write(out)
    print(text, end="")
    return 0


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_learner_flags(p):
    p.add_argument("--lambda1", type=float, default=5e-4, help="sparsity weight on a->s gates (default 5e-4)")
    p.add_argument("--lambda2", type=float, default=1e-4, help="sparsity weight on s->s gates (default 1e-4)")
    p.add_argument("--epochs", type=int, default=6, help="mask-learning epochs (default 6)")
    p.add_argument("--batch-size", type=int, default=256, help="mask-learning minibatch size (default 256)")


def _add_policy_flags(p):
    p.add_argument("--episodes", type=int, default=500, help="policy training episodes (default 500)")
    p.add_argument("--warmup-steps", type=int, default=1000, help="random-action steps before updates (default 1000)")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian exploration noise sigma (default 0.1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cids", description="Causal state-representation learning for RL recommenders.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-env", help="generate a synthetic environment config with known structure")
    p.add_argument("--d", type=int, default=8, help="state dimensionality (default 8)")
    p.add_argument("--dais", type=int, default=3, help="number of action-influenced dims (default 3)")
    p.add_argument("--aia-edges", type=int, default=2, help="number of cross edges into them (default 2)")
    p.add_argument("--action-dim", type=int, default=2, help="action dimensionality (default 2)")
    p.add_argument("--noise", type=float, default=0.1, help="transition noise sigma (default 0.1)")
    p.add_argument("--episode-length", type=int, default=20, help="steps per episode (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_gen_env)

    p = sub.add_parser("collect", help="log transitions from a behavior policy")
    p.add_argument("--config", help="env config (from gen-env)")
    p.add_argument("--episodes", type=int, default=2500, help="episodes to log (default 2500 = 50k transitions)")
    p.add_argument("--epsilon", type=float, default=0.3, help="uniform-action probability when --actor is given")
    p.add_argument("--actor", help="optional policy checkpoint used as the behavior policy")
    p.add_argument("--selector", help="selector file for --actor (default: next to the checkpoint)")
    p.add_argument("--seed", type=int, default=None, help="collection seed (default: derived from the env seed)")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("learn-masks", help="learn structure masks from a trajectory log")
    p.add_argument("--log", help="trajectory log (from collect)")
    p.add_argument("--config", help="env config; enables ground-truth precision/recall/F1")
    _add_learner_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_learn_masks)

    p = sub.add_parser("train", help="train a DDPG policy on selected state dims")
    p.add_argument("--config", help="env config (from gen-env)")
    p.add_argument("--masks", help="mask report (from learn-masks); not needed for --mode FULL")
    p.add_argument("--mode", choices=MODES, default="CIDS", help="state selector (default CIDS)")
    _add_policy_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy evaluation of a trained policy")
    p.add_argument("--config", help="env config (from gen-env)")
    p.add_argument("--policy", help="policy checkpoint (from train)")
    p.add_argument("--selector", help="selector file (default: next to the checkpoint)")
    p.add_argument("--episodes", type=int, default=20, help="evaluation episodes (default 20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="compare FULL / DAIS / AIA / CIDS selectors over seeds")
    p.add_argument("--config", help="env config (from gen-env)")
    p.add_argument("--masks", help="mask report (from learn-masks)")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--eval-episodes", type=int, default=20)
    _add_learner_flags(p)
    _add_policy_flags(p)
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-lambda", help="sweep the a->s sparsity weight")
    p.add_argument("--config", help="env config (from gen-env)")
    p.add_argument("--log", help="trajectory log (from collect)")
    p.add_argument("--grid", default="0,1e-4,5e-4,9e-4", help="comma-separated lambda1 values")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--checkpoints", type=int, default=5, help="evaluation checkpoints per run (default 5)")
    p.add_argument("--eval-episodes", type=int, default=10)
    _add_learner_flags(p)
    _add_policy_flags(p)
    p.add_argument("--seed", type=int, default=0, help=argparse.SUPPRESS)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run-dir", required=True, help="directory containing run outputs")
    p.add_argument("--config", help="env config; enables the synthetic offline metrics")
    p.add_argument("--episodes", type=int, default=50, help="held-out log episodes for offline metrics")
    p.add_argument("--hit-cosine", type=float, default=0.9, help="cosine threshold for a recommendation hit")
    p.add_argument("--seed", type=int, default=123, help="seed of the held-out log")
    p.add_argument("--out", default=None, help="output directory (default: <run-dir>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out", None) is None:
        args.out = str(Path(args.run_dir) / "report")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cids {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (CIDSError, ValueError, OSError) as exc:
        print(f"cids {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
