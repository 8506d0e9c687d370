"""Command-line entry point.

Subcommands: generate (synthetic datasets), train (fit a model under a
chosen loss), eval (decision-quality report on the test split), bench
(epoch and layer timings), verify (counterexample and property checks),
export (plot-ready CSV files). Every command is deterministic given its
flags and seed; result files carry the dataset manifest hash, seed, and
toolkit version, and are written atomically (temp + rename).

Exit codes: 0 success, 2 input error, 3 numeric error, 4 failed
verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import itertools
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from . import __version__
from .mdp import (
    ENGAGEMENT,
    DiscountedSetup,
    NumericError,
    RewardSpec,
    TransitionTensor,
    whittle_index,
)
from .dec_layer import (
    RegularizerConfig,
    SolverConfig,
    ReturnsTable,
    backward_pass,
    build_returns_table,
    eval_lambda,
    forward_pass,
    solve_reference,
)
from .planning import Cohort, budget_audit, uncorrected_policy
from .datasets import (
    DatasetManifest,
    generate_synthetic,
    load_dataset,
    save_dataset,
    trajectory_data,
)
from .learning import (
    Adam,
    DatasetSplits,
    LossSpec,
    ModelSpec,
    PredictiveModel,
    TrainingConfig,
    evaluate_dq,
    run_epoch,
    train as train_model,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4

OUTPUT_ROOT_ENV = "RMAB_DFL_OUT"


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Output plumbing


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_overwrite(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise InputError(f"{path} exists; pass --overwrite to replace it")


def _manifest_hash(manifest: DatasetManifest) -> str:
    blob = json.dumps(dataclasses.asdict(manifest), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _provenance_line(manifest_hash: str, seed: int) -> str:
    return f"# manifest_hash={manifest_hash} seed={seed} version={__version__}\n"


def _write_csv(path: Path, header: list[str], rows: list[list], provenance: str) -> None:
    lines = [provenance, ",".join(header) + "\n"]
    for row in rows:
        lines.append(",".join(str(x) for x in row) + "\n")
    _atomic_write(path, "".join(lines))


def _out_dir(arg: str | None) -> Path:
    if arg is not None:
        return Path(arg)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else Path("results")


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    # keep the default 20/20/60 proportions for any cohort count
    train = max(args.cohorts // 5, 1)
    val = max(args.cohorts // 5, 1)
    if train + val >= args.cohorts:
        raise InputError(f"need at least 3 cohorts for a train/val/test split, got {args.cohorts}")
    manifest = DatasetManifest(
        cohorts=args.cohorts,
        arms_per_cohort=args.arms,
        budget=args.budget,
        states=args.states,
        gamma=args.gamma,
        feature_dim=args.feature_dim,
        seed=args.seed,
        split_sizes=(train, val, args.cohorts - train - val),
    )
    out = _out_dir(args.out) / "dataset.json"
    _check_overwrite(out, args.overwrite)
    dataset = generate_synthetic(manifest)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    print(f"wrote {out} ({manifest.cohorts} cohorts, hash {_manifest_hash(manifest)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _build_splits(dataset, loss_name: str) -> DatasetSplits:
    splits = DatasetSplits(
        train=dataset.cohort_objects("train"),
        val=dataset.cohort_objects("val"),
        test=dataset.cohort_objects("test"),
    )
    if loss_name == "nll":
        s = dataset.manifest.states
        splits.train_trajectories = [
            trajectory_data(seqs, s) for seqs in dataset.trajectories_for("train")
        ]
        splits.val_trajectories = [
            trajectory_data(seqs, s) for seqs in dataset.trajectories_for("val")
        ]
    return splits


def _loss_spec(args) -> LossSpec:
    return LossSpec(
        name=args.loss,
        trajectories=args.trajectories,
        alpha=args.alpha,
        regularizer=args.regularizer,
        epsilon=args.epsilon,
    )


def _train_one(payload):
    dataset_path, loss_spec, model_spec, lr, seed, epochs = payload
    dataset = load_dataset(dataset_path)
    data = _build_splits(dataset, loss_spec.name)
    config = TrainingConfig(
        loss=loss_spec, learning_rate=lr, epochs=epochs, seed=seed, model=model_spec
    )
    model, log = train_model(config, data)
    val_value = run_epoch(model, None, data.val, data.val_trajectories, loss_spec, seed)
    for rec in log:
        rec.update({"lr": lr, "seed": seed})
    return lr, seed, val_value, model.get_theta(), log


def cmd_train(args) -> int:
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise InputError(f"dataset not found: {dataset_path}")
    out = _out_dir(args.out)
    model_path = out / "model.npz"
    _check_overwrite(model_path, args.overwrite)
    dataset = load_dataset(dataset_path)
    spec = _loss_spec(args)
    model_spec = MODEL_FLAGS[args.model]
    jobs = [
        (str(dataset_path), spec, model_spec, lr, seed, args.epochs)
        for lr in args.lr
        for seed in args.seed
    ]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]

    maximize = spec.maximize
    best = min(results, key=lambda r: -r[2] if maximize else r[2])
    lr, seed, val_value, theta, _ = best
    log_lines = [
        json.dumps(rec) for _, _, _, _, log in results for rec in log
    ]
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "log.jsonl", "".join(line + "\n" for line in log_lines))
    mhash = _manifest_hash(dataset.manifest)
    meta = {
        "loss": spec.name,
        "lr": lr,
        "seed": seed,
        "val_value": val_value,
        "alpha": spec.alpha,
        "model": args.model,
        "manifest_hash": mhash,
        "version": __version__,
        "feature_dim": dataset.manifest.feature_dim,
        "states": dataset.manifest.states,
    }
    np.savez(model_path, theta=theta, meta=json.dumps(meta))
    _atomic_write(out / "result.json", json.dumps(meta, indent=2) + "\n")
    print(f"best lr={lr} seed={seed} val={val_value:.6f}; wrote {model_path}")
    return EXIT_OK


def _load_model(path: Path) -> tuple[PredictiveModel, dict]:
    if not path.exists():
        raise InputError(f"model not found: {path}")
    blob = np.load(path, allow_pickle=False)
    meta = json.loads(str(blob["meta"]))
    model = PredictiveModel(
        MODEL_FLAGS[meta["model"]], meta["feature_dim"], meta["states"], seed=meta["seed"]
    )
    model.set_theta(blob["theta"])
    return model, meta


MODEL_FLAGS = {
    "linear": ModelSpec(kind="linear"),
    "mlp-small": ModelSpec(kind="mlp", layers=2, hidden_dim=64),
    "mlp-large": ModelSpec(kind="mlp", layers=4, hidden_dim=500),
}


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise InputError(f"dataset not found: {dataset_path}")
    dataset = load_dataset(dataset_path)
    model, meta = _load_model(Path(args.model))
    cohorts = dataset.cohort_objects(args.split)
    report = evaluate_dq(model, cohorts, trajectories=args.trajectories, seed=args.seed)
    out = _out_dir(args.out)
    payload = {
        "loss": meta["loss"],
        "dataset": str(dataset_path),
        "seed": meta["seed"],
        "split": args.split,
        "manifest_hash": _manifest_hash(dataset.manifest),
        "version": __version__,
        **dataclasses.asdict(report),
    }
    out.mkdir(parents=True, exist_ok=True)
    target = out / "dq.json"
    _check_overwrite(target, args.overwrite)
    _atomic_write(target, json.dumps(payload, indent=2) + "\n")
    njd = report.normalized_joint_dq
    ndd = report.normalized_decomposed_dq
    print(
        "normalized joint DQ = "
        + ("undefined" if njd is None else f"{njd:.4f}")
        + ", normalized decomposed DQ = "
        + ("undefined" if ndd is None else f"{ndd:.4f}")
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def bench_epoch_times(
    dataset, losses: list[str], repeats: int, seed: int, trajectories: int = 1000
) -> dict[str, tuple[float, float]]:
    """Wall time of one full training epoch per loss (mean, sem over repeats)."""
    out = {}
    for loss_name in losses:
        spec = LossSpec(name=loss_name, trajectories=trajectories)
        data = _build_splits(dataset, loss_name)
        feature_dim = data.train[0].features.shape[1]
        states = data.train[0].num_states
        times = []
        for rep in range(repeats):
            model = PredictiveModel(MODEL_FLAGS["linear"], feature_dim, states, seed=seed)
            optimizer = Adam(1e-3)
            start = time.perf_counter()
            run_epoch(model, optimizer, data.train, data.train_trajectories, spec, seed + rep)
            times.append(time.perf_counter() - start)
        times = np.array(times)
        sem = float(times.std(ddof=1) / np.sqrt(repeats)) if repeats > 1 else 0.0
        out[loss_name] = (float(times.mean()), sem)
    return out


def bench_layer_scaling(
    sizes=(100, 500, 2000), seed: int = 0, gamma: float = 0.9
) -> dict[int, tuple[float, float]]:
    """Forward and closed-form backward wall time of the dual layer vs N."""
    rng = np.random.default_rng(seed)
    out = {}
    for n in sizes:
        tensors = rng.dirichlet(np.ones(2), size=(n, 2, 2))
        setup = DiscountedSetup(gamma, np.array([0.5, 0.5]))
        tables = build_returns_table(tensors, tensors, setup)
        cfg = SolverConfig(budget=0.1 * n, gamma=gamma)
        reg = RegularizerConfig(kind="entropy", alpha=0.1)
        start = time.perf_counter()
        sol = forward_pass(tables, reg, cfg)
        fwd = time.perf_counter() - start
        start = time.perf_counter()
        backward_pass(sol, tables, reg, cfg, upstream=tables.j_true)
        bwd = time.perf_counter() - start
        out[n] = (fwd, bwd)
    return out


def cmd_bench(args) -> int:
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise InputError(f"dataset not found: {dataset_path}")
    dataset = load_dataset(dataset_path)
    repeats = max(args.repeats, 5)
    epoch_times = bench_epoch_times(
        dataset, args.losses, repeats, args.seed, args.trajectories
    )
    scaling = bench_layer_scaling(seed=args.seed, gamma=dataset.manifest.gamma)
    out = _out_dir(args.out)
    prov = _provenance_line(_manifest_hash(dataset.manifest), args.seed)
    _write_csv(
        out / "time_table.csv",
        ["loss", "seconds_per_epoch_mean", "seconds_per_epoch_sem"],
        [[k, f"{v[0]:.6f}", f"{v[1]:.6f}"] for k, v in epoch_times.items()],
        prov,
    )
    _write_csv(
        out / "layer_scaling.csv",
        ["num_arms", "forward_seconds", "backward_seconds"],
        [[n, f"{v[0]:.6f}", f"{v[1]:.6f}"] for n, v in scaling.items()],
        prov,
    )
    for k, (mean, sem) in epoch_times.items():
        print(f"{k}: {mean:.4f} ± {sem:.4f} s/epoch")
    print(f"wrote {out / 'time_table.csv'} and {out / 'layer_scaling.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify: fixed counterexamples and randomized property suites


def _example_instances():
    """The fixed 2-state arms used by the counterexample claims.

    t_opt: acting in state 0 moves you permanently to state 1 (highest
    possible action effect). t_absorbing: nothing you do matters; you end
    in state 0. t_good / t_bad: acting in state 0 helps, more reliably for
    the good arm; acting in state 1 never does anything.
    """
    t_opt = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]]])
    t_absorbing = np.array([[[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]]])
    t_good = np.array([[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]])
    t_bad = np.array([[[1.0, 0.0], [0.5, 0.5]], [[1.0, 0.0], [1.0, 0.0]]])
    return t_opt, t_absorbing, t_good, t_bad


def check_budget_overshoot() -> dict:
    """Uncorrected layer on the best-case prediction vs an inert true arm:
    the audited per-step budget usage overshoots by 1/(1-gamma)^2 = 100.
    """
    gamma = 0.9
    t_opt, t_absorbing, _, _ = _example_instances()
    setup = DiscountedSetup(gamma, np.array([1.0, 0.0]))
    cfg = SolverConfig(budget=1.0 - gamma, gamma=gamma)
    sol = uncorrected_policy(t_opt[None], cfg, setup)
    cohort = Cohort(
        features=np.zeros((1, 1)), tensors=t_absorbing[None], budget=1.0 - gamma, setup=setup
    )
    ratio = budget_audit(cohort, sol, per_step=True)
    return {
        "claim": "budget-overshoot",
        "passed": bool(abs(ratio - 100.0) <= 1.0),
        "overshoot_ratio": ratio,
    }


def _uncorrected_loss(pred: np.ndarray, truth: np.ndarray, cfg: SolverConfig, setup) -> float:
    tables = build_returns_table(pred, truth, setup, budget_on="pred")
    reg = RegularizerConfig(kind="entropy", alpha=1e-3)
    sol = forward_pass(tables, reg, cfg)
    return float(np.sum(sol.z_star * tables.j_true))


def check_spurious_minimum() -> dict:
    """On the two-arm counterexample cohort, the uncorrected objective
    strictly prefers a wrong prediction over the truthful one.
    """
    gamma = 0.9
    t_opt, _, t_good, t_bad = _example_instances()
    setup = DiscountedSetup(gamma, np.array([1.0, 0.0]))
    cfg = SolverConfig(budget=1.0 / (1.0 + gamma), gamma=gamma)
    truth = np.stack([t_good, t_bad])
    loss_truthful = _uncorrected_loss(truth, truth, cfg, setup)
    loss_opt = _uncorrected_loss(np.stack([t_opt, t_opt]), truth, cfg, setup)
    gap = loss_opt - loss_truthful
    return {"claim": "spurious-minimum", "passed": bool(gap > 0), "loss_gap": gap}


def _random_cohort(rng, n: int, states: int = 2, gamma: float = 0.9):
    tensors = rng.dirichlet(np.ones(states), size=(n, states, 2))
    budget = float(rng.uniform(0.2, 0.8)) * n * (1 - gamma)
    setup = DiscountedSetup(gamma, np.full(states, 1.0 / states))
    return tensors, SolverConfig(budget=budget, gamma=gamma), setup


def check_truthful_optimality(seed: int, cohorts: int = 20, alternatives: int = 5) -> dict:
    """Corrected-layer objective: truthful prediction is never beaten by a
    random alternative prediction (up to solver tolerance).
    """
    rng = np.random.default_rng(seed)
    reg = RegularizerConfig(kind="entropy", alpha=1e-3)
    worst = np.inf
    for _ in range(cohorts):
        truth, cfg, setup = _random_cohort(rng, n=int(rng.integers(2, 6)))
        tables = build_returns_table(truth, truth, setup)
        sol = solve_reference(tables, reg, cfg, dual_tol=1e-8)
        truthful = float(np.sum(sol.z_star * tables.j_true))
        for _ in range(alternatives):
            other = rng.dirichlet(np.ones(truth.shape[1]), size=truth.shape[:-1])
            t2 = build_returns_table(other, truth, setup)
            s2 = solve_reference(t2, reg, cfg, dual_tol=1e-8)
            worst = min(worst, truthful - float(np.sum(s2.z_star * t2.j_true)))
    return {
        "claim": "truthful-optimality",
        "passed": bool(worst >= -1e-3),
        "worst_margin": worst,
    }


def decomposed_lp_value(tables: ReturnsTable, cfg: SolverConfig) -> float:
    """Unregularized decomposed optimum by linear programming."""
    n, p = tables.j_pred.shape
    c = -tables.j_pred.reshape(-1)
    a_eq = np.zeros((n, n * p))
    for i in range(n):
        a_eq[i, i * p : (i + 1) * p] = 1.0
    res = linprog(
        c,
        A_ub=tables.j_budget.reshape(1, -1),
        b_ub=[cfg.budget_cap],
        A_eq=a_eq,
        b_eq=np.ones(n),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise NumericError(f"decomposed LP failed: {res.message}")
    return -res.fun


def joint_mixture_lp_value(tables: ReturnsTable, cfg: SolverConfig) -> float:
    """Unregularized optimum over mixtures of joint (product) policies."""
    n, p = tables.j_pred.shape
    combos = list(itertools.product(range(p), repeat=n))
    j = np.array([sum(tables.j_pred[i, k[i]] for i in range(n)) for k in combos])
    g = np.array([sum(tables.j_budget[i, k[i]] for i in range(n)) for k in combos])
    res = linprog(
        -j,
        A_ub=g.reshape(1, -1),
        b_ub=[cfg.budget_cap],
        A_eq=np.ones((1, len(combos))),
        b_eq=[1.0],
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise NumericError(f"joint mixture LP failed: {res.message}")
    return -res.fun


def check_mixture_equivalence(seed: int, instances: int = 25) -> dict:
    """Optimizing per-arm mixtures is as good as optimizing one mixture
    over joint product policies.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        truth, cfg, setup = _random_cohort(rng, n=2)
        tables = build_returns_table(truth, truth, setup)
        gap = abs(decomposed_lp_value(tables, cfg) - joint_mixture_lp_value(tables, cfg))
        worst = max(worst, gap)
    return {
        "claim": "mixture-equivalence",
        "passed": bool(worst <= 1e-6),
        "max_gap": worst,
    }


def check_dual_solver(seed: int, instances: int = 100) -> dict:
    """Fast bisection forward pass agrees with the slow projected-gradient
    reference solve, and satisfies complementary slackness.
    """
    rng = np.random.default_rng(seed)
    reg = RegularizerConfig(kind="entropy", alpha=0.1)
    max_lam_err = max_z_err = max_slack = 0.0
    for _ in range(instances):
        truth, cfg, setup = _random_cohort(rng, n=int(rng.integers(2, 5)))
        cfg = SolverConfig(budget=cfg.budget, gamma=cfg.gamma, epsilon=1e-9)
        tables = build_returns_table(truth, truth, setup)
        fast = forward_pass(tables, reg, cfg)
        ref = solve_reference(tables, reg, cfg)
        max_lam_err = max(max_lam_err, abs(fast.lambda_star - ref.lambda_star))
        max_z_err = max(max_z_err, float(np.max(np.abs(fast.z_star - ref.z_star))))
        max_slack = max(max_slack, abs(fast.lambda_star * fast.slack_xi) / cfg.budget_cap)
    return {
        "claim": "dual-solver",
        "passed": bool(max_lam_err <= 2e-5 and max_z_err <= 1e-4 and max_slack <= 1e-6),
        "max_lambda_err": max_lam_err,
        "max_z_err": max_z_err,
        "max_rel_slack": max_slack,
    }


def check_residual_monotonicity(seed: int, draws: int = 10_000) -> dict:
    """Budget residual of the inner softmax solution never increases in
    the multiplier.
    """
    rng = np.random.default_rng(seed)
    violations = 0
    for _ in range(draws):
        n, p = int(rng.integers(1, 6)), int(2 ** rng.integers(1, 4))
        j_pred = rng.normal(scale=5.0, size=(n, p))
        j_budget = rng.uniform(0.0, 10.0, size=(n, p))
        tables = ReturnsTable(j_pred=j_pred, j_true=j_pred, j_budget=j_budget)
        reg = RegularizerConfig(kind="entropy", alpha=float(rng.uniform(0.01, 2.0)))
        cfg = SolverConfig(budget=1.0, gamma=0.9)
        lam_pair = np.sort(rng.uniform(-10.0, 10.0, size=2))
        r_lo, _ = eval_lambda(tables, lam_pair[0], reg, cfg)
        r_hi, _ = eval_lambda(tables, lam_pair[1], reg, cfg)
        if r_hi > r_lo + 1e-12:
            violations += 1
    return {
        "claim": "residual-monotonicity",
        "passed": violations == 0,
        "violations": violations,
        "draws": draws,
    }


def run_verification(seed: int) -> list[dict]:
    return [
        check_budget_overshoot(),
        check_spurious_minimum(),
        check_truthful_optimality(seed),
        check_mixture_equivalence(seed + 1),
        check_dual_solver(seed + 2),
        check_residual_monotonicity(seed + 3),
    ]


def cmd_verify(args) -> int:
    reports = run_verification(args.seed)
    all_passed = True
    for rep in reports:
        status = "PASS" if rep["passed"] else "FAIL"
        detail = ", ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
            for k, v in rep.items()
            if k not in ("claim", "passed")
        )
        print(f"[{status}] {rep['claim']}: {detail}")
        all_passed &= rep["passed"]
    if args.out is not None:
        out = _out_dir(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _atomic_write(
            out / "verify.json",
            json.dumps({"seed": args.seed, "version": __version__, "claims": reports}, indent=2)
            + "\n",
        )
    return EXIT_OK if all_passed else EXIT_VERIFY


# ---------------------------------------------------------------------------
# export


def _read_json(path: Path):
    if not path.exists():
        raise InputError(f"results file not found: {path}")
    return json.loads(path.read_text())


def _export_dq_table(results: Path, out: Path) -> None:
    files = sorted(results.glob("**/dq.json")) if results.is_dir() else [results]
    groups: dict[tuple, list] = {}
    prov = f"# version={__version__}\n"
    for f in files:
        rec = _read_json(f)
        key = (rec["loss"], rec["dataset"], rec["split"])
        groups.setdefault(key, []).append(rec)
    rows = []
    for (loss, dataset, split), recs in sorted(groups.items()):
        for metric in ("normalized_joint_dq", "normalized_decomposed_dq"):
            vals = np.array([r[metric] for r in recs if r[metric] is not None])
            if vals.size == 0:
                mean, sem = "undefined", "undefined"
            else:
                mean = f"{vals.mean():.6f}"
                sem = f"{vals.std(ddof=1) / np.sqrt(vals.size):.6f}" if vals.size > 1 else "0.0"
            rows.append([loss, dataset, split, metric, mean, sem])
    _write_csv(
        out / "dq_table.csv",
        ["loss", "dataset", "split", "metric", "mean", "sem"],
        rows,
        prov,
    )


def _export_dq_vs_epoch(results: Path, out: Path) -> None:
    log = results / "log.jsonl" if results.is_dir() else results
    if not log.exists():
        raise InputError(f"training log not found: {log}")
    rows = []
    for line in log.read_text().splitlines():
        rec = json.loads(line)
        if rec.get("split") == "val":
            rows.append(
                [rec.get("lr", ""), rec.get("seed", ""), rec["epoch"], rec["loss"], rec["value"]]
            )
    _write_csv(
        out / "dq_vs_epoch.csv",
        ["lr", "seed", "epoch", "loss", "value"],
        rows,
        f"# version={__version__}\n",
    )


def _export_wi_scatter(args, out: Path) -> None:
    if args.dataset is None or args.model is None:
        raise InputError("wi_scatter export needs --dataset and --model")
    dataset = load_dataset(args.dataset)
    model, meta = _load_model(Path(args.model))
    cohorts = dataset.cohort_objects(args.split)
    reward = RewardSpec(ENGAGEMENT)
    rows = []
    arm_id = 0
    for cohort in cohorts:
        pred, _ = model.forward(cohort.features)
        true_wi = np.array(
            [whittle_index(TransitionTensor(t), reward, cohort.setup).wi[0] for t in cohort.tensors]
        )
        pred_wi = np.array(
            [whittle_index(TransitionTensor(t), reward, cohort.setup).wi[0] for t in pred]
        )
        b = int(round(cohort.budget))
        chosen = np.argsort(-pred_wi, kind="stable")[:b]
        selected = np.zeros(cohort.num_arms, dtype=int)
        selected[chosen] = 1
        for i in range(cohort.num_arms):
            rows.append([arm_id, f"{true_wi[i]:.8f}", f"{pred_wi[i]:.8f}", selected[i]])
            arm_id += 1
    prov = _provenance_line(_manifest_hash(dataset.manifest), meta["seed"])
    _write_csv(out / "wi_scatter.csv", ["arm", "true_wi", "predicted_wi", "selected"], rows, prov)


def cmd_export(args) -> int:
    out = _out_dir(args.out)
    results = Path(args.results) if args.results else out
    if args.kind == "dq_table":
        _export_dq_table(results, out)
    elif args.kind == "dq_vs_epoch":
        _export_dq_vs_epoch(results, out)
    elif args.kind == "time_table":
        src = results / "time_table.csv" if results.is_dir() else results
        if not src.exists():
            raise InputError(f"timing results not found: {src}")
        _atomic_write(out / "time_table.csv", src.read_text())
    elif args.kind == "wi_scatter":
        _export_wi_scatter(args, out)
    else:  # argparse choices make this unreachable
        raise InputError(f"unknown export kind {args.kind!r}")
    print(f"wrote {out / (args.kind + '.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmab-dfl",
        description="Decision-focused learning toolkit for restless bandit interventions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("--out", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cohorts", type=int, default=100)
    g.add_argument("--arms", type=int, default=100)
    g.add_argument("--states", type=int, default=2)
    g.add_argument("--budget", type=float, default=10.0)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a predictive model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", default=None)
    t.add_argument(
        "--loss",
        default="fast-dec-dfl",
        choices=["mse", "nll", "sim-dfl", "dec-dfl", "fast-dec-dfl"],
    )
    t.add_argument("--trajectories", type=int, default=100)
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--epsilon", type=float, default=1e-6)
    t.add_argument("--regularizer", default="entropy", choices=["entropy", "l2"])
    t.add_argument("--lr", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4, 1e-5])
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--seed", type=int, nargs="+", default=[0])
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--model", default="linear", choices=sorted(MODEL_FLAGS))
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decision-quality report for a trained model")
    e.add_argument("--dataset", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", default=None)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--trajectories", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="epoch and layer timing tables")
    b.add_argument("--dataset", required=True)
    b.add_argument("--out", default=None)
    b.add_argument(
        "--losses",
        nargs="+",
        default=["mse", "nll", "sim-dfl", "fast-dec-dfl"],
        choices=["mse", "nll", "sim-dfl", "dec-dfl", "fast-dec-dfl"],
    )
    b.add_argument("--trajectories", type=int, default=1000)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("verify", help="counterexample and property checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", default=None)
    v.set_defaults(func=cmd_verify)

    x = sub.add_parser("export", help="plot-ready CSV files from results")
    x.add_argument(
        "--kind", required=True, choices=["dq_table", "time_table", "dq_vs_epoch", "wi_scatter"]
    )
    x.add_argument("--results", default=None)
    x.add_argument("--out", default=None)
    x.add_argument("--dataset", default=None)
    x.add_argument("--model", default=None)
    x.add_argument("--split", default="test", choices=["train", "val", "test"])
    x.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, FileNotFoundError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
