"""Command-line surface: training, evaluation, analysis, and self-checks.

Every command takes ``--config`` (JSON, documented in the README), an
optional ``--seed`` override, and ``--out`` for the run directory. Settings
resolve as flag > config file > default. Outputs are machine-readable
(metrics CSV, JSON summary, JSON checkpoint) and byte-reproducible for a
fixed config and seed, except for wall-time fields in the summary.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .analysis import (
    gen_gap,
    ib_decomposition_check,
    kl_to_true_posterior,
    random_instance,
    spearman_rank_correlation,
    toy_task_sampler,
    fewshot_task_sampler,
    vary_n_sweep,
    write_report_csv,
    write_report_json,
)
from .models import apply_features, build_fewshot_model, build_toy_model, config_hash
from .sibcore import InnerLoopConfig, sib_unroll, task_objective
from .tasks import derive_task_seed, gen_fewshot_episode, gen_spinning_lines
from .trainer import (
    RunConfig,
    config_from_dict,
    config_to_dict,
    default_config,
    episode_for,
    evaluate,
    load_checkpoint,
    make_theta0,
    metric_records,
    save_checkpoint,
    train,
    write_metrics_csv,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgmeta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_out=True):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override run_seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted keys, JSON values)")
        if needs_out:
            p.add_argument("--out", type=Path, required=True, help="run directory")
            p.add_argument("--force", action="store_true",
                           help="allow writing into an existing run directory")

    p = sub.add_parser("train-toy", help="train the zero-shot regression model")
    add_common(p)
    p.set_defaults(handler=cmd_train, mode="toy")

    p = sub.add_parser("train-fewshot", help="train the episodic classification model")
    add_common(p)
    p.set_defaults(handler=cmd_train, mode="fewshot")

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh episodes")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--inner-steps", type=int, default=None,
                   help="override the number of adaptation steps at evaluation")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", help="information-theoretic diagnostics of a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--mc-seeds", type=int, default=1, help="independent estimator seeds")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("sweep-n", help="generalization gap versus query-set size")
    add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--n-values", default="4,8,16,32")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--mc-seeds", type=int, default=1)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every op and the unrolled graph")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("selftest", help="fast internal consistency checks")
    p.set_defaults(handler=cmd_selftest)

    return parser


# -- shared plumbing -----------------------------------------------------------


def resolve_config(args, mode=None) -> RunConfig:
    if args.config is not None:
        with open(args.config) as fh:
            data = json.load(fh)
        if mode is not None:
            data.setdefault("mode", mode)
            if data["mode"] != mode and not (mode == "fewshot" and data["mode"] == "fewshot-zeroshot"):
                raise ValueError(f"config mode {data['mode']!r} does not match the command")
        cfg = config_from_dict(data)
    else:
        cfg = default_config(mode or "toy")
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        data = config_to_dict(cfg)
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ValueError(f"unknown config key {key!r}")
            node = node[part]
        node[parts[-1]] = value
        cfg = config_from_dict(data)
    if args.seed is not None:
        cfg.run_seed = args.seed
    return cfg


def prepare_out(args) -> Path:
    out: Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValueError(f"run directory {out} exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: RunConfig, out: Path) -> None:
    with open(out / "effective_config.json", "w") as fh:
        json.dump(config_to_dict(cfg), fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- commands ---------------------------------------------------------------------


def cmd_train(args) -> int:
    from .trainer import TrainingDiverged

    cfg = resolve_config(args, mode=args.mode)
    out = prepare_out(args)
    echo_config(cfg, out)
    t0 = time.time()
    try:
        result = train(cfg)
    except TrainingDiverged as exc:
        # retain the last finite state and whatever was logged
        if exc.model is not None:
            save_checkpoint(exc.model, out / "checkpoint.json", cfg, step=exc.step)
        write_metrics_csv(out / "metrics.csv", exc.records)
        write_report_json(out / "summary.json", {
            "command": f"train-{cfg.mode}", "error": str(exc), "step": exc.step,
        })
        print(f"error: {exc}", file=sys.stderr)
        return 1
    wall_ms = 1000.0 * (time.time() - t0)
    write_metrics_csv(out / "metrics.csv", result.records)
    save_checkpoint(result.model, out / "checkpoint.json", cfg, step=result.steps_run)
    if result.best_snapshot is not None:
        best = result.model
        current = best.clone_data()
        best.load_data(result.best_snapshot)
        save_checkpoint(best, out / "checkpoint_best.json", cfg, step=result.steps_run)
        best.load_data(current)
    row = result.final_eval.row
    summary = {
        "command": f"train-{cfg.mode}",
        "config_hash": config_hash(config_to_dict(cfg)),
        "steps": result.steps_run,
        "final": {k: v for k, v in dataclasses.asdict(row).items()
                  if v is not None and k != "wall_time_ms"},
        "final_ci95": result.final_eval.ci95,
        "best_metric": result.best_metric,
        "wall_time_ms": wall_ms,
    }
    write_report_json(out / "summary.json", summary)
    name, value, ci = result.final_eval.primary_metric()
    print(f"{name} {value:.6f} ± {ci:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(args)
    echo_config(cfg, out)
    model = load_checkpoint(args.checkpoint, cfg)
    inner = cfg.inner
    if args.inner_steps is not None:
        inner = dataclasses.replace(cfg.inner, steps=args.inner_steps)
    n_eps = args.episodes or cfg.eval_episodes
    episodes = [episode_for(cfg, args.split, i) for i in range(n_eps)]
    t0 = time.time()
    report = evaluate(model, cfg, args.split, episodes, inner=inner)
    wall_ms = 1000.0 * (time.time() - t0)
    write_metrics_csv(out / "metrics.csv", metric_records(report.row, report.ci95))
    name, value, ci = report.primary_metric()
    summary = {
        "command": "eval",
        "split": args.split,
        "episodes": report.n_episodes,
        "metric": name,
        "value": value,
        "ci95": ci,
        "degenerate": report.degenerate,
        "inner_steps": inner.steps,
        "wall_time_ms": wall_ms,
    }
    write_report_json(out / "summary.json", summary)
    print(f"{name} {value:.6f} ± {ci:.6f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    out = prepare_out(args)
    echo_config(cfg, out)
    model = load_checkpoint(args.checkpoint, cfg)
    quantities = []
    payload = {"command": "analyze", "trials": args.trials, "mc_seeds": args.mc_seeds}
    t0 = time.time()
    if cfg.mode == "toy":
        eval_pool = [
            gen_spinning_lines(cfg.toy, derive_task_seed(cfg.run_seed, "test", i))
            for i in range(cfg.toy.n_test_tasks)
        ]
        kl_post = kl_to_true_posterior(model, eval_pool, cfg.toy, cfg.inner)
        quantities.append(("kl_to_true_posterior", kl_post, 0.0))
        report = evaluate(model, cfg, "test", eval_pool)
        quantities.append(("query_mse", report.row.query_mse, report.ci95["query_mse"]))
        quantities.append(("prior_kl_to_true", report.row.prior_kl_to_true, 0.0))
        quantities.append(("mi_estimate", report.row.mi_estimate, 0.0))
        gaps = []
        for s in range(args.mc_seeds):
            sampler = toy_task_sampler(cfg.toy, seed=cfg.run_seed + 1000 * s)
            est = gen_gap(model, sampler, cfg.inner, trials=args.trials, seed=cfg.run_seed + s)
            gaps.append(est)
            quantities.append((f"gen_gap_seed{s}", est.gap, est.stderr))
            quantities.append((f"gen_bound_seed{s}", est.bound, 0.0))
            quantities.append((f"sigma_seed{s}", est.sigma, 0.0))
        payload["bound_holds_all_seeds"] = all(
            abs(e.gap) <= e.bound + 3 * e.stderr for e in gaps
        )
        payload["gaps"] = [dataclasses.asdict(e) for e in gaps]
    else:
        theta0_fn = lambda ep: make_theta0(model, ep, cfg)  # noqa: E731
        pool = [episode_for(cfg, "test", i) for i in range(min(cfg.eval_episodes, 500))]
        report = evaluate(model, cfg, "test", pool)
        quantities.append(("query_accuracy", report.row.query_accuracy,
                           report.ci95["query_accuracy"]))
        quantities.append(("mi_estimate", report.row.mi_estimate, 0.0))
        sampler = fewshot_task_sampler(cfg.fewshot, seed=cfg.run_seed)
        est = gen_gap(model, sampler, cfg.inner, trials=min(args.trials, 500),
                      seed=cfg.run_seed, theta0_fn=theta0_fn)
        quantities.append(("gen_gap", est.gap, est.stderr))
        quantities.append(("gen_bound", est.bound, 0.0))
        payload["gap"] = dataclasses.asdict(est)
    payload["wall_time_ms"] = 1000.0 * (time.time() - t0)
    write_report_csv(out / "report.csv", quantities)
    write_report_json(out / "summary.json", payload)
    for name, value, stderr in quantities:
        print(f"{name} {value:.6f} (stderr {stderr:.6f})")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if cfg.mode != "toy":
        raise ValueError("sweep-n operates on the toy regression mode")
    out = prepare_out(args)
    echo_config(cfg, out)
    model = load_checkpoint(args.checkpoint, cfg)
    n_values = [int(v) for v in str(args.n_values).split(",") if v]
    quantities = []
    all_rows = []
    correlations = []
    t0 = time.time()
    for s in range(args.mc_seeds):
        rows = vary_n_sweep(model, cfg.toy, cfg.inner, n_values, trials=args.trials,
                            seed=cfg.run_seed + 7919 * s)
        all_rows.append([dataclasses.asdict(r) for r in rows])
        rho = spearman_rank_correlation([r.n for r in rows], [abs(r.gap) for r in rows])
        correlations.append(rho)
        for r in rows:
            quantities.append((f"gap_n{r.n}_seed{s}", r.gap, r.stderr))
            quantities.append((f"bound_n{r.n}_seed{s}", r.bound, 0.0))
            quantities.append((f"metric_n{r.n}_seed{s}", r.metric, 0.0))
        quantities.append((f"spearman_gap_vs_n_seed{s}", rho, 0.0))
    payload = {
        "command": "sweep-n",
        "n_values": n_values,
        "rows": all_rows,
        "spearman_per_seed": correlations,
        "wall_time_ms": 1000.0 * (time.time() - t0),
    }
    write_report_csv(out / "report.csv", quantities)
    write_report_json(out / "summary.json", payload)
    for s, rho in enumerate(correlations):
        print(f"seed {s}: spearman(|gap|, n) = {rho:+.3f}")
    return 0


# -- verification commands ------------------------------------------------------------


def _check(name: str, fn, failures: list) -> None:
    t0 = time.time()
    try:
        fn()
        print(f"ok   {name} ({time.time() - t0:.2f}s)")
    except Exception as exc:  # noqa: BLE001 - report and continue
        failures.append(name)
        print(f"FAIL {name}: {exc}")


def cmd_gradcheck(args) -> int:
    failures: list = []
    rng = np.random.default_rng(0)

    def op_suite():
        a = dc.param(rng.normal(size=6))
        b = dc.param(rng.normal(size=6))
        cases = {
            "add": lambda: (a + b).sum(),
            "sub": lambda: (a - b).sum(),
            "mul": lambda: (a * b).sum(),
            "div": lambda: (a / (b + 4.0)).sum(),
            "matmul": lambda: dc.matmul(a.reshape(2, 3), dc.transpose(b.reshape(2, 3))).sum(),
            "scale": lambda: dc.scale(a, 1.7).sum() + b.mean(),
            "relu": lambda: dc.relu(a - b).sum(),
            "tanh": lambda: dc.tanh(a).sum() * b.mean(),
            "exp": lambda: dc.exp(a * 0.2).sum() + b.sum(),
            "log": lambda: dc.log(dc.square(a) + 1.0).sum() * b.mean(),
            "softmax": lambda: (dc.softmax(a.reshape(2, 3)) * b.reshape(2, 3)).sum(),
            "sum": lambda: (a * b).sum(),
            "mean": lambda: (a * b).mean(),
            "square": lambda: dc.square(a + b).sum(),
            "sqrt": lambda: dc.sqrt(dc.square(a) + 1.0).sum() * b.mean(),
            "concat": lambda: dc.concat([a, b], axis=0).mean(),
            "index_select": lambda: dc.index_select(a * b, 0, [5, 0, 2]).sum(),
        }
        for name, f in cases.items():
            dc.check_gradients(f, [a, b], h=1e-5, tol=1e-6)

    _check("diffcore op suite vs central differences", op_suite, failures)

    def toy_graph():
        from .models import build_toy_model, init_theta0_global

        model = build_toy_model(seed=8)
        g = np.random.default_rng(3)
        for name in ("xi_w3", "xi_b3", "xi_b1", "xi_b2"):
            model.params[name].data[:] = g.normal(size=model.params[name].shape) * 0.5
        model.params["lambda_global"].data[:] = 0.8
        ep = gen_spinning_lines(
            default_config("toy").toy, derive_task_seed(4, "train", 2), n=5
        )
        inner = InnerLoopConfig(
            steps=3, eta_inner=0.05, kl_in_inner=True, q_log_var=2 * math.log(0.1)
        )
        params = [model.params[n] for n in sorted(model.params) if model.params[n].requires_grad]

        def loss():
            theta_k, _ = sib_unroll(init_theta0_global(model), ep, model, inner)
            return task_objective(ep, theta_k, model, inner)

        dc.check_gradients(loss, params, h=1e-5, tol=1e-6)

    _check("unrolled toy graph (K=3) vs central differences", toy_graph, failures)

    def fewshot_graph():
        from .models import init_theta0_proto
        from .tasks import FewShotConfig

        model = build_fewshot_model(k=3, d_x=4, seed=5, identity_features=True)
        g = np.random.default_rng(9)
        for name in ("xi_w3", "xi_b3", "xi_b1", "xi_b2"):
            model.params[name].data[:] = g.normal(size=model.params[name].shape) * 0.3
        task_cfg = FewShotConfig(
            k=3, n_shot=1, n_query_per_class=2, d_x=4,
            class_pool={"train": 8, "val": 4, "test": 4}, cluster_spread=0.4,
        )
        # 5 query points: trim one (sizes per class stay balanced at generation)
        ep = gen_fewshot_episode(task_cfg, "train", derive_task_seed(5, "train", 1))
        ep.query_inputs = ep.query_inputs[:5]
        ep.query_labels = ep.query_labels[:5]
        inner = InnerLoopConfig(steps=3, eta_inner=0.05, kl_in_inner=True,
                                posterior_regime="deterministic")
        params = [model.params[n] for n in sorted(model.params) if model.params[n].requires_grad]

        def loss():
            theta0 = init_theta0_proto(
                model, dc.detach(apply_features(model, ep.support_inputs)), ep.support_labels
            )
            theta_k, _ = sib_unroll(theta0, ep, model, inner)
            return task_objective(ep, theta_k, model, inner)

        dc.check_gradients(loss, params, h=1e-5, tol=1e-6)

    _check("unrolled classification graph (K=3, 3-way, 5 query points)", fewshot_graph, failures)

    if failures:
        print(f"{len(failures)} gradient check(s) failed")
        return 1
    print("all gradient checks passed")
    return 0


def cmd_selftest(args) -> int:
    failures: list = []

    def distributions_check():
        from .distributions import kl_diag_gaussian, standard, DiagGaussian

        assert abs(kl_diag_gaussian(standard(3), standard(3)).item()) < 1e-15
        q = DiagGaussian(np.array([0.0]), np.array([math.log(0.25)]))
        assert abs(kl_diag_gaussian(q, standard(1)).item() - 0.3181471805599453) < 1e-12

    _check("closed-form divergences", distributions_check, failures)

    def decomposition():
        rng = np.random.default_rng(11)
        for _ in range(10):
            ib_decomposition_check(random_instance(rng, 3, 4, 5), tol=1e-9)

    _check("objective decomposition on random tables", decomposition, failures)

    def determinism():
        cfg = default_config("toy")
        seed = derive_task_seed(cfg.run_seed, "train", 5)
        a = gen_spinning_lines(cfg.toy, seed)
        b = gen_spinning_lines(cfg.toy, seed)
        assert np.array_equal(a.query_inputs, b.query_inputs)
        assert np.array_equal(a.query_labels, b.query_labels)

    _check("episode determinism", determinism, failures)

    def checkpoint_round_trip():
        import tempfile

        cfg = default_config("fewshot")
        cfg.fewshot.class_pool = {"train": 8, "val": 4, "test": 4}
        model = build_fewshot_model(k=cfg.fewshot.k, d_x=cfg.fewshot.d_x, seed=1)
        with tempfile.TemporaryDirectory() as tmp:
            p1, p2 = Path(tmp) / "a.json", Path(tmp) / "b.json"
            save_checkpoint(model, p1, cfg, step=3)
            save_checkpoint(load_checkpoint(p1, cfg), p2, cfg, step=3)
            assert p1.read_bytes() == p2.read_bytes()

    _check("checkpoint round trip", checkpoint_round_trip, failures)

    def purity():
        cfg = default_config("fewshot")
        model = build_fewshot_model(k=cfg.fewshot.k, d_x=cfg.fewshot.d_x, seed=2)
        rng = np.random.default_rng(0)
        model.params["xi_w3"].data[:] = rng.normal(size=model.params["xi_w3"].shape) * 0.1
        ep = episode_for(cfg, "train", 0)
        theta0 = make_theta0(model, ep, cfg)
        ref, _ = sib_unroll(theta0, ep, model, cfg.inner)
        ep.query_labels = rng.permutation(ep.query_labels)
        out, _ = sib_unroll(theta0, ep, model, cfg.inner)
        assert np.array_equal(ref.data, out.data)

    _check("adaptation ignores query labels", purity, failures)

    if failures:
        print(f"{len(failures)} self-test(s) failed")
        return 1
    print("all self-tests passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
