"""Train the synthetic few-shot benchmark and compare adaptation depths."""

import argparse
import dataclasses
import time

from sgmeta.trainer import default_config, episode_for, evaluate, train
from sgmeta.trainer import build_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--eta-inner", type=float, default=None)
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--optimizer", default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()

    cfg = default_config("fewshot", run_seed=args.seed, total_steps=args.steps)
    if args.eta_inner is not None:
        cfg.inner.eta_inner = args.eta_inner
    if args.optimizer:
        cfg.optimizer = args.optimizer
    if args.lr is not None:
        cfg.learning_rate = args.lr

    t0 = time.time()

    def progress(step, total, report):
        if not args.quiet:
            r = report.row
            print(f"step {step:5d}/{total}  val acc {r.query_accuracy:.4f}  "
                  f"loss {r.query_loss:.4f}", flush=True)

    result = train(cfg, progress=progress)
    print(f"\ntrained in {time.time()-t0:.1f}s (best val acc {result.best_metric:.4f})")

    test_eps = [episode_for(cfg, "test", i) for i in range(args.episodes)]
    model = result.model
    if result.best_snapshot is not None:
        model.load_data(result.best_snapshot)
    for k in (0, 1, 3, 5):
        inner = dataclasses.replace(cfg.inner, steps=k)
        rep = evaluate(model, cfg, "test", test_eps, inner=inner)
        print(f"trained model, K={k}: acc {rep.row.query_accuracy:.4f} "
              f"± {rep.ci95['query_accuracy']:.4f}")
    fresh = build_model(cfg)
    rep = evaluate(fresh, cfg, "test", test_eps,
                   inner=dataclasses.replace(cfg.inner, steps=0))
    print(f"untrained prototype baseline (K=0): acc {rep.row.query_accuracy:.4f} "
          f"± {rep.ci95['query_accuracy']:.4f}")


if __name__ == "__main__":
    main()
