"""End-to-end analysis pass: train the toy model, then report the
generalization gap, its information bound, and the query-size sweep."""

import argparse
import time

from sgmeta.analysis import (
    gen_gap,
    spearman_rank_correlation,
    toy_task_sampler,
    vary_n_sweep,
)
from sgmeta.trainer import default_config, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=2000)
    ap.add_argument("--gap-seeds", type=int, default=10)
    ap.add_argument("--sweep-seeds", type=int, default=5)
    args = ap.parse_args()

    cfg = default_config("toy", run_seed=args.seed)
    t0 = time.time()
    result = train(cfg)
    model = result.model
    row = result.final_eval.row
    print(f"trained in {time.time()-t0:.0f}s; kl_post={row.kl_to_true_posterior:.4f} "
          f"kl_prior={row.prior_kl_to_true:.5f} mse={row.query_mse:.5f}\n")

    print("generalization gap vs bound:")
    for s in range(args.gap_seeds):
        sampler = toy_task_sampler(cfg.toy, seed=1000 + s)
        est = gen_gap(model, sampler, cfg.inner, trials=args.trials, seed=2000 + s)
        holds = abs(est.gap) <= est.bound + 3 * est.stderr
        print(f"  seed {s}: gap {est.gap:+.5f} ± {est.stderr:.5f}  "
              f"sigma {est.sigma:.3f}  mi {est.mi:.3f}  bound {est.bound:.4f}  holds={holds}")

    print("\nquery-size sweep (|gap| should shrink with n):")
    for s in range(args.sweep_seeds):
        rows = vary_n_sweep(model, cfg.toy, cfg.inner, [4, 8, 16, 32],
                            trials=min(args.trials, 500), seed=777 + s)
        rho = spearman_rank_correlation([r.n for r in rows], [abs(r.gap) for r in rows])
        gaps = "  ".join(f"n={r.n}: {r.gap:+.4f}" for r in rows)
        print(f"  seed {s}: {gaps}   spearman {rho:+.3f}")


if __name__ == "__main__":
    main()
