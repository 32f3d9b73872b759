"""Theory-facing diagnostics.

Exact KLs against the toy's closed-form posterior and prior, the mutual-
information proxy, a Monte-Carlo generalization gap with its subgaussian
upper bound, an exhaustively enumerated decomposition of the population
objective on small discrete instances, and the query-size sweep.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .distributions import DiagGaussian, kl_diag_gaussian
from .models import MetaModel, apply_features, init_theta0_global
from .sibcore import GAUSSIAN_FIXED_VAR, InnerLoopConfig, sib_unroll
from .tasks import (
    Episode,
    FewShotConfig,
    ToyConfig,
    derive_task_seed,
    episode_rng,
    gen_spinning_lines,
    resample_query_set,
    true_posterior,
)
from . import diffcore as dc


# -- toy-mode estimators ------------------------------------------------------


def _frozen_prior(model: MetaModel) -> DiagGaussian:
    return DiagGaussian(model.params["psi_mean"].data.copy(),
                        model.params["psi_log_var"].data.copy())


def kl_to_true_posterior(model: MetaModel, episodes, cfg: ToyConfig,
                         inner: InnerLoopConfig) -> float:
    """Mean exact KL between the adapted posterior and the closed-form one."""
    if model.mode != "toy":
        raise ValueError("the closed-form posterior exists only in toy mode")
    total = 0.0
    for ep in episodes:
        theta_k, _ = sib_unroll(init_theta0_global(model), ep, model, inner)
        q = DiagGaussian(theta_k.data.copy(), np.full(1, inner.q_log_var))
        total += kl_diag_gaussian(q, true_posterior(ep, cfg)).item()
    return total / len(episodes)


def mi_estimate(model: MetaModel, episodes, inner: InnerLoopConfig,
                theta0_fn: Optional[Callable] = None) -> float:
    """Mutual-information proxy: mean KL from adapted posteriors to the prior."""
    prior = _frozen_prior(model)
    theta0_fn = theta0_fn or (lambda ep: init_theta0_global(model))
    total = 0.0
    for ep in episodes:
        theta_k, _ = sib_unroll(theta0_fn(ep), ep, model, inner)
        if inner.posterior_regime == GAUSSIAN_FIXED_VAR:
            q = DiagGaussian(theta_k.data.reshape(-1), np.full(theta_k.size, inner.q_log_var))
            total += kl_diag_gaussian(q, prior).item()
        else:
            from .distributions import dirac_prior_term

            total += dirac_prior_term(dc.constant(theta_k.data.reshape(-1)), prior).item()
    value = total / len(episodes)
    if value < -1e-12:
        raise AssertionError("mutual-information proxy must be nonnegative")
    return value


# -- generalization gap and bound ----------------------------------------------


@dataclass
class GapEstimate:
    gap: float
    stderr: float
    trials: int
    sigma: float
    bound: float
    mi: float
    n: int


def toy_task_sampler(cfg: ToyConfig, seed: int, n: Optional[int] = None):
    """Trial sampler for the toy process: fresh dataset plus fresh re-draws."""

    def sample(trial: int):
        d = gen_spinning_lines(cfg, derive_task_seed(seed, "test", 2 * trial), n=n)

        def fresh(j: int) -> Episode:
            return gen_spinning_lines(
                cfg, derive_task_seed(seed, "test", 2 * trial + 1 + (j + 1) * 0x10001), n=n
            )

        return d, fresh

    return sample


def fewshot_task_sampler(cfg: FewShotConfig, seed: int, split: str = "test"):
    """Fresh query sets of the same classes define the task's dataset draw."""
    from .tasks import gen_fewshot_episode

    def sample(trial: int):
        d = gen_fewshot_episode(cfg, split, derive_task_seed(seed, split, 3 * trial))

        def fresh(j: int) -> Episode:
            return resample_query_set(d, cfg, derive_task_seed(seed, split, 3 * trial + 1 + j))

        return d, fresh

    return sample


def _episode_loss(model: MetaModel, ep: Episode, w: np.ndarray) -> float:
    """Per-dataset empirical risk of fixed task weights."""
    if model.mode == "toy":
        pred = w[0] * ep.query_inputs[:, 0]
        return float(np.mean((pred - ep.query_labels) ** 2))
    from .sibcore import _cosine_logits_np, _cross_entropy_np

    feats = apply_features(model, ep.query_inputs).data
    logits = _cosine_logits_np(feats, w.reshape(model.k, model.d_f),
                               float(model.params["classifier_scale"].data))
    return _cross_entropy_np(logits, ep.query_labels)


def _draw_posterior_weight(model: MetaModel, theta_data: np.ndarray,
                           inner: InnerLoopConfig, rng) -> np.ndarray:
    if inner.posterior_regime == GAUSSIAN_FIXED_VAR:
        std = math.exp(inner.q_log_var / 2.0)
        return theta_data.reshape(-1) + std * rng.normal(size=theta_data.size)
    return theta_data.reshape(-1)


def gen_gap(model: MetaModel, task_sampler, inner: InnerLoopConfig, trials: int = 2000,
            fresh_datasets_per_task: int = 1, seed: int = 0,
            theta0_fn: Optional[Callable] = None) -> GapEstimate:
    """Monte-Carlo generalization gap of the adaptation process.

    Per trial: draw a dataset, adapt on its inputs, draw task weights from
    the resulting posterior, and compare the loss on fresh datasets of the
    same task against the loss on the adapted-on dataset.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    theta0_fn = theta0_fn or (lambda ep: init_theta0_global(model))
    rng = episode_rng(derive_task_seed(seed, "test", 0x6A9), stream=7)
    diffs = np.empty(trials)
    n_query = None
    for t in range(trials):
        d, fresh = task_sampler(t)
        n_query = d.n_query
        theta_k, _ = sib_unroll(theta0_fn(d), d, model, inner)
        w = _draw_posterior_weight(model, theta_k.data, inner, rng)
        on_d = _episode_loss(model, d, w)
        on_fresh = np.mean(
            [_episode_loss(model, fresh(j), w) for j in range(fresh_datasets_per_task)]
        )
        diffs[t] = on_fresh - on_d
    gap = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    sigma = estimate_sigma(model, task_sampler, inner, draws=min(trials, 2000),
                           seed=seed + 1, theta0_fn=theta0_fn)
    mi = mi_for_sampler(model, task_sampler, inner, episodes=min(trials, 200),
                        theta0_fn=theta0_fn)
    return GapEstimate(gap=gap, stderr=stderr, trials=trials, sigma=sigma,
                       bound=gen_bound(sigma, n_query, mi), mi=mi, n=n_query)


def estimate_sigma(model: MetaModel, task_sampler, inner: InnerLoopConfig,
                   draws: int = 2000, seed: int = 1,
                   theta0_fn: Optional[Callable] = None) -> float:
    """Plug-in subgaussian scale: half the observed per-example loss range
    under independently drawn task weights and data points."""
    theta0_fn = theta0_fn or (lambda ep: init_theta0_global(model))
    rng = episode_rng(derive_task_seed(seed, "test", 0x51E), stream=9)
    losses = []
    for t in range(draws):
        d_w, _ = task_sampler(2 * t)
        d_z, _ = task_sampler(2 * t + 1)
        theta_k, _ = sib_unroll(theta0_fn(d_w), d_w, model, inner)
        w = _draw_posterior_weight(model, theta_k.data, inner, rng)
        i = int(rng.integers(d_z.n_query))
        one_point = Episode(
            query_inputs=d_z.query_inputs[i : i + 1],
            query_labels=d_z.query_labels[i : i + 1],
            truth=d_z.truth,
            task_seed=d_z.task_seed,
        )
        losses.append(_episode_loss(model, one_point, w))
    losses = np.asarray(losses)
    return float((losses.max() - losses.min()) / 2.0)


def mi_for_sampler(model, task_sampler, inner, episodes=200, theta0_fn=None) -> float:
    eps = [task_sampler(t)[0] for t in range(episodes)]
    return mi_estimate(model, eps, inner, theta0_fn=theta0_fn)


def gen_bound(sigma: float, n: int, mi: float) -> float:
    """Subgaussian information bound sqrt(2 sigma^2 mi / n)."""
    if mi < 0:
        raise ValueError("mutual information must be nonnegative")
    if sigma <= 0 or n < 1:
        raise ValueError("requires sigma > 0 and n >= 1")
    return math.sqrt(2.0 * sigma * sigma * mi / n)


# -- discrete decomposition check -------------------------------------------------


@dataclass
class DiscreteInstance:
    """Tabulated joint model over tasks, datasets, and weights."""

    q_t: np.ndarray  # (T,)
    q_d_given_t: np.ndarray  # (T, D)
    q_w_given_dt: np.ndarray  # (T, D, W)
    p_w: np.ndarray  # (W,)
    p_d_given_wt: np.ndarray  # (T, W, D)

    def __post_init__(self):
        for name in ("q_t", "q_d_given_t", "q_w_given_dt", "p_w", "p_d_given_wt"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if np.any(arr < 0):
                raise ValueError(f"{name} has negative entries")
        _check_rows(self.q_t[None, :], "q_t")
        _check_rows(self.q_d_given_t, "q_d_given_t")
        _check_rows(self.q_w_given_dt.reshape(-1, self.q_w_given_dt.shape[-1]), "q_w_given_dt")
        _check_rows(self.p_w[None, :], "p_w")
        _check_rows(self.p_d_given_wt.reshape(-1, self.p_d_given_wt.shape[-1]), "p_d_given_wt")

    @property
    def sizes(self):
        t, d, w = self.q_w_given_dt.shape
        return t, d, w


def _check_rows(mat: np.ndarray, name: str, tol: float = 1e-12) -> None:
    sums = mat.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValueError(f"{name} rows must sum to 1 (max deviation {np.abs(sums-1).max():.2e})")


def random_instance(rng, t: int = 2, d: int = 3, w: int = 4,
                    concentration: float = 1.0) -> DiscreteInstance:
    """Random strictly positive tables (Dirichlet rows); capped at 16^3."""
    if max(t, d, w) > 16:
        raise ValueError("instance sizes capped at 16 per axis")

    def dirichlet(shape):
        raw = rng.gamma(concentration, size=shape) + 1e-12
        return raw / raw.sum(axis=-1, keepdims=True)

    return DiscreteInstance(
        q_t=dirichlet((t,)),
        q_d_given_t=dirichlet((t, d)),
        q_w_given_dt=dirichlet((t, d, w)),
        p_w=dirichlet((w,)),
        p_d_given_wt=dirichlet((t, w, d)),
    )


@dataclass
class IbReport:
    objective: float
    mi_term: float
    cross_entropy_term: float
    prior_kl_term: float
    residual: float
    lower_bound: float
    bound_satisfied: bool


def ib_decomposition_check(inst: DiscreteInstance, tol: float = 1e-9) -> IbReport:
    """Exhaustive check that the population objective equals the mutual
    information plus the conditional cross entropy plus the aggregated
    prior KL, and dominates the entropic lower bound."""
    t_n, d_n, w_n = inst.sizes
    q_t = inst.q_t
    q_dt = inst.q_d_given_t
    q_wdt = inst.q_w_given_dt
    # joint over (t, d, w) and the aggregated posterior q(w | t)
    joint = q_t[:, None, None] * q_dt[:, :, None] * q_wdt
    q_w_t = (q_dt[:, :, None] * q_wdt).sum(axis=1)  # (T, W)

    # objective: E_t E_d [ E_{q(w|d,t)}[-log p(d|w,t)] + KL(q(w|d,t) || p(w)) ]
    log_p_d_wt = np.log(inst.p_d_given_wt)  # (T, W, D)
    nll = -(joint * np.transpose(log_p_d_wt, (0, 2, 1))).sum()
    kl_to_p = (joint * (np.log(q_wdt) - np.log(inst.p_w)[None, None, :])).sum()
    objective = nll + kl_to_p

    mi_term = (joint * (np.log(q_wdt) - np.log(q_w_t)[:, None, :])).sum()
    cross_entropy_term = nll
    prior_kl_term = (q_t[:, None] * q_w_t * (np.log(q_w_t) - np.log(inst.p_w)[None, :])).sum()

    residual = objective - (mi_term + cross_entropy_term + prior_kl_term)

    # entropic lower bound: I + H_q(d | w, t)
    q_d_wt = joint / (q_t[:, None, None] * q_w_t[:, None, :])  # q(d | w, t)
    h_q = -(joint * np.log(q_d_wt)).sum()
    lower_bound = mi_term + h_q

    report = IbReport(
        objective=float(objective),
        mi_term=float(mi_term),
        cross_entropy_term=float(cross_entropy_term),
        prior_kl_term=float(prior_kl_term),
        residual=float(residual),
        lower_bound=float(lower_bound),
        bound_satisfied=bool(objective >= lower_bound - tol),
    )
    if abs(report.residual) > tol:
        raise AssertionError(f"decomposition residual {report.residual:.3e} exceeds {tol:.1e}")
    if not report.bound_satisfied:
        raise AssertionError("population objective fell below its entropic lower bound")
    return report


def exact_conditional_mi(inst: DiscreteInstance) -> float:
    """I(w; d | t) by enumeration (shared with the decomposition)."""
    q_t = inst.q_t
    q_dt = inst.q_d_given_t
    q_wdt = inst.q_w_given_dt
    joint = q_t[:, None, None] * q_dt[:, :, None] * q_wdt
    q_w_t = (q_dt[:, :, None] * q_wdt).sum(axis=1)
    return float((joint * (np.log(q_wdt) - np.log(q_w_t)[:, None, :])).sum())


def discrete_mi_proxy(inst: DiscreteInstance) -> float:
    """E_{t,d} KL(q(w|d,t) || p(w)) — the estimator analog on tables."""
    joint = inst.q_t[:, None, None] * inst.q_d_given_t[:, :, None] * inst.q_w_given_dt
    return float((joint * (np.log(inst.q_w_given_dt) - np.log(inst.p_w)[None, None, :])).sum())


# -- query-size sweep ----------------------------------------------------------------


@dataclass
class SweepRow:
    n: int
    gap: float
    stderr: float
    bound: float
    sigma: float
    mi: float
    metric: float  # query mse (toy) or accuracy (classification)


def vary_n_sweep(model: MetaModel, cfg, inner: InnerLoopConfig, n_values,
                 trials: int = 500, seed: int = 0,
                 reference_n: Optional[int] = None) -> list:
    """Generalization gap, bound, and task metric at each query-set size.

    The trained model is adapted at each size. A sum-convention update would
    scale the step with the query count, so it is converted to the
    equivalent per-point form matched at ``reference_n`` (the training size
    by default); only toy mode supports the size sweep since the few-shot
    query size is tied to the episode layout.
    """
    if not n_values:
        raise ValueError("n_values must be non-empty")
    if inner.sum_convention:
        ref = cfg.n if reference_n is None else int(reference_n)
        inner = dataclasses.replace(inner, sum_convention=False,
                                    eta_inner=inner.eta_inner * ref)
    rows = []
    for n in n_values:
        sampler = toy_task_sampler(cfg, seed=seed + 131 * n, n=n)
        est = gen_gap(model, sampler, inner, trials=trials, seed=seed + n)
        mse = 0.0
        for t in range(min(trials, 200)):
            d, _ = sampler(t)
            theta_k, _ = sib_unroll(init_theta0_global(model), d, model, inner)
            mse += _episode_loss(model, d, theta_k.data.reshape(-1))
        rows.append(SweepRow(n=int(n), gap=est.gap, stderr=est.stderr, bound=est.bound,
                             sigma=est.sigma, mi=est.mi, metric=mse / min(trials, 200)))
    return rows


def spearman_rank_correlation(xs, ys) -> float:
    """Spearman rho via rank Pearson correlation (average ranks on ties)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        # average ties
        for val in np.unique(v):
            mask = v == val
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx**2).sum() * (ry**2).sum()))
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)


# -- report output --------------------------------------------------------------------


def write_report_csv(path, quantities) -> None:
    """``quantity,value,stderr`` rows."""
    with open(path, "w") as fh:
        fh.write("quantity,value,stderr\n")
        for name, value, stderr in quantities:
            fh.write(f"{name},{value!r},{stderr!r}\n")


def write_report_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
