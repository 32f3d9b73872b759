"""The transductive inner loop and the per-task objective.

The inner update descends on the query inputs only: a synthetic-gradient
network maps predictions to a surrogate for the unavailable loss gradient,
and the update direction is the exact vector-Jacobian product of the
predictions with that surrogate (conceptually, the gradient of the scalar
``(1/n) sum_i <stop_grad(net(y_hat_i)), y_hat_i>`` with respect to the task
weights). The direction is assembled from closed-form graph expressions, so
the whole K-step unroll is one first-order forward graph: the outer
objective differentiates through it with respect to the initialization, the
synthetic-gradient network, and the prior, with no higher-order machinery.

Query labels are never read while constructing the task weights; they enter
only through ``task_objective``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distributions import (
    DiagGaussian,
    dirac_prior_term,
    kl_diag_gaussian,
    kl_grad_wrt_mean,
    sample_reparam,
)
from .models import (
    MetaModel,
    apply_features,
    cosine_parts,
    linear_predict_toy,
    synth_grad,
)
from .tasks import Episode, episode_rng

GAUSSIAN_FIXED_VAR = "gaussian_fixed_var"
DETERMINISTIC = "deterministic"

# rng sub-streams per episode, so adaptation noise never depends on labels
STREAM_INNER = 1
STREAM_OBJECTIVE = 2


class InnerLoopError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (inner step {step})")
        self.step = step


@dataclass
class InnerLoopConfig:
    """Knobs of the unrolled synthetic-gradient descent."""

    steps: int = 3
    eta_inner: float = 1e-3
    kl_in_inner: bool = False
    mc_samples: int = 1
    record_trajectory: bool = False
    posterior_regime: str = GAUSSIAN_FIXED_VAR
    q_log_var: float = 2.0 * math.log(0.1)
    # legacy form of the toy update: sum over the query set instead of mean
    sum_convention: bool = False
    # evaluate inner-step predictions at the posterior mean instead of at
    # sampled weights (the exactly-solvable regression uses this form)
    inner_eval_at_mean: bool = False
    # Monte-Carlo draws for the outer objective; None reuses mc_samples
    objective_mc_samples: Optional[int] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.eta_inner <= 0:
            raise ValueError("eta_inner must be > 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.posterior_regime not in (GAUSSIAN_FIXED_VAR, DETERMINISTIC):
            raise ValueError(f"unknown posterior regime {self.posterior_regime!r}")


@dataclass
class Trajectory:
    thetas: list = field(default_factory=list)  # numeric theta_0 .. theta_K
    diagnostics: list = field(default_factory=list)  # per-step dicts


def prior_dist(model: MetaModel) -> DiagGaussian:
    return DiagGaussian(model.params["psi_mean"], model.params["psi_log_var"])


def posterior_dist(theta: Tensor, cfg: InnerLoopConfig) -> DiagGaussian:
    """Variational posterior at theta under the Gaussian fixed-variance regime."""
    flat = theta.reshape(theta.size)
    return DiagGaussian(flat, dc.constant(np.full(theta.size, cfg.q_log_var)))


def draw_weight(theta: Tensor, cfg: InnerLoopConfig, eps: Optional[np.ndarray]) -> Tensor:
    """Reparameterized task weight; the deterministic regime returns theta."""
    if cfg.posterior_regime == DETERMINISTIC:
        return theta
    flat = sample_reparam(posterior_dist(theta, cfg), eps.reshape(-1))
    return flat.reshape(theta.shape)


# -- closed-form update directions -------------------------------------------


def toy_direction(theta: Tensor, x: Tensor, model: MetaModel, cfg: InnerLoopConfig,
                  eps_list) -> Tensor:
    """(1/n) sum_i net(y_hat_i) * x_i, averaged over weight draws.

    The predictor is y_hat = w * x, so dy_hat_i/dw = x_i and dw/dtheta = 1;
    the expression below is exactly the surrogate's gradient in theta while
    keeping the synthetic net's output in the graph.
    """
    n = x.size
    total = None
    for eps in eps_list:
        w = draw_weight(theta, cfg, eps)
        y_hat = linear_predict_toy(w, x)
        g = synth_grad(model, y_hat.reshape(n, 1)).reshape(n)
        contrib = (g * x).sum() if cfg.sum_convention else (g * x).mean()
        total = contrib if total is None else total + contrib
    return dc.scale(total, 1.0 / len(eps_list)).reshape(1)


def cosine_vjp(features: Tensor, theta: Tensor, scale: Tensor, seed: Tensor,
               parts=None) -> Tensor:
    """sum_i seed_{i,:}^T d logits_i / d theta for the cosine head, in closed form.

    ``seed`` is (n, k); the result matches a per-example loop over analytic
    Jacobian rows exactly and remains differentiable in theta, the scale,
    and whatever produced the seed.
    """
    if parts is None:
        parts = cosine_parts(features, theta, scale)
    logits, dots, inv_denom, a, b = parts
    sr = seed * inv_denom
    term1 = scale * dc.matmul(dc.transpose(sr), features)  # (k, d)
    m = dc.tsum(seed * dots * inv_denom * inv_denom * a, axis=0)  # (k,)
    b_flat = b.reshape(b.shape[0])
    term2 = scale * ((m / b_flat).reshape(theta.shape[0], 1) * theta)
    return term1 - term2


def fewshot_direction(theta: Tensor, features: Tensor, model: MetaModel,
                      cfg: InnerLoopConfig, eps_list) -> Tensor:
    """Synthetic-gradient direction for the cosine head."""
    n = features.shape[0]
    total = None
    for eps in eps_list:
        w = draw_weight(theta, cfg, eps)
        parts = cosine_parts(features, w, model.params["classifier_scale"])
        logits = parts[0]
        g = synth_grad(model, logits)
        seed = g if cfg.sum_convention else dc.scale(g, 1.0 / n)
        contrib = cosine_vjp(features, w, model.params["classifier_scale"], seed, parts)
        total = contrib if total is None else total + contrib
    return dc.scale(total, 1.0 / len(eps_list))


def sib_step(theta: Tensor, inner_x: Tensor, model: MetaModel, cfg: InnerLoopConfig,
             eps_list=(None,), step_index: int = 0) -> Tensor:
    """One synthetic-gradient descent step on the query inputs (no labels)."""
    if model.mode == "toy":
        direction = toy_direction(theta, inner_x, model, cfg, eps_list)
    else:
        direction = fewshot_direction(theta, inner_x, model, cfg, eps_list)
    if cfg.kl_in_inner:
        kl_dir = kl_grad_wrt_mean(theta.reshape(theta.size), prior_dist(model))
        direction = direction + kl_dir.reshape(theta.shape)
    theta_next = theta - dc.scale(direction, cfg.eta_inner)
    if not np.all(np.isfinite(theta_next.data)):
        raise InnerLoopError("non-finite inner update", step_index)
    return theta_next


def inner_inputs(model: MetaModel, ep: Episode, detach_features: bool = True) -> Tensor:
    """Query-side inputs seen by the inner loop.

    Toy mode feeds raw inputs; few-shot mode feeds the feature map's output,
    detached by default so no gradient is back-propagated into the feature
    network from the adaptation path.
    """
    if model.mode == "toy":
        return dc.constant(ep.query_inputs[:, 0])
    feats = apply_features(model, ep.query_inputs)
    return dc.detach(feats) if detach_features else feats


def sib_unroll(theta0: Tensor, ep: Episode, model: MetaModel, cfg: InnerLoopConfig,
               detach_features: bool = True):
    """Compose ``cfg.steps`` synthetic-gradient steps; returns (theta_K, trajectory)."""
    x = inner_inputs(model, ep, detach_features=detach_features)
    rng = episode_rng(ep.task_seed, stream=STREAM_INNER)
    theta = theta0
    traj = Trajectory() if cfg.record_trajectory else None
    if traj is not None:
        traj.thetas.append(theta.data.copy())
        traj.diagnostics.append(_step_diagnostics(theta, ep, model, cfg))
    for k in range(cfg.steps):
        if cfg.posterior_regime == GAUSSIAN_FIXED_VAR and not cfg.inner_eval_at_mean:
            eps_list = [rng.normal(size=theta.size) for _ in range(cfg.mc_samples)]
        elif cfg.posterior_regime == GAUSSIAN_FIXED_VAR:
            eps_list = [np.zeros(theta.size)]  # draws coincide at the mean
        else:
            eps_list = [None]  # deterministic: draws coincide at theta
        theta = sib_step(theta, x, model, cfg, eps_list, step_index=k)
        if traj is not None:
            traj.thetas.append(theta.data.copy())
            traj.diagnostics.append(_step_diagnostics(theta, ep, model, cfg))
    return theta, traj


def _step_diagnostics(theta: Tensor, ep: Episode, model: MetaModel,
                      cfg: InnerLoopConfig) -> dict:
    """Numeric per-step records: query loss at the posterior mean, KL to prior."""
    loss = float(query_loss_value(theta.data, ep, model))
    if cfg.posterior_regime == GAUSSIAN_FIXED_VAR:
        kl = kl_diag_gaussian(posterior_dist(dc.constant(theta.data), cfg),
                              _frozen_prior(model)).item()
    else:
        kl = dirac_prior_term(dc.constant(theta.data.reshape(-1)),
                              _frozen_prior(model)).item()
    return {"query_loss": loss, "kl_to_prior": kl}


def _frozen_prior(model: MetaModel) -> DiagGaussian:
    return DiagGaussian(model.params["psi_mean"].data.copy(),
                        model.params["psi_log_var"].data.copy())


def query_loss_value(theta_data: np.ndarray, ep: Episode, model: MetaModel) -> float:
    """Plain numpy query loss at the posterior mean (no graph)."""
    if model.mode == "toy":
        pred = theta_data[0] * ep.query_inputs[:, 0]
        return float(np.mean((pred - ep.query_labels) ** 2))
    feats = apply_features(model, ep.query_inputs).data
    logits = _cosine_logits_np(feats, theta_data, float(model.params["classifier_scale"].data))
    return float(_cross_entropy_np(logits, ep.query_labels))


def _cosine_logits_np(feats, theta, scale_value):
    a = np.linalg.norm(feats, axis=1, keepdims=True)
    b = np.linalg.norm(theta, axis=1, keepdims=True)
    return scale_value * (feats @ theta.T) / (a @ b.T + 1e-12)


def _cross_entropy_np(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(labels)), labels]))


# -- supervised losses ---------------------------------------------------------


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross entropy over rows; labels are integer class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range for {k} classes: {labels.min()}..{labels.max()}")
    shifted = logits - dc.constant(logits.data.max(axis=1, keepdims=True))
    lse = dc.log(dc.tsum(dc.exp(shifted), axis=1))
    picked = dc.take_per_row(shifted, labels)
    return (lse - picked).mean()


def accuracy_value(logits_data: np.ndarray, labels) -> float:
    return float(np.mean(logits_data.argmax(axis=1) == np.asarray(labels)))


# -- per-task objective ---------------------------------------------------------


def data_term(ep: Episode, theta: Tensor, model: MetaModel, cfg: InnerLoopConfig,
              eps_list=(None,), features: Optional[Tensor] = None) -> Tensor:
    """Monte-Carlo expected query loss under the variational posterior.

    MSE for the toy head, cross entropy for classification; per-point mean,
    matching the likelihood convention used throughout.
    """
    total = None
    for eps in eps_list:
        w = draw_weight(theta, cfg, eps)
        if model.mode == "toy":
            x = dc.constant(ep.query_inputs[:, 0])
            pred = linear_predict_toy(w, x)
            sq = dc.square(pred - dc.constant(ep.query_labels))
            # the sum convention applies to the toy likelihood end to end
            contrib = sq.sum() if cfg.sum_convention else sq.mean()
        else:
            feats = apply_features(model, ep.query_inputs) if features is None else features
            logits, *_ = cosine_parts(feats, w, model.params["classifier_scale"])
            contrib = cross_entropy(logits, ep.query_labels)
        total = contrib if total is None else total + contrib
    return dc.scale(total, 1.0 / len(eps_list))


def prior_term(theta: Tensor, model: MetaModel, cfg: InnerLoopConfig) -> Tensor:
    """KL of the posterior at theta to the learnable prior (regime-appropriate)."""
    if cfg.posterior_regime == GAUSSIAN_FIXED_VAR:
        return kl_diag_gaussian(posterior_dist(theta, cfg), prior_dist(model))
    return dirac_prior_term(theta.reshape(theta.size), prior_dist(model))


def task_objective(ep: Episode, theta: Tensor, model: MetaModel, cfg: InnerLoopConfig,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-task negative evidence bound: expected query loss plus KL to prior."""
    eps_list = objective_noise(theta, ep, cfg, rng)
    return data_term(ep, theta, model, cfg, eps_list) + prior_term(theta, model, cfg)


def objective_noise(theta: Tensor, ep: Episode, cfg: InnerLoopConfig,
                    rng: Optional[np.random.Generator] = None):
    draws = cfg.objective_mc_samples or cfg.mc_samples
    if cfg.posterior_regime == DETERMINISTIC:
        return [None]  # all draws return the mean
    if rng is None:
        rng = episode_rng(ep.task_seed, stream=STREAM_OBJECTIVE)
    return [rng.normal(size=theta.size) for _ in range(draws)]


# -- inductive baseline ----------------------------------------------------------


def maml_inner(theta0: Tensor, ep: Episode, model: MetaModel, cfg: InnerLoopConfig) -> Tensor:
    """Gradient ascent on the support log-likelihood (evaluation baseline).

    Uses true support labels only; each step differentiates the support
    loss at the current iterate numerically, so the result is a constant
    with respect to the meta-parameters.
    """
    if ep.support_inputs is None or len(ep.support_inputs) == 0:
        raise ValueError("maml_inner requires a non-empty support set")
    rng = episode_rng(ep.task_seed, stream=STREAM_INNER)
    theta_data = theta0.data.copy()
    sup_feats = (
        dc.constant(ep.support_inputs[:, 0])
        if model.mode == "toy"
        else dc.detach(apply_features(model, ep.support_inputs))
    )
    for k in range(cfg.steps):
        leaf = dc.param(theta_data.copy())
        if cfg.posterior_regime == GAUSSIAN_FIXED_VAR:
            eps_list = [rng.normal(size=leaf.size) for _ in range(cfg.mc_samples)]
        else:
            eps_list = [None] * cfg.mc_samples
        total = None
        for eps in eps_list:
            w = draw_weight(leaf, cfg, eps)
            if model.mode == "toy":
                pred = linear_predict_toy(w, sup_feats)
                contrib = dc.tmean(dc.square(pred - dc.constant(ep.support_labels)))
            else:
                logits, *_ = cosine_parts(sup_feats, w, model.params["classifier_scale"])
                contrib = cross_entropy(logits, ep.support_labels)
            total = contrib if total is None else total + contrib
        loss = dc.scale(total, 1.0 / len(eps_list))
        (g,) = dc.grad(loss, [leaf], allow_unused=True)
        theta_data = theta_data - cfg.eta_inner * g
        if not np.all(np.isfinite(theta_data)):
            raise InnerLoopError("non-finite inductive update", k)
    return dc.constant(theta_data)


# -- self-supervised initialization -------------------------------------------------


def orthogonal_transform_labeler(features: np.ndarray):
    """Four deterministic orthogonal transforms of the feature vector.

    Returns (augmented features, transform ids): identity, negation, a
    coordinate roll by one, and an alternating sign flip.
    """
    d = features.shape[1]
    signs = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    variants = [
        features,
        -features,
        np.roll(features, 1, axis=1),
        features * signs,
    ]
    aug = np.concatenate(variants, axis=0)
    labels = np.repeat(np.arange(4), features.shape[0])
    return aug, labels


def _ssl_projection(k: int) -> np.ndarray:
    """Fixed map from class logits to the four transform logits."""
    rng = np.random.Generator(np.random.Philox(key=0x55AA))
    return rng.normal(size=(k, 4)) / np.sqrt(k)


def ssl_init(model: MetaModel, ep: Episode, cfg: InnerLoopConfig,
             labeler: Callable = orthogonal_transform_labeler,
             eta_ssl: Optional[float] = None) -> Tensor:
    """One true-gradient step on a self-supervised task, starting from the
    global initialization; uses query inputs only, never class labels.

    The self-supervised labels are ids of deterministic orthogonal feature
    transforms; predictions of those ids are a fixed linear read-out of the
    class logits, and the update direction is the exact cross-entropy
    gradient pushed through the cosine head in closed form (differentiable
    with respect to the global initialization).
    """
    if model.mode != "fewshot":
        raise ValueError("ssl initialization applies to classification mode only")
    eta = cfg.eta_inner if eta_ssl is None else float(eta_ssl)
    feats = dc.detach(apply_features(model, ep.query_inputs)).data
    aug, ssl_labels = labeler(feats)
    ssl_labels = np.asarray(ssl_labels, dtype=np.int64)
    if ssl_labels.min() < 0 or ssl_labels.max() >= 4:
        raise ValueError("self-supervised labeler produced out-of-range ids")
    theta = model.params["lambda_global"]
    scale = model.params["classifier_scale"]
    aug_t = dc.constant(aug)
    parts = cosine_parts(aug_t, theta, scale)
    logits = parts[0]
    proj = dc.constant(_ssl_projection(model.k))
    ssl_logits = dc.matmul(logits, proj)
    probs = dc.softmax(ssl_logits)
    one_hot = np.zeros((len(ssl_labels), 4))
    one_hot[np.arange(len(ssl_labels)), ssl_labels] = 1.0
    ce_grad = dc.scale(probs - dc.constant(one_hot), 1.0 / len(ssl_labels))
    seed = dc.matmul(ce_grad, dc.transpose(proj))  # (4n, k)
    direction = cosine_vjp(aug_t, theta, scale, seed, parts)
    return theta - dc.scale(direction, eta)


def ssl_loss_value(model: MetaModel, ep: Episode, theta_data: np.ndarray,
                   labeler: Callable = orthogonal_transform_labeler) -> float:
    """Numeric self-supervised loss at given task weights (for diagnostics)."""
    feats = apply_features(model, ep.query_inputs).data
    aug, ssl_labels = labeler(feats)
    logits = _cosine_logits_np(aug, theta_data, float(model.params["classifier_scale"].data))
    ssl_logits = logits @ _ssl_projection(model.k)
    return _cross_entropy_np(ssl_logits, np.asarray(ssl_labels, dtype=np.int64))
