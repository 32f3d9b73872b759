"""Diagonal Gaussians: closed-form KL, reparameterized sampling, log-density.

All quantities are built from diffcore ops so they stay differentiable with
respect to both distributions' parameters. Two variational regimes are used
by the rest of the package:

* ``toy_fixed_var`` — the posterior's log-variance is frozen and only the
  mean is optimized; sampling perturbs the mean with scaled noise.
* ``deterministic`` — a point-mass posterior: sampling returns the mean and
  the KL term is replaced by ``dirac_prior_term`` (the cross term to the
  prior plus the prior's log-variance, dropping additive constants).
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class DiagGaussian:
    """Diagonal Gaussian with Tensor-valued mean and log-variance."""

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var):
        self.mean = mean if isinstance(mean, Tensor) else Tensor(mean)
        self.log_var = log_var if isinstance(log_var, Tensor) else Tensor(log_var)
        if self.mean.shape != self.log_var.shape:
            raise dc.ShapeError("DiagGaussian", self.mean.shape, self.log_var.shape)

    @property
    def dim(self) -> int:
        return self.mean.size

    def std(self) -> Tensor:
        return dc.exp(dc.scale(self.log_var, 0.5))

    def var(self) -> Tensor:
        return dc.exp(self.log_var)


def standard(dim: int) -> DiagGaussian:
    return DiagGaussian(np.zeros(dim), np.zeros(dim))


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Exact KL(q || p); differentiable in both arguments' parameters.

    0.5 * sum( log(vp/vq) + (vq + (mq-mp)^2)/vp - 1 )
    """
    if q.mean.shape != p.mean.shape:
        raise dc.ShapeError("kl_diag_gaussian", q.mean.shape, p.mean.shape)
    log_ratio = p.log_var - q.log_var
    inv_vp = dc.exp(-p.log_var)
    diff = q.mean - p.mean
    quad = (dc.exp(q.log_var) + dc.square(diff)) * inv_vp
    return dc.scale((log_ratio + quad - 1.0).sum(), 0.5)


def sample_reparam(q: DiagGaussian, eps) -> Tensor:
    """w = mean + exp(log_var / 2) * eps; differentiable in q's parameters."""
    eps_t = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps_t.shape != q.mean.shape:
        raise dc.ShapeError("sample_reparam", q.mean.shape, eps_t.shape)
    return q.mean + q.std() * eps_t


def log_prob(q: DiagGaussian, w) -> Tensor:
    """Exact diagonal-Gaussian log-density at w."""
    w_t = w if isinstance(w, Tensor) else Tensor(w)
    if w_t.shape != q.mean.shape:
        raise dc.ShapeError("log_prob", q.mean.shape, w_t.shape)
    quad = dc.square(w_t - q.mean) * dc.exp(-q.log_var)
    return dc.scale((q.log_var + quad + LOG_2PI).sum(), -0.5)


def dirac_prior_term(theta_flat: Tensor, p: DiagGaussian) -> Tensor:
    """Prior-matching term for a point-mass posterior at ``theta_flat``.

    ||theta - mp||^2 weighted by 1/vp, halved, plus half the prior
    log-variance; the limit of the Gaussian KL as the posterior variance
    vanishes, with the divergent constant dropped. Differentiable in theta
    and in the prior's parameters, and minimized over the prior exactly at
    the moment-matching solution.
    """
    if theta_flat.shape != p.mean.shape:
        raise dc.ShapeError("dirac_prior_term", theta_flat.shape, p.mean.shape)
    quad = dc.square(theta_flat - p.mean) * dc.exp(-p.log_var)
    return dc.scale((quad + p.log_var).sum(), 0.5)


def kl_grad_wrt_mean(q_mean: Tensor, p: DiagGaussian) -> Tensor:
    """Closed-form d KL(q || p) / d q.mean = (mq - mp) / vp.

    Built from graph ops so the expression itself stays differentiable
    (w.r.t. the mean and the prior's parameters) without any
    gradient-of-gradient machinery. The same formula is exact for both
    variational regimes since the posterior variance does not enter.
    """
    if q_mean.shape != p.mean.shape:
        raise dc.ShapeError("kl_grad_wrt_mean", q_mean.shape, p.mean.shape)
    return (q_mean - p.mean) * dc.exp(-p.log_var)
