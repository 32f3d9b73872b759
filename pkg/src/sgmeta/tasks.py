"""Episodic task generation.

Two task families:

* spinning lines — zero-shot 1-D regression with an exactly known prior and
  posterior over the line slope. Inputs are iid Gaussian, the slope is the
  input mean plus independent Gaussian shift, targets are exactly slope
  times input.
* synthetic few-shot classification — k-way n-shot episodes over latent
  Gaussian clusters with unit-norm prototypes, standing in for frozen
  pretrained feature embeddings. Train/val/test class pools are disjoint.

Randomness: every episode is generated by a fresh counter-based Philox
generator keyed on a 64-bit task seed, and task seeds come from a SplitMix64
mix of (run seed, split, index) — pure integer arithmetic, so streams are
reproducible across platforms and independent across splits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .distributions import DiagGaussian

_MASK64 = (1 << 64) - 1
_SPLIT_SALTS = {"train": 0x9E3779B97F4A7C15, "val": 0xC2B2AE3D27D4EB4F, "test": 0x165667B19E3779F9}


def splitmix64(z: int) -> int:
    """One SplitMix64 output step; a bijection on 64-bit integers."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_task_seed(run_seed: int, split: str, task_index: int) -> int:
    """Deterministic 64-bit seed for one episode of one split."""
    if split not in _SPLIT_SALTS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_SALTS)}")
    z = (int(run_seed) & _MASK64) ^ _SPLIT_SALTS[split]
    z = splitmix64(z)
    z = splitmix64(z ^ (int(task_index) & _MASK64))
    return z


def episode_rng(task_seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one episode (optionally a sub-stream)."""
    return np.random.Generator(np.random.Philox(key=(task_seed & _MASK64) + (stream << 64)))


@dataclass
class Episode:
    """One task: optional labeled support set plus an unlabeled-at-adaptation query set."""

    query_inputs: np.ndarray
    query_labels: np.ndarray
    support_inputs: Optional[np.ndarray] = None
    support_labels: Optional[np.ndarray] = None
    truth: Optional[dict] = None
    task_seed: int = 0

    @property
    def n_query(self) -> int:
        return self.query_inputs.shape[0]


@dataclass
class ToyConfig:
    """Spinning-lines generative parameters."""

    n: int = 32
    mu: float = 0.0
    sigma: float = 1.0
    mu_w: float = 1.0
    sigma_w: float = 0.1
    n_train_tasks: int = 240
    n_test_tasks: int = 240

    def __post_init__(self):
        if self.sigma <= 0 or self.sigma_w <= 0 or self.n < 1:
            raise ValueError("ToyConfig requires sigma > 0, sigma_w > 0, n >= 1")


@dataclass
class FewShotConfig:
    """Synthetic k-way n-shot benchmark over latent Gaussian clusters."""

    k: int = 5
    n_shot: int = 1
    n_query_per_class: int = 15
    d_x: int = 16
    class_pool: dict = field(default_factory=lambda: {"train": 64, "val": 16, "test": 20})
    cluster_spread: float = 0.3
    pool_seed: int = 0

    def __post_init__(self):
        for split, size in self.class_pool.items():
            if self.k > size:
                raise ValueError(f"k={self.k} exceeds the {split} class pool ({size})")


def gen_spinning_lines(cfg: ToyConfig, task_seed: int, n: Optional[int] = None) -> Episode:
    """One zero-shot regression episode; targets satisfy y = w * x exactly."""
    n = cfg.n if n is None else int(n)
    rng = episode_rng(task_seed)
    x = rng.normal(cfg.mu, cfg.sigma, size=n)
    eps_w = rng.normal(cfg.mu_w, cfg.sigma_w)
    w = x.mean() + eps_w
    y = w * x
    return Episode(
        query_inputs=x.reshape(n, 1),
        query_labels=y,
        truth={"w": float(w)},
        task_seed=task_seed,
    )


def true_prior(cfg: ToyConfig, n: Optional[int] = None) -> DiagGaussian:
    """Marginal over the slope: N(mu + mu_w, sigma^2/n + sigma_w^2)."""
    n = cfg.n if n is None else int(n)
    var = cfg.sigma**2 / n + cfg.sigma_w**2
    return DiagGaussian(np.array([cfg.mu + cfg.mu_w]), np.array([np.log(var)]))


def true_posterior(ep: Episode, cfg: ToyConfig) -> DiagGaussian:
    """Slope posterior given the inputs: N(mean(x) + mu_w, sigma_w^2)."""
    m = float(ep.query_inputs.mean())
    return DiagGaussian(np.array([m + cfg.mu_w]), np.array([2.0 * np.log(cfg.sigma_w)]))


def class_prototypes(cfg: FewShotConfig, split: str) -> np.ndarray:
    """Unit-norm latent prototypes for one split's class pool (fixed per pool seed)."""
    rng = episode_rng(derive_task_seed(cfg.pool_seed, split, 0x50524F544F))
    protos = rng.normal(size=(cfg.class_pool[split], cfg.d_x))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos


def gen_fewshot_episode(cfg: FewShotConfig, split: str, task_seed: int,
                        n_query_per_class: Optional[int] = None) -> Episode:
    """Sample k classes without replacement, then clustered support/query points."""
    protos = class_prototypes(cfg, split)
    if cfg.k > protos.shape[0]:
        raise ValueError(f"k={cfg.k} exceeds pool of {protos.shape[0]} classes")
    nq = cfg.n_query_per_class if n_query_per_class is None else int(n_query_per_class)
    rng = episode_rng(task_seed)
    chosen = rng.choice(protos.shape[0], size=cfg.k, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for new_label, cls in enumerate(chosen):
        center = protos[cls]
        pts = center + rng.normal(0.0, cfg.cluster_spread, size=(cfg.n_shot + nq, cfg.d_x))
        sup_x.append(pts[: cfg.n_shot])
        sup_y.append(np.full(cfg.n_shot, new_label, dtype=np.int64))
        qry_x.append(pts[cfg.n_shot :])
        qry_y.append(np.full(nq, new_label, dtype=np.int64))
    return Episode(
        query_inputs=np.concatenate(qry_x),
        query_labels=np.concatenate(qry_y),
        support_inputs=np.concatenate(sup_x) if cfg.n_shot > 0 else None,
        support_labels=np.concatenate(sup_y) if cfg.n_shot > 0 else None,
        truth={"prototypes": protos[chosen].copy(), "class_ids": chosen.copy()},
        task_seed=task_seed,
    )


def resample_query_set(ep: Episode, cfg: FewShotConfig, fresh_seed: int) -> Episode:
    """Fresh query draw for the same task (same classes, new points)."""
    protos = ep.truth["prototypes"]
    nq = ep.n_query // protos.shape[0]
    rng = episode_rng(fresh_seed)
    qry_x, qry_y = [], []
    for label, center in enumerate(protos):
        qry_x.append(center + rng.normal(0.0, cfg.cluster_spread, size=(nq, cfg.d_x)))
        qry_y.append(np.full(nq, label, dtype=np.int64))
    return Episode(
        query_inputs=np.concatenate(qry_x),
        query_labels=np.concatenate(qry_y),
        support_inputs=ep.support_inputs,
        support_labels=ep.support_labels,
        truth=ep.truth,
        task_seed=fresh_seed,
    )


# -- external feature ingestion -------------------------------------------


def load_feature_pool_csv(path) -> dict:
    """Read a class pool from CSV with header ``label,feat_0,...,feat_{d-1}``.

    Returns {label: (n_examples, d) array}. Enables episodes over externally
    computed embeddings instead of the synthetic cluster model.
    """
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label" or not all(
            h == f"feat_{i}" for i, h in enumerate(header[1:])
        ):
            raise ValueError(f"bad feature CSV header in {path}: {header[:4]}...")
        for row in reader:
            label = int(row[0])
            rows.setdefault(label, []).append([float(v) for v in row[1:]])
    return {label: np.asarray(feats, dtype=np.float64) for label, feats in rows.items()}


def episode_from_pool(pool: dict, k: int, n_shot: int, n_query_per_class: int,
                      task_seed: int) -> Episode:
    """k-way n-shot episode drawn without replacement from stored features."""
    labels = sorted(pool)
    if k > len(labels):
        raise ValueError(f"k={k} exceeds pool of {len(labels)} classes")
    rng = episode_rng(task_seed)
    chosen = rng.choice(len(labels), size=k, replace=False)
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for new_label, idx in enumerate(chosen):
        feats = pool[labels[idx]]
        need = n_shot + n_query_per_class
        if feats.shape[0] < need:
            raise ValueError(f"class {labels[idx]} has {feats.shape[0]} examples, need {need}")
        pick = rng.choice(feats.shape[0], size=need, replace=False)
        sup_x.append(feats[pick[:n_shot]])
        sup_y.append(np.full(n_shot, new_label, dtype=np.int64))
        qry_x.append(feats[pick[n_shot:]])
        qry_y.append(np.full(n_query_per_class, new_label, dtype=np.int64))
    return Episode(
        query_inputs=np.concatenate(qry_x),
        query_labels=np.concatenate(qry_y),
        support_inputs=np.concatenate(sup_x) if n_shot > 0 else None,
        support_labels=np.concatenate(sup_y) if n_shot > 0 else None,
        truth={"class_ids": np.asarray([labels[i] for i in chosen])},
        task_seed=task_seed,
    )
