"""Learnable networks: feature map, initialization, synthetic-gradient MLP,
cosine classifier head, and the toy linear predictor.

A MetaModel is a named bag of Tensors plus static geometry. The synthetic
gradient network consumes predictions only (a three-layer ReLU MLP whose
hidden width is eight times the prediction dimension); its final layer is
zero-initialized so that, at the start of meta-training, inner steps are
no-ops and unrolled runs coincide with the no-adaptation baseline.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

COSINE_EPS = 1e-12


class MetaModel:
    """Meta-parameters: feature map, init net, synthetic-gradient net, prior."""

    def __init__(self, mode: str, k: int, d_x: int, d_f: int, params: dict,
                 train_f: bool = False):
        if mode not in ("toy", "fewshot"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.k = k
        self.d_x = d_x
        self.d_f = d_f
        self.head_dim = 1 if mode == "toy" else k
        self.hidden = 8 * self.head_dim
        self.train_f = bool(train_f)
        self.params = params
        if "classifier_scale" in params and params["classifier_scale"].data <= 0:
            raise ValueError("classifier_scale must be positive")

    def trainable(self) -> dict:
        return {name: t for name, t in self.params.items() if t.requires_grad}

    def theta_shape(self):
        return (1,) if self.mode == "toy" else (self.k, self.d_f)

    def clone_data(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_data(self, snapshot: dict) -> None:
        for name, arr in snapshot.items():
            self.params[name].data = np.array(arr, dtype=np.float64)


def _he_uniform(rng, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _xi_params(rng, p: int, hidden: int) -> dict:
    return {
        "xi_w1": dc.param(_he_uniform(rng, p, (p, hidden))),
        "xi_b1": dc.param(np.zeros(hidden)),
        "xi_w2": dc.param(_he_uniform(rng, hidden, (hidden, hidden))),
        "xi_b2": dc.param(np.zeros(hidden)),
        "xi_w3": dc.param(np.zeros((hidden, p))),  # zero: first inner step is a no-op
        "xi_b3": dc.param(np.zeros(p)),
    }


def build_toy_model(seed: int = 0) -> MetaModel:
    rng = np.random.Generator(np.random.Philox(key=seed))
    params = _xi_params(rng, p=1, hidden=8)
    params["lambda_global"] = dc.param(np.zeros(1))
    params["psi_mean"] = dc.param(np.zeros(1))
    params["psi_log_var"] = dc.param(np.zeros(1))
    return MetaModel("toy", k=1, d_x=1, d_f=1, params=params)


def build_fewshot_model(k: int, d_x: int, d_f: Optional[int] = None, seed: int = 0,
                        train_f: bool = False, identity_features: bool = False) -> MetaModel:
    d_f = d_x if d_f is None else d_f
    rng = np.random.Generator(np.random.Philox(key=seed ^ 0xF00D))
    params = _xi_params(rng, p=k, hidden=8 * k)
    # nonzero rows: the cosine head's geometry degenerates at zero weights
    lam = rng.normal(size=(k, d_f))
    lam /= np.linalg.norm(lam, axis=1, keepdims=True)
    params["lambda_global"] = dc.param(lam)
    params["lambda_scale"] = dc.param(np.ones(d_f))
    params["psi_mean"] = dc.param(np.zeros(k * d_f))
    params["psi_log_var"] = dc.param(np.zeros(k * d_f))
    params["classifier_scale"] = dc.param(10.0)
    if not identity_features:
        # frozen random map by default; orthonormal columns keep feature scale
        if d_f <= d_x:
            q_mat, _ = np.linalg.qr(rng.normal(size=(d_x, d_x)))
            f_w = q_mat[:, :d_f]
        else:
            f_w = rng.normal(size=(d_x, d_f)) / np.sqrt(d_x)
        params["f_weight"] = Tensor(f_w, requires_grad=train_f)
    model = MetaModel("fewshot", k=k, d_x=d_x, d_f=d_f, params=params, train_f=train_f)
    return model


# -- feature map -----------------------------------------------------------


def apply_features(model: MetaModel, inputs: np.ndarray) -> Tensor:
    """Map raw inputs to feature space (identity when no map is configured)."""
    x = dc.constant(inputs)
    if "f_weight" not in model.params:
        return x
    return dc.matmul(x, model.params["f_weight"])


# -- initialization --------------------------------------------------------


def init_theta0_global(model: MetaModel) -> Tensor:
    """Data-independent start: the learnable global initialization itself."""
    return model.params["lambda_global"]


def init_theta0_proto(model: MetaModel, support_feats: Tensor, support_labels) -> Tensor:
    """Per-class feature means, scaled per dimension by a learnable vector."""
    labels = np.asarray(support_labels, dtype=np.int64)
    if support_feats.ndim != 2 or support_feats.shape[0] == 0:
        raise ValueError("prototype initialization requires a non-empty support set")
    rows = []
    for c in range(model.k):
        idx = np.nonzero(labels == c)[0]
        if idx.size == 0:
            raise ValueError(f"support set is missing class {c}")
        rows.append(dc.tmean(dc.index_select(support_feats, 0, idx), axis=0, keepdims=True))
    proto = dc.concat(rows, axis=0)
    return proto * model.params["lambda_scale"]


# -- synthetic gradient network ---------------------------------------------


def synth_grad(model: MetaModel, y_hat: Tensor) -> Tensor:
    """Three-layer ReLU MLP mapping predictions to a gradient surrogate."""
    if y_hat.ndim != 2 or y_hat.shape[1] != model.head_dim:
        raise dc.ShapeError("synth_grad", y_hat.shape, (None, model.head_dim))
    p = model.params
    h = dc.relu(dc.matmul(y_hat, p["xi_w1"]) + p["xi_b1"])
    h = dc.relu(dc.matmul(h, p["xi_w2"]) + p["xi_b2"])
    return dc.matmul(h, p["xi_w3"]) + p["xi_b3"]


# -- prediction heads --------------------------------------------------------


def cosine_parts(features: Tensor, theta: Tensor, scale: Tensor):
    """Common sub-expressions of the cosine head.

    Returns (logits, raw_dots, inv_denom, feat_norms, theta_norms) so the
    closed-form update direction can reuse them.
    """
    if features.ndim != 2 or theta.ndim != 2 or features.shape[1] != theta.shape[1]:
        raise dc.ShapeError("cosine_predict", features.shape, theta.shape)
    a = dc.sqrt(dc.tsum(dc.square(features), axis=1, keepdims=True))  # (n, 1)
    b = dc.sqrt(dc.tsum(dc.square(theta), axis=1, keepdims=True))  # (k, 1)
    dots = dc.matmul(features, dc.transpose(theta))  # (n, k)
    inv_denom = 1.0 / (dc.matmul(a, dc.transpose(b)) + COSINE_EPS)  # (n, k)
    logits = scale * (dots * inv_denom)
    return logits, dots, inv_denom, a, b


def cosine_predict(model: MetaModel, features: Tensor, theta: Tensor) -> Tensor:
    """Scaled cosine-similarity logits between features and class weights."""
    logits, *_ = cosine_parts(features, theta, model.params["classifier_scale"])
    return logits


def linear_predict_toy(theta: Tensor, x: Tensor) -> Tensor:
    """Toy head: predictions are slope times input."""
    return theta * x


# -- checkpoint format --------------------------------------------------------


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def checkpoint_payload(model: MetaModel, cfg_hash: str = "", step: int = 0) -> dict:
    return {
        "format_version": 1,
        "config_hash": cfg_hash,
        "step": int(step),
        "meta": {
            "mode": model.mode,
            "k": model.k,
            "d_x": model.d_x,
            "d_f": model.d_f,
            "train_f": model.train_f,
        },
        "params": {
            name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in sorted(model.params.items())
        },
    }


def model_from_payload(payload: dict) -> MetaModel:
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    meta = payload["meta"]
    params = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        requires = not (name == "f_weight" and not meta["train_f"])
        params[name] = Tensor(arr, requires_grad=requires)
    return MetaModel(
        meta["mode"], k=meta["k"], d_x=meta["d_x"], d_f=meta["d_f"],
        params=params, train_f=meta["train_f"],
    )
