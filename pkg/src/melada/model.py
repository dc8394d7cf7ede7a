"""Feature extractor, classifier and domain-shift controller.

Parameter groups:

* ``theta`` - two-layer LSTM extractor. Per layer ``l`` and gate ``k`` in
  (i, f, g, o): ``lstm{l}.W_k`` of shape (in_dim + hidden, hidden) and
  ``lstm{l}.b_k`` of shape (hidden,).
* ``phi`` - classifier ``fc1`` (hidden -> clf_hidden, ReLU) and ``fc2``
  (clf_hidden -> n_classes).
* ``omega`` - controller map g: ``g1`` (hidden -> ctrl_hidden, tanh) and
  ``g2`` (ctrl_hidden -> latent).
* ``tau`` - shared anchor in the latent space, shape (latent,).

MLDA checkpoint layout (little-endian)::

    b"MLDA" | u32 version=1 | 7 x u32 dims
        (input_dim, hidden, n_layers, clf_hidden, n_classes, ctrl_hidden, latent)
    then every array of theta, phi, omega, tau in ``param_names`` order as f64
"""
from __future__ import annotations

import copy
import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import SplitMix64

GATES = ("i", "f", "g", "o")
CKPT_MAGIC = b"MLDA"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 310
    hidden: int = 256
    n_layers: int = 2
    clf_hidden: int = 100
    n_classes: int = 3
    ctrl_hidden: int = 128
    latent: int = 64

    def dims(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass
class ModelParams:
    config: ModelConfig
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    omega: dict[str, np.ndarray]
    tau: np.ndarray
    frozen: bool = False

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def groups(self) -> dict[str, dict[str, np.ndarray]]:
        return {"theta": self.theta, "phi": self.phi, "omega": self.omega, "tau": {"tau": self.tau}}

    def digest(self, *groups: str) -> str:
        """SHA-256 over the raw bytes of the named groups (all by default)."""
        h = hashlib.sha256()
        for gname, arrays in self.groups().items():
            if groups and gname not in groups:
                continue
            for k in sorted(arrays):
                h.update(k.encode())
                h.update(np.ascontiguousarray(arrays[k]).tobytes())
        return h.hexdigest()


def param_names(cfg: ModelConfig) -> dict[str, list[str]]:
    theta = [f"lstm{l}.{p}_{k}" for l in range(cfg.n_layers) for p in ("W", "b") for k in GATES]
    return {
        "theta": theta,
        "phi": ["fc1.W", "fc1.b", "fc2.W", "fc2.b"],
        "omega": ["g1.W", "g1.b", "g2.W", "g2.b"],
    }


def _shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for l in range(cfg.n_layers):
        in_dim = cfg.input_dim if l == 0 else cfg.hidden
        for k in GATES:
            shapes[f"lstm{l}.W_{k}"] = (in_dim + cfg.hidden, cfg.hidden)
            shapes[f"lstm{l}.b_{k}"] = (cfg.hidden,)
    shapes.update(
        {
            "fc1.W": (cfg.hidden, cfg.clf_hidden),
            "fc1.b": (cfg.clf_hidden,),
            "fc2.W": (cfg.clf_hidden, cfg.n_classes),
            "fc2.b": (cfg.n_classes,),
            "g1.W": (cfg.hidden, cfg.ctrl_hidden),
            "g1.b": (cfg.ctrl_hidden,),
            "g2.W": (cfg.ctrl_hidden, cfg.latent),
            "g2.b": (cfg.latent,),
        }
    )
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """LSTM weights ~ U(-1/sqrt(hidden), 1/sqrt(hidden)) with forget bias 1.0;
    affine layers ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); tau = 0."""
    rng = SplitMix64(seed)
    shapes = _shapes(cfg)
    names = param_names(cfg)

    def uniform(shape, k):
        return (2.0 * rng.uniform(int(np.prod(shape))) - 1.0).reshape(shape) * k

    theta = {}
    k_lstm = 1.0 / np.sqrt(cfg.hidden)
    for n in names["theta"]:
        theta[n] = uniform(shapes[n], k_lstm)
        if n.endswith(".b_f"):
            theta[n] = np.ones(shapes[n])
    phi, omega = {}, {}
    for group, out in (("phi", phi), ("omega", omega)):
        for n in names[group]:
            fan_in = shapes[n.replace(".b", ".W")][0]
            out[n] = uniform(shapes[n], 1.0 / np.sqrt(fan_in))
    return ModelParams(cfg, theta, phi, omega, np.zeros(cfg.latent))


def lift(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Var]:
    return {k: ad.leaf(v, name=k, requires_grad=requires_grad) for k, v in arrays.items()}


def _as_var(p) -> Var:
    return p if isinstance(p, Var) else ad.const(p)


# -- extractor ----------------------------------------------------------------


def _lstm_layer(xs: Sequence, theta: Mapping, layer: int, in_dim: int, hidden: int) -> list[Var]:
    # gates fused into one (in_dim + hidden, 4 * hidden) matmul per step
    w = ad.concat([_as_var(theta[f"lstm{layer}.W_{k}"]) for k in GATES], axis=1)
    b = ad.concat([_as_var(theta[f"lstm{layer}.b_{k}"]) for k in GATES], axis=0)
    wx, wh = w[:in_dim], w[in_dim:]
    sl = [(slice(None), slice(j * hidden, (j + 1) * hidden)) for j in range(4)]
    h = c = None
    out = []
    for x_t in xs:
        z = ad.matmul(x_t, wx) + b
        if h is not None:
            z = z + ad.matmul(h, wh)
        i, g, o = ad.sigmoid(z[sl[0]]), ad.tanh(z[sl[2]]), ad.sigmoid(z[sl[3]])
        c = i * g if c is None else ad.sigmoid(z[sl[1]]) * c + i * g
        h = o * ad.tanh(c)
        out.append(h)
    return out


def extract(x, theta: Mapping, cfg: ModelConfig | None = None) -> Var:
    """Final hidden state of the top LSTM layer for a (B, T, D) batch."""
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, Var) else x
    if x.ndim != 3:
        raise ValueError(f"expected (batch, time, features), got shape {x.shape}")
    w0 = theta["lstm0.W_i"]
    hidden = w0.shape[1]
    in_dim = w0.shape[0] - hidden
    if x.shape[2] != in_dim:
        raise ValueError(f"input feature dim {x.shape[2]} does not match extractor input {in_dim}")
    n_layers = 1 + max(int(k[4 : k.index(".")]) for k in theta if k.startswith("lstm"))
    if x.shape[0] == 0:
        return ad.const(np.zeros((0, hidden)))
    xs = [x[:, t, :] for t in range(x.shape[1])]
    dim = in_dim
    for layer in range(n_layers):
        xs = _lstm_layer(xs, theta, layer, dim, hidden)
        dim = hidden
    return xs[-1]


# -- classifier -------------------------------------------------------------


def classify(features, phi: Mapping) -> Var:
    features = _as_var(features)
    w1 = _as_var(phi["fc1.W"])
    if features.ndim != 2 or features.shape[1] != w1.shape[0]:
        raise ValueError(f"classifier expects (B, {w1.shape[0]}) features, got {features.shape}")
    hid = ad.relu(ad.matmul(features, w1) + phi["fc1.b"])
    return ad.matmul(hid, _as_var(phi["fc2.W"])) + phi["fc2.b"]


def per_sample_cross_entropy(logits, labels) -> Var:
    logits = _as_var(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    onehot = np.eye(n_classes)[labels]
    logp = logits - ad.logsumexp(logits, axis=1)
    return -ad.sum(logp * onehot, axis=1)


def cross_entropy(logits, labels) -> Var:
    """Mean softmax cross-entropy (natural log)."""
    return ad.mean(per_sample_cross_entropy(logits, labels))


# -- controller -------------------------------------------------------------


def controller_map(features, omega: Mapping | None) -> Var:
    """The inner map g. ``omega=None`` means g is the identity."""
    features = _as_var(features)
    if omega is None:
        return features
    hid = ad.tanh(ad.matmul(features, _as_var(omega["g1.W"])) + omega["g1.b"])
    return ad.matmul(hid, _as_var(omega["g2.W"])) + omega["g2.b"]


def controller_loss(domain_features: Sequence, omega: Mapping | None, tau, use_grl: bool = True) -> Var:
    """Sum over domains of || mean_rows GRL(g(GRL(F))) - tau ||_2.

    Descending this loss moves tau and the extractor toward smaller
    discrepancy while g, seen through one reversal, ascends it.
    """
    if not domain_features:
        raise ValueError("controller_loss needs at least one domain batch")
    tau = _as_var(tau)
    total = None
    for i, f in enumerate(domain_features):
        f = _as_var(f)
        if f.shape[0] == 0:
            raise ValueError(f"domain batch {i} is empty")
        u = ad.grl(f) if use_grl else f
        v = controller_map(u, omega)
        if use_grl:
            v = ad.grl(v)
        term = ad.norm(ad.mean(v, axis=0) - tau)
        total = term if total is None else total + term
    return total


def mmnd_estimate(feats_a, feats_b, omega: Mapping | None = None) -> float:
    """|| mean g(a) - mean g(b) ||_2 for the current g; a lower bound on the
    maximum over all maps."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mmnd_estimate needs two nonempty sets")
    with ad.no_record():
        ga = controller_map(a, omega).value.mean(axis=0)
        gb = controller_map(b, omega).value.mean(axis=0)
    return float(np.linalg.norm(ga - gb))


def barycenter_identity_check(means) -> tuple[float, float]:
    """(sum_{i<j} ||m_i - m_j||^2, K * sum_i ||m_i - mean||^2)."""
    m = np.asarray(means, dtype=np.float64)
    k = len(m)
    if k < 2:
        raise ValueError("need at least two means")
    diff = m[:, None, :] - m[None, :, :]
    lhs = float(np.sum(diff * diff) / 2.0)
    centred = m - m.mean(axis=0)
    rhs = float(k * np.sum(centred * centred))
    return lhs, rhs


# -- convenience --------------------------------------------------------------


def logits_for(params: ModelParams, x, theta: Mapping | None = None) -> np.ndarray:
    with ad.no_record():
        return classify(extract(x, theta if theta is not None else params.theta), params.phi).value


def predict(params: ModelParams, x, theta: Mapping | None = None) -> np.ndarray:
    """Class labels by argmax of the logits (ties go to the lowest index)."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(logits_for(params, x, theta), axis=1)


# -- checkpoints --------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    cfg = params.config
    names = param_names(cfg)
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<7I", *cfg.dims())]
    for group in ("theta", "phi", "omega"):
        arrays = getattr(params, group)
        for n in names[group]:
            parts.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(params.tau, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}, expected {CKPT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    cfg = ModelConfig(*struct.unpack_from("<7I", blob, 8))
    shapes = _shapes(cfg)
    pos = 8 + 28
    groups: dict[str, dict[str, np.ndarray]] = {}
    for group, names in param_names(cfg).items():
        groups[group] = {}
        for n in names:
            size = int(np.prod(shapes[n]))
            if pos + 8 * size > len(blob):
                raise ValueError(f"truncated checkpoint while reading {n}")
            groups[group][n] = np.frombuffer(blob, "<f8", size, pos).reshape(shapes[n]).astype(np.float64)
            pos += 8 * size
    if pos + 8 * cfg.latent != len(blob):
        raise ValueError("checkpoint size does not match its header")
    tau = np.frombuffer(blob, "<f8", cfg.latent, pos).astype(np.float64)
    return ModelParams(cfg, groups["theta"], groups["phi"], groups["omega"], tau)
