"""Episodic meta-training of the controller and the classification network.

Each iteration of :func:`train_loop` draws a random meta-train / meta-valid
split of the source domains, runs :func:`melada_step` (extractor and
classifier) and then :func:`controller_step` (controller map g and anchor
tau). Both steps build the inner update ``theta' = theta - alpha * dL_C/dtheta``
on a recorded graph so that gradients flow through it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Var, adam_step
from .data import BatchSampler, Domain, SplitMix64
from .model import (
    ModelConfig,
    ModelParams,
    classify,
    controller_loss,
    cross_entropy,
    extract,
    init_params,
    lift,
    per_sample_cross_entropy,
)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    lam: float = 0.1
    inner_alpha: float = 1e-3
    n_valid_domains: int = 3
    freeze_threshold: int = 40
    max_iterations: int = 200
    batch_per_domain: int = 64
    pretrain_acc_gate: float = 0.85
    pretrain_max_iters: int = 2000
    seed: int = 0
    second_order: bool = True
    use_grl: bool = True
    net_steps_per_ctrl: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        for name in ("lr", "lam", "batch_per_domain", "max_iterations", "net_steps_per_ctrl"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or self.inner_alpha < 0:
            raise ValueError("weight_decay and inner_alpha must be >= 0")
        if self.freeze_threshold > self.max_iterations:
            raise ValueError("freeze_threshold must not exceed max_iterations")


@dataclass(frozen=True)
class EpisodeSplit:
    train_domains: tuple[int, ...]
    valid_domains: tuple[int, ...]


def partition_episode(domain_ids: Sequence[int], n_valid: int, rng: SplitMix64) -> EpisodeSplit:
    ids = sorted(domain_ids)
    if not 1 <= n_valid < len(ids):
        raise ValueError(f"n_valid must be in [1, {len(ids) - 1}], got {n_valid}")
    perm = rng.permutation(len(ids))
    valid = sorted(ids[i] for i in perm[:n_valid])
    train = sorted(ids[i] for i in perm[n_valid:])
    return EpisodeSplit(tuple(train), tuple(valid))


# -- building blocks ----------------------------------------------------------


def domain_features(xs: Sequence[np.ndarray], theta: Mapping) -> tuple[Var, list[Var]]:
    """Run the extractor once over all batches; return the stacked features and per-batch views."""
    sizes = [len(x) for x in xs]
    feats = extract(np.concatenate(xs), theta)
    bounds = np.cumsum([0] + sizes)
    return feats, [feats[bounds[i] : bounds[i + 1]] for i in range(len(xs))]


def inner_update(
    theta: Mapping[str, Var],
    train_xs: Sequence[np.ndarray],
    omega: Mapping | None,
    tau,
    alpha: float,
    record: bool = True,
    l_c: Var | None = None,
) -> tuple[dict[str, Var], Var]:
    """One plain gradient step on L_C for theta only.

    With ``record`` the step stays on the graph, so theta' is a
    differentiable function of theta, omega and tau.

    The step is built from the loss without reversal layers. Both
    reversals sit between theta and tau, so theta's gradient is the same
    either way, but a recorded backward through them would flip the sign
    of some second-order terms and theta' would no longer have true
    derivatives. ``l_c``, when given, must be such a plain loss.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if l_c is None:
        _, per_domain = domain_features(train_xs, theta)
        l_c = controller_loss(per_domain, omega, tau, use_grl=False)
    keys = list(theta)
    if not l_c.requires_grad:
        return dict(theta), l_c
    grads = ad.grad(l_c, [theta[k] for k in keys], record=record)
    return {k: theta[k] - alpha * g for k, g in zip(keys, grads)}, l_c


def meta_loss(valid_x, valid_y, theta: Mapping, theta_prime: Mapping, phi: Mapping) -> Var:
    """Sum over samples of tanh(loss under theta' - loss under theta)."""
    if len(valid_x) == 0:
        raise ValueError("meta_loss needs a nonempty validation batch")
    with ad.no_record():
        before = per_sample_cross_entropy(classify(extract(valid_x, theta), phi), valid_y).value
    after = per_sample_cross_entropy(classify(extract(valid_x, theta_prime), phi), valid_y)
    return ad.sum(ad.tanh(after - before))


def _concat(batches: Mapping[int, tuple[np.ndarray, np.ndarray]], ids) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.concatenate([batches[i][0] for i in ids]),
        np.concatenate([batches[i][1] for i in ids]),
    )


@dataclass
class TrainState:
    params: ModelParams
    cfg: TrainConfig
    net_opt: AdamState | None = None
    ctrl_opt: AdamState | None = None
    g_opt: AdamState | None = None

    def _adam(self, arrays: list[np.ndarray], grads: list[np.ndarray], state: AdamState | None):
        if state is None:
            state = AdamState.zeros_like(arrays)
        c = self.cfg
        return adam_step(arrays, grads, state, c.lr, c.beta1, c.beta2, c.eps, c.weight_decay)


def melada_step(
    state: TrainState,
    split: EpisodeSplit,
    batches: Mapping[int, tuple[np.ndarray, np.ndarray]],
    iteration: int,
) -> dict[str, float]:
    """Update theta and phi on lam*L_C(train) + CE_train(theta) + CE_valid(theta')."""
    if iteration < 1:
        raise ValueError("iteration counts from 1")
    cfg, p = state.cfg, state.params
    theta, phi = lift(p.theta), lift(p.phi)
    omega = lift(p.omega, requires_grad=False)
    tau = ad.const(p.tau)

    train_xs = [batches[i][0] for i in split.train_domains]
    feats, per_domain = domain_features(train_xs, theta)
    l_c = controller_loss(per_domain, omega, tau, cfg.use_grl)
    _, y_train = _concat(batches, split.train_domains)
    loss_train = cross_entropy(classify(feats, phi), y_train)

    plain = controller_loss(per_domain, omega, tau, use_grl=False) if cfg.use_grl else l_c
    theta_prime, _ = inner_update(
        theta, train_xs, omega, tau, cfg.inner_alpha, record=cfg.second_order, l_c=plain
    )
    x_valid, y_valid = _concat(batches, split.valid_domains)
    loss_valid = cross_entropy(classify(extract(x_valid, theta_prime), phi), y_valid)

    total = cfg.lam * l_c + loss_train + loss_valid
    tkeys, pkeys = list(theta), list(phi)
    grads = ad.grad(total, [theta[k] for k in tkeys] + [phi[k] for k in pkeys])
    arrays = [p.theta[k] for k in tkeys] + [p.phi[k] for k in pkeys]
    new, state.net_opt = state._adam(arrays, [g.value for g in grads], state.net_opt)
    for k, v in zip(tkeys + pkeys, new):
        (p.theta if k in p.theta else p.phi)[k] = v
    return {
        "l_c": l_c.item(),
        "loss_train": loss_train.item(),
        "loss_valid": loss_valid.item(),
        "total": total.item(),
    }


def controller_objective(
    params: ModelParams,
    cfg: TrainConfig,
    split: EpisodeSplit,
    batches: Mapping[int, tuple[np.ndarray, np.ndarray]],
) -> tuple[Var, Var, Var, dict[str, Var], Var]:
    """L_C(train) + lam * L_meta(valid) with omega and tau as fresh leaves.

    Returns (total, l_c, l_meta, omega leaves, tau leaf). Through the
    reversal layers g ascends L_C; L_meta reaches g and tau only through
    theta', so with ``second_order=False`` it contributes nothing to them.
    """
    theta = lift(params.theta)
    phi = lift(params.phi, requires_grad=False)
    omega, tau = lift(params.omega), ad.leaf(params.tau, name="tau")

    train_xs = [batches[i][0] for i in split.train_domains]
    _, per_domain = domain_features(train_xs, theta)
    l_c = controller_loss(per_domain, omega, tau, cfg.use_grl)
    plain = controller_loss(per_domain, omega, tau, use_grl=False) if cfg.use_grl else l_c
    theta_prime, _ = inner_update(
        theta, train_xs, omega, tau, cfg.inner_alpha, record=cfg.second_order, l_c=plain
    )
    x_valid, y_valid = _concat(batches, split.valid_domains)
    l_meta = meta_loss(x_valid, y_valid, theta, theta_prime, phi)
    return l_c + cfg.lam * l_meta, l_c, l_meta, omega, tau


def controller_step(
    state: TrainState,
    split: EpisodeSplit,
    batches: Mapping[int, tuple[np.ndarray, np.ndarray]],
    update_g: bool = True,
) -> dict[str, float]:
    """One Adam step on g (unless ``update_g`` is false) and tau."""
    p = state.params
    total, l_c, l_meta, omega, tau = controller_objective(p, state.cfg, split, batches)
    okeys = list(omega)
    grads = ad.grad(total, [omega[k] for k in okeys] + [tau])
    new, state.ctrl_opt = state._adam([p.tau], [grads[-1].value], state.ctrl_opt)
    p.tau = new[0]
    if update_g:
        new, state.g_opt = state._adam(
            [p.omega[k] for k in okeys], [g.value for g in grads[:-1]], state.g_opt
        )
        p.omega = dict(zip(okeys, new))
    return {"l_c": l_c.item(), "l_meta": l_meta.item(), "total": total.item()}


# -- pretraining and the main loop -------------------------------------------


@dataclass
class PretrainResult:
    iterations: int
    accuracy: float
    reached_gate: bool


def pretrain(
    params: ModelParams,
    domains: Sequence[Domain],
    cfg: TrainConfig,
    rng: SplitMix64,
) -> PretrainResult:
    """Supervised training of extractor + classifier until minibatch accuracy exceeds the gate.

    Accuracy is measured on the iteration's batch before its update, so
    data that is already classified well stops at iteration 1 untouched.
    """
    if not domains or all(len(d) == 0 for d in domains):
        raise ValueError("pretraining needs labeled source data")
    sampler = BatchSampler({d.subject_id: d for d in domains}, cfg.batch_per_domain, rng)
    ids = [d.subject_id for d in domains if len(d)]
    opt = None
    acc = 0.0
    for it in range(1, cfg.pretrain_max_iters + 1):
        batch = [sampler.draw(i) for i in ids]
        x = np.concatenate([b[0] for b in batch])
        y = np.concatenate([b[1] for b in batch])
        theta, phi = lift(params.theta), lift(params.phi)
        logits = classify(extract(x, theta), phi)
        acc = float(np.mean(np.argmax(logits.value, axis=1) == y))
        if acc > cfg.pretrain_acc_gate:
            log.info("pretrain gate reached at iteration %d (batch accuracy %.3f)", it, acc)
            return PretrainResult(it, acc, True)
        loss = cross_entropy(logits, y)
        keys = list(theta) + list(phi)
        leaves = [theta[k] for k in theta] + [phi[k] for k in phi]
        grads = ad.grad(loss, leaves)
        arrays = [params.theta[k] for k in theta] + [params.phi[k] for k in phi]
        if opt is None:
            opt = AdamState.zeros_like(arrays)
        new, opt = adam_step(arrays, [g.value for g in grads], opt, cfg.lr, cfg.beta1, cfg.beta2,
                             cfg.eps, cfg.weight_decay)
        for k, v in zip(keys, new):
            (params.theta if k in params.theta else params.phi)[k] = v
    log.warning(
        "pretrain stopped at the %d-iteration cap; batch accuracy %.3f never exceeded %.2f",
        cfg.pretrain_max_iters, acc, cfg.pretrain_acc_gate,
    )
    return PretrainResult(cfg.pretrain_max_iters, acc, False)


HISTORY_FIELDS = ("iteration", "l_c", "loss_train", "loss_valid", "l_meta")


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict[str, float]]
    pretrain: PretrainResult
    g_digests: list[str] = field(default_factory=list)


def train_loop(
    domains: Sequence[Domain],
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    params: ModelParams | None = None,
    skip_pretrain: bool = False,
) -> TrainResult:
    """Pretrain, then alternate network and controller updates for max_iterations."""
    cfg.validate()
    if len(domains) < 2:
        raise ValueError(f"training needs at least 2 source domains, got {len(domains)}")
    if cfg.n_valid_domains >= len(domains):
        raise ValueError(
            f"n_valid_domains={cfg.n_valid_domains} leaves no meta-train domain among {len(domains)}"
        )
    if params is None:
        if model_cfg is None:
            model_cfg = ModelConfig(input_dim=domains[0].feat_dim)
        params = init_params(model_cfg, cfg.seed)
    rng = SplitMix64(cfg.seed ^ 0x5EED)
    if skip_pretrain:
        pre = PretrainResult(0, float("nan"), False)
    else:
        pre = pretrain(params, domains, cfg, rng)

    state = TrainState(params, cfg)
    by_id = {d.subject_id: d for d in domains}
    sampler = BatchSampler(by_id, cfg.batch_per_domain, rng)
    history, digests = [], []
    for it in range(1, cfg.max_iterations + 1):
        split = partition_episode(list(by_id), cfg.n_valid_domains, rng)
        batches = {i: sampler.draw(i) for i in sorted(by_id)}
        for _ in range(cfg.net_steps_per_ctrl):
            net = melada_step(state, split, batches, it)
        ctrl = controller_step(state, split, batches, update_g=it <= cfg.freeze_threshold)
        params.frozen = it >= cfg.freeze_threshold
        history.append(
            {
                "iteration": it,
                "l_c": net["l_c"],
                "loss_train": net["loss_train"],
                "loss_valid": net["loss_valid"],
                "l_meta": ctrl["l_meta"],
            }
        )
        digests.append(params.digest("omega"))
        log.debug("iter %d %s", it, history[-1])
    return TrainResult(params, history, pre, digests)
