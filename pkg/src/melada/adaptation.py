"""Test-time self-adaptation and the leave-one-subject-out harness."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import Domain
from .model import ModelConfig, ModelParams, classify, controller_loss, extract, lift, predict
from .training import PretrainResult, TrainConfig, train_loop

log = logging.getLogger(__name__)

__all__ = [
    "AdaptConfig",
    "AdaptationReport",
    "FoldResult",
    "LosoReport",
    "self_adapt",
    "predict",
    "accuracy",
    "run_fold",
    "loso_evaluate",
    "write_adaptation_curve",
    "write_loso_results",
]


@dataclass
class AdaptConfig:
    steps: int = 10
    adapt_lr: float = 1e-3


@dataclass
class AdaptationReport:
    """One entry per step: (step, L_C, accuracy or None). Step 0 is before any update."""

    steps: list[tuple[int, float, float | None]]
    final_accuracy: float | None = None


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.asarray(pred) == labels))


def self_adapt(
    params: ModelParams,
    target_x,
    steps: int = 10,
    adapt_lr: float = 1e-3,
    labels=None,
    use_grl: bool = True,
) -> tuple[dict[str, np.ndarray], AdaptationReport]:
    """Fine-tune the extractor on unlabeled target data by descending the
    single-domain controller loss; classifier, g and tau stay fixed.

    Labels, when given, are only used to score each step.
    """
    target_x = np.asarray(target_x, dtype=np.float64)
    if len(target_x) == 0:
        raise ValueError("self-adaptation needs target samples")
    if steps < 0 or adapt_lr < 0:
        raise ValueError("steps and adapt_lr must be >= 0")
    theta = {k: v.copy() for k, v in params.theta.items()}
    keys = list(theta)
    rows = []
    for step in range(steps + 1):
        th = lift(theta)
        feats = extract(target_x, th)
        l_c = controller_loss([feats], params.omega, params.tau, use_grl)
        acc = None
        if labels is not None:
            with ad.no_record():
                logits = classify(ad.const(feats.value), params.phi).value
            acc = accuracy(np.argmax(logits, axis=1), labels)
        rows.append((step, l_c.item(), acc))
        if step == steps:
            break
        grads = ad.grad(l_c, [th[k] for k in keys])
        theta = {k: theta[k] - adapt_lr * g.value for k, g in zip(keys, grads)}
    return theta, AdaptationReport(rows, rows[-1][2])


@dataclass
class FoldResult:
    subject_id: int
    accuracy: float
    frozen_accuracy: float
    report: AdaptationReport
    pretrain: PretrainResult
    source_ids: tuple[int, ...]


@dataclass
class LosoReport:
    per_subject: list[tuple[int, float]]
    mean_accuracy: float
    std_deviation: float
    frozen_per_subject: list[tuple[int, float]]
    folds: list[FoldResult]

    @property
    def frozen_mean_accuracy(self) -> float:
        return float(np.mean([a for _, a in self.frozen_per_subject]))


def run_fold(
    domains: Sequence[Domain],
    target_id: int,
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    adapt_cfg: AdaptConfig | None = None,
) -> FoldResult:
    """Train on every domain except ``target_id``, then score the target
    with and without self-adaptation."""
    adapt_cfg = adapt_cfg or AdaptConfig()
    target = next(d for d in domains if d.subject_id == target_id)
    sources = [d for d in domains if d.subject_id != target_id]
    assert all(d.subject_id != target_id for d in sources), "target leaked into training"
    if model_cfg is None:
        model_cfg = ModelConfig(input_dim=target.feat_dim)
    result = train_loop(sources, train_cfg, model_cfg)
    params = result.params
    frozen = accuracy(predict(params, target.x), target.y)
    theta, report = self_adapt(
        params, target.x, adapt_cfg.steps, adapt_cfg.adapt_lr, labels=target.y,
        use_grl=train_cfg.use_grl,
    )
    adapted = accuracy(predict(params, target.x, theta), target.y)
    report.final_accuracy = adapted
    log.info(
        "fold %d: frozen %.4f adapted %.4f (L_C %.4f -> %.4f)",
        target_id, frozen, adapted, report.steps[0][1], report.steps[-1][1],
    )
    return FoldResult(
        target_id, adapted, frozen, report, result.pretrain, tuple(d.subject_id for d in sources)
    )


def _fold_job(args):
    return run_fold(*args)


def loso_evaluate(
    domains: Sequence[Domain],
    train_cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    adapt_cfg: AdaptConfig | None = None,
    jobs: int = 1,
) -> LosoReport:
    """One fold per subject; results are ordered by subject id whatever ``jobs`` is."""
    if len(domains) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, got {len(domains)}")
    ids = sorted(d.subject_id for d in domains)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    # each fold trains on len(domains) - 1 sources
    if train_cfg.n_valid_domains >= len(domains) - 1:
        train_cfg = replace(train_cfg, n_valid_domains=max(1, len(domains) - 2))
        if len(domains) - 1 < 2:
            raise ValueError("LOSO needs at least 3 subjects so each fold has 2 source domains")
    tasks = [(list(domains), i, train_cfg, model_cfg, adapt_cfg) for i in ids]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(_fold_job, tasks))
    else:
        folds = [_fold_job(t) for t in tasks]
    folds.sort(key=lambda f: f.subject_id)
    accs = np.array([f.accuracy for f in folds])
    return LosoReport(
        per_subject=[(f.subject_id, f.accuracy) for f in folds],
        mean_accuracy=float(accs.mean()),
        std_deviation=float(accs.std()),
        frozen_per_subject=[(f.subject_id, f.frozen_accuracy) for f in folds],
        folds=folds,
    )


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_adaptation_curve(report: AdaptationReport, path, subject_id: int | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["subject"] if subject_id is not None else []) + ["step", "l_c", "accuracy"])
        for step, l_c, acc in report.steps:
            prefix = [subject_id] if subject_id is not None else []
            w.writerow(prefix + [step, _fmt(l_c), _fmt(acc)])


def write_loso_results(report: LosoReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "accuracy"])
        for sid, acc in report.per_subject:
            w.writerow([sid, _fmt(acc)])
