import numpy as np
import pytest

from melada.adaptation import (
    AdaptConfig,
    accuracy,
    loso_evaluate,
    predict,
    run_fold,
    self_adapt,
    write_adaptation_curve,
    write_loso_results,
)
from melada.data import SynthSpec, gen_synthetic
from melada.model import ModelConfig, init_params
from melada.training import TrainConfig

MODEL = ModelConfig(input_dim=4, hidden=5, clf_hidden=4, ctrl_hidden=4, latent=3)
DATA = SynthSpec(n_domains=4, feat_dim=4, seq_len=4, samples_per_class=8, seed=2)
FAST = TrainConfig(max_iterations=6, freeze_threshold=3, batch_per_domain=8, n_valid_domains=1,
                   pretrain_max_iters=5)


@pytest.fixture(scope="module")
def domains():
    return gen_synthetic(DATA)


@pytest.fixture(scope="module")
def loso(domains):
    return loso_evaluate(domains, FAST, MODEL, AdaptConfig(steps=3, adapt_lr=0.05))


def test_zero_steps_leaves_theta(domains):
    p = init_params(MODEL, 0)
    theta, rep = self_adapt(p, domains[0].x, steps=0)
    assert len(rep.steps) == 1
    for k in p.theta:
        assert theta[k].tobytes() == p.theta[k].tobytes()


def test_report_length_and_frozen_groups(domains):
    p = init_params(MODEL, 1)
    before = {g: p.digest(g) for g in ("phi", "omega", "tau")}
    theta, rep = self_adapt(p, domains[1].x, steps=4, adapt_lr=0.1, labels=domains[1].y)
    assert [s for s, _, _ in rep.steps] == [0, 1, 2, 3, 4]
    assert all(a is not None for _, _, a in rep.steps)
    assert {g: p.digest(g) for g in before} == before
    assert any(theta[k].tobytes() != p.theta[k].tobytes() for k in theta)


def test_adaptation_lowers_controller_loss(domains):
    p = init_params(MODEL, 2)
    _, rep = self_adapt(p, domains[2].x, steps=10, adapt_lr=0.05)
    assert rep.steps[-1][1] < rep.steps[0][1]


def test_labels_never_influence_theta(domains):
    p = init_params(MODEL, 3)
    d = domains[0]
    shuffled = d.y[np.random.default_rng(0).permutation(len(d.y))]
    a, _ = self_adapt(p, d.x, 3, 0.1, labels=d.y)
    b, _ = self_adapt(p, d.x, 3, 0.1, labels=shuffled)
    c, _ = self_adapt(p, d.x, 3, 0.1)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes() == c[k].tobytes()


def test_empty_target_rejected():
    with pytest.raises(ValueError):
        self_adapt(init_params(MODEL, 0), np.zeros((0, 4, 4)))


def test_predict_properties(domains):
    p = init_params(MODEL, 4)
    x = domains[0].x[:5]
    dup = np.concatenate([x[:1], x[:1]])
    labels = predict(p, dup)
    assert labels[0] == labels[1]
    assert set(predict(p, x)) <= {0, 1, 2}
    assert predict(p, x).tobytes() == predict(p, x).tobytes()
    with pytest.raises(ValueError):
        predict(p, np.zeros((2, 4, 7)))


def test_accuracy():
    assert accuracy([0, 1, 2, 2], [0, 1, 1, 2]) == 0.75


def test_loso_report_aggregates(loso, domains):
    assert [s for s, _ in loso.per_subject] == [1, 2, 3, 4]
    accs = np.array([a for _, a in loso.per_subject])
    assert abs(loso.mean_accuracy - accs.mean()) <= 1e-12
    assert loso.std_deviation == pytest.approx(np.sqrt(np.mean((accs - accs.mean()) ** 2)), abs=1e-15)
    for fold in loso.folds:
        assert fold.subject_id not in fold.source_ids
        assert len(fold.report.steps) == 4


def test_loso_parallel_matches_serial(loso, domains):
    par = loso_evaluate(domains, FAST, MODEL, AdaptConfig(steps=3, adapt_lr=0.05), jobs=2)
    assert par.per_subject == loso.per_subject
    assert par.frozen_per_subject == loso.frozen_per_subject


def test_loso_needs_subjects(domains):
    with pytest.raises(ValueError):
        loso_evaluate(domains[:1], FAST, MODEL)


def test_run_fold_is_deterministic(domains):
    a = run_fold(domains, 2, FAST, MODEL, AdaptConfig(steps=2))
    b = run_fold(domains, 2, FAST, MODEL, AdaptConfig(steps=2))
    assert a.accuracy == b.accuracy and a.report.steps == b.report.steps


def test_csv_outputs(loso, tmp_path):
    write_loso_results(loso, tmp_path / "loso_results.csv")
    rows = (tmp_path / "loso_results.csv").read_text().splitlines()
    assert rows[0] == "subject,accuracy" and len(rows) == 5
    assert float(rows[1].split(",")[1]) == loso.per_subject[0][1]
    write_adaptation_curve(loso.folds[0].report, tmp_path / "adaptation_curve.csv")
    rows = (tmp_path / "adaptation_curve.csv").read_text().splitlines()
    assert rows[0] == "step,l_c,accuracy" and len(rows) == 5
