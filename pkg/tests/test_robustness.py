import numpy as np
import pytest

from advbench.attacks import AttackConfig
from advbench.errors import EmptySelectionError
from advbench.robustness import ThreatModelSpec, clean_subset, epsilon_sweep, evaluate_attack, robust_accuracy

from conftest import StubModel, randomized_model, synthetic_dataset, tiny_config


@pytest.fixture(scope="module")
def setup():
    ds = synthetic_dataset(n=60, d=12, seed=2)
    ds.labels[:] = ds.labels % 4
    model = randomized_model(tiny_config("kan", hidden=(8,)), seed=5)
    # relabel so the model is right on about half the samples
    pred = model.predict(ds.images)
    ds.labels[::2] = pred[::2]
    return model, ds


def test_clean_subset_is_exactly_the_correct_indices(setup):
    model, ds = setup
    clean, subset = clean_subset(model, ds)
    mask = model.predict(ds.images) == ds.labels
    assert subset.indices.tolist() == np.flatnonzero(mask).tolist()
    assert clean == pytest.approx(100 * mask.mean())
    _, capped = clean_subset(model, ds, max_samples=5, seed=1)
    assert len(capped) == 5 and set(capped.indices) <= set(subset.indices)


@pytest.mark.parametrize("method", ["fgsm", "pgd", "cw", "mim"])
def test_zero_budget_gives_full_robust_accuracy(setup, method):
    model, ds = setup
    rec = robust_accuracy(model, ds, AttackConfig(method, epsilon=0.0, steps=3))
    assert rec.robust_acc == 100.0 and rec.attack == method and rec.n_evaluated > 0


def test_robust_accuracy_counts_surviving_samples(setup):
    model, ds = setup
    cell = evaluate_attack(model, ds, AttackConfig("pgd", epsilon=0.3, steps=10, alpha=0.05), seed=3)
    survivors = model.predict(cell.x_adv) == ds.labels[cell.subset.indices]
    assert cell.record.robust_acc == pytest.approx(100 * survivors.mean())
    assert cell.record.robust_acc < 100
    assert cell.trace[0].shape == (11,)
    assert cell.constraints["ball_violations"] == 0


def test_fgsm_cell_has_no_trace(setup):
    model, ds = setup
    assert evaluate_attack(model, ds, AttackConfig("fgsm")).trace is None


def test_epsilon_sweep_fixes_the_subset_per_model(setup):
    model, ds = setup
    cells = epsilon_sweep([model], ds, [0.0, 0.05, 0.2], max_samples=10)
    assert [c.record.epsilon for c in cells] == [0.0, 0.05, 0.2]
    assert len({c.subset.content_hash() for c in cells}) == 1
    assert cells[0].record.robust_acc == 100.0
    with pytest.raises(ValueError):
        epsilon_sweep([model], ds, [])


def test_model_with_no_correct_samples_raises():
    ds = synthetic_dataset(n=5, d=12)
    ds.images[:, 0] = np.arange(5) / 1000
    wrong = StubModel("MLP_small", (ds.labels + 1) % 10)
    with pytest.raises(EmptySelectionError):
        clean_subset(wrong, ds)


def test_threat_model_spec():
    spec = ThreatModelSpec(32 / 255)
    assert spec.norm == "linf" and spec.mode == "untargeted"
    with pytest.raises(ValueError):
        ThreatModelSpec(-0.1)
