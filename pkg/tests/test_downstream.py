import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ecg_jepa.downstream import (
    FinetuneConfig,
    ProbeConfig,
    binary_auc,
    evaluate,
    extract_representations,
    feature_regression,
    finetune,
    fit_ridge,
    lead_positions,
    lowshot_splits,
    mean_std,
    midranks,
    pooled_representation,
    train_linear_probe,
    train_test_split,
)
from ecg_jepa.ecg import EcgRecord
from ecg_jepa.model import JepaModel, ModelConfig
from ecg_jepa.patching import patchify

from helpers import pair_count_auc

SMALL = ModelConfig(
    encoder_layers=1, encoder_heads=2, encoder_dim=8,
    predictor_layers=1, predictor_heads=2, predictor_dim=8,
    patch_len=25, drop_path_rate=0.1, use_cropa=True,
)
LEADS8 = ("I", "II", "V1", "V2", "V3", "V4", "V5", "V6")


def make_records(n, seed=0, samples=100):
    rng = np.random.default_rng(seed)
    return [EcgRecord(LEADS8, 250.0, rng.standard_normal((8, samples))) for _ in range(n)]


# --------------------------------------------------------------------------
# pooling and extraction


def test_pooling_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(pooled_representation(np.tile(v, (2, 3, 1))), v)
    grid = np.zeros((1, 2, 3))
    grid[0, 1, 0] = 2.0
    assert np.array_equal(pooled_representation(grid), [1.0, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pooling_commutes_with_token_permutation(seed):
    rng = np.random.default_rng(seed)
    grid = rng.standard_normal((3, 5, 4))
    flat = grid.reshape(15, 4)[rng.permutation(15)].reshape(3, 5, 4)
    np.testing.assert_allclose(pooled_representation(flat), pooled_representation(grid), atol=1e-12)
    t = torch.as_tensor(grid)
    np.testing.assert_allclose(pooled_representation(t).numpy(), pooled_representation(grid), atol=1e-12)


def test_lead_positions_follow_canonical_order():
    assert lead_positions(["II"]).tolist() == [1]
    assert lead_positions(["II", "V1"]).tolist() == [1, 2]
    assert lead_positions(list(LEADS8)).tolist() == list(range(8))


def test_full_subset_equals_standard_pipeline():
    model = JepaModel(SMALL, seed=1)
    records = make_records(5)
    a = extract_representations(model, records)
    b = extract_representations(model, records, lead_subset=list(LEADS8))
    assert np.array_equal(a, b)
    assert a.shape == (5, 8) and a.dtype == np.float64


def test_extraction_matches_manual_encoder_call():
    model = JepaModel(SMALL, seed=1)
    records = make_records(3)
    feats = extract_representations(model, records, lead_subset=["II", "V1"], batch_size=2)
    model.student.eval()
    with torch.no_grad():
        for rec, row in zip(records, feats):
            grid = patchify(rec.select(["II", "V1"]), 25).patches
            x = torch.tensor(grid[None], dtype=torch.float32)
            reps = model.student(x, np.array([1, 2]), np.arange(4))
            np.testing.assert_allclose(row, reps.mean(dim=(1, 2))[0].double().numpy(), rtol=1e-6, atol=1e-7)


def test_extraction_runs_one_lead_and_ignores_batching():
    model = JepaModel(SMALL, seed=1)
    records = make_records(5)
    a = extract_representations(model, records, lead_subset=["II"], batch_size=5)
    b = extract_representations(model, records, lead_subset=["II"], batch_size=2)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)
    assert model.student.training is True


def test_extraction_rejects_unknown_lead():
    with pytest.raises(ValueError, match="aVF"):
        extract_representations(JepaModel(SMALL), make_records(1), lead_subset=["II", "aVF"])


# --------------------------------------------------------------------------
# metric oracle


def test_auc_spec_example():
    assert binary_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_midranks_with_ties():
    assert midranks([3.0, 1.0, 3.0, 2.0]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_auc_matches_pair_counting_exhaustively():
    # every label vector and every score pattern over a 3-level grid (ties included), n <= 6
    checked = 0
    for n in range(2, 7):
        levels = (0.0, 0.5, 1.0) if n <= 5 else (0.0, 1.0)
        for labels in itertools.product((0, 1), repeat=n):
            if 0 < sum(labels) < n:
                for scores in itertools.product(levels, repeat=n):
                    assert binary_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)
                    checked += 1
    assert checked > 10_000


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
    st.lists(st.floats(-5, 5, allow_nan=False), min_size=n, max_size=n))))
def test_auc_matches_pair_counting_random(case):
    labels, scores = case
    if 0 < sum(labels) < len(labels):
        assert binary_auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_invariant_to_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.standard_normal(30), 1)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    a = binary_auc(scores, labels)
    assert binary_auc(np.exp(3 * scores) + 7, labels) == a
    assert binary_auc(np.arctan(scores), labels) == a


def test_auc_perfect_and_null():
    assert binary_auc([0.1, 0.2, 0.9, 0.95], [0, 0, 1, 1]) == 1.0
    rng = np.random.default_rng(0)
    assert binary_auc(rng.random(20_000), rng.integers(0, 2, 20_000)) == pytest.approx(0.5, abs=0.02)


def test_auc_rejects_single_class():
    with pytest.raises(ValueError):
        binary_auc([0.1, 0.2], [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["multiclass", "multilabel"]))
def test_macro_values_are_means(seed, task):
    rng = np.random.default_rng(seed)
    n, c = 40, 4
    scores = rng.random((n, c))
    labels = rng.integers(0, c, n) if task == "multiclass" else rng.integers(0, 2, (n, c))
    report = evaluate(scores, labels, task)
    valid = [a for a in report.per_class_auc if a is not None]
    assert abs(report.macro_auc - np.mean(valid)) < 1e-12
    assert abs(report.macro_f1 - np.mean(report.per_class_f1)) < 1e-12
    assert all(0 <= a <= 1 for a in valid)
    assert report.n_samples == n


def test_evaluate_excludes_and_names_degenerate_class():
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    report = evaluate(scores, np.array([0, 1, 0]))
    assert report.excluded_classes == [2]
    assert report.per_class_auc[2] is None
    assert report.macro_auc == 1.0


def test_f1_hand_computed():
    scores = np.array([[0.7, 0.2], [0.4, 0.6], [0.8, 0.9], [0.1, 0.3]])
    labels = np.array([[1, 0], [1, 1], [0, 1], [0, 0]])
    report = evaluate(scores, labels, "multilabel")
    # class 0: tp 1, fp 1, fn 1 -> 0.5; class 1: tp 2, fp 0, fn 0 -> 1.0
    assert report.per_class_f1 == [0.5, 1.0]
    assert report.macro_f1 == 0.75


def test_evaluate_shape_errors():
    with pytest.raises(ValueError):
        evaluate(np.zeros((3, 2)), np.zeros(4, dtype=int))
    with pytest.raises(ValueError):
        evaluate(np.zeros((3, 2)), np.zeros((3, 3)), "multilabel")
    with pytest.raises(ValueError):
        evaluate(np.zeros((3, 2)), np.zeros(3, dtype=int), "regression")


# --------------------------------------------------------------------------
# linear probe and fine-tuning


def gaussian_blobs(n=200, d=6, gap=4.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, d))
    x[:, 0] += gap * (y - 0.5)
    return x, y


def test_probe_separates_gaussians():
    # 8 standard deviations apart; 2000 rows give the default schedule 630 steps
    x, y = gaussian_blobs(2000, gap=8.0)
    probe = train_linear_probe(x, y, "multiclass", ProbeConfig())
    accuracy = (probe.scores(x).argmax(1) == y).mean()
    assert accuracy >= 0.95
    assert probe.scores(x).shape == (2000, 2)
    assert len(probe.epoch_losses) == 10


def test_probe_multilabel():
    x, y = gaussian_blobs(2000, gap=8.0)
    labels = np.stack([y, 1 - y], axis=1)
    probe = train_linear_probe(x, labels, "multilabel")
    report = evaluate(probe.scores(x), labels, "multilabel")
    assert report.macro_auc > 0.95


def test_probe_on_identical_features_is_chance():
    y = np.arange(100) % 2
    probe = train_linear_probe(np.ones((100, 5)), y)
    assert evaluate(probe.scores(np.ones((100, 5))), y).macro_auc == pytest.approx(0.5, abs=0.05)


def test_probe_is_deterministic():
    x, y = gaussian_blobs()
    a = train_linear_probe(x, y).scores(x)
    b = train_linear_probe(x, y).scores(x)
    assert np.array_equal(a, b)


def test_probe_rejects_bad_inputs():
    x, y = gaussian_blobs(20)
    with pytest.raises(ValueError, match="degenerate"):
        train_linear_probe(x, np.zeros(20, dtype=int))
    with pytest.raises(ValueError, match="degenerate"):
        train_linear_probe(x, np.zeros((20, 2), dtype=int), "multilabel")
    with pytest.raises(ValueError, match="0 or 1"):
        train_linear_probe(x, np.full((20, 2), 2), "multilabel")
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        train_linear_probe(bad, y)
    with pytest.raises(ValueError, match="labels"):
        train_linear_probe(x, y[:-1])


def test_schedule_configs_validate():
    with pytest.raises(ValueError, match="warmup"):
        ProbeConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ValueError, match="encoder_lr_scale"):
        FinetuneConfig(encoder_lr_scale=-1.0)
    assert FinetuneConfig().learning_rate == pytest.approx(6.25e-6)


@pytest.fixture(scope="module")
def tiny_task():
    records = make_records(24, seed=3)
    labels = np.array([int(r.samples[1].mean() > 0) for r in records])
    return JepaModel(SMALL, seed=4), records, labels


def test_finetune_with_frozen_encoder_reproduces_probe(tiny_task):
    model, records, labels = tiny_task
    cfg = FinetuneConfig(base_lr=5e-4, batch_size=8, scale_lr=False, encoder_lr_scale=0.0, epochs=4, warmup_epochs=1)
    ft = finetune(model, records, labels, config=cfg)
    feats = np.concatenate([
        ft.model.features(torch.as_tensor(np.stack([patchify(r, 25).patches for r in records]), dtype=torch.float64)).detach().numpy()
    ])
    probe = train_linear_probe(feats, labels, config=ProbeConfig(learning_rate=5e-4, batch_size=8, epochs=4, warmup_epochs=1))
    np.testing.assert_allclose(ft.epoch_losses, probe.epoch_losses, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(ft.model.head.linear.weight.detach().numpy(),
                               probe.head.linear.weight.detach().numpy(), rtol=1e-9, atol=1e-12)


def test_finetune_training_loss_not_above_probe(tiny_task):
    model, records, labels = tiny_task
    cfg = FinetuneConfig(base_lr=2e-3, batch_size=8, scale_lr=False, epochs=10, warmup_epochs=3)
    ft = finetune(model, records, labels, config=cfg)
    probe = finetune(model, records, labels, config=FinetuneConfig(
        base_lr=2e-3, batch_size=8, scale_lr=False, epochs=10, warmup_epochs=3, encoder_lr_scale=0.0))
    assert ft.epoch_losses[-1] <= probe.epoch_losses[-1]
    assert ft.scores(records).shape == (24, 2)


def test_finetune_leaves_source_model_untouched(tiny_task):
    model, records, labels = tiny_task
    before = {k: v.clone() for k, v in model.state_dict().items()}
    finetune(model, records, labels, config=FinetuneConfig(base_lr=1e-2, batch_size=8, scale_lr=False, epochs=2, warmup_epochs=0))
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


# --------------------------------------------------------------------------
# regression


def test_regression_recovers_exact_linear_target():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1200, 5))
    y = x @ np.array([1.5, -2.0, 0.0, 0.25, 3.0]) + 7.0
    result = feature_regression(x, y, np.arange(1000), np.arange(1000, 1200))
    assert result.mae_mean < 1e-8
    assert result.predict(x[:3]) == pytest.approx(y[:3], abs=1e-8)


def test_regression_null_case_matches_constant_predictor():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4000, 3))
    y = rng.standard_normal(4000)
    result = feature_regression(x, y, np.arange(3000), np.arange(3000, 4000))
    assert result.mae_mean == pytest.approx(result.baseline_mae, rel=0.02)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 3), st.floats(0.1, 10), st.floats(-5, 5))
def test_regression_affine_column_invariance(seed, column, scale, shift):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((500, 4))
    y = rng.standard_normal(500)
    x2 = x.copy()
    x2[:, column] = scale * x2[:, column] + shift
    a = feature_regression(x, y, np.arange(400), np.arange(400, 500))
    b = feature_regression(x2, y, np.arange(400), np.arange(400, 500))
    np.testing.assert_allclose(a.abs_errors, b.abs_errors, atol=1e-6)


def test_regression_handles_rank_deficiency_and_rejects_nan():
    x = np.ones((10, 3))
    w, b = fit_ridge(x, np.arange(10.0))
    assert np.all(np.isfinite(w)) and np.isfinite(b)
    with pytest.raises(ValueError, match="NaN"):
        fit_ridge(x, np.full(10, np.nan))


def test_mean_std():
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)


# --------------------------------------------------------------------------
# splits


def test_train_test_split_disjoint_and_complete():
    tr, te = train_test_split(1000, 0.2, seed=3)
    assert len(te) == 200 and len(tr) == 800
    assert not set(tr) & set(te)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(1000))
    a, b = train_test_split(1000, 0.2, seed=3)
    assert np.array_equal(a, tr) and np.array_equal(b, te)


def test_lowshot_sizes():
    train = np.arange(19230)
    assert [len(s) for s in lowshot_splits(train, 0.01, 3)] == [192, 192, 192]
    assert [len(s) for s in lowshot_splits(train, 0.1, 1)] == [1923]


def test_lowshot_full_fraction_and_distinct_seeds():
    train = np.arange(500, 700)
    full = lowshot_splits(train, 1.0, 3)
    assert all(np.array_equal(s, train) for s in full)
    small = lowshot_splits(train, 0.1, 3)
    assert not np.array_equal(small[0], small[1])
    assert all(set(s) <= set(train) for s in small)


def test_lowshot_stays_inside_train_split():
    tr, te = train_test_split(300, 0.2, seed=0)
    for subset in lowshot_splits(tr, 0.1, 3, seed=5):
        assert not set(subset) & set(te)


def test_lowshot_rejects_empty():
    with pytest.raises(ValueError, match="selects nothing"):
        lowshot_splits(np.arange(10), 0.01, 3)
    with pytest.raises(ValueError):
        lowshot_splits(np.arange(10), 0.0, 3)
