import math

import numpy as np
import pytest

from oat.datasets import synth_dataset
from oat.model import OATConfig, OATModel, prepare_trials
from oat.training import (
    ConfigError,
    TrainConfig,
    TrainingExample,
    augment_prepared,
    evaluate_loss,
    examples_for,
    grid_symmetries,
    make_batch,
    mirrored_examples,
    sequence_loss,
    split_indices,
    train,
)


def small_cfg(**kw):
    base = dict(p=6, h=12, n_e=1, n_d=1, heads=2, k=4, max_len=8, dropout=0.0, ff_mult=2,
                patch_size=8, cnn_channels=(2, 3), rows=2, cols=2, pe_kind="e2e")
    base.update(kw)
    return OATConfig(**base)


@pytest.fixture(scope="module")
def trials():
    return synth_dataset(2, 2, 4, 20, seed=2, paths_per_trial=3, cell=8, gutter=2)


def test_split_is_seeded_partition():
    tr, va, te = split_indices(100, (8, 1, 1), seed=3)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(100))
    again = split_indices(100, (0.8, 0.1, 0.1), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip((tr, va, te), again))
    with pytest.raises(ConfigError, match="val split is empty"):
        split_indices(3, (8, 1, 1), seed=0)
    with pytest.raises(ConfigError, match="positive"):
        split_indices(10, (1, 0, 1), seed=0)


def test_train_config_validation():
    with pytest.raises(ConfigError, match="train.lr"):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError, match="train.pe_kind"):
        TrainConfig(pe_kind="rpe").validate()
    assert TrainConfig(use_dpe=False).effective_pe_kind == "e2e"


def test_example_targets_end_with_single_eos(trials):
    ex = examples_for(trials, [0])[0]
    assert ex.targets()[-1] == 0 and ex.targets().count(0) == 1
    _, _, hist, targets, weights = make_batch([TrainingExample(0, [1, 2]), TrainingExample(0, [3])], prepare_trials(trials[:1], 8))
    assert targets.tolist() == [[1, 2, 0], [3, 0, 0]]
    np.testing.assert_allclose(weights.sum(axis=1), 1.0)


def test_uniform_model_loss_is_log_outcomes(trials):
    model = OATModel(small_cfg(), seed=0, dtype=np.float64)
    for b in range(model.cfg.n_c):
        model.params[f"oa.{b}.dec.2.w"].data[:] = 0
        model.params[f"oa.{b}.dec.2.b"].data[:] = 0
    loss = sequence_loss(model, trials[0], [1, 4, 4, 2]).item()
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_same_seed_same_epoch_one_loss(trials):
    cfg = TrainConfig(epochs=1, seed=5, lr=1e-3)
    a = train(trials, cfg, small_cfg()).log[0]["train_loss"]
    b = train(trials, cfg, small_cfg()).log[0]["train_loss"]
    assert a == pytest.approx(b, abs=1e-6)


@pytest.mark.parametrize("overrides", [{"use_oa": False}, {"use_dpe": False}, {"pe_kind": "sinusoidal"}])
def test_ablations_train(trials, overrides):
    result = train(trials, TrainConfig(epochs=2, lr=1e-3, **overrides), small_cfg(pe_kind="dpe"))
    assert len(result.log) == 2 and np.isfinite(result.best_val)
    assert result.model.cfg.use_oa == overrides.get("use_oa", True)
    if "use_dpe" in overrides:
        assert result.model.cfg.pe_kind == "e2e"


def test_checkpoint_reproduces_validation_loss(trials, tmp_path):
    result = train(trials, TrainConfig(epochs=3, lr=1e-3), small_cfg(), out_dir=tmp_path)
    back = OATModel.load(tmp_path / "model.ckpt")
    val = examples_for(trials, result.split[1])
    prepared = prepare_trials(trials, 8)
    assert evaluate_loss(back, prepared, val) == pytest.approx(result.best_val, abs=1e-6)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 4


def test_empty_dataset_rejected():
    with pytest.raises(ConfigError, match="empty"):
        train([], TrainConfig(epochs=1))


def test_symmetries_preserve_distances():
    for rows, cols in ((3, 3), (2, 4)):
        perms = grid_symmetries(rows, cols)
        assert len(perms) == (8 if rows == cols else 4)
        x, y = np.arange(rows * cols) % cols, np.arange(rows * cols) // cols
        dist = np.abs(x[:, None] - x) + np.abs(y[:, None] - y)
        for perm in perms:
            assert sorted(perm.tolist()) == list(range(rows * cols))
            np.testing.assert_array_equal(dist[np.ix_(perm, perm)], dist)
        assert np.array_equal(perms[0], np.arange(rows * cols))


def test_mirrored_trials_are_consistent(trials):
    prepared = prepare_trials(trials, 8)
    big, perms, rows_of = augment_prepared(prepared, 2, 2)
    assert big.token_idx.shape[0] == len(trials) * len(perms)
    g = 3
    row = rows_of[0, g]
    for c in range(4):
        assert big.token_idx[row, 1 + perms[g][c]] == prepared.token_idx[0, 1 + c]
    assert big.token_idx[row, 0] == prepared.token_idx[0, 0]
    ex = [TrainingExample(0, [1, 2, 2])]
    moved = mirrored_examples(ex, perms, rows_of, np.random.default_rng(0))[0]
    g = moved.trial_index // len(trials)
    assert moved.sequence == [int(perms[g][s - 1]) + 1 for s in [1, 2, 2]]


def test_augmented_training_runs(trials):
    result = train(trials, TrainConfig(epochs=2, lr=1e-3, augment=True), small_cfg())
    assert np.isfinite(result.log[-1]["train_loss"])
