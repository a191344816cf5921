import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oat.datasets import (
    GridLayout,
    OraclePolicy,
    Trial,
    center_fixations,
    ingest,
    load_dataset,
    map_fixations,
    oracle_scanpaths,
    render_item,
    save_dataset,
    synth_dataset,
)
from oat.embedding import IngestionError, LayoutError
from oat.metrics import behavior_stats, saccade_distance_histogram


@pytest.fixture(scope="module")
def shelf():
    return synth_dataset(6, 6, 20, 100, seed=0, paths_per_trial=8)


def test_fixation_mapping_examples():
    layout = GridLayout.regular(2, 3, cell=10, gutter=2)
    assert map_fixations([layout.center(5)], layout) == [5]
    assert map_fixations([(1.0, 1.0)], layout) == []
    assert map_fixations([(7, 7), (8, 8)], layout) == [1, 1]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 12), max_size=20))
def test_center_rendering_round_trip(seq):
    layout = GridLayout.regular(3, 4)
    assert map_fixations(center_fixations(seq, layout), layout) == seq


def test_layout_invariants():
    with pytest.raises(LayoutError, match="overlaps"):
        GridLayout(1, 2, np.array([[0, 0, 10, 10], [5, 0, 10, 10]]), (20, 10))
    with pytest.raises(LayoutError, match="outside"):
        GridLayout(1, 1, np.array([[0, 0, 30, 10]]), (20, 10))
    with pytest.raises(LayoutError):
        GridLayout(2, 2, np.zeros((3, 4)) + 1, (20, 10))
    layout = GridLayout.regular(2, 3)
    assert layout.grid_pos(6) == (2, 1) and layout.object_id(2, 1) == 6
    with pytest.raises(IndexError):
        layout.check_id(7)


def test_trial_rejects_missing_or_duplicated_target():
    layout = GridLayout.regular(1, 3)
    with pytest.raises(LayoutError, match="target item appears 2"):
        Trial("x", layout, 1, items=[4, 4, 1], n_items=5).validate()
    with pytest.raises(IndexError):
        Trial("x", layout, 1, [[1, 9]]).validate()


def test_synth_shape_and_targets(shelf):
    assert len(shelf) == 100
    for t in shelf:
        assert t.items.count(t.items[t.target - 1]) == 1
        assert all(0 <= i < 20 for i in t.items)
        assert len(t.scanpaths) == 8


def test_synth_deterministic():
    a = synth_dataset(3, 3, 12, 4, seed=5, paths_per_trial=2)
    b = synth_dataset(3, 3, 12, 4, seed=5, paths_per_trial=2)
    assert all(np.array_equal(x.image, y.image) and x.scanpaths == y.scanpaths for x, y in zip(a, b))
    c = synth_dataset(3, 3, 12, 4, seed=6, paths_per_trial=2)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, c))


def test_item_templates_pairwise_distinct():
    imgs = [render_item(i, 20, 32).astype(float) for i in range(20)]
    for i in range(20):
        for j in range(i + 1, 20):
            assert np.sqrt(((imgs[i] - imgs[j]) ** 2).mean()) > 0


def test_oracle_limits():
    trial = synth_dataset(5, 5, 20, 1, seed=2, paths_per_trial=1)[0]
    layout = trial.layout
    greedy = OraclePolicy(w_distance=float("inf"), w_ior=float("inf"), refix_prob=0.0, memory_span=30)
    dist = layout.manhattan()
    for path in oracle_scanpaths(trial, greedy, 10, np.random.default_rng(0)):
        for k, (a, b) in enumerate(zip(path, path[1:])):
            if a == b:
                continue  # confirming fixation on the target
            unseen = [o for o in range(1, 26) if o not in path[: k + 1]]
            assert dist[a - 1, b - 1] == min(dist[a - 1, o - 1] for o in unseen)
    direct = OraclePolicy(w_feature=float("inf"), w_ior=0.0, refix_prob=0.0)
    for path in oracle_scanpaths(trial, direct, 10, np.random.default_rng(0)):
        assert path[0] == trial.target and len(path) <= 2


def test_oracle_statistics(shelf):
    paths = [p for t in shelf for p in t.scanpaths]
    targets = [t.target for t in shelf for _ in t.scanpaths]
    s = behavior_stats(paths, targets)
    assert s.accuracy >= 0.95
    assert 4 <= s.avg_length <= 15
    assert 0.05 <= s.refix <= 0.4
    assert all(len(p) <= OraclePolicy().max_len for p in paths)


def test_oracle_distance_histogram_decreasing(shelf):
    hist = saccade_distance_histogram([p for t in shelf for p in t.scanpaths], shelf[0].layout)
    assert all(hist[d + 1] <= hist[d] for d in range(1, len(hist) - 1))


def test_policy_validation():
    with pytest.raises(ValueError, match="w_distance"):
        OraclePolicy(w_distance=float("nan")).validate()


def test_dataset_round_trip(tmp_path):
    trials = synth_dataset(2, 3, 8, 3, seed=0, paths_per_trial=2)
    save_dataset(tmp_path, trials)
    back = load_dataset(tmp_path)
    assert [t.trial_id for t in back] == [t.trial_id for t in trials]
    assert all(np.array_equal(a.image, b.load_image()) for a, b in zip(trials, back))
    assert all(a.scanpaths == b.scanpaths and a.target == b.target for a, b in zip(trials, back))


def test_ingest(tmp_path):
    layout = GridLayout.regular(1, 2, cell=10, gutter=2)
    doc = {**layout.to_dict(), "trials": [{"trial_id": "t1", "image": "shelf.png", "target": 2}]}
    (tmp_path / "layout.json").write_text(json.dumps(doc))
    (tmp_path / "fix.csv").write_text(
        "trial_id,subject,timestamp_ms,x_px,y_px\n"
        "t1,s1,20,19,7\n"
        "t1,s1,10,7,7\n"
        "t1,s1,30,1,1\n"
        "t1,s2,5,18,6\n"
    )
    trials = ingest(tmp_path / "fix.csv", tmp_path / "layout.json", tmp_path / "out")
    assert trials[0].scanpaths == [[1, 2], [2]]
    assert load_dataset(tmp_path / "out")[0].target == 2
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(IngestionError, match="header"):
        ingest(tmp_path / "bad.csv", tmp_path / "layout.json", tmp_path / "out2")
