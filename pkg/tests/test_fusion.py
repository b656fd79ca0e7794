import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from drseverity.classifier import OrdinalPrediction
from drseverity.fusion import (FusionSpec, FusionTrainConfig, build_fusion, decision_table, features,
                               fuse_predict, load_fusion, lowest_argmax, train_fusion,
                               write_decision_table)

AGREEMENT = [((g, g), g) for g in range(5) for _ in range(20)]


@pytest.fixture(scope="module")
def agreement_model():
    model = build_fusion(seed=0)
    ckpt, log = train_fusion(model, AGREEMENT, FusionTrainConfig(seed=0))
    return model, ckpt


def test_parameter_count_two_inputs():
    # 2*3+3 + 3*3+3 + 3*5+5
    model = build_fusion()
    assert sum(p.numel() for p in model.parameters()) == 41


def test_score_mode_builds_and_runs():
    model = build_fusion(FusionSpec(input_mode="scores"), seed=0)
    assert model.layers[0].in_features == 10
    a = OrdinalPrediction([0.9, 0.8, 0.2, 0.1, 0.0], 1)
    b = OrdinalPrediction([0.9, 0.7, 0.6, 0.1, 0.0], 2)
    res = fuse_predict(model, a, b)
    assert 0 <= res.grade <= 4
    with pytest.raises(TypeError):
        features(1, 2, "scores")


def test_bad_input_mode():
    with pytest.raises(ValueError):
        FusionSpec(input_mode="logits")


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.integers(0, 5))
def test_probabilities_on_simplex(x, seed):
    model = build_fusion(seed=seed)
    p = model.probabilities(torch.tensor([x], dtype=torch.float32))[0].detach().double().numpy()
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) < 1e-6


def test_agreement_reproduces_common_grade(agreement_model):
    model, _ = agreement_model
    assert [fuse_predict(model, g, g).grade for g in range(5)] == [0, 1, 2, 3, 4]
    assert fuse_predict(model, 4, 4).grade == 4


def test_decision_table_total(agreement_model, tmp_path):
    model, _ = agreement_model
    table = decision_table(model)
    assert len(table) == 5 and all(len(r) == 5 for r in table)
    assert all(0 <= v <= 4 for r in table for v in r)
    write_decision_table(table, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "grade_e1,e2=0,e2=1,e2=2,e2=3,e2=4" and len(lines) == 6


def test_checkpoint_round_trip(agreement_model, tmp_path):
    model, ckpt = agreement_model
    ckpt.save(tmp_path / "f.pt")
    again = load_fusion(str(tmp_path / "f.pt"))
    assert decision_table(again) == decision_table(model)


def test_empty_training_set():
    with pytest.raises(ValueError, match="empty"):
        train_fusion(build_fusion(), [])


def test_missing_grade_warning():
    pairs = [((g, g), g) for g in (0, 1, 2) for _ in range(4)]
    cfg = FusionTrainConfig(epochs=20, restarts=1)
    ckpt, _ = train_fusion(build_fusion(seed=0), pairs, cfg)
    assert any("[3, 4]" in w for w in ckpt.meta["warnings"])


def test_training_is_deterministic():
    pairs = [((g, min(g + 1, 4)), g) for g in range(5) for _ in range(6)]
    cfg = FusionTrainConfig(epochs=50, restarts=2, seed=3)
    a, _ = train_fusion(build_fusion(seed=3), pairs, cfg)
    b, _ = train_fusion(build_fusion(seed=3), pairs, cfg)
    for k in a.state_dict:
        assert torch.equal(a.state_dict[k], b.state_dict[k])


def test_accepts_ordinal_predictions():
    a = OrdinalPrediction([1, 1, 1, 0, 0], 2)
    assert np.allclose(features(a, 4, "grades"), [0.5, 1.0])


def test_lowest_grade_tie_break():
    assert lowest_argmax(np.array([0.1, 0.4, 0.4, 0.1, 0.0])) == 1
    assert lowest_argmax(np.full(5, 0.2)) == 0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=5, max_size=5))
def test_argmax_invariant_under_increasing_map(v):
    # integer logits keep the map exact, so ties survive it
    v = np.array(v, dtype=np.float64)
    assert lowest_argmax(v) == lowest_argmax(3 * v + 1) == lowest_argmax(v ** 3)
