import json
import math

import numpy as np
import pytest

from pqadv import metrics
from pqadv.errors import LengthMismatch, TooFewPoints, ZeroSignal
from pqadv.metrics import ConfusionGraph, ConfusionMatrix

REFERENCE_UNWEIGHTED = {
    ("fgsm", "out"): 19.34, ("ssa", "out"): 25.06, ("saa", "out"): 17.09,
    ("fgsm", "in"): 12.04, ("ssa", "in"): 23.53, ("saa", "in"): 13.49,
}


@pytest.mark.parametrize("attack,direction", sorted(REFERENCE_UNWEIGHTED))
def test_unweighted_entropy_from_reference_degrees(attack, direction):
    deg = metrics.entropy_golden_table()[attack]
    graph = metrics.graph_from_degrees(deg["in"], deg["out"])
    table = graph.degrees()
    assert table.d_in.tolist() == deg["in"] and table.d_out.tolist() == deg["out"]
    h = metrics.graph_entropy(graph, direction, weighted=False)
    assert h == pytest.approx(REFERENCE_UNWEIGHTED[attack, direction], abs=0.01)
    assert h == pytest.approx(metrics.log2_degree_entropy(deg[direction]), abs=1e-12)


def test_graph_from_degrees_rejects_unrealizable():
    with pytest.raises(ValueError):
        metrics.graph_from_degrees([1, 0], [0, 2])
    with pytest.raises(ValueError):
        metrics.graph_from_degrees([1, 1], [2, 0])  # would need a self-loop


def test_node_entropy_hand_values():
    g = ConfusionGraph(3, {(1, 2): 0.25, (1, 3): 0.75, (2, 3): 0.5})
    expect = -(0.25 * math.log2(0.25) + 0.75 * math.log2(0.75))
    assert metrics.node_entropy(g, 1, "out") == pytest.approx(expect)
    assert metrics.node_entropy(g, 1, "out", weighted=False) == pytest.approx(1.0)
    assert metrics.node_entropy(g, 3, "in") == pytest.approx(
        -(0.6 * math.log2(0.6) + 0.4 * math.log2(0.4)))
    assert metrics.node_entropy(g, 2, "out") == 0.0  # single edge
    assert metrics.node_entropy(g, 1, "in") == 0.0  # no edges
    s = metrics.entropy_summary(g)
    assert set(s) == {"H_w_out", "H_out", "H_w_in", "H_in"}
    assert s["H_out"] == pytest.approx(1.0)
    assert s["H_in"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        g.weights(1, "sideways")


def test_confusion_toy_example(tmp_path):
    cm = metrics.confusion_from_predictions([1, 1, 1, 1, 2, 2, 3], [1, 2, 3, 3, 2, 2, 1],
                                            n_classes=3)
    np.testing.assert_array_equal(cm.counts, [[1, 1, 2], [0, 2, 0], [1, 0, 0]])
    np.testing.assert_allclose(cm.normalized, [[0.25, 0.25, 0.5], [0, 1, 0], [1, 0, 0]])
    g = metrics.confusion_graph(cm, threshold=0.3)
    assert g.edges == {(1, 3): 0.5, (3, 1): 1.0}
    g.to_json(tmp_path / "g.json")
    data = json.loads((tmp_path / "g.json").read_text())
    assert data["edges"] == [{"from": 1, "to": 3, "weight": 0.5},
                             {"from": 3, "to": 1, "weight": 1.0}]
    cm.to_csv(tmp_path / "c.csv")
    rows = (tmp_path / "c.csv").read_text().splitlines()
    assert rows[0] == "C-1,C-2,C-3" and len(rows) == 4


def test_default_threshold_is_one_over_17():
    counts = np.zeros((17, 17), dtype=int)
    counts[0, 0] = 15
    counts[0, 1] = 1  # 1/16 > 1/17: edge
    counts[1, 1] = 17
    counts[1, 2] = 1  # 1/18 < 1/17: no edge
    g = metrics.confusion_graph(ConfusionMatrix(counts))
    assert set(g.edges) == {(1, 2)}


def test_empty_rows_normalize_to_zero():
    cm = ConfusionMatrix(np.array([[0, 0], [1, 1]]))
    np.testing.assert_array_equal(cm.normalized, [[0, 0], [0.5, 0.5]])


def test_confusion_length_mismatch():
    with pytest.raises(LengthMismatch):
        metrics.confusion_from_predictions([1, 2], [1])


def test_average_robustness_hand_value():
    X = np.array([[3.0, 4.0], [0.0, 2.0]])
    R = np.array([[0.5, 0.0], [0.0, 1.0]])
    assert metrics.average_robustness(X, R) == pytest.approx((0.1 + 0.5) / 2)
    with pytest.raises(ZeroSignal):
        metrics.average_robustness(np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(LengthMismatch):
        metrics.average_robustness(X, R[:1])


class ThresholdModel:
    def predict(self, X):
        return (np.atleast_2d(X)[:, 0] > 0).astype(int) + 1


def test_misclassification_rate():
    clean = np.array([[1.0], [-1.0], [2.0], [-2.0]])
    adv = np.array([[-1.0], [-1.0], [3.0], [1.0]])
    assert metrics.misclassification_rate(ThresholdModel(), clean, adv) == 0.5
    with pytest.raises(LengthMismatch):
        metrics.misclassification_rate(ThresholdModel(), clean, adv[:2])


def test_neighborhood_hit_hand_examples():
    line = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    assert metrics.neighborhood_hit(line, [1, 1, 1, 2, 2, 2], k=2) == 1.0
    # alternating labels on a line, k=1: every nearest neighbour (ties to the lower
    # index) carries the other label
    alt = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert metrics.neighborhood_hit(alt, [1, 2, 1, 2], k=1) == 0.0
    # k=2 on the same line: point 0 sees {1, 2} -> 1/2; point 1 {0, 2} -> 0;
    # point 2 {1, 3} -> 0; point 3 {2, 1} -> 1/2
    assert metrics.neighborhood_hit(alt, [1, 2, 1, 2], k=2) == pytest.approx(0.25)
    with pytest.raises(TooFewPoints):
        metrics.neighborhood_hit(alt, [1, 2, 1, 2], k=4)


def test_projection_csv(tmp_path):
    p = metrics.Projection2D(np.array([[0.5, -1.0], [2.0, 3.0]]), np.array([1, 17]), 0.5, "raw")
    p.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines() == ["x,y,label", "0.5,-1,1", "2,3,17"]


def test_golden_degree_sums_match():
    for deg in metrics.entropy_golden_table().values():
        assert sum(deg["in"]) == sum(deg["out"])
        assert len(deg["in"]) == len(deg["out"]) == 17
