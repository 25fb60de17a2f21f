"""Evaluation metrics: attack rates, robustness, confusion graphs, entropies, NH."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, TooFewPoints, ZeroSignal

N_CLASSES = 17


def misclassification_rate(model, clean, adv, pred_clean=None):
    """Fraction of pairs whose predicted label differs between clean and adversarial."""
    clean = np.atleast_2d(np.asarray(clean, dtype=float))
    adv = np.atleast_2d(np.asarray(adv, dtype=float))
    if clean.shape != adv.shape:
        raise LengthMismatch(f"clean {clean.shape} and adversarial {adv.shape} differ")
    if len(clean) == 0:
        return 0.0
    if pred_clean is None:
        pred_clean = model.predict(clean)
    return float(np.mean(model.predict(adv) != pred_clean))


def average_robustness(X, R):
    """Mean of ||r||_2 / ||x||_2 over paired rows of ``X`` and ``R``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if X.shape != R.shape:
        raise LengthMismatch(f"signals {X.shape} and perturbations {R.shape} differ")
    if len(X) == 0:
        return float("nan")
    xn = np.linalg.norm(X, axis=1)
    if np.any(xn == 0):
        raise ZeroSignal("robustness is undefined for an all-zero signal")
    return float(np.mean(np.linalg.norm(R, axis=1) / xn))


# --- confusion matrices and graphs ------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: reference class, columns: predicted class

    @property
    def normalized(self):
        totals = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(totals > 0, self.counts / np.where(totals == 0, 1, totals), 0.0)
        return out

    def to_csv(self, path, normalized=True):
        M = self.normalized if normalized else self.counts
        fmt = "%.9g" if normalized else "%d"
        header = ",".join(f"C-{j + 1}" for j in range(M.shape[1]))
        np.savetxt(path, M, delimiter=",", fmt=fmt, header=header, comments="")


def confusion_from_predictions(reference, predicted, n_classes=N_CLASSES):
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if reference.shape != predicted.shape:
        raise LengthMismatch("reference and predicted labels differ in length")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (reference - 1, predicted - 1), 1)
    return ConfusionMatrix(counts)


def confusion_matrix(model, signals, reference_labels, n_classes=N_CLASSES):
    return confusion_from_predictions(reference_labels, model.predict(signals), n_classes)


@dataclass
class ConfusionGraph:
    n_nodes: int
    edges: dict  # (i, j) -> weight, 1-based class ids
    threshold: float = 1.0 / N_CLASSES

    def degrees(self):
        d_in = np.zeros(self.n_nodes, dtype=int)
        d_out = np.zeros(self.n_nodes, dtype=int)
        for i, j in self.edges:
            d_out[i - 1] += 1
            d_in[j - 1] += 1
        return DegreeTable(d_in, d_out)

    def weights(self, node, direction):
        if direction == "out":
            return [w for (i, _), w in self.edges.items() if i == node]
        if direction == "in":
            return [w for (_, j), w in self.edges.items() if j == node]
        raise ValueError("direction must be 'in' or 'out'")

    def edge_list(self):
        return [{"from": i, "to": j, "weight": float(w)} for (i, j), w in sorted(self.edges.items())]

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump({"threshold": self.threshold, "n_nodes": self.n_nodes,
                       "edges": self.edge_list()}, fh, indent=2)


@dataclass
class DegreeTable:
    d_in: np.ndarray
    d_out: np.ndarray

    def as_dict(self):
        return {"in": self.d_in.tolist(), "out": self.d_out.tolist()}


def confusion_graph(matrix, threshold=1.0 / N_CLASSES):
    """Directed graph with an edge i->j (i != j) wherever normalized[i, j] > threshold."""
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    P = matrix.normalized
    K = P.shape[0]
    edges = {}
    for i in range(K):
        for j in range(K):
            if i != j and P[i, j] > threshold:
                edges[(i + 1, j + 1)] = float(P[i, j])
    return ConfusionGraph(K, edges, threshold)


def graph_from_degrees(d_in, d_out):
    """A simple digraph (no loops, no multi-edges) with the given degree sequences.

    Kleitman-Wang construction: each node in turn sends its out-edges to the
    nodes with the largest remaining in-degree. All edges get weight 1.
    """
    d_in = list(map(int, d_in))
    d_out = list(map(int, d_out))
    n = len(d_in)
    if len(d_out) != n or sum(d_in) != sum(d_out):
        raise ValueError("degree sequences must have equal length and equal sums")
    rem_in, rem_out = d_in[:], d_out[:]
    edges = {}
    for _ in range(n):
        # largest remaining out-degree first keeps the construction valid
        cand = [v for v in range(n) if rem_out[v] > 0]
        if not cand:
            break
        v = max(cand, key=lambda u: (rem_out[u], rem_in[u], -u))
        targets = sorted((u for u in range(n) if u != v and rem_in[u] > 0),
                         key=lambda u: (-rem_in[u], -rem_out[u], u))[: rem_out[v]]
        if len(targets) < rem_out[v]:
            raise ValueError("degree sequences are not realizable as a simple digraph")
        for u in targets:
            edges[(v + 1, u + 1)] = 1.0
            rem_in[u] -= 1
        rem_out[v] = 0
    if any(rem_in) or any(rem_out):
        raise ValueError("degree sequences are not realizable as a simple digraph")
    return ConfusionGraph(n, edges, threshold=0.0)


def node_entropy(graph, node, direction="out", weighted=True):
    """Base-2 entropy of the normalized edge weights at ``node`` (1-based)."""
    w = np.asarray(graph.weights(node, direction), dtype=float)
    if not weighted:
        w = np.ones_like(w)
    if w.size == 0 or w.sum() <= 0:
        return 0.0
    p = w / w.sum()
    p = p[p > 0]
    return float(max(0.0, -np.sum(p * np.log2(p))))


def graph_entropy(graph, direction="out", weighted=True):
    return float(sum(node_entropy(graph, v, direction, weighted)
                     for v in range(1, graph.n_nodes + 1)))


def entropy_summary(graph):
    out = {}
    for direction in ("out", "in"):
        for weighted in (True, False):
            key = f"{'H_w' if weighted else 'H'}_{direction}"
            out[key] = graph_entropy(graph, direction, weighted)
    return out


# --- projections ---------------------------------------------------------------------

def extract_features(model, signals):
    """Last-hidden-layer (post-ReLU) features, one row per signal."""
    return model.features(signals)


def neighborhood_hit(points, labels, k=5):
    """Mean share of each point's k nearest neighbours (itself excluded) with its label.

    Distance ties go to the neighbour with the lower index.
    """
    P = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    n = len(P)
    if n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    sq = np.sum(P * P, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (P @ P.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, np.inf)
    nn = np.argsort(D, axis=1, kind="stable")[:, :k]
    return float(np.mean(labels[nn] == labels[:, None]))


@dataclass
class Projection2D:
    points: np.ndarray
    labels: np.ndarray
    nh: float
    source: str
    kl_history: list = field(default_factory=list)

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("x,y,label\n")
            for (x, y), lab in zip(self.points, self.labels):
                fh.write(f"{x:.9g},{y:.9g},{int(lab)}\n")


def entropy_golden_table():
    """Reference degree table for the FGSM, SSA and SAA confusion graphs."""
    return {
        "fgsm": {"in": [0, 0, 0, 0, 0, 0, 8, 0, 0, 0, 0, 0, 3, 11, 0, 0, 16],
                 "out": [2, 2, 2, 3, 2, 2, 2, 3, 2, 2, 2, 2, 2, 2, 3, 2, 3]},
        "ssa": {"in": [1, 2, 5, 1, 2, 3, 7, 5, 4, 1, 3, 3, 4, 4, 2, 1, 5],
                "out": [4, 1, 1, 3, 5, 3, 1, 5, 5, 2, 3, 4, 3, 4, 3, 3, 3]},
        "saa": {"in": [0, 0, 0, 0, 0, 0, 6, 4, 1, 0, 0, 0, 6, 5, 0, 0, 16],
                "out": [1, 2, 3, 3, 1, 1, 2, 3, 4, 1, 3, 3, 2, 2, 3, 3, 1]},
    }


def log2_degree_entropy(degrees):
    """Sum of log2(d) over nonzero degrees: the unweighted graph entropy in closed form."""
    return float(sum(math.log2(d) for d in degrees if d > 0))
