"""From-scratch Decision Tree (CART, Gini), Random Forest, and brute-force
KNN over feature vectors, all with probability-like scores for ROC/AUC and
versioned JSON serialization."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, KExceedsDataset, UnsupportedVersion

MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int | None = None
    min_samples_split: int = 2


@dataclass
class TreeNode:
    # internal nodes carry (feature_index, threshold, left, right);
    # leaves carry class_counts
    feature_index: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    class_counts: tuple[int, int] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.class_counts is not None


@dataclass
class DecisionTreeModel:
    nodes: list[TreeNode]
    config: TreeConfig = field(default_factory=TreeConfig)


@dataclass
class RandomForestModel:
    trees: list[DecisionTreeModel]
    tree_seeds: list[int]
    n_features_per_split: int


@dataclass
class KnnModel:
    features: np.ndarray  # (n, D)
    labels: np.ndarray    # (n,)
    k: int = 5

    def __post_init__(self):
        if not (1 <= self.k <= len(self.features)):
            raise KExceedsDataset(f"k={self.k} with {len(self.features)} samples")


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def best_split(
    features: np.ndarray,
    labels: np.ndarray,
    feature_indices: np.ndarray,
):
    """Best (feature, threshold) by Gini impurity decrease over midpoint
    thresholds; ties go to the lowest feature index, then lowest threshold.

    Zero-decrease splits are still returned (XOR-style data only separates
    deeper down); returns None only when no candidate threshold exists.
    """
    n = len(labels)
    parent_counts = np.array([np.sum(labels == 0), np.sum(labels == 1)], dtype=np.float64)
    parent_gini = _gini(parent_counts)
    best = None  # (decrease, feature, threshold)
    for j in sorted(int(j) for j in feature_indices):
        col = features[:, j]
        order = np.argsort(col, kind="stable")
        sorted_vals = col[order]
        sorted_labels = labels[order]
        # cumulative positive/total counts left of each boundary
        cum_pos = np.cumsum(sorted_labels == 1)
        distinct = np.nonzero(np.diff(sorted_vals) > 0)[0]  # split after i
        for i in distinct:
            n_left = i + 1
            left_pos = cum_pos[i]
            left = np.array([n_left - left_pos, left_pos], dtype=np.float64)
            right = parent_counts - left
            weighted = (n_left * _gini(left) + (n - n_left) * _gini(right)) / n
            decrease = parent_gini - weighted
            threshold = 0.5 * (sorted_vals[i] + sorted_vals[i + 1])
            # strict >: ascending feature/threshold iteration keeps the
            # lowest feature index, then lowest threshold, on exact ties
            if best is None or decrease > best[0]:
                best = (decrease, j, float(threshold))
    if best is None:
        return None
    return best[1], best[2], best[0]


def fit_decision_tree(
    features: np.ndarray,
    labels: np.ndarray,
    config: TreeConfig = TreeConfig(),
    rng: np.random.Generator | None = None,
    n_features_per_split: int | None = None,
) -> DecisionTreeModel:
    """Greedy CART fit; rng and n_features_per_split enable forest-style
    per-split feature subsampling."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if len(features) == 0:
        raise EmptyInput("no training records")
    nodes: list[TreeNode] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append(TreeNode())
        sub_labels = labels[idx]
        counts = (int(np.sum(sub_labels == 0)), int(np.sum(sub_labels == 1)))
        pure = counts[0] == 0 or counts[1] == 0
        at_depth = config.max_depth is not None and depth >= config.max_depth
        too_small = len(idx) < config.min_samples_split
        split = None
        if not (pure or at_depth or too_small):
            d = features.shape[1]
            if n_features_per_split is not None and n_features_per_split < d:
                cand = rng.choice(d, size=n_features_per_split, replace=False)
            else:
                cand = np.arange(d)
            split = best_split(features[idx], sub_labels, cand)
        if split is None:
            nodes[node_id] = TreeNode(class_counts=counts)
            return node_id
        j, threshold, _ = split
        go_left = features[idx, j] <= threshold
        left_id = grow(idx[go_left], depth + 1)
        right_id = grow(idx[~go_left], depth + 1)
        nodes[node_id] = TreeNode(
            feature_index=j, threshold=threshold, left=left_id, right=right_id
        )
        return node_id

    grow(np.arange(len(features)), 0)
    return DecisionTreeModel(nodes, config)


def predict_tree(model: DecisionTreeModel, feature: np.ndarray) -> tuple[int, float]:
    """Route to a leaf; score is the positive-class fraction there."""
    node = model.nodes[0]
    while not node.is_leaf:
        if feature[node.feature_index] <= node.threshold:
            node = model.nodes[node.left]
        else:
            node = model.nodes[node.right]
    neg, pos = node.class_counts
    score = pos / (neg + pos)
    return (1 if score >= 0.5 else 0, score)


def fit_random_forest(
    features: np.ndarray,
    labels: np.ndarray,
    n_trees: int = 100,
    n_features_per_split: int | None = None,
    master_seed: int = 0,
    config: TreeConfig = TreeConfig(),
    bootstrap: bool = True,
) -> RandomForestModel:
    """Bootstrap-aggregated trees with per-split feature subsampling;
    per-tree seeds spawn deterministically from the master seed."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if len(features) == 0:
        raise EmptyInput("no training records")
    d = features.shape[1]
    if n_features_per_split is None:
        n_features_per_split = max(1, int(np.sqrt(d)))
    seed_seq = np.random.SeedSequence(master_seed)
    tree_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn(n_trees)]
    trees = []
    for seed in tree_seeds:
        rng = np.random.default_rng(seed)
        if bootstrap:
            idx = rng.integers(0, len(features), size=len(features))
        else:
            idx = np.arange(len(features))
        trees.append(
            fit_decision_tree(
                features[idx], labels[idx], config, rng, n_features_per_split
            )
        )
    return RandomForestModel(trees, tree_seeds, n_features_per_split)


def predict_forest(model: RandomForestModel, feature: np.ndarray) -> tuple[int, float]:
    """Mean of per-tree leaf scores; score >= 0.5 votes positive."""
    scores = [predict_tree(tree, feature)[1] for tree in model.trees]
    score = float(np.mean(scores))
    return (1 if score >= 0.5 else 0, score)


def knn_predict(model: KnnModel, query: np.ndarray) -> tuple[int, float]:
    """Exact k-nearest-neighbors vote under Euclidean distance; distance
    ties break toward the lower stored index."""
    diff = model.features - np.asarray(query, dtype=np.float64)
    dist = np.einsum("ij,ij->i", diff, diff)
    neighbors = np.argsort(dist, kind="stable")[: model.k]
    score = float(np.mean(model.labels[neighbors] == 1))
    return (1 if score >= 0.5 else 0, score)


# --- JSON serialization ---

def _tree_to_doc(model: DecisionTreeModel) -> dict:
    return {
        "nodes": [
            {"counts": list(n.class_counts)}
            if n.is_leaf
            else {
                "feature": n.feature_index,
                "threshold": n.threshold,
                "left": n.left,
                "right": n.right,
            }
            for n in model.nodes
        ],
        "max_depth": model.config.max_depth,
        "min_samples_split": model.config.min_samples_split,
    }


def _tree_from_doc(doc: dict) -> DecisionTreeModel:
    nodes = [
        TreeNode(class_counts=tuple(n["counts"]))
        if "counts" in n
        else TreeNode(n["feature"], n["threshold"], n["left"], n["right"])
        for n in doc["nodes"]
    ]
    return DecisionTreeModel(
        nodes, TreeConfig(doc["max_depth"], doc["min_samples_split"])
    )


def save_model(model, extra_metadata: dict | None = None) -> str:
    doc: dict = {"format_version": MODEL_FORMAT_VERSION}
    if extra_metadata:
        doc["metadata"] = extra_metadata
    if isinstance(model, DecisionTreeModel):
        doc["kind"] = "decision_tree"
        doc["tree"] = _tree_to_doc(model)
    elif isinstance(model, RandomForestModel):
        doc["kind"] = "random_forest"
        doc["trees"] = [_tree_to_doc(t) for t in model.trees]
        doc["tree_seeds"] = model.tree_seeds
        doc["n_features_per_split"] = model.n_features_per_split
    elif isinstance(model, KnnModel):
        doc["kind"] = "knn"
        doc["k"] = model.k
        doc["n"], doc["d"] = (int(v) for v in model.features.shape)
        doc["features_b64"] = base64.b64encode(
            np.ascontiguousarray(model.features, dtype="<f4").tobytes()
        ).decode("ascii")
        doc["labels"] = [int(v) for v in model.labels]
    else:
        raise TypeError(f"unknown model type {type(model)!r}")
    return json.dumps(doc, indent=2, sort_keys=True)


def load_model(text: str):
    doc = json.loads(text)
    if doc.get("format_version") != MODEL_FORMAT_VERSION:
        raise UnsupportedVersion(f"model format {doc.get('format_version')}")
    kind = doc["kind"]
    if kind == "decision_tree":
        return _tree_from_doc(doc["tree"]), doc.get("metadata", {})
    if kind == "random_forest":
        return (
            RandomForestModel(
                [_tree_from_doc(t) for t in doc["trees"]],
                doc["tree_seeds"],
                doc["n_features_per_split"],
            ),
            doc.get("metadata", {}),
        )
    if kind == "knn":
        features = np.frombuffer(
            base64.b64decode(doc["features_b64"]), dtype="<f4"
        ).reshape(doc["n"], doc["d"]).astype(np.float64)
        return (
            KnnModel(features, np.asarray(doc["labels"], dtype=np.intp), doc["k"]),
            doc.get("metadata", {}),
        )
    raise UnsupportedVersion(f"unknown model kind {kind!r}")


def predict(model, feature: np.ndarray) -> tuple[int, float]:
    if isinstance(model, DecisionTreeModel):
        return predict_tree(model, feature)
    if isinstance(model, RandomForestModel):
        return predict_forest(model, feature)
    if isinstance(model, KnnModel):
        return knn_predict(model, feature)
    raise TypeError(f"unknown model type {type(model)!r}")
