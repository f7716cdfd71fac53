"""Graph container, TSV I/O, synthetic benchmarks, and vertical feature splits.

Everything downstream (local models, the federated protocol, the attacks)
consumes the dense representations produced here: a canonical edge list, a
dense 0/1 adjacency, and the symmetrically normalized propagation matrix
D^-1/2 (A+I) D^-1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Graph",
    "FeatureSplit",
    "GraphFormatError",
    "load_graph",
    "synth_sbm",
    "split_features",
    "normalized_adjacency",
    "normalize_adjacency_matrix",
]


class GraphFormatError(ValueError):
    """Malformed dataset file; the message carries file name and line number."""


def _canonical_edges(edges, num_nodes):
    """Validate and canonicalize an (E,2) edge array: u<v, unique, sorted."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return edges.reshape(0, 2)
    if edges.min() < 0 or edges.max() >= num_nodes:
        raise ValueError("edge endpoint out of range")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise ValueError("self-loops are not allowed")
    lo = edges.min(axis=1)
    hi = edges.max(axis=1)
    canon = np.stack([lo, hi], axis=1)
    order = np.lexsort((canon[:, 1], canon[:, 0]))
    canon = canon[order]
    if len(canon) > 1 and np.any(np.all(canon[1:] == canon[:-1], axis=1)):
        raise ValueError("duplicate edge")
    return canon


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph with disjoint train/test node masks.

    Arrays are frozen after construction; edges are stored once per
    unordered pair with the lower endpoint first.
    """

    num_nodes: int
    edges: np.ndarray        # (E, 2) int64, canonical
    features: np.ndarray     # (N, d) float64, finite reals
    labels: np.ndarray       # (N,) int64, >= 0
    train_mask: np.ndarray   # (N,) bool
    test_mask: np.ndarray    # (N,) bool

    def __post_init__(self):
        n = int(self.num_nodes)
        if n <= 0:
            raise ValueError("graph needs at least one node")
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64)
        train = np.asarray(self.train_mask, dtype=bool)
        test = np.asarray(self.test_mask, dtype=bool)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError("features must be (num_nodes, d)")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features must be finite")
        if labels.shape != (n,) or labels.min(initial=0) < 0:
            raise ValueError("labels must be (num_nodes,) and non-negative")
        if train.shape != (n,) or test.shape != (n,):
            raise ValueError("masks must be (num_nodes,)")
        if np.any(train & test):
            raise ValueError("train and test masks must be disjoint")
        edges = _canonical_edges(self.edges, n)
        for name, arr in (("edges", edges), ("features", feats),
                          ("labels", labels), ("train_mask", train),
                          ("test_mask", test)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "num_nodes", n)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes else 0

    @property
    def train_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def test_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    def adjacency(self) -> np.ndarray:
        """Dense symmetric 0/1 adjacency with a zero diagonal (fresh copy)."""
        a = np.zeros((self.num_nodes, self.num_nodes))
        if len(self.edges):
            u, v = self.edges[:, 0], self.edges[:, 1]
            a[u, v] = 1.0
            a[v, u] = 1.0
        return a


def _stratified_masks(labels, train_frac, rng):
    n = len(labels)
    train = np.zeros(n, dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(train_frac * len(idx))
        k = min(max(k, 1), len(idx) - 1) if len(idx) > 1 else len(idx)
        train[idx[:k]] = True
    test = ~train
    return train, test


def load_graph(nodes_path, edges_path, mask_seed: int = 0) -> Graph:
    """Load a graph from node and edge TSV files.

    nodes file: ``<id>\\t<label>\\t<f0,f1,...>`` with an optional fourth
    column ``train|test|none``; edges file: ``<u>\\t<v>`` one edge per line.
    Node ids must cover 0..N-1. When any node lacks the mask column, a
    seeded 60/40 stratified split is generated instead.
    """
    ids, labels, rows, marks = [], [], [], []
    with open(nodes_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: expected 3 or 4 tab-separated fields")
            try:
                ids.append(int(parts[0]))
                labels.append(int(parts[1]))
                rows.append([float(x) for x in parts[2].split(",")])
            except ValueError as exc:
                raise GraphFormatError(f"{nodes_path}:{lineno}: {exc}") from None
            if len(parts) == 4:
                if parts[3] not in ("train", "test", "none"):
                    raise GraphFormatError(
                        f"{nodes_path}:{lineno}: mask must be train|test|none")
                marks.append(parts[3])
            else:
                marks.append(None)
            if labels[-1] < 0:
                raise GraphFormatError(f"{nodes_path}:{lineno}: negative label")
            if len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(
                    f"{nodes_path}:{lineno}: feature length differs from first row")
    if not ids:
        raise GraphFormatError(f"{nodes_path}:1: empty node file")
    n = len(ids)
    if sorted(ids) != list(range(n)):
        raise GraphFormatError(
            f"{nodes_path}:1: node ids must cover 0..{n - 1} exactly")
    order = np.argsort(ids)
    features = np.asarray(rows, dtype=np.float64)[order]
    labels = np.asarray(labels, dtype=np.int64)[order]
    marks = [marks[i] for i in order]

    edge_list = []
    with open(edges_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(
                    f"{edges_path}:{lineno}: expected 2 tab-separated fields")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise GraphFormatError(f"{edges_path}:{lineno}: {exc}") from None
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(
                    f"{edges_path}:{lineno}: endpoint out of range")
            if u == v:
                raise GraphFormatError(f"{edges_path}:{lineno}: self-loop")
            edge_list.append((min(u, v), max(u, v)))
    if len(set(edge_list)) != len(edge_list):
        seen = set()
        for lineno_pair in edge_list:
            if lineno_pair in seen:
                raise GraphFormatError(
                    f"{edges_path}: duplicate edge {lineno_pair}")
            seen.add(lineno_pair)
    edges = np.asarray(edge_list, dtype=np.int64).reshape(-1, 2)

    if all(m is not None for m in marks):
        train = np.array([m == "train" for m in marks])
        test = np.array([m == "test" for m in marks])
    else:
        rng = np.random.default_rng(mask_seed)
        train, test = _stratified_masks(labels, 0.6, rng)
    return Graph(n, edges, features, labels, train, test)


def save_graph(graph: Graph, nodes_path, edges_path) -> None:
    """Write a graph back out in the TSV format accepted by load_graph."""
    with open(nodes_path, "w") as fh:
        for i in range(graph.num_nodes):
            feats = ",".join(repr(float(x)) for x in graph.features[i])
            mark = ("train" if graph.train_mask[i]
                    else "test" if graph.test_mask[i] else "none")
            fh.write(f"{i}\t{int(graph.labels[i])}\t{feats}\t{mark}\n")
    with open(edges_path, "w") as fh:
        for u, v in graph.edges:
            fh.write(f"{int(u)}\t{int(v)}\n")


# Feature noise scale for synth_sbm.  Chosen large relative to the mean
# shift so that the block structure, not the raw features, carries most of
# the class signal: graph aggregation then genuinely matters and structural
# perturbations have measurable effect, while test accuracy stays high.
SBM_NOISE_STD = 20.0


def synth_sbm(num_nodes: int, num_classes: int, p_in: float, p_out: float,
              feat_dim: int, signal: float, seed: int) -> Graph:
    """Stochastic block model benchmark with class-informative features.

    Nodes are split into near-equal blocks (one per class); edges appear
    within a block with probability p_in and across blocks with p_out.
    Features are zero-mean normal noise (std SBM_NOISE_STD) plus `signal`
    added on the class's own coordinate group (dims j with
    j % num_classes == label), so class-conditional feature means are
    separated by exactly `signal` while individual columns overlap heavily.
    A seeded 60/40 stratified train/test split is attached.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not (0.0 <= p_out < p_in <= 1.0):
        raise ValueError("require 0 <= p_out < p_in <= 1")
    if num_nodes < 2 * num_classes:
        raise ValueError("too few nodes for a stratified split")
    if feat_dim < 1 or signal < 0.0:
        raise ValueError("feat_dim must be >= 1 and signal >= 0")
    rng = np.random.default_rng(seed)

    sizes = [num_nodes // num_classes] * num_classes
    for c in range(num_nodes % num_classes):
        sizes[c] += 1
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), sizes)

    # Upper-triangle Bernoulli draw with block-dependent probability.
    prob = np.where(labels[:, None] == labels[None, :], p_in, p_out)
    draw = rng.random((num_nodes, num_nodes))
    upper = np.triu(draw < prob, k=1)
    us, vs = np.nonzero(upper)
    edges = np.stack([us, vs], axis=1)

    features = SBM_NOISE_STD * rng.normal(size=(num_nodes, feat_dim))
    cols = np.arange(feat_dim)
    features += signal * (cols[None, :] % num_classes == labels[:, None])

    train, test = _stratified_masks(labels, 0.6, rng)
    return Graph(num_nodes, edges, features, labels, train, test)


@dataclass(frozen=True, eq=False)
class FeatureSplit:
    """Disjoint feature-column assignment, one sorted index array per client."""

    assignments: tuple

    def __post_init__(self):
        parts = tuple(np.asarray(a, dtype=np.int64) for a in self.assignments)
        if not parts:
            raise ValueError("need at least one client")
        all_cols = np.concatenate(parts)
        if len(np.unique(all_cols)) != len(all_cols):
            raise ValueError("assignments must be disjoint")
        for p in parts:
            if len(p) == 0:
                raise ValueError("every client needs at least one column")
            p.flags.writeable = False
        object.__setattr__(self, "assignments", parts)

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    @property
    def permutation(self) -> np.ndarray:
        """Column order under which the client slices concatenate back to X."""
        return np.concatenate(self.assignments)

    def slice(self, X: np.ndarray, i: int) -> np.ndarray:
        return X[:, self.assignments[i]]


def split_features(graph: Graph, K: int, seed: int) -> FeatureSplit:
    """Randomly partition feature columns across K clients.

    Sizes differ by at most one; the remainder goes to the lowest client
    indices. Deterministic per seed.
    """
    d = graph.num_features
    if not (1 <= K <= d):
        raise ValueError(f"K must be in 1..{d}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    base, extra = divmod(d, K)
    parts, at = [], 0
    for i in range(K):
        size = base + (1 if i < extra else 0)
        parts.append(np.sort(perm[at:at + size]))
        at += size
    return FeatureSplit(tuple(parts))


def normalize_adjacency_matrix(A: np.ndarray) -> np.ndarray:
    """Symmetric degree normalization with self-loops: D^-1/2 (A+I) D^-1/2."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency must be square")
    S = A + np.eye(len(A))
    inv_sqrt = 1.0 / np.sqrt(S.sum(axis=1))
    return S * np.outer(inv_sqrt, inv_sqrt)


def normalized_adjacency(graph: Graph) -> np.ndarray:
    """Normalized propagation matrix of the graph (dense)."""
    return normalize_adjacency_matrix(graph.adjacency())
