"""Neuron-path tracing, feature manipulation plans, and shadow distillation.

The malicious client inspects its own trained local model: for each train
node it walks the chain of most-influential neurons from the output layer
back to the first layer (|pre-activation| at the top, then
|d Z^l_k / d Z^{l-1}_j * Z^{l-1}_j| below, through ReLU with subgradient 0).
Train nodes whose path misses the modal path become manipulation candidates;
their features at the first-layer columns feeding the modal path's entry
neuron are raised to the node's own row maximum.

Two reference rewrites reuse the same candidate set and budget but pick the
positions at random (per node, or one shared set) and write the global
feature maximum instead.

After continued training the malicious client issues a single probability
query and distills a shadow head on top of its local model; that shadow
drives the gradient-based structural attacks without further queries.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import models

__all__ = [
    "NeuronPath", "ManipulationPlan", "ShadowModel", "trace_neuron_path",
    "trace_neuron_paths", "build_manipulation_plan", "rfa_manipulate",
    "sfa_manipulate", "build_shadow", "shadow_forward", "shadow_predict",
    "na2_pipeline", "distillation_pipeline", "PipelineResult",
]


@dataclass(frozen=True)
class NeuronPath:
    """Most-influential neuron index per layer, output layer first."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx or any(i < 0 for i in idx):
            raise ValueError("path must be a non-empty tuple of indices >= 0")
        object.__setattr__(self, "indices", idx)

    @property
    def first_layer_neuron(self) -> int:
        return self.indices[-1]

    def __len__(self):
        return len(self.indices)


def _transition_jacobian(params, trace, A_norm, t, layer):
    """d Z^layer_t[k] / d Z^{layer-1}_t[j] as a (w_prev, w_layer) matrix.

    Only node t's own previous-layer row varies; every other row is held
    fixed, so graph mixing contributes the diagonal propagation weight.
    """
    Z = trace.Z
    if params.kind == "gcn":
        return A_norm[t, t] * models.relu_grad(Z[0][t])[:, None] * params.W1
    if params.kind == "sgc":
        return params.W1.copy()
    if params.kind == "gcnii":
        depth = len(params.Wl)
        if layer == depth + 1:
            return models.relu_grad(Z[depth][t])[:, None] * params.Wout
        a, b = params.alphas[layer - 1], params.betas[layer - 1]
        W = params.Wl[layer - 1]
        M = (1.0 - b) * np.eye(W.shape[0]) + b * W
        c = (1.0 - a) * A_norm[t, t] + (a if layer == 1 else 0.0)
        return c * models.relu_grad(Z[layer - 1][t])[:, None] * M
    raise ValueError(f"unknown model kind: {params.kind!r}")


def _walk_path(params, trace, A_norm, t):
    Z = trace.Z
    ks = [int(np.argmax(np.abs(Z[-1][t])))]
    for layer in range(len(Z) - 1, 0, -1):
        J = _transition_jacobian(params, trace, A_norm, t, layer)
        contrib = np.abs(J[:, ks[-1]] * Z[layer - 1][t])
        ks.append(int(np.argmax(contrib)))   # argmax takes the lowest index on ties
    return NeuronPath(tuple(ks))


def trace_neuron_path(params, A_norm, X, t: int) -> NeuronPath:
    """Trace the most-influential neuron chain for one node."""
    _, trace = models.model_forward(params, A_norm, X)
    if not (0 <= t < X.shape[0]):
        raise ValueError("node out of range")
    return _walk_path(params, trace, A_norm, t)


def trace_neuron_paths(params, A_norm, X, nodes):
    """Paths for many nodes off a single shared forward pass."""
    _, trace = models.model_forward(params, A_norm, X)
    return [_walk_path(params, trace, A_norm, int(t)) for t in nodes]


def _first_layer_weight(params):
    return params.Win if params.kind == "gcnii" else params.W0


def _modal_path(paths):
    counts = Counter(p.indices for p in paths)
    top = max(counts.values())
    best = min(idx for idx, c in counts.items() if c == top)   # lexicographic
    return NeuronPath(best), {k: v for k, v in counts.items()}


def _top_columns(weight_col, B):
    order = np.argsort(-weight_col, kind="stable")   # ties keep lowest index
    return np.sort(order[:B].astype(np.int64))


@dataclass(frozen=True, eq=False)
class ManipulationPlan:
    """Outcome of path analysis on the malicious client's local model."""

    target_path: NeuronPath
    candidates: np.ndarray       # off-modal train nodes, sorted
    features: np.ndarray         # first-layer columns to boost, sorted, |.|=B
    budget: int                  # B
    gamma: float
    tau: int
    manipulated: np.ndarray      # the rewritten local feature slice
    path_counts: dict            # tuple -> count over all train nodes
    class_path_counts: dict      # class -> {tuple -> count}
    per_class: dict | None = None

    def to_json(self) -> str:
        return json.dumps({
            "target_path": list(self.target_path.indices),
            "candidates": [int(c) for c in self.candidates],
            "features": [int(f) for f in self.features],
            "gamma": self.gamma,
            "tau": self.tau,
        })


def build_manipulation_plan(params, A_norm, X_local, train_nodes_by_class,
                            gamma: float, per_class: bool = False,
                            tau: int = 0) -> ManipulationPlan:
    """Path-census a trained local model and plan the feature rewrite.

    B = max(1, floor(gamma * d_local)) columns (0 when gamma == 0) — the
    largest entries of the first-layer weight column feeding the modal
    path's first-layer neuron.  Candidates are train nodes whose own path
    differs from the modal path; their planned rows take the node's own
    original row maximum at those columns.  With per_class=True the census,
    candidate sets, and columns are computed per label instead.
    """
    if not (0.0 <= gamma <= 1.0):
        raise ValueError("gamma must be in [0, 1]")
    if not train_nodes_by_class:
        raise ValueError("need at least one labeled train node")
    d_local = X_local.shape[1]
    B = 0 if gamma == 0.0 else min(d_local, max(1, math.floor(gamma * d_local)))

    _, trace = models.model_forward(params, A_norm, X_local)
    classes = sorted(train_nodes_by_class)
    node_paths = {}
    class_counts = {}
    for c in classes:
        for t in train_nodes_by_class[c]:
            node_paths[int(t)] = _walk_path(params, trace, A_norm, int(t))
        class_counts[c] = dict(Counter(
            node_paths[int(t)].indices for t in train_nodes_by_class[c]))

    all_nodes = sorted(node_paths)
    modal, counts = _modal_path([node_paths[t] for t in all_nodes])
    W_first = _first_layer_weight(params)
    features = _top_columns(W_first[:, modal.first_layer_neuron], B)

    X_new = np.array(X_local, dtype=np.float64, copy=True)
    per_class_info = None
    if per_class:
        per_class_info = {}
        cand_union = []
        for c in classes:
            nodes_c = [int(t) for t in train_nodes_by_class[c]]
            modal_c = NeuronPath(min(
                (idx for idx, n in class_counts[c].items()
                 if n == max(class_counts[c].values()))))
            cand_c = np.array([t for t in nodes_c
                               if node_paths[t].indices != modal_c.indices],
                              dtype=np.int64)
            feats_c = _top_columns(
                W_first[:, modal_c.first_layer_neuron], B)
            if len(cand_c) and B:
                X_new[np.ix_(cand_c, feats_c)] = \
                    X_local[cand_c].max(axis=1, keepdims=True)
            per_class_info[c] = {"path": modal_c, "features": feats_c,
                                 "candidates": cand_c}
            cand_union.extend(cand_c.tolist())
        candidates = np.array(sorted(set(cand_union)), dtype=np.int64)
    else:
        candidates = np.array(
            [t for t in all_nodes if node_paths[t].indices != modal.indices],
            dtype=np.int64)
        if len(candidates) and B:
            X_new[np.ix_(candidates, features)] = \
                X_local[candidates].max(axis=1, keepdims=True)

    return ManipulationPlan(modal, candidates, features, B, float(gamma),
                            int(tau), X_new, counts, class_counts,
                            per_class_info)


def _random_rewrite(X_local, candidates, B, seed, shared: bool):
    if B < 0 or B > X_local.shape[1]:
        raise ValueError("budget must be in 0..d_local")
    X_new = np.array(X_local, dtype=np.float64, copy=True)
    candidates = np.asarray(candidates, dtype=np.int64)
    if B == 0 or len(candidates) == 0:
        return X_new
    rng = np.random.default_rng(seed)
    top = X_local.max()          # global maximum of the original distribution
    d = X_local.shape[1]
    if shared:
        cols = rng.choice(d, size=B, replace=False)
        X_new[np.ix_(candidates, cols)] = top
    else:
        for c in candidates:
            cols = rng.choice(d, size=B, replace=False)
            X_new[c, cols] = top
    return X_new


def rfa_manipulate(X_local, candidates, B, seed):
    """Random positions per candidate node, written with the global max."""
    return _random_rewrite(X_local, candidates, B, seed, shared=False)


def sfa_manipulate(X_local, candidates, B, seed):
    """One shared random position set for all candidates, global max value."""
    return _random_rewrite(X_local, candidates, B, seed, shared=True)


# ---------------------------------------------------------------------------
# shadow distillation

@dataclass
class ShadowModel:
    """Local-model cascade plus a private MLP head mimicking the server."""

    gnn: object
    head: models.MLPParams
    loss_curve: tuple
    agreement: tuple     # (initial, final) argmax agreement with the targets
    loss_kind: str

    @property
    def kind(self):
        return self.gnn.kind


def shadow_forward(shadow: ShadowModel, A_prop, X):
    """(probs, embedding, gnn trace, head pre-activations) on all nodes."""
    emb, trace = models.model_forward(shadow.gnn, A_prop, X)
    logits, probs, zs = models.mlp_forward_cache(shadow.head, emb)
    return probs, emb, trace, zs


def shadow_predict(shadow: ShadowModel, A_prop, X):
    """Class probabilities of the shadow on all nodes."""
    return shadow_forward(shadow, A_prop, X)[0]


def _softmax_vjp(probs, dprobs):
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def build_shadow(gnn_params, A_prop, X_local, nodes, probabilities,
                 epochs: int = 200, lr: float = 0.01, loss_kind: str = "mse",
                 labels=None, head_hidden: int = 64, seed: int = 0):
    """Jointly fine-tune a local-model copy and a fresh head on one query.

    `probabilities` are the served rows for `nodes` (the malicious client's
    labeled train nodes).  The default objective is the mean squared error
    between the shadow's class probabilities and the served ones; the "ce"
    variant trains on hard labels instead and requires `labels`.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    nodes = np.asarray(nodes, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] != len(nodes):
        raise ValueError("probability rows must match the queried nodes")
    if np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1")
    if loss_kind not in ("mse", "ce"):
        raise ValueError(f"unknown shadow loss: {loss_kind!r}")
    if loss_kind == "ce":
        if labels is None:
            raise ValueError("hard-label training requires labels")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (len(nodes),):
            raise ValueError("labels must match the queried nodes")

    R, F = p.shape
    rng = np.random.default_rng(seed)
    gnn = gnn_params
    head = models.init_mlp([_embed_width(gnn), head_hidden, F], rng)
    gnn_opt = models.init_adam(gnn)
    head_opt = models.init_adam(head)
    target_arg = p.argmax(axis=1)
    curve = []
    agree0 = None

    for step in range(epochs + 1):
        emb, trace = models.model_forward(gnn, A_prop, X_local)
        logits, probs, zs = models.mlp_forward_cache(head, emb[nodes])
        if loss_kind == "mse":
            loss = float(((probs - p) ** 2).mean())
            dprobs = 2.0 * (probs - p) / (R * F)
            dlogits = _softmax_vjp(probs, dprobs)
        else:
            loss = models.cross_entropy(probs, labels)
            dlogits = (probs - models.one_hot(labels, F)) / R
        curve.append(loss)
        if step == 0:
            agree0 = float((probs.argmax(axis=1) == target_arg).mean())
        if step == epochs:
            agree1 = float((probs.argmax(axis=1) == target_arg).mean())
            break
        head_grads, demb_rows = models.mlp_backward(head, emb[nodes], zs,
                                                    dlogits)
        demb = np.zeros_like(emb)
        demb[nodes] = demb_rows
        gnn_grads, _, _ = models.model_backward(gnn, A_prop, X_local, demb,
                                                trace, with_adjacency=False)
        gnn, gnn_opt = models.adam_step(gnn_opt, gnn, gnn_grads, lr)
        head, head_opt = models.adam_step(head_opt, head, head_grads, lr)

    return ShadowModel(gnn, head, tuple(curve), (agree0, agree1), loss_kind)


def _embed_width(params):
    if params.kind in ("gcn", "sgc"):
        return params.W1.shape[1]
    return params.Wout.shape[1]


# ---------------------------------------------------------------------------
# end-to-end pipeline

@dataclass
class PipelineResult:
    clients: list
    server: object
    log: object
    plan: object
    shadow: ShadowModel
    probabilities: np.ndarray    # the single served query
    query_nodes: np.ndarray


def distillation_pipeline(graph, split, config) -> PipelineResult:
    """Train under the configured hook, query once, distill the shadow.

    Works for any manipulation setting (none/na2/rfa/sfa); the malicious
    client issues exactly one probability query for its labeled train nodes.
    """
    from . import protocol

    config.validate()
    clients, server, log = protocol.train_vfgl(graph, split, config)
    svc = protocol.QueryService(clients, server, graph, config.malicious_id,
                                config.sgc_raw_adj)
    nodes = graph.train_nodes
    p = svc.query_benign(nodes)

    mal = clients[config.malicious_id]
    shadow_kind = config.shadow_model or config.local_model
    if shadow_kind == mal.model_kind:
        gnn0 = mal.params
    else:
        ss = np.random.SeedSequence([config.seed, 7])
        gnn0 = models.init_model(shadow_kind, mal.features.shape[1],
                                 config.hidden, config.embed_dim,
                                 np.random.default_rng(ss))
    labels = graph.labels[nodes] if config.shadow_loss == "ce" else None
    shadow = build_shadow(gnn0, svc.A_prop, mal.features, nodes, p,
                          epochs=config.shadow_epochs, lr=config.lr,
                          loss_kind=config.shadow_loss, labels=labels,
                          head_hidden=config.head_hidden, seed=config.seed)
    return PipelineResult(clients, server, log, log.plan, shadow, p, nodes)


def na2_pipeline(graph, split, config) -> PipelineResult:
    """The full attack pipeline; requires the na2 manipulation hook."""
    if config.manipulation != "na2":
        raise ValueError("na2_pipeline requires config.manipulation == 'na2'")
    return distillation_pipeline(graph, split, config)
