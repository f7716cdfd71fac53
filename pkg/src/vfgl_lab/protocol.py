"""Vertical federated training over a shared graph with split features.

K clients hold disjoint feature-column slices of the same node set and run
private local models; the server concatenates their 16-dim embeddings, feeds
an MLP head, and routes the embedding-gradient slices back.  Full-batch
cross-entropy on the train mask, Adam everywhere, deterministic per seed via
per-entity seed streams.

Two server-side defenses are wired into the loop: entrywise Laplace noise on
received embeddings (training and query serving), and FoolsGold-style
re-weighting of the routed gradient slices from per-client gradient
histories.  A per-client query counter is the ground truth for all
query-efficiency accounting.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import models
from .graph import Graph, FeatureSplit, normalize_adjacency_matrix
from .manipulation import build_manipulation_plan, rfa_manipulate, sfa_manipulate

__all__ = [
    "Defense", "parse_defense", "TrainConfig", "ClientState", "ServerState",
    "TrainLog", "train_vfgl", "server_query", "serve_probabilities",
    "QueryService", "evaluate_attack", "client_only_accuracy", "accuracy",
    "apply_dp", "foolsgold_weights", "propagation_matrix",
]


@dataclass(frozen=True)
class Defense:
    kind: str = "none"          # none | dp | foolsgold
    eps: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "dp", "foolsgold"):
            raise ValueError(f"unknown defense: {self.kind!r}")
        if self.eps < 0.0:
            raise ValueError("dp scale must be >= 0")


def parse_defense(text) -> Defense:
    """Parse 'none', 'foolsgold', or 'dp:<eps>'."""
    if isinstance(text, Defense):
        return text
    text = (text or "none").strip()
    if text in ("none", "foolsgold"):
        return Defense(text)
    if text.startswith("dp"):
        _, _, eps = text.partition(":")
        return Defense("dp", float(eps) if eps else 0.0)
    raise ValueError(f"unknown defense spec: {text!r}")


@dataclass
class TrainConfig:
    """Everything the training loop and distillation pipeline need."""

    epochs: int = 200
    lr: float = 0.01
    seed: int = 0
    K: int = 2
    malicious_id: int = 0
    local_model: str = "gcn"
    shadow_model: str = ""           # empty = same family as local_model
    manipulation: str = "none"       # none | na2 | rfa | sfa
    gamma: float = 0.05
    tau: int = 15
    defense: Defense = field(default_factory=Defense)
    hidden: int = models.HIDDEN_DIM
    embed_dim: int = models.EMBED_DIM
    head_hidden: int = 64
    shadow_epochs: int = 200
    shadow_loss: str = "mse"         # mse | ce
    per_class_paths: bool = False
    sgc_raw_adj: bool = False

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not (0 <= self.malicious_id < self.K):
            raise ValueError("malicious_id out of range")
        if self.local_model not in ("gcn", "sgc", "gcnii"):
            raise ValueError(f"unknown local model: {self.local_model!r}")
        if self.shadow_model and self.shadow_model not in ("gcn", "sgc", "gcnii"):
            raise ValueError(f"unknown shadow model: {self.shadow_model!r}")
        if self.manipulation not in ("none", "na2", "rfa", "sfa"):
            raise ValueError(f"unknown manipulation: {self.manipulation!r}")
        if self.manipulation != "none" and not (0 <= self.tau < self.epochs):
            raise ValueError("tau must satisfy 0 <= tau < epochs")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValueError("gamma must be in [0, 1]")
        if self.shadow_loss not in ("mse", "ce"):
            raise ValueError(f"unknown shadow loss: {self.shadow_loss!r}")
        return self


@dataclass
class ClientState:
    """One participant: its feature slice, local model, and gradient history."""

    id: int
    columns: np.ndarray
    features: np.ndarray
    model_kind: str
    params: object
    opt: models.AdamState
    history: list = field(default_factory=list)


@dataclass
class ServerState:
    mlp: models.MLPParams
    opt: models.AdamState
    query_counter: dict
    defense: Defense
    noise_rng: np.random.Generator
    embed_dim: int
    num_clients: int


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    plan: object = None
    manipulation_seconds: float = 0.0

    def write_jsonl(self, path):
        import json
        with open(path, "w") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")


def propagation_matrix(graph: Graph, model_kind: str,
                       sgc_raw_adj: bool = False) -> np.ndarray:
    """Shared propagation operator; A+I un-normalized in sgc raw mode."""
    A = graph.adjacency()
    if model_kind == "sgc" and sgc_raw_adj:
        return A + np.eye(graph.num_nodes)
    return normalize_adjacency_matrix(A)


def apply_dp(embeddings: np.ndarray, eps: float,
             rng: np.random.Generator) -> np.ndarray:
    """Entrywise Laplace(0, eps) noise; eps=0 is the identity."""
    if eps < 0.0:
        raise ValueError("noise scale must be >= 0")
    if eps == 0.0:
        return embeddings
    return embeddings + rng.laplace(0.0, eps, size=embeddings.shape)


def foolsgold_weights(histories):
    """Gradient-similarity re-weighting from per-client gradient histories.

    histories[i] is a sequence of flattened per-epoch gradient vectors. Each
    client's history is summed; pairwise cosine similarity over the sums
    yields wv_i = 1 - max_{j != i} cs_ij, which is then clipped, max-
    normalized, sharpened through the logit, and clipped to [0, 1].  A client
    is flagged when its weight falls below half the median weight.
    Returns (weights, flagged).
    """
    K = len(histories)
    if K == 0:
        raise ValueError("need at least one history")
    if K == 1:
        return np.ones(1), np.zeros(1, dtype=bool)
    aggs = []
    for h in histories:
        vecs = list(h)
        aggs.append(np.sum(vecs, axis=0) if vecs else np.zeros(1))
    # Clients with different slice widths have different parameter counts;
    # zero-pad so cosine stays defined.
    width = max(len(a) for a in aggs)
    aggs = [np.pad(a, (0, width - len(a))) for a in aggs]
    norms = np.array([np.linalg.norm(a) for a in aggs])
    sim = np.full((K, K), -2.0)
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            if norms[i] == 0.0 or norms[j] == 0.0:
                sim[i, j] = 0.0
            else:
                sim[i, j] = float(aggs[i] @ aggs[j]) / (norms[i] * norms[j])
    wv = 1.0 - sim.max(axis=1)
    wv = np.clip(wv, 0.0, 1.0)
    mx = wv.max()
    if mx > 0.0:
        wv = wv / mx
        wv[wv == 1.0] = 0.99
        with np.errstate(divide="ignore"):
            wv = np.log(wv / (1.0 - wv)) + 0.5
        wv = np.clip(wv, 0.0, 1.0)
    weights = wv
    flagged = weights < 0.5 * np.median(weights)
    return weights, flagged


def _client_embeddings(clients, A_prop):
    out = []
    for c in clients:
        emb, _ = models.model_forward(c.params, A_prop, c.features)
        out.append(emb)
    return out


def _head_probs(server, h):
    _, probs = models.mlp_forward(server.mlp, h)
    return probs


def server_query(server: ServerState, embeddings, nodes, requesting_client):
    """Serve class probabilities for the given nodes; counts one query.

    embeddings is the full list of per-client matrices (the requester
    supplies its own slot; the rest are benign).  Defense noise, when
    configured, is drawn fresh per call.  Rows of the result sum to 1.
    """
    if len(embeddings) != server.num_clients:
        raise ValueError("expected one embedding matrix per client")
    if requesting_client not in server.query_counter:
        raise ValueError("unknown requesting client")
    nodes = np.asarray(nodes, dtype=np.int64)
    h = np.concatenate([e[nodes] for e in embeddings], axis=1)
    if h.shape[1] != server.num_clients * server.embed_dim:
        raise ValueError("concatenated embedding width mismatch")
    if server.defense.kind == "dp":
        h = apply_dp(h, server.defense.eps, server.noise_rng)
    server.query_counter[requesting_client] += 1
    return _head_probs(server, h)


def serve_probabilities(clients, server, A_prop, nodes=None, override=None,
                        noisy=True):
    """Uncounted serving path used for evaluation and accuracy metrics."""
    embs = _client_embeddings(clients, A_prop)
    if override:
        for i, emb in override.items():
            embs[i] = emb
    h = np.concatenate(embs, axis=1)
    if nodes is not None:
        h = h[np.asarray(nodes, dtype=np.int64)]
    if noisy and server.defense.kind == "dp":
        h = apply_dp(h, server.defense.eps, server.noise_rng)
    return _head_probs(server, h)


def accuracy(clients, server, graph: Graph, mask, A_prop=None,
             noisy=True) -> float:
    """Served accuracy over a node mask (defense noise included by default)."""
    if A_prop is None:
        A_prop = propagation_matrix(graph, clients[0].model_kind)
    probs = serve_probabilities(clients, server, A_prop, noisy=noisy)
    pred = probs.argmax(axis=1)
    mask = np.asarray(mask, dtype=bool)
    return float((pred[mask] == graph.labels[mask]).mean())


def client_only_accuracy(server: ServerState, clients, graph: Graph, i: int,
                         A_prop=None) -> float:
    """Train-mask accuracy with only client i's embedding slot populated."""
    if not (0 <= i < len(clients)):
        raise ValueError("client index out of range")
    if A_prop is None:
        A_prop = propagation_matrix(graph, clients[0].model_kind)
    emb, _ = models.model_forward(clients[i].params, A_prop,
                                  clients[i].features)
    slots = [np.zeros_like(emb) for _ in clients]
    slots[i] = emb
    h = np.concatenate(slots, axis=1)
    probs = _head_probs(server, h)
    mask = graph.train_mask
    return float((probs.argmax(axis=1)[mask] == graph.labels[mask]).mean())


def train_vfgl(graph: Graph, split: FeatureSplit, config: TrainConfig):
    """Full-batch vertical federated training; returns (clients, server, log).

    When a manipulation hook is configured, training runs clean until epoch
    tau, the malicious client's feature slice is rewritten in place (plan
    recorded on the log), and training continues on the modified slice.
    """
    config.validate()
    if split.num_clients != config.K:
        raise ValueError("split does not match config.K")
    ss = np.random.SeedSequence(config.seed)
    seeds = ss.spawn(config.K + 3)
    server_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[config.K + 1])
    manip_seed = seeds[config.K + 2]

    clients = []
    for i in range(config.K):
        rng = np.random.default_rng(seeds[i + 1])
        cols = split.assignments[i]
        params = models.init_model(config.local_model, len(cols),
                                   config.hidden, config.embed_dim, rng)
        clients.append(ClientState(i, cols, graph.features[:, cols].copy(),
                                   config.local_model, params,
                                   models.init_adam(params)))

    F = graph.num_classes
    mlp = models.init_mlp([config.K * config.embed_dim, config.head_hidden, F],
                          server_rng)
    server = ServerState(mlp, models.init_adam(mlp),
                         {i: 0 for i in range(config.K)}, config.defense,
                         noise_rng, config.embed_dim, config.K)

    A_prop = propagation_matrix(graph, config.local_model, config.sgc_raw_adj)
    train_idx = graph.train_nodes
    y = graph.labels
    onehot_train = models.one_hot(y[train_idx], F)
    log = TrainLog()
    fg = config.defense.kind == "foolsgold"

    for epoch in range(config.epochs):
        if config.manipulation != "none" and epoch == config.tau:
            t0 = time.perf_counter()
            mal = clients[config.malicious_id]
            by_class = {int(c): train_idx[y[train_idx] == c]
                        for c in np.unique(y[train_idx])}
            plan = build_manipulation_plan(
                mal.params, A_prop, mal.features, by_class, config.gamma,
                per_class=config.per_class_paths, tau=config.tau)
            if config.manipulation == "na2":
                mal.features = plan.manipulated
            elif config.manipulation == "rfa":
                mal.features = rfa_manipulate(mal.features, plan.candidates,
                                              plan.budget, seed=manip_seed)
            else:
                mal.features = sfa_manipulate(mal.features, plan.candidates,
                                              plan.budget, seed=manip_seed)
            log.plan = plan
            log.manipulation_seconds = time.perf_counter() - t0

        embs, traces = [], []
        for c in clients:
            emb, trace = models.model_forward(c.params, A_prop, c.features)
            embs.append(emb)
            traces.append(trace)
        h = np.concatenate(embs, axis=1)
        if config.defense.kind == "dp":
            h = apply_dp(h, config.defense.eps, noise_rng)
        logits, probs, zs = models.mlp_forward_cache(server.mlp, h)

        loss = models.cross_entropy(probs[train_idx], y[train_idx])
        pred = probs.argmax(axis=1)
        train_acc = float((pred[train_idx] == y[train_idx]).mean())
        test_acc = float((pred[graph.test_mask] == y[graph.test_mask]).mean())
        log.epochs.append({"epoch": epoch, "loss": loss,
                           "train_acc": train_acc, "test_acc": test_acc})

        dlogits = np.zeros_like(probs)
        dlogits[train_idx] = (probs[train_idx] - onehot_train) / len(train_idx)
        mlp_grads, dh = models.mlp_backward(server.mlp, h, zs, dlogits)

        if fg and all(len(c.history) > 0 for c in clients):
            weights, _ = foolsgold_weights([c.history for c in clients])
        else:
            weights = np.ones(config.K)

        for i, c in enumerate(clients):
            sl = slice(i * config.embed_dim, (i + 1) * config.embed_dim)
            upstream = dh[:, sl] * weights[i]
            grads, _, _ = models.model_backward(
                c.params, A_prop, c.features, upstream, traces[i],
                with_adjacency=False)
            if fg:
                c.history.append(np.concatenate(
                    [g.ravel() for g in models.param_leaves(grads)]))
            c.params, c.opt = models.adam_step(c.opt, c.params, grads,
                                               config.lr)
        server.mlp, server.opt = models.adam_step(server.opt, server.mlp,
                                                  mlp_grads, config.lr)
    return clients, server, log


@dataclass
class QueryService:
    """Frozen-server query surface shared by attacks and evaluation.

    Benign embeddings are cached once from the trained states; adversarial
    queries replace only the malicious client's slot.  Queries through
    `adversarial_query` are counted against the malicious client; the
    evaluation path is the victim-side measurement and is not counted.
    """

    clients: list
    server: ServerState
    graph: Graph
    malicious_id: int
    sgc_raw_adj: bool = False

    def __post_init__(self):
        kind = self.clients[0].model_kind
        self.A_prop = propagation_matrix(self.graph, kind, self.sgc_raw_adj)
        self.benign = _client_embeddings(self.clients, self.A_prop)

    def _prop(self, A):
        kind = self.clients[0].model_kind
        if kind == "sgc" and self.sgc_raw_adj:
            return A + np.eye(len(A))
        return normalize_adjacency_matrix(A)

    def malicious_embedding(self, A, X_mal):
        emb, _ = models.model_forward(
            self.clients[self.malicious_id].params, self._prop(A), X_mal)
        return emb

    def adversarial_query(self, A, X_mal, nodes):
        """Counted server query with the malicious slot recomputed on (A, X)."""
        embs = list(self.benign)
        embs[self.malicious_id] = self.malicious_embedding(A, X_mal)
        return server_query(self.server, embs, nodes, self.malicious_id)

    def query_benign(self, nodes):
        """Counted query over the clients' current (honest) submissions."""
        return server_query(self.server, list(self.benign), nodes,
                            self.malicious_id)

    def evaluate(self, v_t, A_hat, X_mal) -> bool:
        """Victim-side success check: does the served label flip? Uncounted."""
        override = {self.malicious_id: self.malicious_embedding(A_hat, X_mal)}
        probs = serve_probabilities(self.clients, self.server, self.A_prop,
                                    nodes=[v_t], override=override)
        return int(probs[0].argmax()) != int(self.graph.labels[v_t])

    def clean_predictions(self, noisy=True):
        probs = serve_probabilities(self.clients, self.server, self.A_prop,
                                    noisy=noisy)
        return probs.argmax(axis=1)


def evaluate_attack(clients, server, graph, malicious_id, v_t, A_hat,
                    X_tilde, sgc_raw_adj=False) -> bool:
    """One protocol evaluation of a structural attack (uncounted).

    The malicious client recomputes its embedding on the perturbed adjacency
    and its (possibly manipulated) feature slice; everyone else submits
    benign embeddings on the clean graph.
    """
    svc = QueryService(list(clients), server, graph, malicious_id, sgc_raw_adj)
    return svc.evaluate(v_t, A_hat, X_tilde)
