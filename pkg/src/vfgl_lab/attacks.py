"""Budgeted structural attacks on a frozen federated model.

All generators perturb the malicious client's copy of the adjacency under a
flip budget delta, keeping it symmetric and binary with a zero diagonal
(at most 2*delta entries differ from the original).  The gradient-driven
generators read edge gradients off the shadow model and issue no server
queries; the genetic generator searches through counted server queries
instead.  Success of a perturbation is always judged by one uncounted
victim-side protocol evaluation supplied by the caller.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import models
from .graph import normalize_adjacency_matrix
from .manipulation import ShadowModel, shadow_forward

__all__ = [
    "AttackBudget", "AttackOutcome", "fga_attack", "gradargmax_attack",
    "genetic_attack", "shadow_edge_gradient", "apply_flips",
    "perturbation_ok", "GENERATORS", "register_generator",
    "INCIDENT_ONLY_THRESHOLD",
]

# Above this many nodes the gradient generators only consider flips incident
# to the target unless explicitly told otherwise.
INCIDENT_ONLY_THRESHOLD = 500


@dataclass(frozen=True)
class AttackBudget:
    delta: int = 1       # edge flips
    queries: int = 200   # query budget Q for query-based generators

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.queries < 1:
            raise ValueError("query budget must be >= 1")


@dataclass(frozen=True)
class AttackOutcome:
    """Result of one targeted attack.

    `queries` counts server queries issued during this attack itself; the
    shadow-driven generators issue none (their single upstream query belongs
    to the distillation pipeline).
    """

    target: int
    attack: str
    success: bool
    queries: int
    flips: tuple
    elapsed: float

    def to_json_obj(self):
        return {"target": int(self.target), "attack": self.attack,
                "success": bool(self.success), "queries": int(self.queries),
                "flips": [[int(u), int(v)] for u, v in self.flips],
                "ms": round(self.elapsed * 1000.0, 3)}


def apply_flips(A, flips):
    """Toggle unordered node pairs in a copy of the dense adjacency."""
    A_new = np.array(A, dtype=np.float64, copy=True)
    for u, v in flips:
        if u == v:
            raise ValueError("cannot flip a self-loop")
        A_new[u, v] = 1.0 - A_new[u, v]
        A_new[v, u] = A_new[u, v]
    return A_new


def perturbation_ok(A, A_hat, delta) -> bool:
    """Audit: symmetric, binary, zero diagonal, at most 2*delta changes."""
    return (np.array_equal(A_hat, A_hat.T)
            and set(np.unique(A_hat)) <= {0.0, 1.0}
            and not np.diag(A_hat).any()
            and int((A_hat != A).sum()) <= 2 * delta)


def shadow_edge_gradient(shadow: ShadowModel, A, X, v_t: int, label: int,
                         raw_propagation: bool = False):
    """d(shadow cross-entropy at v_t)/dA, through normalization; and probs."""
    A_prop = (A + np.eye(len(A))) if raw_propagation \
        else normalize_adjacency_matrix(A)
    probs, emb, trace, zs = shadow_forward(shadow, A_prop, X)
    dlogits = np.zeros_like(probs)
    dlogits[v_t] = probs[v_t] - models.one_hot(np.array([label]),
                                               probs.shape[1])[0]
    _, demb = models.mlp_backward(shadow.head, emb, zs, dlogits)
    _, _, A_grad = models.model_backward(shadow.gnn, A_prop, X, demb, trace,
                                         raw_propagation=raw_propagation)
    return A_grad, probs


def _flip_scores(grad, A, v_t, flipped, incident_only):
    """Loss-increasing flip magnitudes, upper triangle only, 0 = infeasible.

    Adding an absent edge helps when its gradient is positive; removing a
    present edge helps when its gradient is negative.
    """
    present = A > 0.5
    feasible = np.where(present, grad < 0.0, grad > 0.0)
    np.fill_diagonal(feasible, False)
    if incident_only:
        keep = np.zeros_like(feasible)
        keep[v_t, :] = True
        keep[:, v_t] = True
        feasible &= keep
    score = np.where(feasible, np.abs(grad), 0.0)
    score = np.triu(score, k=1)
    for u, v in flipped:
        score[u, v] = 0.0
    return score


def _resolve_incident_only(A, full_matrix):
    if full_matrix is None:
        return len(A) > INCIDENT_ONLY_THRESHOLD
    return not full_matrix


def fga_attack(shadow: ShadowModel, A, X, v_t: int, budget: AttackBudget,
               evaluate_fn, full_matrix=None,
               raw_propagation: bool = False) -> AttackOutcome:
    """Iterative single-flip attack along the shadow's edge gradient.

    Each round recomputes the gradient of the shadow's cross-entropy at the
    target (pseudo-label fixed to the shadow's pre-attack prediction) and
    toggles the feasible, sign-consistent pair of largest magnitude.  Success
    is the caller-supplied protocol evaluation of the final adjacency.
    """
    t0 = time.perf_counter()
    incident_only = _resolve_incident_only(A, full_matrix)
    A_cur = np.array(A, dtype=np.float64, copy=True)
    _, probs0 = shadow_edge_gradient(shadow, A_cur, X, v_t, 0,
                                     raw_propagation)
    label = int(probs0[v_t].argmax())
    flips, flipped = [], set()
    for _ in range(budget.delta):
        grad, _ = shadow_edge_gradient(shadow, A_cur, X, v_t, label,
                                       raw_propagation)
        score = _flip_scores(grad, A_cur, v_t, flipped, incident_only)
        if score.max() <= 0.0:
            break
        u, v = np.unravel_index(int(score.argmax()), score.shape)
        pair = (int(u), int(v))
        A_cur = apply_flips(A_cur, [pair])
        flips.append(pair)
        flipped.add(pair)
    success = bool(evaluate_fn(A_cur, X)) if flips else False
    return AttackOutcome(v_t, "fga", success, 0, tuple(flips),
                         time.perf_counter() - t0)


def gradargmax_attack(shadow: ShadowModel, A, X, v_t: int,
                      budget: AttackBudget, evaluate_fn, full_matrix=None,
                      raw_propagation: bool = False) -> AttackOutcome:
    """One gradient, top-delta feasible flips applied simultaneously."""
    t0 = time.perf_counter()
    incident_only = _resolve_incident_only(A, full_matrix)
    _, probs0 = shadow_edge_gradient(shadow, A, X, v_t, 0, raw_propagation)
    label = int(probs0[v_t].argmax())
    grad, _ = shadow_edge_gradient(shadow, A, X, v_t, label, raw_propagation)
    score = _flip_scores(grad, A, v_t, set(), incident_only)
    order = np.argsort(-score, axis=None, kind="stable")
    flips = []
    for flat in order[:budget.delta]:
        u, v = np.unravel_index(int(flat), score.shape)
        if score[u, v] <= 0.0:
            break
        flips.append((int(u), int(v)))
    A_hat = apply_flips(A, flips)
    success = bool(evaluate_fn(A_hat, X)) if flips else False
    return AttackOutcome(v_t, "gradargmax", success, 0, tuple(flips),
                         time.perf_counter() - t0)


def _repair(genes, pool, rng, delta):
    """Drop duplicate genes and refill to delta distinct ones."""
    seen, out = set(), []
    for g in genes:
        if g not in seen:
            seen.add(g)
            out.append(g)
    while len(out) < delta:
        g = int(pool[rng.integers(len(pool))])
        if g not in seen:
            seen.add(g)
            out.append(g)
    return tuple(out)


def genetic_attack(handle, A, X, v_t: int, y_true: int,
                   budget: AttackBudget, population: int = 20,
                   generations: int = 10, mutation: float = 0.1,
                   seed: int = 0) -> AttackOutcome:
    """Query-based evolutionary search over flip sets incident to the target.

    Fitness of a candidate is 1 minus the served probability of the target's
    true class; every candidate evaluation is one counted server query
    through `handle.adversarial_query`.  Stops at the first candidate that
    flips the served label.  Tournament selection, single-point crossover,
    per-gene mutation.
    """
    t0 = time.perf_counter()
    if population * generations > budget.queries:
        raise ValueError("population * generations must not exceed Q")
    if population < 2:
        raise ValueError("population must be >= 2")
    rng = np.random.default_rng(seed)
    n = len(A)
    pool = np.array([u for u in range(n) if u != v_t], dtype=np.int64)
    delta = budget.delta
    if delta == 0 or len(pool) < delta:
        return AttackOutcome(v_t, "genetic", False, 0, (), time.perf_counter() - t0)

    def to_flips(genes):
        return tuple((min(v_t, g), max(v_t, g)) for g in genes)

    pop = [tuple(int(g) for g in rng.choice(pool, size=delta, replace=False))
           for _ in range(population)]
    queries = 0
    for gen in range(generations):
        fitness = np.zeros(population)
        for idx, genes in enumerate(pop):
            probs = handle.adversarial_query(apply_flips(A, to_flips(genes)),
                                             X, [v_t])
            queries += 1
            if int(probs[0].argmax()) != int(y_true):
                return AttackOutcome(v_t, "genetic", True, queries,
                                     to_flips(genes),
                                     time.perf_counter() - t0)
            fitness[idx] = 1.0 - probs[0, y_true]
        if gen == generations - 1:
            break

        def tournament():
            a, b = rng.integers(population), rng.integers(population)
            return pop[a] if fitness[a] >= fitness[b] else pop[b]

        nxt = []
        for _ in range(population):
            p1, p2 = tournament(), tournament()
            if delta >= 2:
                point = int(rng.integers(1, delta))
                child = list(p1[:point] + p2[point:])
            else:
                child = list(p1)
            for k in range(delta):
                if rng.random() < mutation:
                    child[k] = int(pool[rng.integers(len(pool))])
            nxt.append(_repair(child, pool, rng, delta))
        pop = nxt
    return AttackOutcome(v_t, "genetic", False, queries, (),
                         time.perf_counter() - t0)


GENERATORS = {
    "fga": fga_attack,
    "gradargmax": gradargmax_attack,
    "genetic": genetic_attack,
}


def register_generator(name: str, fn) -> None:
    """Plug in an additional attack generator under a new name."""
    if name in GENERATORS:
        raise ValueError(f"generator {name!r} already registered")
    GENERATORS[name] = fn
