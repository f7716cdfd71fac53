"""Evaluation metrics, significance testing, and result serialization.

Attack-side: success rate over targets, average queries with failed
query-based attacks charged the full budget, and relative improvement
between two success rates.  Contribution side: hyperbolic-sine-sharpened
shares of per-client standalone accuracies, the L2-norm gap between server
input blocks, and detection rates for the gradient-similarity defense.
Correlations ship with a two-sided p-value computed through the regularized
incomplete beta function (Lentz continued fraction, documented below).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import models

__all__ = [
    "asr", "contribution_scores", "aq", "impv", "pearson_significance",
    "weight_norm_diff", "detection_rate", "export_embeddings",
    "ExperimentRecord", "RESULTS_COLUMNS", "write_results_csv",
    "read_results_csv", "regularized_incomplete_beta", "student_t_sf",
]

logger = logging.getLogger(__name__)


def asr(successes: int, targets: int) -> float:
    """Attack success rate in percent."""
    if targets <= 0:
        raise ValueError("need at least one target")
    if not (0 <= successes <= targets):
        raise ValueError("successes must be in 0..targets")
    return 100.0 * successes / targets


def contribution_scores(accs, alpha: float = 5.0) -> np.ndarray:
    """Sharpened share of per-client standalone accuracies.

    cs_i = sinh(alpha * acc_i / sum(acc)) / sum_j sinh(alpha * acc_j / sum(acc)).
    Scores are positive and sum to 1; the sinh sharpening stretches gaps
    between strong and weak contributors.
    """
    accs = np.asarray(accs, dtype=np.float64)
    if accs.ndim != 1 or len(accs) == 0:
        raise ValueError("accs must be a non-empty vector")
    if np.any(accs < 0.0):
        raise ValueError("accuracies must be non-negative")
    total = accs.sum()
    if total == 0.0:
        raise ValueError("at least one accuracy must be positive")
    sh = np.sinh(alpha * accs / total)
    return sh / sh.sum()


def aq(query_counts, Q: int) -> float:
    """Mean queries per target; failures (entries of None) are charged Q."""
    if Q < 1:
        raise ValueError("query budget must be >= 1")
    counts = list(query_counts)
    if not counts:
        raise ValueError("need at least one attacked target")
    vals = []
    for c in counts:
        if c is None:
            vals.append(float(Q))
        else:
            if c < 0 or c > Q:
                raise ValueError("query count outside 0..Q")
            vals.append(float(c))
    return float(np.mean(vals))


def impv(asr_before: float, asr_after: float) -> float:
    """Relative gain of one success rate over another, in percent."""
    if asr_before <= 0.0:
        raise ValueError("baseline success rate must be positive")
    return (asr_after / asr_before - 1.0) * 100.0


# --- regularized incomplete beta ------------------------------------------
#
# I_x(a, b) evaluated with the Lentz continued fraction:
#
#   I_x(a,b) = x^a (1-x)^b / (a B(a,b)) * 1/(1 + d1/(1 + d2/(1 + ...)))
#
# with the standard even/odd coefficients
#   d_{2m}   =  m (b - m) x / ((a + 2m - 1)(a + 2m))
#   d_{2m+1} = -(a + m)(a + b + m) x / ((a + 2m)(a + 2m + 1)),
# switching to 1 - I_{1-x}(b, a) when x > (a+1)/(a+b+2) so the fraction
# converges fast.  Converges to well below 1e-8 absolute error for the
# degrees of freedom used here.

def _beta_cf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 400):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-14:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if a <= 0.0 or b <= 0.0:
        raise ValueError("shape parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: int) -> float:
    """Two-sided tail mass P(|T_df| >= |t|)."""
    if df < 1:
        raise ValueError("need at least one degree of freedom")
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


def pearson_significance(xs, ys):
    """Pearson correlation with a two-sided p-value.

    p comes from t = r * sqrt((n-2) / (1-r^2)) against the Student-t
    distribution with n-2 degrees of freedom.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("series must be 1-D and equally long")
    n = len(xs)
    if n < 3:
        raise ValueError("need at least three points")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("series must not be constant")
    r = float(dx @ dy) / (sx * sy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, student_t_sf(t, n - 2)


def weight_norm_diff(server_mlp: models.MLPParams, malicious_id: int,
                     num_clients: int, embed_dim: int = 16) -> float:
    """Norm gap between the server's malicious and benign input blocks.

    L2 norm of the first-layer weight rows receiving the malicious client's
    embedding dims, minus the benign block norm (mean over benign clients
    when there are more than two).
    """
    W = server_mlp.weights[0]
    if W.shape[0] != num_clients * embed_dim:
        raise ValueError("first-layer rows do not match clients * embed_dim")
    if not (0 <= malicious_id < num_clients):
        raise ValueError("malicious client index out of range")
    norms = [float(np.linalg.norm(W[i * embed_dim:(i + 1) * embed_dim]))
             for i in range(num_clients)]
    benign = [x for i, x in enumerate(norms) if i != malicious_id]
    if num_clients != 2:
        logger.info("weight_norm_diff over %d clients: using benign mean",
                    num_clients)
    return norms[malicious_id] - float(np.mean(benign))


def detection_rate(flags) -> float:
    """Percent of runs in which the malicious client was flagged."""
    flags = list(flags)
    if not flags:
        raise ValueError("need at least one run")
    return 100.0 * sum(bool(f) for f in flags) / len(flags)


def export_embeddings(clients, server, shadow, graph, nodes, path,
                      malicious_id: int = 0, A_prop=None) -> None:
    """CSV of server-side and shadow-side embeddings for the given nodes.

    One row per node and source;  the server rows carry the concatenated
    pre-head embeddings (num_clients * embed_dim wide), the shadow rows its
    pre-head embedding zero-padded to the same width.
    """
    from .protocol import propagation_matrix

    if A_prop is None:
        A_prop = propagation_matrix(graph, clients[0].model_kind)
    nodes = np.asarray(nodes, dtype=np.int64)
    embs = [models.model_forward(c.params, A_prop, c.features)[0]
            for c in clients]
    h = np.concatenate(embs, axis=1)
    semb, _ = models.model_forward(shadow.gnn, A_prop,
                                   clients[malicious_id].features)
    width = h.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["node", "source"] + [f"e_{i}" for i in range(width)])
        for t in nodes:
            writer.writerow([int(t), "server"]
                            + [repr(float(x)) for x in h[t]])
        for t in nodes:
            row = np.zeros(width)
            row[:semb.shape[1]] = semb[t]
            writer.writerow([int(t), "shadow"]
                            + [repr(float(x)) for x in row])


RESULTS_COLUMNS = ["run_id", "seed", "method", "attack", "defense", "K",
                   "gamma", "tau", "delta", "clean_acc", "asr", "impv", "aq",
                   "cs_malicious", "shadow_mse", "weight_norm_diff",
                   "dr_flag"]


@dataclass
class ExperimentRecord:
    """One row of results.csv."""

    run_id: str
    seed: int
    method: str
    attack: str
    defense: str
    K: int
    gamma: float
    tau: int
    delta: int
    clean_acc: float
    asr: float
    impv: float | None
    aq: float
    cs_malicious: float
    shadow_mse: float
    weight_norm_diff: float
    dr_flag: bool | None

    def to_row(self):
        def num(x, fmt="{:.6f}"):
            return "" if x is None else fmt.format(x)

        return [self.run_id, str(self.seed), self.method, self.attack,
                self.defense, str(self.K), num(self.gamma, "{:.4f}"),
                str(self.tau), str(self.delta), num(self.clean_acc),
                num(self.asr), num(self.impv), num(self.aq),
                num(self.cs_malicious), num(self.shadow_mse),
                num(self.weight_norm_diff),
                "" if self.dr_flag is None else str(int(self.dr_flag))]


def write_results_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_COLUMNS)
        for rec in records:
            writer.writerow(rec.to_row())


def read_results_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)
