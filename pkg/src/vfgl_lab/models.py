"""Dense numpy forward/backward kernels for the local graph models and MLP head.

Three local families produce 16-dim node embeddings from a shared propagation
matrix and a private feature slice:

* gcn    -- two graph convolutions, ReLU between, linear output;
* sgc    -- a squared propagation step collapsed onto two linear maps;
* gcnii  -- deep residual convolutions with initial-embedding and identity
            shortcuts, H_{l+1} = relu(((1-a) P H_l + a H_0)((1-b_l) I + b_l W_l)).

Every forward records per-layer pre-activations (LayerTrace) so neuron paths
can be traced afterwards.  Backward passes are analytic and also return the
gradient w.r.t. the raw adjacency entries, differentiated exactly through the
D^-1/2 (A+I) D^-1/2 normalization; that gradient drives the structural attacks.
ReLU uses subgradient 0 at 0 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "GCNParams", "SGCParams", "GCNIIParams", "MLPParams", "LayerTrace",
    "AdamState", "init_gcn", "init_sgc", "init_gcnii", "init_mlp",
    "init_model", "model_forward", "model_backward", "mlp_forward",
    "mlp_forward_cache", "mlp_backward", "neuron_output", "softmax",
    "cross_entropy", "one_hot", "init_adam", "adam_step", "param_leaves",
    "replace_leaves", "named_matrices", "params_from_matrices",
    "save_checkpoint", "load_checkpoint", "relu", "relu_grad",
]

HIDDEN_DIM = 32
EMBED_DIM = 16
GCNII_DEPTH = 4
GCNII_ALPHA = 0.1


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    # Subgradient 0 at the kink.
    return (z > 0.0).astype(z.dtype)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, num_classes):
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of the given rows."""
    p = np.clip(probs[np.arange(len(labels)), labels], 1e-12, None)
    return float(-np.log(p).mean())


def glorot(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass(frozen=True)
class GCNParams:
    W0: np.ndarray
    W1: np.ndarray

    kind = "gcn"


@dataclass(frozen=True)
class SGCParams:
    W0: np.ndarray
    W1: np.ndarray
    power: int = 2

    kind = "sgc"


@dataclass(frozen=True)
class GCNIIParams:
    Win: np.ndarray
    Wl: tuple          # depth hidden x hidden matrices
    Wout: np.ndarray
    alphas: tuple
    betas: tuple

    kind = "gcnii"


@dataclass(frozen=True)
class MLPParams:
    weights: tuple
    biases: tuple

    kind = "mlp"


@dataclass(frozen=True)
class LayerTrace:
    """Per-layer pre-activations Z and post-activations H of one forward."""

    Z: tuple
    H: tuple
    activated: tuple   # whether H[l] = relu(Z[l]) or H[l] = Z[l]

    @property
    def num_layers(self) -> int:
        return len(self.Z)


def init_gcn(d_in, hidden=HIDDEN_DIM, out=EMBED_DIM, rng=None) -> GCNParams:
    rng = rng or np.random.default_rng(0)
    return GCNParams(glorot(rng, d_in, hidden), glorot(rng, hidden, out))


def init_sgc(d_in, hidden=HIDDEN_DIM, out=EMBED_DIM, rng=None) -> SGCParams:
    rng = rng or np.random.default_rng(0)
    return SGCParams(glorot(rng, d_in, hidden), glorot(rng, hidden, out))


def init_gcnii(d_in, hidden=HIDDEN_DIM, out=EMBED_DIM, depth=GCNII_DEPTH,
               rng=None, alpha=GCNII_ALPHA) -> GCNIIParams:
    rng = rng or np.random.default_rng(0)
    Wl = tuple(glorot(rng, hidden, hidden) for _ in range(depth))
    alphas = tuple(alpha for _ in range(depth))
    betas = tuple(math.log(0.5 / (l + 1) + 1.0) for l in range(depth))
    return GCNIIParams(glorot(rng, d_in, hidden), Wl,
                       glorot(rng, hidden, out), alphas, betas)


def init_mlp(widths, rng=None) -> MLPParams:
    rng = rng or np.random.default_rng(0)
    ws = tuple(glorot(rng, a, b) for a, b in zip(widths[:-1], widths[1:]))
    bs = tuple(np.zeros(b) for b in widths[1:])
    return MLPParams(ws, bs)


def init_model(kind, d_in, hidden=HIDDEN_DIM, out=EMBED_DIM, rng=None):
    """Initialize a local model of the given family."""
    if kind == "gcn":
        return init_gcn(d_in, hidden, out, rng)
    if kind == "sgc":
        return init_sgc(d_in, hidden, out, rng)
    if kind == "gcnii":
        return init_gcnii(d_in, hidden, out, rng=rng)
    raise ValueError(f"unknown model kind: {kind!r}")


# ---------------------------------------------------------------------------
# forward

def _check_shapes(params, A_norm, X):
    if A_norm.ndim != 2 or A_norm.shape[0] != A_norm.shape[1]:
        raise ValueError("propagation matrix must be square")
    if X.ndim != 2 or X.shape[0] != A_norm.shape[0]:
        raise ValueError("X rows must match propagation matrix")
    d_in = {"gcn": lambda p: p.W0.shape[0],
            "sgc": lambda p: p.W0.shape[0],
            "gcnii": lambda p: p.Win.shape[0]}[params.kind](params)
    if X.shape[1] != d_in:
        raise ValueError(f"X has {X.shape[1]} columns, model expects {d_in}")


def model_forward(params, A_norm, X):
    """Run a local model; returns (embedding, LayerTrace)."""
    _check_shapes(params, A_norm, X)
    if params.kind == "gcn":
        Z1 = A_norm @ X @ params.W0
        H1 = relu(Z1)
        Z2 = A_norm @ H1 @ params.W1
        trace = LayerTrace((Z1, Z2), (H1, Z2), (True, False))
        return Z2, trace
    if params.kind == "sgc":
        P = np.linalg.matrix_power(A_norm, params.power)
        Z1 = P @ X @ params.W0
        Z2 = Z1 @ params.W1
        trace = LayerTrace((Z1, Z2), (Z1, Z2), (False, False))
        return Z2, trace
    if params.kind == "gcnii":
        Z = [X @ params.Win]
        H = [relu(Z[0])]
        for l, W in enumerate(params.Wl):
            a, b = params.alphas[l], params.betas[l]
            T = (1.0 - a) * (A_norm @ H[-1]) + a * H[0]
            M = (1.0 - b) * np.eye(W.shape[0]) + b * W
            Z.append(T @ M)
            H.append(relu(Z[-1]))
        Zout = H[-1] @ params.Wout
        Z.append(Zout)
        H.append(Zout)
        act = (True,) * (1 + len(params.Wl)) + (False,)
        return Zout, LayerTrace(tuple(Z), tuple(H), act)
    raise ValueError(f"unknown model kind: {params.kind!r}")


# ---------------------------------------------------------------------------
# backward

def _normalization_backward(G_hat, A_norm, raw_propagation=False):
    """Chain dL/dP back to the raw adjacency entries.

    The forward propagation is P = D^-1/2 (A+I) D^-1/2 with D the degree of
    A+I.  A+I and the degrees are recovered from P itself (diag(P) = 1/deg
    because the self-loop weight is 1), so with S = A+I and s_i = deg_i^-1/2:

        dL/dS_ij = G_ij s_i s_j - 1/2 s_i^3 u_i - 1/2 s_j^3 w_j,
        u = (G*S) s,  w = (G*S)^T s.

    The diagonal of A is fixed at zero and the result is symmetrized.
    """
    if raw_propagation:
        dA = G_hat.copy()
    else:
        s = np.sqrt(np.diag(A_norm))            # s_i = deg_i^-1/2
        S = A_norm / np.outer(s, s)             # recovered A+I
        P = G_hat * S
        u = P @ s
        w = P.T @ s
        dA = G_hat * np.outer(s, s)
        dA -= 0.5 * (s ** 3 * u)[:, None]
        dA -= 0.5 * (s ** 3 * w)[None, :]
    np.fill_diagonal(dA, 0.0)
    return 0.5 * (dA + dA.T)


def model_backward(params, A_norm, X, upstream_grad, trace,
                   raw_propagation=False, with_adjacency=True):
    """Analytic gradients of a scalar loss through a local model.

    upstream_grad is dL/d(embedding).  Returns (param_grads, X_grad, A_grad)
    where param_grads mirrors the params dataclass and A_grad is w.r.t. the
    raw adjacency entries (zero diagonal, symmetrized). Requires the trace of
    the matching forward call.
    """
    if trace is None:
        raise ValueError("model_backward requires the forward trace")
    G = np.asarray(upstream_grad, dtype=np.float64)
    if params.kind == "gcn":
        Z1, _ = trace.Z
        H1 = trace.H[0]
        dW1 = (A_norm @ H1).T @ G
        dH1 = A_norm @ (G @ params.W1.T)
        dZ1 = dH1 * relu_grad(Z1)
        dW0 = (A_norm @ X).T @ dZ1
        dX = A_norm @ (dZ1 @ params.W0.T)
        A_grad = None
        if with_adjacency:
            G_hat = G @ (H1 @ params.W1).T + dZ1 @ (X @ params.W0).T
            A_grad = _normalization_backward(G_hat, A_norm, raw_propagation)
        return GCNParams(dW0, dW1), dX, A_grad
    if params.kind == "sgc":
        Z1 = trace.Z[0]
        P = np.linalg.matrix_power(A_norm, params.power)
        dW1 = Z1.T @ G
        dZ1 = G @ params.W1.T
        M = X @ params.W0
        dM = P @ dZ1                      # P is symmetric
        dW0 = X.T @ dM
        dX = dM @ params.W0.T
        A_grad = None
        if with_adjacency:
            G_hat = dZ1 @ (A_norm @ M).T + A_norm @ dZ1 @ M.T
            A_grad = _normalization_backward(G_hat, A_norm, raw_propagation)
        return SGCParams(dW0, dW1, params.power), dX, A_grad
    if params.kind == "gcnii":
        depth = len(params.Wl)
        Z = trace.Z
        H = trace.H
        dH = [np.zeros_like(H[l]) for l in range(depth + 1)]
        dWout = H[depth].T @ G
        dH[depth] += G @ params.Wout.T
        dWl = [None] * depth
        G_hat = np.zeros_like(A_norm) if with_adjacency else None
        for l in range(depth, 0, -1):
            a, b = params.alphas[l - 1], params.betas[l - 1]
            W = params.Wl[l - 1]
            M = (1.0 - b) * np.eye(W.shape[0]) + b * W
            dZl = dH[l] * relu_grad(Z[l])
            T = (1.0 - a) * (A_norm @ H[l - 1]) + a * H[0]
            dWl[l - 1] = b * (T.T @ dZl)
            dT = dZl @ M.T
            dH[l - 1] += (1.0 - a) * (A_norm @ dT)
            dH[0] += a * dT
            if with_adjacency:
                G_hat += (1.0 - a) * (dT @ H[l - 1].T)
        dZ0 = dH[0] * relu_grad(Z[0])
        dWin = X.T @ dZ0
        dX = dZ0 @ params.Win.T
        A_grad = None
        if with_adjacency:
            A_grad = _normalization_backward(G_hat, A_norm, raw_propagation)
        grads = GCNIIParams(dWin, tuple(dWl), dWout,
                            params.alphas, params.betas)
        return grads, dX, A_grad
    raise ValueError(f"unknown model kind: {params.kind!r}")


# ---------------------------------------------------------------------------
# MLP head

def mlp_forward_cache(params, X):
    """Forward with per-layer pre-activations kept for backward."""
    if X.shape[1] != params.weights[0].shape[0]:
        raise ValueError("input width does not match first layer")
    zs = []
    a = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        zs.append(z)
        a = relu(z) if i < last else z
    logits = zs[-1]
    return logits, softmax(logits), zs


def mlp_forward(params, X):
    """ReLU MLP with a linear final layer; returns (logits, probabilities)."""
    logits, probs, _ = mlp_forward_cache(params, X)
    return logits, probs


def mlp_backward(params, X, zs, dlogits):
    """Gradients of the MLP given dL/dlogits; returns (grads, dL/dinput)."""
    last = len(params.weights) - 1
    da = dlogits
    dws, dbs = [None] * (last + 1), [None] * (last + 1)
    for i in range(last, -1, -1):
        dz = da if i == last else da * relu_grad(zs[i])
        inp = X if i == 0 else relu(zs[i - 1])
        dws[i] = inp.T @ dz
        dbs[i] = dz.sum(axis=0)
        da = dz @ params.weights[i].T
    return MLPParams(tuple(dws), tuple(dbs)), da


def neuron_output(trace: LayerTrace, node: int, layer: int) -> np.ndarray:
    """Pre-activation row of one node at one traced layer."""
    if not (0 <= layer < trace.num_layers):
        raise ValueError(f"layer must be in 0..{trace.num_layers - 1}")
    Z = trace.Z[layer]
    if not (0 <= node < Z.shape[0]):
        raise ValueError("node out of range")
    return Z[node].copy()


# ---------------------------------------------------------------------------
# parameter plumbing: flat leaf views, Adam, checkpoints

def param_leaves(params):
    """Flat list of the trainable arrays of a params dataclass."""
    if params.kind == "gcn" or params.kind == "sgc":
        return [params.W0, params.W1]
    if params.kind == "gcnii":
        return [params.Win, *params.Wl, params.Wout]
    if params.kind == "mlp":
        return [*params.weights, *params.biases]
    raise ValueError(f"unknown params kind: {params.kind!r}")


def replace_leaves(params, leaves):
    """Rebuild a params dataclass from a flat leaf list (same order)."""
    if params.kind == "gcn":
        return GCNParams(*leaves)
    if params.kind == "sgc":
        return SGCParams(leaves[0], leaves[1], params.power)
    if params.kind == "gcnii":
        depth = len(params.Wl)
        return GCNIIParams(leaves[0], tuple(leaves[1:1 + depth]),
                           leaves[1 + depth], params.alphas, params.betas)
    if params.kind == "mlp":
        k = len(params.weights)
        return MLPParams(tuple(leaves[:k]), tuple(leaves[k:]))
    raise ValueError(f"unknown params kind: {params.kind!r}")


@dataclass(frozen=True)
class AdamState:
    m: tuple
    v: tuple
    t: int = 0


def init_adam(params) -> AdamState:
    leaves = param_leaves(params)
    return AdamState(tuple(np.zeros_like(x) for x in leaves),
                     tuple(np.zeros_like(x) for x in leaves), 0)


def adam_step(state: AdamState, params, grads, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    p_leaves = param_leaves(params)
    g_leaves = param_leaves(grads)
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(p_leaves, g_leaves, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return replace_leaves(params, new_p), AdamState(tuple(new_m), tuple(new_v), t)


def named_matrices(params, prefix=""):
    """Name->matrix view of a params dataclass, for checkpointing."""
    sep = "." if prefix else ""
    if params.kind in ("gcn", "sgc"):
        return {f"{prefix}{sep}W0": params.W0, f"{prefix}{sep}W1": params.W1}
    if params.kind == "gcnii":
        out = {f"{prefix}{sep}Win": params.Win, f"{prefix}{sep}Wout": params.Wout}
        for l, W in enumerate(params.Wl):
            out[f"{prefix}{sep}Wl{l}"] = W
        return out
    if params.kind == "mlp":
        out = {}
        for i, (W, b) in enumerate(zip(params.weights, params.biases)):
            out[f"{prefix}{sep}L{i}.W"] = W
            out[f"{prefix}{sep}L{i}.b"] = b
        return out
    raise ValueError(f"unknown params kind: {params.kind!r}")


def _mat(mats, key, like):
    if key not in mats:
        raise ValueError(f"checkpoint is missing matrix {key!r}")
    arr = np.asarray(mats[key], dtype=np.float64)
    return arr.reshape(-1) if like.ndim == 1 else arr.reshape(like.shape)


def params_from_matrices(template, mats, prefix=""):
    """Inverse of named_matrices for a params dataclass of the same shapes."""
    sep = "." if prefix else ""
    if template.kind in ("gcn", "sgc"):
        leaves = [_mat(mats, f"{prefix}{sep}W0", template.W0),
                  _mat(mats, f"{prefix}{sep}W1", template.W1)]
    elif template.kind == "gcnii":
        leaves = [_mat(mats, f"{prefix}{sep}Win", template.Win)]
        leaves += [_mat(mats, f"{prefix}{sep}Wl{l}", template.Wl[l])
                   for l in range(len(template.Wl))]
        leaves.append(_mat(mats, f"{prefix}{sep}Wout", template.Wout))
    elif template.kind == "mlp":
        k = len(template.weights)
        leaves = [_mat(mats, f"{prefix}{sep}L{i}.W", template.weights[i])
                  for i in range(k)]
        leaves += [_mat(mats, f"{prefix}{sep}L{i}.b", template.biases[i])
                   for i in range(k)]
    else:
        raise ValueError(f"unknown params kind: {template.kind!r}")
    return replace_leaves(template, leaves)


def save_checkpoint(path, matrices) -> None:
    """Write named matrices as TSV: name, rows, cols, row-major values."""
    with open(path, "w") as fh:
        for name in sorted(matrices):
            arr = np.atleast_2d(np.asarray(matrices[name], dtype=np.float64))
            vals = ",".join(repr(float(x)) for x in arr.ravel())
            fh.write(f"{name}\t{arr.shape[0]}\t{arr.shape[1]}\t{vals}\n")


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; name -> 2-D array."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields")
            name, rows, cols, vals = parts
            rows, cols = int(rows), int(cols)
            arr = np.array([float(x) for x in vals.split(",")])
            if arr.size != rows * cols:
                raise ValueError(f"{path}:{lineno}: value count mismatch")
            out[name] = arr.reshape(rows, cols)
    return out
