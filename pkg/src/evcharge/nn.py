"""Small float64 neural toolkit with hand-written reverse-mode gradients.

Everything works on row batches: an MLP maps ``(B, D) -> (B, out)`` and the
attention block maps per-agent features ``(B, K, F) -> (B, H)``.  Unbatched
inputs (``(D,)`` and ``(K, F)``) are accepted and returned unbatched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


def _init_linear(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


@dataclass
class NetParams:
    """Dense layers; ``weights[i]`` has shape (in, out)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    activations: List[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match weight {W.shape}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: input dim {W.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @classmethod
    def init(cls, sizes: Sequence[int], rng, out_activation="identity") -> "NetParams":
        ws, bs, acts = [], [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            W, bias = _init_linear(rng, a, b)
            ws.append(W)
            bs.append(bias)
            acts.append(out_activation if i == len(sizes) - 2 else "relu")
        return cls(ws, bs, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, y, g):
    if name == "relu":
        return g * (z > 0)
    if name == "tanh":
        return g * (1.0 - y * y)
    return g


def mlp_forward(params: NetParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[-1]} != network input dim {params.in_dim}")
    layers = []
    for W, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ W + b
        y = _act(act, z)
        layers.append((h, z, y))
        h = y
    cache = {"layers": layers, "single": single, "id": id(params)}
    return (h[0] if single else h), cache


def mlp_backward(params: NetParams, cache, grad_out, pre_grad=None):
    """Returns ({name: gradient}, input gradient); gradients are summed over the batch.

    ``pre_grad`` is an extra gradient w.r.t. the output layer's pre-activation.
    """
    if cache["id"] != id(params) or len(cache["layers"]) != len(params.weights):
        raise ValueError("cache does not belong to these parameters")
    g = np.asarray(grad_out, dtype=float)
    if cache["single"]:
        g = g[None, :]
    grads = {}
    for i in range(len(params.weights) - 1, -1, -1):
        h, z, y = cache["layers"][i]
        g = _act_grad(params.activations[i], z, y, g)
        if pre_grad is not None and i == len(params.weights) - 1:
            pg = np.asarray(pre_grad, dtype=float)
            g = g + (pg[None, :] if cache["single"] else pg)
        grads[f"W{i}"] = h.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, (g[0] if cache["single"] else g)


@dataclass
class AttentionParams:
    v: np.ndarray  # (A,)
    W_a: np.ndarray  # (A, F)
    W_c: np.ndarray  # (H, F)

    def __post_init__(self):
        if self.W_a.shape != (self.v.shape[0], self.W_c.shape[1]):
            raise ValueError("attention parameter shapes are inconsistent")

    @classmethod
    def init(cls, feature_dim, attn_dim, out_dim, rng) -> "AttentionParams":
        b = 1.0 / np.sqrt(feature_dim)
        return cls(v=rng.uniform(-1 / np.sqrt(attn_dim), 1 / np.sqrt(attn_dim), size=attn_dim),
                   W_a=rng.uniform(-b, b, size=(attn_dim, feature_dim)),
                   W_c=rng.uniform(-b, b, size=(out_dim, feature_dim)))

    @property
    def feature_dim(self) -> int:
        return self.W_a.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"v": self.v, "W_a": self.W_a, "W_c": self.W_c}

    def copy(self) -> "AttentionParams":
        return AttentionParams(self.v.copy(), self.W_a.copy(), self.W_c.copy())


def softmax(e, axis=-1):
    z = e - e.max(axis=axis, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=axis, keepdims=True)


def attention_forward(params: AttentionParams, features):
    """Score, softmax-pool and project a set of per-agent feature vectors.

    Returns ``(x, alphas, cache)`` with ``x = relu(W_c @ sum_i alpha_i f_i)``.
    """
    f = np.asarray(features, dtype=float)
    single = f.ndim == 2
    if single:
        f = f[None]
    if f.ndim != 3 or f.shape[1] == 0:
        raise ValueError("attention needs at least one feature vector")
    if f.shape[2] != params.feature_dim:
        raise ValueError(f"feature dim {f.shape[2]} != {params.feature_dim}")
    t = np.tanh(f @ params.W_a.T)  # (B, K, A)
    e = t @ params.v  # (B, K)
    alpha = softmax(e, axis=1)
    pooled = np.einsum("bk,bkf->bf", alpha, f)
    pre = pooled @ params.W_c.T
    x = np.maximum(pre, 0.0)
    cache = dict(f=f, t=t, alpha=alpha, pooled=pooled, pre=pre, single=single)
    if single:
        return x[0], alpha[0], cache
    return x, alpha, cache


def attention_backward(params: AttentionParams, cache, x_grad):
    """Returns ({"v","W_a","W_c"} gradients, per-feature gradients shaped like the input)."""
    g = np.asarray(x_grad, dtype=float)
    if cache["single"]:
        g = g[None]
    f, t, alpha, pooled, pre = (cache[k] for k in ("f", "t", "alpha", "pooled", "pre"))
    dpre = g * (pre > 0)
    dW_c = dpre.T @ pooled
    dpooled = dpre @ params.W_c  # (B, F)
    df = alpha[:, :, None] * dpooled[:, None, :]
    dalpha = np.einsum("bkf,bf->bk", f, dpooled)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    dv = np.einsum("bk,bka->a", de, t)
    dz = de[:, :, None] * params.v[None, None, :] * (1.0 - t * t)
    dW_a = np.einsum("bka,bkf->af", dz, f)
    df += dz @ params.W_a
    grads = {"v": dv, "W_a": dW_a, "W_c": dW_c}
    return grads, (df[0] if cache["single"] else df)


class AdamState:
    """Bias-corrected Adam over a flat {name: array} parameter dict."""

    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
              ascent: bool = False) -> Dict[str, np.ndarray]:
    """One in-place Adam update; descends on ``grads`` unless ``ascent``."""
    for k in params:
        if k not in grads:
            raise KeyError(f"missing gradient for {k}")
        if grads[k].shape != params[k].shape:
            raise ValueError(f"{k}: gradient shape {grads[k].shape} != {params[k].shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    sign = 1.0 if ascent else -1.0
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p += sign * state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def soft_update(target: Dict[str, np.ndarray], source: Dict[str, np.ndarray], tau: float):
    for k, t in target.items():
        s = source[k]
        if s.shape != t.shape:
            raise ValueError(f"{k}: shape {s.shape} != {t.shape}")
        t *= 1.0 - tau
        t += tau * s
    return target


def copy_into(target: Dict[str, np.ndarray], source: Dict[str, np.ndarray]) -> None:
    for k, t in target.items():
        t[...] = source[k]


# ---- checkpoints ------------------------------------------------------------

def to_json_groups(groups: Dict[str, Dict[str, np.ndarray]]) -> dict:
    """{group: {name: array}} -> JSON-ready {"group/name": {shape, data}}."""
    doc = {}
    for gname, arrays in groups.items():
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype=float)
            doc[f"{gname}/{name}"] = {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}
    return doc


def from_json_groups(doc: dict) -> Dict[str, Dict[str, np.ndarray]]:
    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for key, entry in doc.items():
        gname, _, name = key.rpartition("/")
        arr = np.asarray(entry["data"], dtype=float).reshape(entry["shape"])
        groups.setdefault(gname, {})[name] = arr
    return groups


def save_checkpoint(path, groups: Dict[str, Dict[str, np.ndarray]], manifest: dict | None = None):
    doc = {"params": to_json_groups(groups)}
    if manifest is not None:
        doc["manifest"] = manifest
    with open(path, "w", encoding="utf-8") as fh:
        # json emits repr() floats, i.e. shortest strings that round-trip exactly
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return from_json_groups(doc["params"]), doc.get("manifest")
