"""A small multilayer perceptron: feature extractor + classifier head +
learnable energy weights, with explicit forward caching and hand-derived
reverse-mode gradients.

Parameters live in plain numpy arrays addressed by name through
``MlpNetwork.params()``; a :class:`GradientTape` accumulates matching
gradient arrays. No general autodiff — the loss graph is fixed and its
backward pass is written out by hand (and checked against finite
differences in the test suite).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import Rng

__all__ = [
    "ForwardCache",
    "GradientTape",
    "MlpNetwork",
    "cross_entropy_batch",
    "cross_entropy_loss",
    "energy_score",
    "energy_score_batch",
    "load_checkpoint",
    "save_checkpoint",
]


class MlpNetwork:
    """ReLUMLP ``input -> hidden... -> feature(p) -> K logits``.

    The energy weights are stored as free parameters ``energy_u`` and
    exposed as ``energy_w = exp(energy_u)`` so they stay strictly positive.
    ``head_w``/``head_b`` are the scalar logistic-head parameters used only
    by the ce/nce discrimination losses.
    """

    def __init__(self, input_dim: int, hidden_dims, feature_dim: int, n_classes: int, rng: Rng):
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.feature_dim = int(feature_dim)
        self.n_classes = int(n_classes)
        self.version = 0

        dims = [self.input_dim, *self.hidden_dims, self.feature_dim]
        self.ext_w = []
        self.ext_b = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.ext_w.append(scale * rng.standard_normal((fan_in, fan_out)))
            self.ext_b.append(np.zeros(fan_out))
        scale = np.sqrt(2.0 / self.feature_dim)
        self.cls_w = scale * rng.standard_normal((self.feature_dim, self.n_classes))
        self.cls_b = np.zeros(self.n_classes)
        self.energy_u = np.zeros(self.n_classes)
        self.head_w = np.array(1.0)
        self.head_b = np.array(0.0)

    @property
    def energy_w(self) -> np.ndarray:
        return np.exp(self.energy_u)

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every learnable array, keyed by name."""
        out = {}
        for i, (w, b) in enumerate(zip(self.ext_w, self.ext_b)):
            out[f"ext_w{i}"] = w
            out[f"ext_b{i}"] = b
        out["cls_w"] = self.cls_w
        out["cls_b"] = self.cls_b
        out["energy_u"] = self.energy_u
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    # ---- forward ----------------------------------------------------------

    def forward_features(self, x: np.ndarray) -> np.ndarray:
        """Penultimate-layer activations for a vector or an (n, d) batch."""
        return self.forward(x).feats if np.asarray(x).ndim == 2 else self.forward(
            np.asarray(x, dtype=float).reshape(1, -1)
        ).feats[0]

    def classify(self, feats: np.ndarray) -> np.ndarray:
        """Affine map from features to K logits (no softmax)."""
        feats = np.asarray(feats, dtype=float)
        if feats.shape[-1] != self.feature_dim:
            raise ValueError(
                f"classify: feature dim {feats.shape[-1]} != expected {self.feature_dim}"
            )
        return feats @ self.cls_w + self.cls_b

    def forward(self, x: np.ndarray) -> "ForwardCache":
        """Full forward pass over an (n, d) batch, caching pre-activations."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"forward: expected (n, {self.input_dim}) input, got {x.shape}")
        a = x
        pres = []
        for w, b in zip(self.ext_w, self.ext_b):
            z = a @ w + b
            pres.append(z)
            a = np.maximum(z, 0.0)
        logits = a @ self.cls_w + self.cls_b
        return ForwardCache(x=x, pres=pres, feats=a, logits=logits, version=self.version)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class index per row; ties broken toward the lowest index."""
        return np.argmax(self.forward(x).logits, axis=1)

    # ---- backward ---------------------------------------------------------

    def backward(
        self,
        cache: "ForwardCache",
        tape: "GradientTape",
        dlogits: np.ndarray,
        dfeats_extra: np.ndarray | None = None,
    ) -> None:
        """Accumulate parameter gradients for a scalar loss given its
        gradient w.r.t. the cached logits (and optionally w.r.t. the cached
        features directly)."""
        if cache.version != self.version:
            raise RuntimeError("backward: forward cache is stale (parameters were updated)")
        tape.add("cls_w", cache.feats.T @ dlogits)
        tape.add("cls_b", dlogits.sum(axis=0))
        dact = dlogits @ self.cls_w.T
        if dfeats_extra is not None:
            dact = dact + dfeats_extra
        for i in range(len(self.ext_w) - 1, -1, -1):
            dz = dact * (cache.pres[i] > 0.0)
            inputs = cache.x if i == 0 else np.maximum(cache.pres[i - 1], 0.0)
            tape.add(f"ext_w{i}", inputs.T @ dz)
            tape.add(f"ext_b{i}", dz.sum(axis=0))
            dact = dz @ self.ext_w[i].T


@dataclass
class ForwardCache:
    x: np.ndarray
    pres: list
    feats: np.ndarray
    logits: np.ndarray
    version: int


class GradientTape:
    """Named gradient accumulators matching a network's parameter shapes."""

    def __init__(self, net: MlpNetwork):
        self.grads = {name: np.zeros_like(p) for name, p in net.params().items()}

    def add(self, name: str, g) -> None:
        acc = self.grads[name]
        g = np.asarray(g, dtype=float)
        if g.shape != acc.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} != {acc.shape}")
        acc += g

    def zero(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0


# ---- scalar heads ----------------------------------------------------------

def energy_score(net: MlpNetwork, logits: np.ndarray) -> float:
    """Energy of one logit vector: -log sum_k w_k exp(z_k), max-shifted."""
    return float(energy_score_batch(net, np.asarray(logits, dtype=float).reshape(1, -1))[0])


def energy_score_batch(net: MlpNetwork, logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if logits.shape[-1] != net.n_classes:
        raise ValueError(f"energy_score: expected {net.n_classes} logits, got {logits.shape[-1]}")
    m = logits.max(axis=1)
    s = net.energy_w * np.exp(logits - m[:, None])
    return -(m + np.log(s.sum(axis=1)))


def energy_gradients(net: MlpNetwork, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row energies and d(energy)/d(logit).

    The gradient w.r.t. the free energy parameter u_k equals the gradient
    w.r.t. z_k row-wise (both are -w_k exp(z_k) / sum_j w_j exp(z_j)), so
    the single returned matrix serves both chain rules.
    """
    logits = np.asarray(logits, dtype=float)
    m = logits.max(axis=1)
    s = net.energy_w * np.exp(logits - m[:, None])
    tot = s.sum(axis=1)
    energies = -(m + np.log(tot))
    return energies, -s / tot[:, None]


def cross_entropy_loss(logits: np.ndarray, y: int) -> float:
    """Negative log-softmax probability of class ``y`` (log-sum-exp stabilised)."""
    logits = np.asarray(logits, dtype=float)
    k = logits.shape[0]
    if not 0 <= y < k:
        raise ValueError(f"cross_entropy_loss: label {y} out of range for {k} classes")
    m = logits.max()
    return float(np.log(np.exp(logits - m).sum()) + m - logits[y])


def cross_entropy_batch(logits: np.ndarray, ys: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy over a batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=float)
    n, k = logits.shape
    ys = np.asarray(ys, dtype=int)
    if ys.min() < 0 or ys.max() >= k:
        raise ValueError("cross_entropy_batch: label out of range")
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    tot = e.sum(axis=1)
    logp = logits - m - np.log(tot)[:, None]
    loss = float(-logp[np.arange(n), ys].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), ys] -= 1.0
    return loss, dlogits / n


# ---- checkpointing ---------------------------------------------------------

CHECKPOINT_FORMAT = "ares-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(net: MlpNetwork, path, epoch: int = 0) -> None:
    """Canonical JSON checkpoint: named parameter tensors, each stored as an
    explicit shape header plus flat values. Floats round-trip exactly."""
    params = {
        name: {"shape": list(np.asarray(p).shape), "data": np.asarray(p).reshape(-1).tolist()}
        for name, p in net.params().items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "arch": {
            "input_dim": net.input_dim,
            "hidden_dims": list(net.hidden_dims),
            "feature_dim": net.feature_dim,
            "n_classes": net.n_classes,
        },
        "params": params,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[MlpNetwork, int]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    arch = doc["arch"]
    net = MlpNetwork(
        arch["input_dim"], arch["hidden_dims"], arch["feature_dim"], arch["n_classes"], Rng(0)
    )
    for name, p in net.params().items():
        entry = doc["params"][name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {shape}, expected {p.shape}")
        p[...] = np.asarray(entry["data"], dtype=float).reshape(shape)
    return net, int(doc["epoch"])
