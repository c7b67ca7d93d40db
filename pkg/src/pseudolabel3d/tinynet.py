"""Two-layer perceptrons with hand-written backprop, box losses and SGD.

Everything is float64 numpy; gradients are analytic and checked against
central finite differences in the test-suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

BLOB_VERSION = 1
_MAGIC = b"PL3DBLOB"


@dataclass
class Mlp2:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"  # or "linear"

    PARAMS = ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator | int = 0, activation: str = "relu") -> "Mlp2":
        """Uniform(+-1/sqrt(fan_in)) weights and biases."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        a1 = 1.0 / np.sqrt(n_in)
        a2 = 1.0 / np.sqrt(n_hidden)
        return cls(
            rng.uniform(-a1, a1, (n_in, n_hidden)),
            rng.uniform(-a1, a1, n_hidden),
            rng.uniform(-a2, a2, (n_hidden, n_out)),
            rng.uniform(-a2, a2, n_out),
            activation,
        )

    @classmethod
    def zeros(cls, n_in: int, n_hidden: int, n_out: int, activation: str = "relu") -> "Mlp2":
        return cls(np.zeros((n_in, n_hidden)), np.zeros(n_hidden), np.zeros((n_hidden, n_out)), np.zeros(n_out), activation)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[0], self.W1.shape[1], self.W2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.PARAMS}

    def copy(self) -> "Mlp2":
        return Mlp2(*(getattr(self, k).copy() for k in self.PARAMS), activation=self.activation)


def forward(net: Mlp2, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Returns ``(output (B, out), cache)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.W1.shape[0]:
        raise ValueError(f"expected input of shape (B, {net.W1.shape[0]}), got {x.shape}")
    pre = x @ net.W1 + net.b1
    hid = np.maximum(pre, 0.0) if net.activation == "relu" else pre
    out = hid @ net.W2 + net.b2
    return out, (x, pre, hid)


def backward(net: Mlp2, cache: tuple, dout: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of a scalar loss w.r.t. parameters and input, given ``dL/dout``."""
    x, pre, hid = cache
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != (len(x), net.W2.shape[1]):
        raise ValueError(f"dout shape {dout.shape} does not match output shape {(len(x), net.W2.shape[1])}")
    grads = {"W2": hid.T @ dout, "b2": dout.sum(axis=0)}
    dhid = dout @ net.W2.T
    dpre = dhid * (pre > 0.0) if net.activation == "relu" else dhid
    grads["W1"] = x.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return grads, dpre @ net.W1.T


# ---------------------------------------------------------------------------
# Losses (elementwise; callers reduce)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def focal_loss(logit, label, alpha_f: float = 0.25, gamma: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid focal loss ``-a_t (1 - p_t)^g log p_t`` and its derivative in the logit."""
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("focal_loss labels must be 0 or 1")
    p = sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    q = 1.0 - p
    pos = alpha_f * q**gamma * -log_p
    neg = (1.0 - alpha_f) * p**gamma * -log_q
    loss = np.where(y == 1.0, pos, neg)
    # d/dx for y=1: a q^g (g p log p - q); for y=0: (1-a) p^g (p - g q log q)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_pos = alpha_f * q**gamma * (gamma * p * log_p - q)
        g_neg = (1.0 - alpha_f) * p**gamma * (p - gamma * q * log_q)
    grad = np.where(y == 1.0, g_pos, g_neg)
    return loss, np.nan_to_num(grad)


def bce_loss(logit, label) -> tuple[np.ndarray, np.ndarray]:
    """Binary cross-entropy on logits and its derivative."""
    x = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    loss = _softplus(x) - y * x
    return loss, sigmoid(x) - y


def smooth_l1(pred, target, beta: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Huber-style loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    ad = np.abs(d)
    inside = ad < beta
    loss = np.where(inside, 0.5 * d * d / beta, ad - 0.5 * beta)
    grad = np.where(inside, d / beta, np.sign(d))
    return loss, grad


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class Sgd:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    _velocity: dict[int, dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def step(self, net: Mlp2, grads: Mapping[str, np.ndarray]) -> None:
        vel = self._velocity.setdefault(id(net), {k: np.zeros_like(getattr(net, k)) for k in Mlp2.PARAMS})
        for k in Mlp2.PARAMS:
            g = grads[k]
            if self.weight_decay and k.startswith("W"):
                g = g + self.weight_decay * getattr(net, k)
            vel[k] = self.momentum * vel[k] - self.lr * g
            setattr(net, k, getattr(net, k) + vel[k])


# ---------------------------------------------------------------------------
# Checkpoint blob: magic, u32 header length, UTF-8 JSON header, float32 LE data


def write_blob(path: str | Path, header: dict, arrays: Mapping[str, np.ndarray]) -> None:
    header = dict(header)
    header["version"] = BLOB_VERSION
    header["arrays"] = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    text = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in arrays.values())
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(text)) + text + payload)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a weight blob")
    (n,) = struct.unpack("<I", raw[len(_MAGIC) : len(_MAGIC) + 4])
    start = len(_MAGIC) + 4
    header = json.loads(raw[start : start + n].decode())
    if "version" not in header:
        raise ValueError(f"{path}: blob header has no version")
    if header["version"] != BLOB_VERSION:
        raise ValueError(f"{path}: unsupported blob version {header['version']}")
    offset = start + n
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[spec["name"]] = data.reshape(spec["shape"]).astype(np.float64)
        offset += 4 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing weight data")
    return header, arrays
