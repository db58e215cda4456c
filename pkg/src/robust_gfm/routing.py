"""Prototype similarity, softmax gating over experts plus a null slot, and fusion."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .nn import glorot

log = logging.getLogger(__name__)


def compute_prototype(Z, rows) -> np.ndarray:
    z = np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    if rows.size == 0:
        raise ValueError("cannot build a prototype from an empty selection")
    return z[rows].mean(axis=0)


def cosine_similarities(target_proto, source_protos) -> np.ndarray:
    """S_i = cos(target, source_i); zero-norm prototypes get 0 and a warning."""
    t = np.asarray(target_proto, dtype=np.float64)
    tn = np.linalg.norm(t)
    out = np.zeros(len(source_protos))
    if tn == 0:
        log.warning("target prototype has zero norm; all similarities set to 0")
        return out
    for i, s in enumerate(source_protos):
        s = np.asarray(s, dtype=np.float64)
        sn = np.linalg.norm(s)
        if sn == 0:
            log.warning("source prototype %d has zero norm; similarity set to 0", i)
            continue
        out[i] = np.clip(t @ s / (tn * sn), -1.0, 1.0)
    return out


@dataclass
class RouterParams:
    """Linear map R^n -> R^{n+1}; the last slot is the null expert."""

    W: Tensor
    b: Tensor

    @classmethod
    def init(cls, n: int, kind: str = "identity") -> "RouterParams":
        w = np.zeros((n + 1, n))
        if kind == "identity":
            w[:n, :n] = np.eye(n)
        elif kind != "zeros":
            raise ValueError(f"unknown router init {kind!r}")
        return cls(Tensor(w, requires_grad=True, name="router_W"), Tensor(np.zeros(n + 1), requires_grad=True, name="router_b"))

    @property
    def num_experts(self) -> int:
        return self.W.shape[1]

    def named_parameters(self):
        return [("router_W", self.W), ("router_b", self.b)]


def route(S, params: RouterParams) -> Tensor:
    """alpha = softmax(W S + b) on the (n+1)-simplex."""
    s = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64).reshape(-1)
    if s.shape[0] != params.num_experts:
        raise ag.ShapeError(f"expected {params.num_experts} similarities, got {s.shape[0]}")
    logits = params.W @ s.reshape(-1, 1)
    logits = logits.reshape(-1) + params.b
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite router logits")
    return ag.row_softmax(logits.reshape(1, -1)).reshape(-1)


def uniform_weights(n: int) -> Tensor:
    return Tensor(np.full(n + 1, 1.0 / (n + 1)))


def fuse_embeddings(expert_Zs, Z_null, alpha) -> Tensor:
    """sum_i alpha_i Z_i + alpha_null Z_null."""
    alpha = ag.as_tensor(alpha)
    zs = [ag.as_tensor(z) for z in expert_Zs] + [ag.as_tensor(Z_null)]
    if alpha.shape != (len(zs),):
        raise ag.ShapeError(f"alpha has shape {alpha.shape}, expected ({len(zs)},)")
    shape = zs[0].shape
    for z in zs:
        if z.shape != shape:
            raise ag.ShapeError(f"embedding shapes differ: {z.shape} vs {shape}")
    out = zs[0] * alpha[0]
    for i in range(1, len(zs)):
        out = out + zs[i] * alpha[i]
    return out


def moe_entropy_loss(alpha) -> Tensor:
    """-sum_j alpha_j log alpha_j over all n+1 slots."""
    alpha = ag.as_tensor(alpha)
    return -(alpha * ag.log(alpha)).sum()


@dataclass
class NullExpert:
    """Single bias-free GCN layer trained only on the target graph."""

    W: Tensor

    @classmethod
    def init(cls, in_dim: int, out_dim: int, seed: int = 0) -> "NullExpert":
        rng = np.random.default_rng(seed)
        return cls(Tensor(glorot(rng, in_dim, out_dim), requires_grad=True, name="null_W"))

    def named_parameters(self):
        return [("null_W", self.W)]


def null_expert_forward(X, A_norm, null: NullExpert) -> Tensor:
    if not np.all(np.isfinite(null.W.data)):
        raise NonFiniteError("non-finite null expert parameters")
    X, A_norm = ag.as_tensor(X), ag.as_tensor(A_norm)
    if X.shape[1] != null.W.shape[0]:
        raise ag.ShapeError(f"null expert expects width {null.W.shape[0]}, got {X.shape[1]}")
    return ag.relu(A_norm @ (X @ null.W))


def export_routing_trace(trace, path) -> None:
    """CSV ``epoch,alpha_1..alpha_n,alpha_null``."""
    trace = list(trace)
    n = len(trace[0]) - 1 if trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + [f"alpha_{i + 1}" for i in range(n)] + ["alpha_null"])
        for epoch, row in enumerate(trace):
            w.writerow([epoch] + [repr(float(a)) for a in row])
