"""Differentiable refinement of the target adjacency.

Within clusters, edges are blended with multi-head attention scores; across
clusters, edges are softly pruned by a truncated personalized-PageRank
influence; the two parts are mixed with a learnable weight and symmetrised.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoding_tree import Partition
from .graph import normalized_adjacency, write_matrix
from .nn import glorot

log = logging.getLogger(__name__)

_MASKED = -1e30


@dataclass
class IntraParams:
    W_p: Tensor
    W_q: list[Tensor]
    W_k: list[Tensor]
    w_c: Tensor  # one fusion logit per cluster

    @classmethod
    def init(cls, dim: int, num_clusters: int, d_p: int = 32, d_k: int = 16, heads: int = 4,
             seed: int = 0, fusion_logit: float = 2.0) -> "IntraParams":
        if heads < 1:
            raise ValueError("heads must be >= 1")
        if d_k < 1 or d_p < 1:
            raise ValueError("d_k and d_p must be >= 1")
        rng = np.random.default_rng(seed)
        w_p = Tensor(glorot(rng, dim, d_p), requires_grad=True, name="W_p")
        w_q = [Tensor(glorot(rng, dim, d_k), requires_grad=True, name=f"W_q{h}") for h in range(heads)]
        w_k = [Tensor(glorot(rng, d_p, d_k), requires_grad=True, name=f"W_k{h}") for h in range(heads)]
        w_c = Tensor(np.full(num_clusters, fusion_logit), requires_grad=True, name="w_c")
        return cls(w_p, w_q, w_k, w_c)

    @property
    def heads(self) -> int:
        return len(self.W_q)

    @property
    def d_k(self) -> int:
        return self.W_q[0].shape[1]

    def fusion_weights(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.w_c.data))

    def named_parameters(self):
        out = [("W_p", self.W_p)]
        out += [(f"W_q{h}", w) for h, w in enumerate(self.W_q)]
        out += [(f"W_k{h}", w) for h, w in enumerate(self.W_k)]
        return out + [("w_c", self.w_c)]


@dataclass
class InterParams:
    theta: Tensor  # pruning threshold
    w_s: Tensor  # intra/inter trade-off logit
    ppr_alpha: float = 0.85
    T: int = 10

    def __post_init__(self):
        if not 0.0 < self.ppr_alpha < 1.0:
            raise ValueError("ppr_alpha must lie in (0, 1)")
        if self.T < 0:
            raise ValueError("T must be >= 0")

    @classmethod
    def init(cls, ppr_alpha: float = 0.85, T: int = 10, theta: float = 0.0, trade_off_logit: float = 0.0) -> "InterParams":
        return cls(Tensor(theta, requires_grad=True, name="theta_thres"),
                   Tensor(trade_off_logit, requires_grad=True, name="w_s"), ppr_alpha, T)

    def named_parameters(self):
        return [("theta_thres", self.theta), ("w_s", self.w_s)]


@dataclass(frozen=True)
class RefinedAdjacency:
    matrix: Tensor
    intra_mask: np.ndarray  # True where both endpoints share a cluster

    def numpy(self) -> np.ndarray:
        return self.matrix.data.copy()


# -- intra-cluster -----------------------------------------------------------------
def intra_attention(Z_c, params: IntraParams) -> tuple[Tensor, list[Tensor]]:
    """Head-averaged row-softmax scores for one cluster, plus the per-head scores."""
    Z_c = ag.as_tensor(Z_c)
    if Z_c.shape[0] < 1:
        raise ValueError("cluster must contain at least one node")
    if params.d_k == 0:
        raise ValueError("d_k must be positive")
    hidden = ag.relu(Z_c @ params.W_p)
    scale = 1.0 / np.sqrt(params.d_k)
    heads = [ag.row_softmax((Z_c @ wq) @ (hidden @ wk).T * scale) for wq, wk in zip(params.W_q, params.W_k)]
    return _head_mean(heads), heads


def cluster_attention(Z, partition: Partition, params: IntraParams) -> tuple[Tensor, list[Tensor]]:
    """All clusters at once as N x N matrices, zero outside each cluster's block."""
    Z = ag.as_tensor(Z)
    same = partition.assignment[:, None] == partition.assignment[None, :]
    hidden = ag.relu(Z @ params.W_p)
    scale = 1.0 / np.sqrt(params.d_k)
    heads = []
    for wq, wk in zip(params.W_q, params.W_k):
        logits = (Z @ wq) @ (hidden @ wk).T * scale
        heads.append(ag.row_softmax(ag.where(same, logits, _MASKED)))
    return _head_mean(heads), heads


def _head_mean(heads: list[Tensor]) -> Tensor:
    total = heads[0]
    for h in heads[1:]:
        total = total + h
    return total * (1.0 / len(heads))


def pair_mask(partition: Partition) -> np.ndarray:
    """Ordered within-cluster pairs i != j."""
    a = partition.assignment
    return (a[:, None] == a[None, :]) & ~np.eye(a.shape[0], dtype=bool)


def uncertainty_loss(head_scores: list, partition: Partition) -> Tensor:
    """Mean over within-cluster ordered pairs of the population variance across heads.

    ``head_scores`` are N x N per-head score matrices. With no eligible pairs
    (every cluster a singleton) the loss is 0 and a warning is logged.
    """
    if len(head_scores) < 1:
        raise ValueError("need at least one head")
    mask = pair_mask(partition)
    count = int(mask.sum())
    if count == 0:
        log.warning("no within-cluster pairs; uncertainty loss is 0")
        return Tensor(0.0)
    heads = [ag.as_tensor(h) for h in head_scores]
    if len(heads) == 1:
        return Tensor(0.0)
    # population variance as sum_{h<g} (S_h - S_g)^2 / H^2: exactly 0 when heads agree
    var = None
    for i in range(len(heads)):
        for j in range(i + 1, len(heads)):
            diff = heads[i] - heads[j]
            var = diff * diff if var is None else var + diff * diff
    var = var * (1.0 / len(heads) ** 2)
    return ag.where(mask, var, 0.0).sum() * (1.0 / count)


def fuse_intra(A_c, S_attn_c, W_c) -> Tensor:
    """(1 - W_c) A_c + W_c S_attn_c; ``W_c`` may be a scalar or a per-row column."""
    A_c, S_attn_c, W_c = ag.as_tensor(A_c), ag.as_tensor(S_attn_c), ag.as_tensor(W_c)
    if A_c.shape != S_attn_c.shape:
        raise ag.ShapeError(f"shape mismatch {A_c.shape} vs {S_attn_c.shape}")
    return A_c * (1.0 - W_c) + S_attn_c * W_c


# -- inter-cluster -----------------------------------------------------------------
def ppr_influence(A_norm, ppr_alpha: float, T: int) -> np.ndarray:
    """(1 - a) sum_{t=0..T} (a A_norm)^t by repeated multiplication."""
    if not 0.0 < ppr_alpha < 1.0:
        raise ValueError("ppr_alpha must lie in (0, 1)")
    if T < 0:
        raise ValueError("T must be >= 0")
    a = np.asarray(A_norm, dtype=np.float64)
    term = np.eye(a.shape[0])
    total = term.copy()
    for _ in range(T):
        term = ppr_alpha * (a @ term)
        total += term
    return (1.0 - ppr_alpha) * total


def inter_edges(adjacency, partition: Partition) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.float64)
    asg = partition.assignment
    return np.where(asg[:, None] != asg[None, :], a, 0.0)


def prune_inter(A_inter, S_infl, theta) -> Tensor:
    """A_inter * sigmoid(S_infl - theta)."""
    S_infl = np.asarray(S_infl, dtype=np.float64)
    gate = ag.sigmoid(ag.as_tensor(S_infl) - ag.as_tensor(theta))
    return ag.as_tensor(A_inter) * gate


# -- assembly ------------------------------------------------------------------------
def block_diagonal(blocks, partition: Partition) -> Tensor:
    """Scatter per-cluster blocks into an N x N tensor (differentiably)."""
    n = partition.assignment.shape[0]
    if len(blocks) != partition.K:
        raise ag.ShapeError(f"{len(blocks)} blocks for {partition.K} clusters")
    out = None
    for k, block in enumerate(blocks):
        members = partition.members(k)
        block = ag.as_tensor(block)
        if block.shape != (members.size, members.size):
            raise ag.ShapeError(f"block {k} has shape {block.shape}, cluster has {members.size} nodes")
        sel = np.zeros((n, members.size))
        sel[members, np.arange(members.size)] = 1.0
        part = sel @ block @ sel.T
        out = part if out is None else out + part
    return out


def assemble_refined(intra, A_inter, W_s, partition: Partition, tol: float = 1e-9) -> RefinedAdjacency:
    """W_s * intra + (1 - W_s) * inter, symmetrised and clamped to [0, 1].

    ``intra`` is either a list of per-cluster blocks or an N x N block-diagonal tensor.
    """
    if isinstance(intra, (list, tuple)):
        intra = block_diagonal(intra, partition)
    intra, A_inter, W_s = ag.as_tensor(intra), ag.as_tensor(A_inter), ag.as_tensor(W_s)
    same = partition.assignment[:, None] == partition.assignment[None, :]
    if intra.shape != same.shape or A_inter.shape != same.shape:
        raise ag.ShapeError("intra/inter matrices do not match the partition size")
    if np.any(np.abs(A_inter.data[same]) > 0):
        raise ValueError("inter-cluster matrix must be zero on intra-cluster positions")
    mixed = intra * W_s + A_inter * (1.0 - W_s)
    sym = (mixed + mixed.T) * 0.5
    lo, hi = sym.data.min(initial=0.0), sym.data.max(initial=0.0)
    assert lo >= -tol and hi <= 1.0 + tol, f"refined adjacency left [0,1]: [{lo}, {hi}]"
    return RefinedAdjacency(ag.clamp(sym, 0.0, 1.0), same)


def normalize_adjacency(A, self_loops: bool = False) -> Tensor:
    """D^{-1/2} A D^{-1/2} on a weighted, differentiable adjacency; zero-degree rows stay zero.

    Refined adjacencies already carry self-weights (the attention diagonal),
    so no unit self-loop is added unless ``self_loops`` is set.
    """
    A = ag.as_tensor(A)
    n = A.shape[0]
    if self_loops:
        A = A + np.eye(n)
    deg = A.sum(axis=1)
    alive = deg.data > 0
    dinv = ag.where(alive, ag.where(alive, deg, 1.0) ** -0.5, 0.0)
    return A * dinv.reshape(n, 1) * dinv.reshape(1, n)


def refine_structure(Z, adjacency, partition: Partition, intra: IntraParams, inter: InterParams,
                     influence: np.ndarray | None = None) -> tuple[RefinedAdjacency, Tensor]:
    """Full refinement pass; returns the refined adjacency and the uncertainty loss."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    same = partition.assignment[:, None] == partition.assignment[None, :]
    s_attn, heads = cluster_attention(Z, partition, intra)
    w_row = ag.sigmoid(intra.w_c)[partition.assignment].reshape(-1, 1)
    a_intra = fuse_intra(np.where(same, adjacency, 0.0), s_attn, w_row)
    if influence is None:
        influence = ppr_influence(normalized_adjacency(adjacency), inter.ppr_alpha, inter.T)
    a_inter = prune_inter(inter_edges(adjacency, partition), influence, inter.theta)
    refined = assemble_refined(a_intra, a_inter, ag.sigmoid(inter.w_s), partition)
    return refined, uncertainty_loss(heads, partition)


def export_refined(refined: RefinedAdjacency, path) -> None:
    write_matrix(path, refined.numpy())


def export_fusion_weights(intra: IntraParams, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "W_c"])
        for k, wc in enumerate(intra.fusion_weights()):
            w.writerow([k, repr(float(wc))])
