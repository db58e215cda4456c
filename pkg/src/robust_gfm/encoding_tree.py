"""Two-level encoding trees obtained by greedy structural-entropy minimisation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import Graph


class EntropyUndefined(ValueError):
    """The graph has no edges, so Vol(G) = 0."""


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray
    num_clusters: int
    volumes: np.ndarray
    cuts: np.ndarray
    trace: tuple = field(default=(), compare=False)
    pass_log: tuple = field(default=(), compare=False)

    @property
    def K(self) -> int:
        return self.num_clusters

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_clusters)


def make_partition(graph: Graph, assignment, trace=(), pass_log=()) -> Partition:
    """Build a Partition, compacting labels in order of each cluster's smallest member."""
    raw = np.asarray(assignment, dtype=np.int64)
    if raw.shape != (graph.num_nodes,):
        raise ValueError("assignment must have one entry per node")
    first_seen: dict[int, int] = {}
    for c in raw:
        first_seen.setdefault(int(c), len(first_seen))
    assign = np.array([first_seen[int(c)] for c in raw], dtype=np.int64)
    k = len(first_seen)
    deg = graph.adjacency.sum(axis=1)
    volumes = np.bincount(assign, weights=deg, minlength=k)
    e = graph.edges
    crossing = assign[e[:, 0]] != assign[e[:, 1]]
    cuts = (np.bincount(assign[e[crossing, 0]], minlength=k)
            + np.bincount(assign[e[crossing, 1]], minlength=k)).astype(np.float64)
    return Partition(assign, k, volumes, cuts, tuple(trace), tuple(pass_log))


@dataclass(frozen=True)
class EncodingTree:
    """Root -> clusters -> nodes. Leaves hold ascending member lists."""

    partition: Partition
    leaves: tuple

    @classmethod
    def from_partition(cls, partition: Partition) -> "EncodingTree":
        leaves = tuple(tuple(int(v) for v in partition.members(k)) for k in range(partition.K))
        return cls(partition, leaves)

    @property
    def num_clusters(self) -> int:
        return self.partition.K

    @property
    def num_nodes(self) -> int:
        return int(self.partition.assignment.shape[0])


def _volume(graph: Graph) -> float:
    vol = float(graph.adjacency.sum())
    if vol <= 0:
        raise EntropyUndefined("graph has no edges; Vol(G) = 0")
    return vol


def partition_entropy(graph: Graph, partition: Partition) -> float:
    """-sum_k (Vol(C_k)/Vol(G)) log(Vol(C_k)/Vol(G)), with 0 log 0 = 0."""
    vol = _volume(graph)
    p = partition.volumes[partition.volumes > 0] / vol
    return float(-(p * np.log(p)).sum())


def structural_entropy_2d(graph: Graph, partition: Partition) -> float:
    vol = _volume(graph)
    deg = graph.adjacency.sum(axis=1)
    total = 0.0
    for k in range(partition.K):
        vk = partition.volumes[k]
        if vk <= 0:
            continue
        d = deg[partition.assignment == k]
        d = d[d > 0]
        total -= float(np.sum(d / vol * np.log(d / vk)))
        total -= partition.cuts[k] / vol * np.log(vk / vol)
    return float(total)


def _cluster_term(v: np.ndarray, g: np.ndarray, log_vol: float) -> np.ndarray:
    # per-cluster part of the objective (times Vol(G)); empty clusters contribute 0
    v = np.asarray(v, dtype=np.float64)
    safe = np.where(v > 0, v, 1.0)
    return np.where(v > 0, (v - g) * np.log(safe) + g * log_vol, 0.0)


class _GreedyState:
    """Mutable bookkeeping for the minimiser (cluster ids = initial node ids)."""

    def __init__(self, graph: Graph, vol: float):
        self.a = graph.adjacency
        self.n = graph.num_nodes
        self.vol = vol
        self.log_vol = np.log(vol)
        self.deg = self.a.sum(axis=1)
        active = self.deg > 0
        self.const = -float(np.sum(self.deg[active] / vol * np.log(self.deg[active])))
        self.assign = np.arange(self.n)
        self.cvol = self.deg.copy()
        self.ccut = self.deg.copy()
        self.e = self.a.copy()  # e[v, k] = edges from v into cluster k
        self.terms = _cluster_term(self.cvol, self.ccut, self.log_vol)

    @property
    def objective(self) -> float:
        return self.const + self.terms.sum() / self.vol

    def snapshot(self):
        return (self.assign.copy(), self.cvol.copy(), self.ccut.copy(), self.e.copy(), self.terms.copy())

    def restore(self, snap) -> None:
        self.assign, self.cvol, self.ccut, self.e, self.terms = snap

    def _refresh(self, *clusters) -> None:
        for c in clusters:
            self.terms[c] = _cluster_term(self.cvol[c:c + 1], self.ccut[c:c + 1], self.log_vol)[0]

    def move_deltas(self) -> np.ndarray:
        """(N, N) objective change (times Vol) of moving node v into cluster k; inf if not allowed."""
        rows = np.arange(self.n)
        own = self.assign
        e, deg = self.e, self.deg
        leave = _cluster_term(self.cvol[own] - deg, self.ccut[own] - deg + 2 * e[rows, own], self.log_vol) - self.terms[own]
        join = _cluster_term(self.cvol[None, :] + deg[:, None], self.ccut[None, :] + deg[:, None] - 2 * e,
                             self.log_vol) - self.terms[None, :]
        valid = (e > 0) & (own[:, None] != rows[None, :])
        return np.where(valid, leave[:, None] + join, np.inf)

    def node_deltas(self, v: int, forbid: int | None = None) -> np.ndarray:
        own = self.assign[v]
        d = self.deg[v]
        ev = self.e[v]
        leave = _cluster_term(self.cvol[own] - d, self.ccut[own] - d + 2 * ev[own], self.log_vol) - self.terms[own]
        join = _cluster_term(self.cvol + d, self.ccut + d - 2 * ev, self.log_vol) - self.terms
        ok = ev > 0
        ok[own] = False
        if forbid is not None:
            ok[forbid] = False
        return np.where(ok, leave + join, np.inf)

    def move(self, v: int, b: int) -> None:
        src = self.assign[v]
        d = self.deg[v]
        self.cvol[src] -= d
        self.ccut[src] += -d + 2 * self.e[v, src]
        self.cvol[b] += d
        self.ccut[b] += d - 2 * self.e[v, b]
        self.e[:, src] -= self.a[:, v]
        self.e[:, b] += self.a[:, v]
        self.assign[v] = b
        self._refresh(src, b)

    def best_merge(self):
        """Best merge of two adjacent clusters as (change * Vol, (absorbed, kept))."""
        live = np.flatnonzero(self.cvol > 0)
        if live.size < 2:
            return np.inf, None
        onehot = (self.assign[:, None] == live[None, :]).astype(np.float64)
        w = onehot.T @ self.e[:, live]
        v = self.cvol[live][:, None] + self.cvol[live][None, :]
        g = self.ccut[live][:, None] + self.ccut[live][None, :] - 2 * w
        gain = _cluster_term(v, g, self.log_vol) - self.terms[live][:, None] - self.terms[live][None, :]
        upper = np.triu(np.ones_like(gain, dtype=bool), k=1) & (w > 0)
        gain = np.where(upper, gain, np.inf)
        i, j = divmod(int(np.argmin(gain)), live.size)
        return float(gain[i, j]), (int(live[j]), int(live[i]))

    def merge(self, src: int, dst: int) -> None:
        members = np.flatnonzero(self.assign == src)
        self.cvol[dst] += self.cvol[src]
        self.ccut[dst] += self.ccut[src] - 2 * self.e[members, dst].sum()
        self.cvol[src] = self.ccut[src] = 0.0
        self.e[:, dst] += self.e[:, src]
        self.e[:, src] = 0.0
        self.assign[members] = dst
        self._refresh(src, dst)

    def try_dissolve(self, c: int, tol: float) -> bool:
        """Send every member of ``c`` to its best other neighbouring cluster; keep only if better."""
        members = np.flatnonzero(self.assign == c)
        before = self.terms.sum()
        snap = self.snapshot()
        for v in members:
            deltas = self.node_deltas(int(v), forbid=c)
            b = int(np.argmin(deltas))
            if not np.isfinite(deltas[b]):
                self.restore(snap)
                return False
            self.move(int(v), b)
        if self.terms.sum() - before < -tol * self.vol:
            return True
        self.restore(snap)
        return False


def minimize_structural_entropy(graph: Graph, max_passes: int = 50, seed: int = 0, tol: float = 1e-12) -> Partition:
    """Greedy minimisation of the two-dimensional structural entropy.

    Starts from singletons. Each step applies the best strictly improving
    operation among single-node moves into a neighbouring cluster and merges
    of two adjacent clusters (node moves win ties; among moves the smallest
    (node, destination) pair wins). When neither improves, clusters are tried
    for dissolution, smallest volume first: all members are reassigned to
    their best neighbouring clusters and the result is kept only if the
    objective drops. A pass allows one operation per non-isolated node; the
    run ends when nothing improves or after ``max_passes`` passes. The
    procedure is deterministic; ``seed`` is accepted for interface symmetry.
    """
    del seed
    if max_passes < 1:
        raise ValueError("max_passes must be >= 1")
    vol = _volume(graph)
    st = _GreedyState(graph, vol)
    n_active = max(int((st.deg > 0).sum()), 1)
    trace = [st.objective]
    pass_log = []

    for pass_idx in range(max_passes):
        ops = 0
        stalled = False
        while ops < n_active:
            delta = st.move_deltas()
            flat = int(np.argmin(delta))
            best = delta.flat[flat]
            merge_gain, pair = st.best_merge()
            if merge_gain < best and merge_gain < -tol * vol:
                st.merge(*pair)
            elif best < -tol * vol:
                st.move(*divmod(flat, st.n))
            else:
                live = np.flatnonzero(st.cvol > 0)
                order = live[np.lexsort((live, st.cvol[live]))]
                if not any(st.try_dissolve(int(c), tol) for c in order):
                    stalled = True
                    break
            trace.append(st.objective)
            ops += 1
        pass_log.append((pass_idx, ops, st.objective))
        if stalled:
            break
    return make_partition(graph, st.assign, trace, pass_log)


def build_encoding_tree(graph: Graph, max_passes: int = 50, seed: int = 0) -> EncodingTree:
    return EncodingTree.from_partition(minimize_structural_entropy(graph, max_passes, seed))


def cluster_members(tree: EncodingTree, node: int) -> tuple[int, list[int], int]:
    if not 0 <= node < tree.num_nodes:
        raise IndexError(f"node {node} out of range")
    k = int(tree.partition.assignment[node])
    members = list(tree.leaves[k])
    return k, members, len(members)


def export_partition(partition: Partition, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "cluster_id"])
        w.writerows((i, int(c)) for i, c in enumerate(partition.assignment))


def export_trace(partition: Partition, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pass", "move_count", "objective"])
        for p, m, obj in partition.pass_log:
            w.writerow([p, m, repr(float(obj))])


def load_partition(graph: Graph, path) -> Partition:
    rows = list(csv.DictReader(Path(path).open()))
    assign = np.zeros(graph.num_nodes, dtype=np.int64)
    for r in rows:
        assign[int(r["node_id"])] = int(r["cluster_id"])
    return make_partition(graph, assign)
