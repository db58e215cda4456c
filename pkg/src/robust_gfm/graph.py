"""Graph and dataset containers, file formats, synthetic domains and perturbations."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

UNLABELED = -1


class DatasetError(ValueError):
    """Malformed input files or inconsistent dataset contents."""


class AttackInfeasible(RuntimeError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Graph:
    """Undirected simple graph with a dense symmetric 0/1 adjacency."""

    num_nodes: int
    edges: np.ndarray  # (E, 2) int64, each row (i, j) with i < j, sorted
    adjacency: np.ndarray

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "Graph":
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise DatasetError("edge endpoint outside [0, num_nodes)")
        e = e[e[:, 0] != e[:, 1]]
        e = np.unique(np.sort(e, axis=1), axis=0)
        adj = np.zeros((num_nodes, num_nodes))
        adj[e[:, 0], e[:, 1]] = 1.0
        adj[e[:, 1], e[:, 0]] = 1.0
        return cls(int(num_nodes), _readonly(e), _readonly(adj))

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "Graph":
        a = np.asarray(adjacency)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DatasetError("adjacency must be square")
        iu, ju = np.nonzero(np.triu(a, k=1))
        return cls.from_edges(a.shape[0], np.stack([iu, ju], axis=1))

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    def neighbors(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[node])


@dataclass(frozen=True)
class Dataset:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    domain_id: str = "domain"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.graph.num_nodes:
            raise DatasetError("features must have one row per node")
        if self.labels.shape != (self.graph.num_nodes,):
            raise DatasetError("labels must have one entry per node")
        if np.any(self.labels < UNLABELED):
            raise DatasetError("negative label other than the unlabeled sentinel")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_classes(self) -> int:
        labeled = self.labels[self.labels != UNLABELED]
        return int(labeled.max()) + 1 if labeled.size else 0

    def with_graph(self, graph: Graph, **meta) -> "Dataset":
        return replace(self, graph=graph, meta={**self.meta, **meta})

    def with_features(self, features: np.ndarray, **meta) -> "Dataset":
        return replace(self, features=_readonly(np.array(features, dtype=np.float64)), meta={**self.meta, **meta})


def make_dataset(graph: Graph, features, labels, domain_id: str = "domain", **meta) -> Dataset:
    x = _readonly(np.array(features, dtype=np.float64))
    y = _readonly(np.array(labels, dtype=np.int64))
    return Dataset(graph, x, y, domain_id, dict(meta))


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str  # feature-gaussian | edge-drop | targeted
    rate: float = 0.0
    budget: int = 1
    mode: str = "evasion"
    seed: int = 0
    support_only: bool = False

    def __post_init__(self):
        if self.kind not in ("feature-gaussian", "edge-drop", "targeted"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("perturbation rate must lie in [0, 1]")
        if self.budget < 1:
            raise ValueError("attack budget must be >= 1")
        if self.mode not in ("evasion", "poisoning"):
            raise ValueError(f"unknown attack mode {self.mode!r}")

    @property
    def label(self) -> str:
        if self.kind == "targeted":
            return f"{self.mode}-p{self.budget}"
        short = "feat" if self.kind == "feature-gaussian" else "struct"
        return f"{short}-{self.rate:g}"


# -- file formats ------------------------------------------------------------
def read_edge_list(path) -> np.ndarray:
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'src dst', got {raw!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: non-integer node id") from exc
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def _read_csv_rows(path, cast) -> list[list]:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        try:
            rows.append([cast(v) for v in raw.split(",")])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: cannot parse {raw!r}") from exc
    return rows


def load_dataset(edge_path, feature_path, label_path=None, domain_id: str = "domain",
                 num_classes: int | None = None) -> Dataset:
    for p in (edge_path, feature_path, label_path):
        if p is not None and not Path(p).is_file():
            raise FileNotFoundError(p)
    rows = _read_csv_rows(feature_path, float)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise DatasetError(f"ragged feature rows in {feature_path}: widths {sorted(widths)}")
    features = np.array(rows, dtype=np.float64).reshape(len(rows), -1)
    n = features.shape[0]

    raw = read_edge_list(edge_path)
    if raw.size and (raw.min() < 0 or raw.max() >= n):
        bad = int(raw.max()) if raw.max() >= n else int(raw.min())
        raise DatasetError(f"node id {bad} in edges has no feature row")
    self_loops = int(np.sum(raw[:, 0] == raw[:, 1]))
    graph = Graph.from_edges(n, raw)
    duplicates = int(len(raw) - self_loops - graph.num_edges)

    if label_path is not None:
        lab_rows = _read_csv_rows(label_path, int)
        labels = np.array([r[0] for r in lab_rows], dtype=np.int64)
        if labels.shape[0] != n:
            raise DatasetError("label count does not match feature rows")
        hi = num_classes if num_classes is not None else None
        if np.any(labels < UNLABELED) or (hi is not None and np.any(labels >= hi)):
            raise DatasetError("label index out of range")
    else:
        labels = np.full(n, UNLABELED, dtype=np.int64)
    if self_loops or duplicates:
        log.warning("%s: dropped %d self-loops and %d duplicate edges", domain_id, self_loops, duplicates)
    return make_dataset(graph, features, labels, domain_id,
                        self_loops_dropped=self_loops, duplicates_dropped=duplicates)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write edges.txt, features.csv, labels.csv (loadable by ``load_dataset``)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "edges.txt", "w", encoding="utf-8") as fh:
        fh.write(f"# {dataset.domain_id}: {dataset.num_nodes} nodes\n")
        for i, j in dataset.graph.edges:
            fh.write(f"{i} {j}\n")
    with open(d / "features.csv", "w", encoding="utf-8") as fh:
        for row in dataset.features:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(d / "labels.csv", "w", encoding="utf-8") as fh:
        fh.write("\n".join(str(int(v)) for v in dataset.labels) + "\n")
    return d


def write_matrix(path, matrix) -> None:
    """Row-major little-endian f64 blob plus a JSON sidecar ``{rows, cols, dtype}``."""
    m = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype="<f8")))
    path = Path(path)
    path.write_bytes(m.tobytes(order="C"))
    sidecar = {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "dtype": "f64"}
    path.with_name(path.name + ".json").write_text(json.dumps(sidecar))


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    if meta.get("dtype") != "f64":
        raise DatasetError(f"unsupported dtype {meta.get('dtype')!r}")
    blob = path.read_bytes()
    if len(blob) != 8 * meta["rows"] * meta["cols"]:
        raise DatasetError(f"{path}: blob length {len(blob)} does not match {meta['rows']}x{meta['cols']}")
    return np.frombuffer(blob, dtype="<f8").reshape(meta["rows"], meta["cols"]).astype(np.float64)


# -- synthetic domains ---------------------------------------------------------
def block_sizes(num_nodes: int, num_classes: int) -> list[int]:
    base, extra = divmod(num_nodes, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def generate_sbm(num_nodes: int, num_classes: int, p_in: float, p_out: float, feature_dim: int,
                 class_mean_separation: float, seed: int, domain_id: str | None = None,
                 allow_inverted: bool = False) -> Dataset:
    """Planted-partition SBM with Gaussian class-conditional features.

    Class means sit on orthonormal random directions scaled so that any two
    means are ``class_mean_separation`` apart; per-coordinate noise is N(0, 1).
    """
    if not (0.0 <= p_out <= 1.0 and 0.0 <= p_in <= 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    if p_in < p_out and not allow_inverted:
        raise ValueError("p_in < p_out gives no community structure; pass allow_inverted=True to force it")
    if num_classes < 1 or num_nodes < num_classes:
        raise ValueError("need at least one node per class")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), block_sizes(num_nodes, num_classes))

    iu, ju = np.triu_indices(num_nodes, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    graph = Graph.from_edges(num_nodes, np.stack([iu[keep], ju[keep]], axis=1))

    if feature_dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, num_classes)))
        means = q.T * (class_mean_separation / np.sqrt(2.0))
    else:
        dirs = rng.standard_normal((num_classes, feature_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        means = dirs * class_mean_separation / 2.0
    features = means[labels] + rng.standard_normal((num_nodes, feature_dim))
    return make_dataset(graph, features, labels, domain_id or f"sbm-{seed}",
                        generator={"p_in": p_in, "p_out": p_out, "seed": seed})


# -- structure helpers ---------------------------------------------------------
def normalized_adjacency(graph, add_self_loops: bool = True) -> np.ndarray:
    """D^{-1/2} (A [+ I]) D^{-1/2}; zero-degree rows/columns stay zero."""
    a = graph.adjacency if isinstance(graph, Graph) else np.asarray(graph, dtype=np.float64)
    if add_self_loops:
        a = a + np.eye(a.shape[0])
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def bfs_ball(adjacency: np.ndarray, center: int, radius: int) -> list[int]:
    dist = {center: 0}
    queue = deque([center])
    while queue:
        u = queue.popleft()
        if dist[u] == radius:
            continue
        for v in np.flatnonzero(adjacency[u]):
            v = int(v)
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return sorted(dist)


def extract_ego_graph(dataset: Dataset, center: int, radius: int = 1, require_label: bool = True) -> Dataset:
    """Induced subgraph within ``radius`` hops; local node 0 is the center."""
    if not 0 <= center < dataset.num_nodes:
        raise IndexError(f"center {center} out of range")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    label = int(dataset.labels[center])
    if require_label and label == UNLABELED:
        raise DatasetError(f"center {center} is unlabeled")
    ball = bfs_ball(dataset.graph.adjacency, center, radius)
    order = np.array([center] + [v for v in ball if v != center], dtype=np.int64)
    sub = dataset.graph.adjacency[np.ix_(order, order)]
    return make_dataset(Graph.from_adjacency(sub), dataset.features[order], dataset.labels[order],
                        dataset.domain_id, node_ids=order, graph_label=label, center=center)


# -- perturbations ---------------------------------------------------------------
def perturb_features(features: np.ndarray, rate: float, seed: int, rows=None) -> np.ndarray:
    """X + rate * r * eps with r the per-column std of X; ``rows`` restricts the noise."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    x = np.asarray(features, dtype=np.float64)
    out = x.copy()
    if rate == 0.0:
        return out
    amplitude = x.std(axis=0)
    rng = np.random.default_rng(seed)
    noise = rate * amplitude * rng.standard_normal(x.shape)
    if rows is None:
        out += noise
    else:
        rows = np.asarray(rows, dtype=np.int64)
        out[rows] += noise[rows]
    return out


def drop_edges(graph: Graph, rate: float, seed: int) -> Graph:
    """Remove exactly round(rate * |E|) edges (half-to-even) chosen uniformly."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    k = int(round(rate * graph.num_edges))
    if k == 0:
        return graph
    rng = np.random.default_rng(seed)
    drop = rng.choice(graph.num_edges, size=k, replace=False)
    keep = np.ones(graph.num_edges, dtype=bool)
    keep[drop] = False
    return Graph.from_edges(graph.num_nodes, graph.edges[keep])


def fit_linear_surrogate(dataset: Dataset, train_nodes=None, ridge: float = 1e-2) -> np.ndarray:
    """Per-node class scores H = X W with W a ridge fit of one-hot labels on A_norm X."""
    labels = dataset.labels
    nodes = np.flatnonzero(labels != UNLABELED) if train_nodes is None else np.asarray(train_nodes)
    c = int(labels[nodes].max()) + 1
    ax = normalized_adjacency(dataset.graph) @ dataset.features
    onehot = np.eye(c)[labels[nodes]]
    design = ax[nodes]
    w = np.linalg.solve(design.T @ design + ridge * np.eye(design.shape[1]), design.T @ onehot)
    return dataset.features @ w


def _target_logits(adjacency: np.ndarray, deg: np.ndarray, scores: np.ndarray, t: int) -> np.ndarray:
    nbrs = np.flatnonzero(adjacency[t])
    w = 1.0 / np.sqrt((deg[t] + 1.0) * (deg[nbrs] + 1.0))
    return scores[t] / (deg[t] + 1.0) + w @ scores[nbrs]


def surrogate_margin(adjacency: np.ndarray, scores: np.ndarray, target: int, label: int) -> float:
    """True-class minus best-other-class score of the one-hop linear surrogate."""
    deg = adjacency.sum(axis=1)
    z = _target_logits(adjacency, deg, scores, target)
    others = np.delete(z, label)
    return float(z[label] - others.max())


def targeted_attack(dataset: Dataset, surrogate_scores: np.ndarray, target: int, p: int, seed: int,
                    label: int | None = None) -> Dataset:
    """Greedy structure attack on one node against a linear one-hop surrogate.

    Each step considers two flips incident to the target: adding an edge to
    the non-neighbour of another class with the strongest wrong-class score,
    and removing the edge to the same-class neighbour with the strongest
    true-class score. The flip leaving the lower margin is applied. Exact
    score ties between candidate nodes are broken by the seeded generator.
    """
    if p < 1:
        raise ValueError("budget p must be >= 1")
    n = dataset.num_nodes
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range")
    scores = np.asarray(surrogate_scores, dtype=np.float64)
    y_t = int(dataset.labels[target]) if label is None else int(label)
    if y_t == UNLABELED:
        y_t = int(np.argmax(scores[target]))
    node_class = np.where(dataset.labels == UNLABELED, scores.argmax(axis=1), dataset.labels)
    wrong_strength = np.delete(scores, y_t, axis=1).max(axis=1) - scores[:, y_t]
    same_strength = -wrong_strength

    rng = np.random.default_rng(seed)
    adj = np.array(dataset.graph.adjacency)
    flips: list[tuple[str, int]] = []
    margins = [surrogate_margin(adj, scores, target, y_t)]

    def pick(mask: np.ndarray, strength: np.ndarray) -> int | None:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return None
        best = strength[idx].max()
        tied = idx[strength[idx] == best]
        return int(tied[0]) if tied.size == 1 else int(rng.choice(tied))

    for _ in range(p):
        others = np.arange(n) != target
        add_mask = others & (adj[target] == 0) & (node_class != y_t)
        rem_mask = others & (adj[target] > 0) & (node_class == y_t)
        candidates = []
        u = pick(add_mask, wrong_strength)
        if u is not None:
            candidates.append(("add", u))
        v = pick(rem_mask, same_strength)
        if v is not None:
            candidates.append(("remove", v))
        if not candidates:
            if not flips:
                raise AttackInfeasible(f"no flippable edges around target {target}")
            break
        best = None
        for kind, node in candidates:
            value = 1.0 if kind == "add" else 0.0
            adj[target, node] = adj[node, target] = value
            m = surrogate_margin(adj, scores, target, y_t)
            adj[target, node] = adj[node, target] = 1.0 - value
            if best is None or m < best[0]:
                best = (m, kind, node)
        m, kind, node = best
        adj[target, node] = adj[node, target] = 1.0 if kind == "add" else 0.0
        flips.append((kind, node))
        margins.append(m)

    return dataset.with_graph(Graph.from_adjacency(adj), attack_flips=flips, attack_margins=margins,
                              attack_target=target)
