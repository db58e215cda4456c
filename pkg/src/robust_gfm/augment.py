"""Structure-aware prompt text, text encoders, truncated SVD and feature fusion."""

from __future__ import annotations

import hashlib
import json
import re
import socket
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .encoding_tree import EncodingTree, cluster_members

_TOKEN = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class PromptText:
    node: int
    text: str


def generate_prompt(tree: EncodingTree, node: int, max_listed_peers: int = 10) -> PromptText:
    if max_listed_peers < 0:
        raise ValueError("max_listed_peers must be >= 0")
    k, members, size = cluster_members(tree, node)
    peers = [m for m in members if m != node]
    shown = peers[:max_listed_peers]
    listed = ", ".join(f"v{m}" for m in [node] + shown)
    if len(peers) > len(shown):
        listed += ", …"
    text = (f"There are {tree.num_clusters} structural clusters. Node v{node} belongs to cluster C{k}, "
            f"which contains {size} nodes, including {listed}.")
    return PromptText(node, text)


def generate_prompts(tree: EncodingTree, max_listed_peers: int = 10) -> list[PromptText]:
    return [generate_prompt(tree, v, max_listed_peers) for v in range(tree.num_nodes)]


# -- text encoders ---------------------------------------------------------------
def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _token_hash(token: str, seed: int) -> int:
    key = int(seed).to_bytes(8, "little", signed=True)
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest(), "little")


def encode_text_hashed(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Signed feature hashing of lower-cased alphanumeric tokens, L2-normalised."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    vec = np.zeros(dim)
    for tok in tokenize(text):
        h = _token_hash(tok, seed)
        vec[h % dim] += 1.0 if (h >> 63) & 1 == 0 else -1.0
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0 else vec


class RemoteEncoderError(RuntimeError):
    pass


class RemoteNetworkError(RemoteEncoderError):
    pass


class RemoteLengthMismatch(RemoteEncoderError):
    pass


class RemoteMalformedResponse(RemoteEncoderError):
    pass


@dataclass
class TextEncoder:
    """``hashed`` (deterministic, offline) or ``remote`` (HTTP embedding service)."""

    kind: str = "hashed"
    output_dim: int = 64
    seed: int = 0
    endpoint: str | None = None
    timeout_ms: int = 5000
    fallback_to_hashed: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)
    requests_made: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.kind not in ("hashed", "remote"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote encoder needs an endpoint URL")

    def encode(self, text: str) -> np.ndarray:
        if self.kind == "hashed":
            return encode_text_hashed(text, self.output_dim, self.seed)
        try:
            return encode_text_remote(text, self)
        except RemoteEncoderError:
            if not self.fallback_to_hashed:
                raise
            return encode_text_hashed(text, self.output_dim, self.seed)

    def encode_many(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.output_dim))


def _post_json(url: str, payload: dict, timeout_s: float) -> bytes:
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"),
                                 headers={"Content-Type": "application/json"}, method="POST")
    with urllib.request.urlopen(req, timeout=timeout_s) as resp:
        return resp.read()


def encode_text_remote(text: str, encoder: TextEncoder) -> np.ndarray:
    """POST ``{"text": ...}``, expect ``{"embedding": [...]}``; cached by content hash."""
    if encoder.kind != "remote":
        raise ValueError("encoder is not a remote encoder")
    key = hashlib.sha256(text.encode("utf-8")).hexdigest()
    with encoder._lock:
        hit = encoder._cache.get(key)
        if hit is not None:
            return hit.copy()
        body = None
        last_exc: Exception | None = None
        for _ in range(2):  # one retry, on timeout only
            try:
                encoder.requests_made += 1
                body = _post_json(encoder.endpoint, {"text": text}, encoder.timeout_ms / 1000.0)
                break
            except (socket.timeout, TimeoutError) as exc:
                last_exc = exc
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last_exc = exc
                    continue
                raise RemoteNetworkError(f"request to {encoder.endpoint} failed: {exc}") from exc
            except OSError as exc:
                raise RemoteNetworkError(f"request to {encoder.endpoint} failed: {exc}") from exc
        if body is None:
            raise RemoteNetworkError(f"request to {encoder.endpoint} timed out twice") from last_exc
        try:
            emb = json.loads(body.decode("utf-8"))["embedding"]
            vec = np.array(emb, dtype=np.float64)
        except (ValueError, KeyError, TypeError) as exc:
            raise RemoteMalformedResponse("response is not a JSON object with an 'embedding' list") from exc
        if vec.ndim != 1 or vec.shape[0] != encoder.output_dim:
            raise RemoteLengthMismatch(f"expected {encoder.output_dim} floats, got shape {vec.shape}")
        encoder._cache[key] = vec
        return vec.copy()


# -- truncated SVD ---------------------------------------------------------------
def _round_robin_pairs(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: n-1 rounds (n even) of disjoint column pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.int64), np.array(q, dtype=np.int64)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _one_sided_jacobi(m: np.ndarray, max_sweeps: int = 60, tol: float = 1e-15) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of ``m``; returns (m @ J, J) with J orthogonal."""
    a = np.array(m, dtype=np.float64)
    n = a.shape[1]
    j = np.eye(n)
    if n < 2:
        return a, j
    rounds = _round_robin_pairs(n)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = (ap * ap).sum(axis=0)
            beta = (aq * aq).sum(axis=0)
            gamma = (ap * aq).sum(axis=0)
            scale = np.sqrt(alpha * beta)
            active = (np.abs(gamma) > tol * scale) & (scale > 1e-300)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            jp, jq = j[:, p].copy(), j[:, q].copy()
            j[:, p] = c * jp - s * jq
            j[:, q] = s * jp + c * jq
        if not rotated:
            break
    return a, j


def svd_jacobi(matrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD (U, s, Vt) with non-increasing s and sign-fixed left vectors."""
    m = np.asarray(matrix, dtype=np.float64)
    rows, cols = m.shape
    if cols <= rows:
        b, v = _one_sided_jacobi(m)
        s = np.linalg.norm(b, axis=0)
        u = np.divide(b, s, out=np.zeros_like(b), where=s > 0)
    else:
        b, u = _one_sided_jacobi(m.T)
        s = np.linalg.norm(b, axis=0)
        v = np.divide(b, s, out=np.zeros_like(b), where=s > 0)
    order = np.argsort(-s, kind="stable")
    u, s, v = u[:, order], s[order], v[:, order]
    idx = np.argmax(np.abs(u), axis=0)
    flip = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * flip, s, (v * flip).T


def truncated_svd(matrix, rank: int) -> np.ndarray:
    """Rank-``rank`` projection U_r * S_r of the rows of ``matrix``."""
    return truncated_svd_basis(matrix, rank)[0]


def truncated_svd_basis(matrix, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """(U_r * S_r, V_r); rows of ``matrix`` @ V_r reproduce the projection."""
    m = np.asarray(matrix, dtype=np.float64)
    if rank < 1 or rank > min(m.shape):
        raise ValueError(f"rank {rank} exceeds min{m.shape}")
    u, s, vt = svd_jacobi(m)
    return u[:, :rank] * s[:rank], vt[:rank].T


# -- fusion ---------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentedFeatures:
    matrix: np.ndarray
    d0: int
    basis: np.ndarray | None = field(default=None, compare=False, repr=False)  # feature-side V_r

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def reproject(self, features) -> "AugmentedFeatures":
        """Replace the feature block by ``features @ V_r``, keeping the prompt block."""
        x = np.asarray(features, dtype=np.float64)
        block = x @ self.basis
        rest = self.matrix[:, block.shape[1]:]
        return AugmentedFeatures(np.concatenate([block, rest], axis=1), self.d0, self.basis)


def augment_features(features, prompts: list[PromptText], encoder: TextEncoder, d0: int) -> AugmentedFeatures:
    """Row i = SVD_d0(X)_i concatenated with SVD_d0(encoder(prompt_i))_i."""
    x = np.asarray(features, dtype=np.float64)
    if len(prompts) != x.shape[0]:
        raise ValueError(f"{len(prompts)} prompts for {x.shape[0]} nodes")
    if d0 > min(x.shape) or d0 > min(x.shape[0], encoder.output_dim):
        raise ValueError(f"d0={d0} infeasible for features {x.shape} and encoder dim {encoder.output_dim}")
    ordered = sorted(prompts, key=lambda p: p.node)
    if [p.node for p in ordered] != list(range(x.shape[0])):
        raise ValueError("need exactly one prompt per node")
    emb = encoder.encode_many([p.text for p in ordered])
    feat_block, basis = truncated_svd_basis(x, d0)
    out = np.concatenate([feat_block, truncated_svd(emb, d0)], axis=1)
    return AugmentedFeatures(out, d0, basis)


def raw_features(features, d0: int) -> AugmentedFeatures:
    """Raw-feature SVD of rank 2*d0 and no prompt block; used by the no-augmentation ablation."""
    block, basis = truncated_svd_basis(features, 2 * d0)
    return AugmentedFeatures(block, d0, basis)
