"""Self-supervised information-bottleneck pre-training of one expert per source domain."""

from __future__ import annotations

import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .augment import AugmentedFeatures, TextEncoder, augment_features, generate_prompts, raw_features
from .autograd import NonFiniteError, Tensor
from .encoding_tree import EncodingTree, Partition, build_encoding_tree
from .graph import Dataset, normalized_adjacency
from .nn import Optimizer, OptimizerConfig, VariationalEncoder, encode_variational, reparameterize

log = logging.getLogger(__name__)

_MASKED = -1e30


class PairSamplingError(ValueError):
    pass


class DomainError(RuntimeError):
    def __init__(self, domain_id: str, cause: BaseException):
        super().__init__(f"[{domain_id}] {type(cause).__name__}: {cause}")
        self.domain_id = domain_id
        self.cause = cause


@dataclass(frozen=True)
class PairBatch:
    """Anchor/positive pairs with a padded negative matrix (``-1`` = no negative)."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def negatives_of(self, i: int) -> np.ndarray:
        row = self.negatives[i]
        return row[row >= 0]


@dataclass(frozen=True)
class PretrainConfig:
    tau: float = 0.5
    lambda_ib: float = 1e-2
    epochs: int = 100
    lr: float = 0.01
    n_pos: int = 1
    n_neg: int = 16
    hidden: int = 64
    num_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_ib < 0:
            raise ValueError("lambda_ib must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("n_pos and n_neg must be >= 1")


@dataclass
class ExpertCheckpoint:
    domain_id: str
    encoder: VariationalEncoder
    loss_trace: list = field(default_factory=list)  # (epoch, infonce, kl, total)
    assignment: np.ndarray | None = None
    d0: int = 0
    prototype: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    frozen: bool = True

    def param_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in self.encoder.parameters())

    def param_hash(self) -> str:
        return hashlib.sha256(self.param_bytes()).hexdigest()


# -- pairs & losses --------------------------------------------------------------
def _pick(rng: np.random.Generator, mask: np.ndarray, k: int) -> np.ndarray:
    """Per row, up to ``k`` uniformly chosen True columns (padded with -1), no repeats."""
    keys = np.where(mask, rng.random(mask.shape), -1.0)
    k = min(k, mask.shape[1])
    order = np.argsort(-keys, axis=1, kind="stable")[:, :k]
    chosen = np.take_along_axis(keys, order, axis=1) >= 0
    return np.where(chosen, order, -1)


def sample_pairs(graph, partition: Partition, n_pos: int, n_neg: int, seed) -> PairBatch:
    """Positives: same cluster or adjacent. Negatives: neither, sampled uniformly."""
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be >= 1")
    n = graph.num_nodes
    if n < 3:
        raise PairSamplingError("need at least 3 nodes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    assign = partition.assignment
    same = assign[:, None] == assign[None, :]
    adj = graph.adjacency > 0
    eye = np.eye(n, dtype=bool)
    pos_mask = (same | adj) & ~eye
    neg_mask = ~same & ~adj
    anchors = np.flatnonzero(pos_mask.any(axis=1) & neg_mask.any(axis=1))
    if anchors.size == 0:
        raise PairSamplingError("no node has both a positive and a negative candidate")
    pos = _pick(rng, pos_mask[anchors], n_pos)
    neg = _pick(rng, neg_mask[anchors], n_neg)
    rep_anchor = np.repeat(anchors, pos.shape[1])
    rep_neg = np.repeat(neg, pos.shape[1], axis=0)
    flat_pos = pos.reshape(-1)
    keep = flat_pos >= 0
    return PairBatch(rep_anchor[keep], flat_pos[keep], rep_neg[keep])


def info_nce_loss(Z, batch: PairBatch, tau: float) -> Tensor:
    """Mean over pairs of -log softmax of the positive among {positive} + negatives."""
    if len(batch) == 0:
        raise ValueError("empty pair batch")
    if tau <= 0:
        raise ValueError("tau must be positive")
    Z = ag.as_tensor(Z)
    m, k = batch.negatives.shape
    d = Z.shape[1]
    za = Z[batch.anchors]
    pos = (za * Z[batch.positives]).sum(axis=1, keepdims=True) * (1.0 / tau)
    valid = batch.negatives >= 0
    zn = Z[np.where(valid, batch.negatives, 0)]
    neg = (za.reshape(m, 1, d) * zn).sum(axis=2) * (1.0 / tau)
    neg = ag.where(valid, neg, _MASKED)
    logits = ag.concat([pos, neg], axis=1)
    return (ag.logsumexp(logits, axis=1) - pos.reshape(m)).mean()


def kl_loss(mu, logvar) -> Tensor:
    """(1/N) sum_i 0.5 sum_k (sigma^2 + mu^2 - 1 - log sigma^2) against N(0, I)."""
    mu, logvar = ag.as_tensor(mu), ag.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ag.ShapeError("mu and logvar shapes differ")
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
        raise NonFiniteError("non-finite input to kl_loss")
    per = ag.exp(logvar) + mu * mu - 1.0 - logvar
    return per.sum() * (0.5 / mu.shape[0])


def pretrain_loss(encoder: VariationalEncoder, X, A_norm, batch: PairBatch, config: PretrainConfig, rng):
    mu, logvar = encode_variational(X, A_norm, encoder)
    z = reparameterize(mu, logvar, rng)
    nce = info_nce_loss(z, batch, config.tau)
    kl = kl_loss(mu, logvar)
    total = nce + kl * config.lambda_ib if config.lambda_ib else nce
    return total, nce, kl


# -- training ---------------------------------------------------------------------
def prepare_domain(dataset: Dataset, d0: int, text_encoder: TextEncoder | None = None,
                   augment: bool = True, max_listed_peers: int = 10, max_passes: int = 50):
    """Encoding tree plus (augmented or raw) aligned features for one graph."""
    tree = build_encoding_tree(dataset.graph, max_passes=max_passes)
    if not augment:
        return tree, raw_features(dataset.features, d0)
    enc = text_encoder or TextEncoder()
    prompts = generate_prompts(tree, max_listed_peers)
    return tree, augment_features(dataset.features, prompts, enc, d0)


def pretrain_domain(dataset: Dataset, augmented: AugmentedFeatures, partition: Partition,
                    config: PretrainConfig) -> ExpertCheckpoint:
    X = augmented.matrix
    encoder = VariationalEncoder.init(X.shape[1], config.hidden, config.num_layers, seed=config.seed)
    a_norm = normalized_adjacency(dataset.graph, add_self_loops=True)
    opt = Optimizer(dict(encoder.named_parameters()), OptimizerConfig(lr=config.lr))
    rng = np.random.default_rng(config.seed)
    trace = []
    for epoch in range(config.epochs):
        batch = sample_pairs(dataset.graph, partition, config.n_pos, config.n_neg, rng)
        opt.zero_grad()
        try:
            total, nce, kl = pretrain_loss(encoder, X, a_norm, batch, config, rng)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch}: {exc}") from exc
        total.backward()
        opt.step()
        trace.append((epoch, nce.item(), kl.item(), total.item()))
    frozen = encoder.frozen_copy()
    mu, _ = encode_variational(X, a_norm, frozen)
    return ExpertCheckpoint(
        domain_id=dataset.domain_id,
        encoder=frozen,
        loss_trace=trace,
        assignment=partition.assignment.copy(),
        d0=augmented.d0,
        prototype=mu.data.mean(axis=0),
        config=asdict(config),
    )


def _pretrain_job(args):
    dataset, config, d0, text_encoder, augment = args
    try:
        tree, feats = prepare_domain(dataset, d0, text_encoder, augment)
        return pretrain_domain(dataset, feats, tree.partition, config)
    except Exception as exc:  # annotate and re-raise in the parent
        raise DomainError(dataset.domain_id, exc) from exc


def pretrain_all(datasets: list[Dataset], config: PretrainConfig, d0: int = 16,
                 text_encoder: TextEncoder | None = None, augment: bool = True,
                 workers: int | None = None) -> list[ExpertCheckpoint]:
    """One expert per source domain, in input order; ``workers > 1`` uses processes."""
    if not datasets:
        raise ValueError("need at least one source dataset")
    jobs = [(ds, config, d0, text_encoder, augment) for ds in datasets]
    if workers is None:
        workers = min(len(jobs), os.cpu_count() or 1)
    if workers <= 1 or len(jobs) == 1:
        return [_pretrain_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_pretrain_job, jobs))
