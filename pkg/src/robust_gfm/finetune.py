"""Few-shot tasks, prompted ensemble embeddings, prototype loss and the fine-tuning loop."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .augment import AugmentedFeatures, TextEncoder
from .autograd import Tensor
from .encoding_tree import Partition
from .graph import (UNLABELED, Dataset, PerturbationSpec, bfs_ball, drop_edges, fit_linear_surrogate,
                    normalized_adjacency, perturb_features, targeted_attack, write_matrix)
from .nn import Optimizer, OptimizerConfig, encode_variational
from .pretrain import ExpertCheckpoint, prepare_domain
from .routing import (NullExpert, RouterParams, compute_prototype, cosine_similarities, fuse_embeddings,
                      moe_entropy_loss, null_expert_forward, route, uniform_weights)
from .structure import (InterParams, IntraParams, RefinedAdjacency, normalize_adjacency, ppr_influence,
                        refine_structure)

log = logging.getLogger(__name__)


class TaskError(ValueError):
    pass


class FrozenContractViolation(AssertionError):
    pass


# -- tasks ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FewShotTask:
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    num_classes: int
    m: int
    kind: str = "node"
    ego_sets: tuple = ()  # graph tasks: node set per item, indexed like ``items``
    items: np.ndarray | None = None  # graph tasks: all item centers

    def pooling(self, items, num_nodes: int) -> np.ndarray:
        """Row-averaging matrix mapping node embeddings to item embeddings."""
        items = np.asarray(items, dtype=np.int64)
        pool = np.zeros((items.size, num_nodes))
        if self.kind == "node":
            pool[np.arange(items.size), items] = 1.0
            return pool
        lookup = {int(c): i for i, c in enumerate(self.items)}
        for r, c in enumerate(items):
            nodes = np.asarray(self.ego_sets[lookup[int(c)]], dtype=np.int64)
            pool[r, nodes] = 1.0 / nodes.size
        return pool


def sample_few_shot(dataset: Dataset, m: int, query_fraction: float = 1.0, task_kind: str = "node",
                    seed: int = 0, radius: int = 1) -> FewShotTask:
    """Class-balanced support of m items per class; the query is drawn from the rest."""
    if m < 1:
        raise TaskError("m must be >= 1")
    if not 0.0 < query_fraction <= 1.0:
        raise TaskError("query_fraction must lie in (0, 1]")
    if task_kind not in ("node", "graph"):
        raise TaskError(f"unknown task kind {task_kind!r}")
    labels = dataset.labels
    classes = np.unique(labels[labels != UNLABELED])
    if classes.size == 0:
        raise TaskError("dataset has no labels")
    rng = np.random.default_rng(seed)
    support, rest = [], []
    for c in classes:
        nodes = np.flatnonzero(labels == c)
        if nodes.size < m + 1:
            raise TaskError(f"class {c} has {nodes.size} labelled items, need at least {m + 1}")
        nodes = rng.permutation(nodes)
        support.append(nodes[:m])
        rest.append(nodes[m:])
    support = np.concatenate(support)
    rest = np.concatenate(rest)
    size = min(rest.size, max(1, int(np.floor(query_fraction * rest.size))))
    query = np.sort(rng.choice(rest, size=size, replace=False))
    ego, items = (), None
    if task_kind == "graph":
        items = np.concatenate([support, query])
        ego = tuple(np.array(bfs_ball(dataset.graph.adjacency, int(c), radius)) for c in items)
    return FewShotTask(support, labels[support].copy(), query, labels[query].copy(),
                       int(classes.max()) + 1, m, task_kind, ego, items)


# -- losses and readout -------------------------------------------------------------
def class_prototypes(Z_support, labels, num_classes: int | None = None) -> Tensor:
    """Row Y = mean of support embeddings labelled Y."""
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=c)
    if np.any(counts == 0):
        raise TaskError(f"classes without support: {np.flatnonzero(counts == 0).tolist()}")
    avg = np.zeros((c, labels.size))
    avg[labels, np.arange(labels.size)] = 1.0
    avg /= counts[:, None]
    return ag.as_tensor(avg) @ ag.as_tensor(Z_support)


def cls_loss(Z_support, labels, prototypes, tau: float) -> Tensor:
    """Summed -log softmax over class prototypes of the inner product / tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    logits = ag.as_tensor(Z_support) @ ag.as_tensor(prototypes).T * (1.0 / tau)
    logp = ag.log_softmax(logits)
    return -logp[np.arange(labels.size), labels].sum()


def predict_from(Z_items, prototypes, tau: float = 1.0) -> np.ndarray:
    """argmax_Y <Z, proto_Y> / tau; argmax picks the smallest index on ties."""
    z = np.asarray(Z_items.data if isinstance(Z_items, Tensor) else Z_items)
    p = np.asarray(prototypes.data if isinstance(prototypes, Tensor) else prototypes)
    return np.argmax(z @ p.T / tau, axis=1)


# -- model ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FinetuneConfig:
    lambda_m: float = 0.5
    lambda_u: float = 0.2
    tau: float = 0.5
    epochs: int = 100
    lr: float = 0.01
    seed: int = 0
    heads: int = 4
    d_p: int = 32
    d_k: int = 16
    ppr_alpha: float = 0.85
    T: int = 10
    use_routing: bool = True
    use_gsl: bool = True
    fusion_init: float = 2.0  # initial w_c logit
    theta_init: float = 0.0
    trade_off_init: float = 0.0  # initial w_s logit

    def __post_init__(self):
        if self.lambda_m < 0 or self.lambda_u < 0:
            raise ValueError("lambda_m and lambda_u must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TargetContext:
    """Target graph after partitioning and feature alignment; reused across seeds."""

    dataset: Dataset
    partition: Partition
    features: AugmentedFeatures
    adjacency: np.ndarray
    a_norm: np.ndarray
    influence: np.ndarray

    @classmethod
    def build(cls, dataset: Dataset, d0: int, ppr_alpha: float = 0.85, T: int = 10, augment: bool = True,
              text_encoder: TextEncoder | None = None, partition: Partition | None = None) -> "TargetContext":
        if partition is None:
            tree, feats = prepare_domain(dataset, d0, text_encoder, augment)
            partition = tree.partition
        else:
            feats = _features_for(dataset, partition, d0, augment, text_encoder)
        return cls._assemble(dataset, partition, feats, ppr_alpha, T)

    @classmethod
    def _assemble(cls, dataset, partition, feats, ppr_alpha, T):
        adj = np.array(dataset.graph.adjacency)
        a_norm = normalized_adjacency(adj)
        return cls(dataset, partition, feats, adj, a_norm, ppr_influence(a_norm, ppr_alpha, T))

    def with_graph_of(self, attacked: Dataset, ppr_alpha: float = 0.85, T: int = 10) -> "TargetContext":
        """Perturbed copy seen through the trained pipeline: same partition and alignment maps."""
        if np.array_equal(attacked.features, self.dataset.features):
            feats = self.features
        else:
            feats = self.features.reproject(attacked.features)
        return self._assemble(attacked, self.partition, feats, ppr_alpha, T)


def _features_for(dataset, partition, d0, augment, text_encoder) -> AugmentedFeatures:
    from .augment import augment_features, generate_prompts, raw_features
    from .encoding_tree import EncodingTree

    if not augment:
        return raw_features(dataset.features, d0)
    prompts = generate_prompts(EncodingTree.from_partition(partition))
    return augment_features(dataset.features, prompts, text_encoder or TextEncoder(), d0)


@dataclass
class FinetunedModel:
    experts: list[ExpertCheckpoint]
    router: RouterParams
    prompt: Tensor
    null: NullExpert
    intra: IntraParams
    inter: InterParams
    similarities: np.ndarray
    config: FinetuneConfig
    task: FewShotTask
    prototypes: np.ndarray | None = None
    refined: RefinedAdjacency | None = None
    loss_trace: list = field(default_factory=list)  # (epoch, cls, moe, uncertainty, total)
    routing_trace: list = field(default_factory=list)
    expert_hashes: tuple = ()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("prompt", self.prompt)] + self.null.named_parameters()
        if self.config.use_routing:
            out += self.router.named_parameters()
        if self.config.use_gsl:
            out += self.intra.named_parameters() + self.inter.named_parameters()
        return out

    def check_frozen(self) -> None:
        now = tuple(e.param_hash() for e in self.experts)
        if now != self.expert_hashes:
            raise FrozenContractViolation("frozen expert parameters changed during fine-tuning")


def prompted_embed(augmented, A_refined, prompt, ensemble, alpha, null: NullExpert) -> Tensor:
    """Scale features by the prompt, run every expert and the null expert, fuse."""
    x = augmented.matrix if isinstance(augmented, AugmentedFeatures) else augmented
    x = ag.as_tensor(x)
    prompt = ag.as_tensor(prompt)
    if prompt.shape != (x.shape[1],):
        raise ag.ShapeError(f"prompt length {prompt.shape} does not match feature width {x.shape[1]}")
    a = A_refined.matrix if isinstance(A_refined, RefinedAdjacency) else A_refined
    a_norm = normalize_adjacency(a)
    xp = x * prompt.reshape(1, -1)
    zs = [encode_variational(xp, a_norm, _encoder(e))[0] for e in ensemble]
    return fuse_embeddings(zs, null_expert_forward(xp, a_norm, null), alpha)


def _encoder(expert):
    return expert.encoder if isinstance(expert, ExpertCheckpoint) else expert


def _fixed_embed(x, a_norm, prompt, ensemble, alpha, null) -> Tensor:
    # same as prompted_embed but with an already-normalised constant adjacency
    xp = ag.as_tensor(x) * ag.as_tensor(prompt).reshape(1, -1)
    zs = [encode_variational(xp, a_norm, _encoder(e))[0] for e in ensemble]
    return fuse_embeddings(zs, null_expert_forward(xp, a_norm, null), alpha)


def routing_weights(model: FinetunedModel) -> Tensor:
    if model.config.use_routing:
        return route(model.similarities, model.router)
    return uniform_weights(len(model.experts))


def model_forward(model: FinetunedModel, ctx: TargetContext):
    """Returns (node embeddings, alpha, uncertainty loss, refined adjacency or None)."""
    alpha = routing_weights(model)
    x = ctx.features.matrix
    if not model.config.use_gsl:
        z = _fixed_embed(x, ctx.a_norm, model.prompt, model.experts, alpha, model.null)
        return z, alpha, Tensor(0.0), None
    z0 = _fixed_embed(x, ctx.a_norm, model.prompt, model.experts, alpha, model.null)
    refined, unc = refine_structure(z0, ctx.adjacency, ctx.partition, model.intra, model.inter, ctx.influence)
    z = prompted_embed(x, refined, model.prompt, model.experts, alpha, model.null)
    return z, alpha, unc, refined


def finetune_loss(model: FinetunedModel, ctx: TargetContext):
    cfg = model.config
    z, alpha, unc, refined = model_forward(model, ctx)
    task = model.task
    zs = ag.as_tensor(task.pooling(task.support, ctx.dataset.num_nodes)) @ z
    protos = class_prototypes(zs, task.support_labels, task.num_classes)
    cls = cls_loss(zs, task.support_labels, protos, cfg.tau)
    moe = moe_entropy_loss(alpha) if cfg.use_routing else Tensor(0.0)
    total = cls
    if cfg.use_routing and cfg.lambda_m:
        total = total + moe * cfg.lambda_m
    if cfg.use_gsl and cfg.lambda_u:
        total = total + unc * cfg.lambda_u
    return total, {"cls": cls, "moe": moe, "uncertainty": unc, "alpha": alpha, "z": z,
                   "prototypes": protos, "refined": refined}


def init_model(ctx: TargetContext, ensemble: list[ExpertCheckpoint], config: FinetuneConfig,
               task: FewShotTask) -> FinetunedModel:
    if not ensemble:
        raise ValueError("ensemble is empty")
    x = ctx.features.matrix
    dims = {e.encoder.out_dim for e in ensemble}
    if len(dims) != 1:
        raise ag.ShapeError(f"experts disagree on output width: {sorted(dims)}")
    for e in ensemble:
        if e.encoder.in_dim != x.shape[1]:
            raise ag.ShapeError(f"expert {e.domain_id} expects width {e.encoder.in_dim}, target has {x.shape[1]}")
    out_dim = dims.pop()
    pool = task.pooling(task.support, ctx.dataset.num_nodes)
    sims = []
    for e in ensemble:
        mu, _ = encode_variational(x, ctx.a_norm, e.encoder)
        target_proto = compute_prototype(pool @ mu.data, np.arange(pool.shape[0]))
        sims.append(float(cosine_similarities(target_proto, [e.prototype])[0]))
    seed = config.seed
    return FinetunedModel(
        experts=list(ensemble),
        router=RouterParams.init(len(ensemble)),
        prompt=Tensor(np.ones(x.shape[1]), requires_grad=True, name="prompt"),
        null=NullExpert.init(x.shape[1], out_dim, seed=seed + 1),
        intra=IntraParams.init(out_dim, ctx.partition.K, config.d_p, config.d_k, config.heads, seed=seed + 2,
                              fusion_logit=config.fusion_init),
        inter=InterParams.init(config.ppr_alpha, config.T, config.theta_init, config.trade_off_init),
        similarities=np.array(sims),
        config=config,
        task=task,
        expert_hashes=tuple(e.param_hash() for e in ensemble),
    )


def finetune(target, ensemble: list[ExpertCheckpoint], config: FinetuneConfig, task: FewShotTask,
             d0: int | None = None) -> FinetunedModel:
    """Joint training of prompt, router, null expert and structure parameters."""
    ctx = target if isinstance(target, TargetContext) else TargetContext.build(
        target, d0 or ensemble[0].d0, config.ppr_alpha, config.T)
    model = init_model(ctx, ensemble, config, task)
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig(lr=config.lr))
    for epoch in range(config.epochs):
        opt.zero_grad()
        total, parts = finetune_loss(model, ctx)
        total.backward()
        opt.step()
        model.loss_trace.append((epoch, parts["cls"].item(), parts["moe"].item(),
                                 parts["uncertainty"].item(), total.item()))
        model.routing_trace.append(parts["alpha"].data.copy())
    _, parts = finetune_loss(model, ctx)
    model.prototypes = parts["prototypes"].data.copy()
    model.refined = parts["refined"]
    if config.epochs == 0:
        model.routing_trace.append(parts["alpha"].data.copy())
    model.check_frozen()
    return model


def embed_items(model: FinetunedModel, ctx: TargetContext, items) -> np.ndarray:
    z, _, _, _ = model_forward(model, ctx)
    return model.task.pooling(items, ctx.dataset.num_nodes) @ z.data


def predict(model: FinetunedModel, ctx: TargetContext, items) -> np.ndarray:
    return predict_from(embed_items(model, ctx, items), model.prototypes, model.config.tau)


# -- evaluation ---------------------------------------------------------------------
@dataclass(frozen=True)
class Metrics:
    mean: float
    std: float
    accuracies: tuple
    seeds: tuple
    runs: tuple = field(default=(), compare=False, repr=False)

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "accuracies": list(self.accuracies), "seeds": list(self.seeds)}


@dataclass(frozen=True)
class EvalSetup:
    """Everything one evaluation run needs, picklable for worker processes."""

    target: Dataset
    ensemble: tuple
    config: FinetuneConfig
    d0: int
    m: int = 5
    query_fraction: float = 1.0
    task_kind: str = "node"
    augment: bool = True
    perturbation: PerturbationSpec | None = None
    attack_targets: int = 20
    clean_context: TargetContext | None = None


def _perturbed_target(setup: EvalSetup, task: FewShotTask, seed: int) -> Dataset:
    spec = setup.perturbation
    ds = setup.target
    if spec.kind == "feature-gaussian":
        rows = task.support if spec.support_only else None
        return ds.with_features(perturb_features(ds.features, spec.rate, seed, rows))
    if spec.kind == "edge-drop":
        return ds.with_graph(drop_edges(ds.graph, spec.rate, seed))
    raise ValueError(f"{spec.kind} is not a random perturbation")


@dataclass(frozen=True)
class RunResult:
    seed: int
    accuracy: float
    loss_trace: tuple
    routing_trace: tuple


def run_once(setup: EvalSetup, seed: int) -> RunResult:
    """Sample a task, fine-tune, and score the query set under the configured perturbation."""
    acc, model = _run_model(setup, seed)
    return RunResult(seed, acc, tuple(model.loss_trace), tuple(tuple(a) for a in model.routing_trace))


def _run_model(setup: EvalSetup, seed: int):
    spec = setup.perturbation
    cfg = replace(setup.config, seed=seed)
    task = sample_few_shot(setup.target, setup.m, setup.query_fraction, setup.task_kind, seed)

    def build(ds):
        return TargetContext.build(ds, setup.d0, cfg.ppr_alpha, cfg.T, setup.augment)

    if spec is None:
        ctx = setup.clean_context or build(setup.target)
        model = finetune(ctx, list(setup.ensemble), cfg, task)
        return _accuracy(predict(model, ctx, task.query), task.query_labels), model
    if spec.kind != "targeted":
        noisy = _perturbed_target(setup, task, seed)
        if spec.mode == "poisoning":
            ctx = build(noisy)
            model = finetune(ctx, list(setup.ensemble), cfg, task)
        else:
            clean = setup.clean_context or build(setup.target)
            model = finetune(clean, list(setup.ensemble), cfg, task)
            ctx = clean.with_graph_of(noisy, cfg.ppr_alpha, cfg.T)
        return _accuracy(predict(model, ctx, task.query), task.query_labels), model

    surrogate = fit_linear_surrogate(setup.target, task.support)
    if spec.mode == "poisoning":
        attacked = setup.target
        for t in task.support:
            attacked = attacked.with_graph(targeted_attack(attacked, surrogate, int(t), spec.budget, seed).graph)
        ctx = build(attacked)
        model = finetune(ctx, list(setup.ensemble), cfg, task)
        return _accuracy(predict(model, ctx, task.query), task.query_labels), model
    clean = setup.clean_context or build(setup.target)
    model = finetune(clean, list(setup.ensemble), cfg, task)
    rng = np.random.default_rng(seed)
    k = min(setup.attack_targets, task.query.size)
    targets = np.sort(rng.choice(task.query, size=k, replace=False))
    hits = []
    for t in targets:
        attacked = targeted_attack(setup.target, surrogate, int(t), spec.budget, seed)
        ctx = clean.with_graph_of(attacked, cfg.ppr_alpha, cfg.T)
        hits.append(int(predict(model, ctx, [t])[0] == setup.target.labels[t]))
    return float(np.mean(hits)), model


def _accuracy(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def _run_job(args):
    setup, seed = args
    return run_once(setup, seed)


def evaluate(setup: EvalSetup, repeats: int = 20, seeds=None, workers: int = 1) -> Metrics:
    """Mean and population std of query accuracy over ``repeats`` seeded runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    seeds = list(range(repeats)) if seeds is None else [int(s) for s in seeds][:repeats]
    if len(seeds) != repeats:
        raise ValueError(f"{repeats} repeats but {len(seeds)} seeds")
    if workers > 1 and repeats > 1:
        with ProcessPoolExecutor(max_workers=min(workers, os.cpu_count() or 1)) as pool:
            runs = list(pool.map(_run_job, [(setup, s) for s in seeds]))
    else:
        runs = [run_once(setup, s) for s in seeds]
    accs = [r.accuracy for r in runs]
    return Metrics(float(np.mean(accs)), float(np.std(accs)), tuple(accs), tuple(seeds), tuple(runs))


def majority_baseline(task: FewShotTask) -> float:
    counts = np.bincount(task.query_labels, minlength=task.num_classes)
    return float(counts.max() / counts.sum())


# -- exports ---------------------------------------------------------------------------
def config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def write_metrics(metrics: Metrics, csv_path, json_path, config: dict) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "seed", "accuracy"])
        for i, (s, a) in enumerate(zip(metrics.seeds, metrics.accuracies)):
            w.writerow([i, s, repr(float(a))])
    with open(json_path, "w") as fh:
        json.dump({"mean": metrics.mean, "std": metrics.std, "config_hash": config_hash(config)}, fh, indent=2)


def export_loss_trace(model_or_trace, path) -> None:
    trace = model_or_trace.loss_trace if hasattr(model_or_trace, "loss_trace") else model_or_trace
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "cls", "moe", "uncertainty", "total"])
        for row in trace:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def export_embeddings(model: FinetunedModel, ctx: TargetContext, matrix_path, label_path) -> None:
    z, _, _, _ = model_forward(model, ctx)
    write_matrix(matrix_path, z.data)
    with open(label_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "label"])
        w.writerows((i, int(y)) for i, y in enumerate(ctx.dataset.labels))


def finetune_config_dict(config: FinetuneConfig) -> dict:
    return asdict(config)
