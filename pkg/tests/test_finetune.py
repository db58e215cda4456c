import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robust_gfm.autograd import ShapeError
from robust_gfm.graph import Graph, PerturbationSpec, generate_sbm, make_dataset, normalized_adjacency, read_matrix
from robust_gfm.finetune import (
    EvalSetup, FewShotTask, FinetuneConfig, FrozenContractViolation, Metrics, TargetContext, TaskError,
    class_prototypes, cls_loss, config_hash, evaluate, export_embeddings, export_loss_trace, finetune,
    finetune_loss, init_model, majority_baseline, model_forward, predict, predict_from, prompted_embed,
    run_once, sample_few_shot, write_metrics,
)
from robust_gfm.nn import VariationalEncoder, encode_variational
from robust_gfm.pretrain import ExpertCheckpoint, PretrainConfig, pretrain_all
from robust_gfm.routing import NullExpert, fuse_embeddings, null_expert_forward
from robust_gfm.structure import normalize_adjacency

from conftest import gradcheck


def make_expert(in_dim, out_dim, seed, name="src"):
    enc = VariationalEncoder.init(in_dim, out_dim, num_layers=1, seed=seed).frozen_copy()
    proto = np.random.default_rng(seed).normal(size=out_dim)
    return ExpertCheckpoint(name, enc, d0=in_dim // 2, prototype=proto)


def small_target(n=12, seed=0):
    return generate_sbm(n, 2, 0.8, 0.1, 4, 3.0, seed=seed, domain_id="target")


@pytest.fixture(scope="module")
def small_setup():
    ds = small_target()
    ctx = TargetContext.build(ds, d0=2)
    experts = [make_expert(4, 3, s, f"e{s}") for s in (1, 2)]
    task = sample_few_shot(ds, 2, seed=0)
    return ds, ctx, experts, task


@pytest.fixture(scope="module")
def sbm_suite():
    """Three pretrained SBM source experts and a held-out SBM target."""
    sources = [generate_sbm(60, 3, 0.3, 0.02, 8, 3.0, seed=s, domain_id=f"src{s}") for s in (11, 12, 13)]
    target = generate_sbm(60, 3, 0.3, 0.02, 8, 3.0, seed=20, domain_id="tgt")
    ensemble = pretrain_all(sources, PretrainConfig(epochs=30, hidden=16, seed=0), d0=4, workers=1)
    return target, ensemble


class TestSampleFewShot:
    def test_minimal(self):
        ds = make_dataset(Graph.from_edges(4, [(0, 1)]), np.zeros((4, 1)), [0, 0, 1, 1])
        task = sample_few_shot(ds, 1, seed=0)
        assert task.support.size == 2 and task.query.size == 2
        assert sorted(task.support_labels.tolist()) == [0, 1]

    @pytest.mark.parametrize("seed", range(5))
    def test_five_shot_balanced_and_disjoint(self, sbm_small, seed):
        task = sample_few_shot(sbm_small, 5, seed=seed)
        assert task.support.size == 5 * 3
        np.testing.assert_array_equal(np.bincount(task.support_labels), [5, 5, 5])
        assert not set(task.support.tolist()) & set(task.query.tolist())
        assert task.support.size + task.query.size == sbm_small.num_nodes

    def test_deterministic(self, sbm_small):
        a, b = sample_few_shot(sbm_small, 5, seed=7), sample_few_shot(sbm_small, 5, seed=7)
        np.testing.assert_array_equal(a.support, b.support)
        np.testing.assert_array_equal(a.query, b.query)

    def test_query_fraction(self, sbm_small):
        task = sample_few_shot(sbm_small, 5, query_fraction=0.5, seed=0)
        assert task.query.size == (sbm_small.num_nodes - 15) // 2

    def test_errors(self, sbm_small):
        ds = make_dataset(Graph.from_edges(3, []), np.zeros((3, 1)), [0, 0, 1])
        with pytest.raises(TaskError):
            sample_few_shot(ds, 1)
        with pytest.raises(TaskError):
            sample_few_shot(sbm_small, 0)
        with pytest.raises(TaskError):
            sample_few_shot(sbm_small, 1, task_kind="edge")

    def test_graph_task_pools_ego_nets(self, tiny_dataset):
        task = sample_few_shot(tiny_dataset, 1, task_kind="graph", seed=0, radius=1)
        z = np.arange(12.0).reshape(6, 2)
        pooled = task.pooling(task.support, 6) @ z
        for row, center in zip(pooled, task.support):
            ball = np.flatnonzero(tiny_dataset.graph.adjacency[center]).tolist() + [int(center)]
            np.testing.assert_allclose(row, z[ball].mean(axis=0), atol=1e-12)


class TestPrototypesAndLoss:
    def test_one_per_class(self, rng):
        z = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(class_prototypes(z, [2, 0, 1]).data, z[[1, 2, 0]])

    def test_duplicates_unchanged(self, rng):
        z = rng.normal(size=(2, 4))
        dup = np.vstack([z, z])
        np.testing.assert_allclose(class_prototypes(dup, [0, 1, 0, 1]).data, z, atol=1e-15)

    def test_summation_oracle(self, rng):
        z = rng.normal(size=(7, 3))
        labels = [0, 1, 1, 2, 0, 2, 2]
        expected = np.array([sum(z[i] for i in range(7) if labels[i] == c) / labels.count(c) for c in range(3)])
        np.testing.assert_allclose(class_prototypes(z, labels).data, expected, atol=1e-12)

    def test_empty_class(self, rng):
        with pytest.raises(TaskError):
            class_prototypes(rng.normal(size=(2, 2)), [0, 2])

    def test_single_class_zero(self, rng):
        z = rng.normal(size=(4, 3))
        assert cls_loss(z, [0] * 4, class_prototypes(z, [0] * 4), 0.5).item() == 0.0

    def test_equidistant(self):
        z = np.zeros((6, 3))
        protos = np.eye(3)
        assert cls_loss(z, [0, 0, 1, 1, 2, 2], protos, 0.7).item() == pytest.approx(6 * np.log(3), abs=1e-12)

    def test_naive_oracle(self, rng):
        z = rng.normal(size=(6, 4))
        labels = [0, 0, 1, 1, 2, 2]
        protos = class_prototypes(z, labels).data
        tau = 0.5
        expected = 0.0
        for i, y in enumerate(labels):
            s = [np.exp(z[i] @ protos[c] / tau) for c in range(3)]
            expected -= np.log(s[y] / sum(s))
        assert cls_loss(z, labels, protos, tau).item() == pytest.approx(expected, abs=1e-10)

    def test_large_logits_stable(self):
        z = np.array([[1e3, 0.0], [0.0, 1e3]])
        assert np.isfinite(cls_loss(z, [0, 1], z, 0.01).item())

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            cls_loss(np.ones((1, 1)), [0], np.ones((1, 1)), 0.0)


class TestPredict:
    def test_prototype_query(self, rng):
        protos = rng.normal(size=(3, 4))
        assert predict_from(protos[1:2] * 2.0, protos).tolist() == [int(np.argmax(protos @ protos[1]))]
        unit = np.eye(3)
        assert predict_from(unit[2:3], unit).tolist() == [2]

    def test_zero_embedding_tie(self, rng):
        assert predict_from(np.zeros((2, 4)), rng.normal(size=(3, 4))).tolist() == [0, 0]

    def test_separable_toy(self, rng):
        protos = np.array([[1.0, 0.0], [-1.0, 0.0]])
        q = np.array([[0.9, 0.1], [-0.9, 0.3], [0.9, -0.2], [-0.9, 0.0]])
        assert predict_from(q, protos).tolist() == [0, 1, 0, 1]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.01, 100.0))
    def test_tau_invariance(self, seed, tau):
        rng = np.random.default_rng(seed)
        z, protos = rng.normal(size=(10, 3)), rng.normal(size=(4, 3))
        np.testing.assert_array_equal(predict_from(z, protos, tau), predict_from(z, protos, 1.0))


class TestPromptedEmbed:
    def _parts(self, rng, n=6, width=4, d=3):
        x = rng.normal(size=(n, width))
        a = rng.random((n, n))
        a = (a + a.T) / 2
        experts = [make_expert(width, d, s) for s in (1, 2)]
        null = NullExpert.init(width, d, seed=3)
        alpha = np.array([0.5, 0.3, 0.2])
        return x, a, experts, null, alpha

    def test_ones_prompt_is_identity(self, rng):
        x, a, experts, null, alpha = self._parts(rng)
        out = prompted_embed(x, a, np.ones(4), experts, alpha, null).data
        an = normalize_adjacency(a).data
        zs = [encode_variational(x, an, e.encoder)[0] for e in experts]
        np.testing.assert_allclose(out, fuse_embeddings(zs, null_expert_forward(x, an, null), alpha).data, atol=0)

    def test_zero_prompt(self, rng):
        x, a, experts, null, alpha = self._parts(rng)
        assert np.all(prompted_embed(x, a, np.zeros(4), experts, alpha, null).data == 0)

    def test_manual_composition(self, rng):
        x, a, experts, null, alpha = self._parts(rng)
        p = rng.normal(size=4)
        deg = a.sum(axis=1)
        an = a / np.sqrt(np.outer(deg, deg))
        xp = x * p
        relu = lambda m: np.maximum(m, 0)
        manual = alpha[2] * relu(an @ xp @ null.W.data)
        for w, e in zip(alpha[:2], experts):
            h = relu(an @ xp @ e.encoder.layers[0].data)
            manual = manual + w * (h @ e.encoder.mu_head.data)
        np.testing.assert_allclose(prompted_embed(x, a, p, experts, alpha, null).data, manual, atol=1e-10)

    def test_width_mismatch(self, rng):
        x, a, experts, null, alpha = self._parts(rng)
        with pytest.raises(ShapeError):
            prompted_embed(x, a, np.ones(3), experts, alpha, null)


class TestFinetune:
    def test_zero_epochs_keeps_experts(self, small_setup):
        ds, ctx, experts, task = small_setup
        before = [e.param_hash() for e in experts]
        model = finetune(ctx, experts, FinetuneConfig(epochs=0), task)
        assert [e.param_hash() for e in experts] == before
        assert model.loss_trace == [] and len(model.routing_trace) == 1
        np.testing.assert_array_equal(model.prompt.data, 1.0)
        assert predict(model, ctx, task.query).shape == task.query.shape

    def test_frozen_violation_detected(self, small_setup):
        ds, ctx, experts, task = small_setup
        copies = [make_expert(4, 3, s) for s in (1, 2)]
        model = init_model(ctx, copies, FinetuneConfig(epochs=0), task)
        copies[0].encoder.mu_head.data[0, 0] += 1e-12
        with pytest.raises(FrozenContractViolation):
            model.check_frozen()

    def test_training_keeps_experts(self, small_setup):
        ds, ctx, experts, task = small_setup
        before = [e.param_hash() for e in experts]
        model = finetune(ctx, experts, FinetuneConfig(epochs=5), task)
        assert [e.param_hash() for e in experts] == before == list(model.expert_hashes)
        assert len(model.loss_trace) == 5 and len(model.routing_trace) == 5

    def test_additive_objective(self, small_setup):
        ds, ctx, experts, task = small_setup
        plain = finetune(ctx, experts, FinetuneConfig(epochs=5, lambda_m=0, lambda_u=0), task)
        totals = [row[4] for row in plain.loss_trace]
        cls_only = [row[1] for row in plain.loss_trace]
        assert totals == cls_only
        again = finetune(ctx, experts, FinetuneConfig(epochs=5, lambda_m=0, lambda_u=0), task)
        assert [row[4] for row in again.loss_trace] == totals

    def test_total_is_weighted_sum(self, small_setup):
        ds, ctx, experts, task = small_setup
        model = finetune(ctx, experts, FinetuneConfig(epochs=3, lambda_m=0.5, lambda_u=0.2), task)
        for _, cls, moe, unc, total in model.loss_trace:
            assert total == pytest.approx(cls + 0.5 * moe + 0.2 * unc, abs=1e-12)

    def test_prompt_identity_limit(self, small_setup):
        """Ones prompt, W_c -> 0, W_s = 1/2, theta -> -inf: embedding equals the plain forward."""
        ds, ctx, experts, task = small_setup
        model = init_model(ctx, experts, FinetuneConfig(epochs=0), task)
        model.intra.w_c.data[:] = -60.0
        model.inter.theta.data = np.array(-1e3)
        model.inter.w_s.data = np.array(0.0)
        z, alpha, _, _ = model_forward(model, ctx)
        an = normalized_adjacency(ctx.adjacency, add_self_loops=False)
        x = ctx.features.matrix
        zs = [encode_variational(x, an, e.encoder)[0] for e in experts]
        plain = fuse_embeddings(zs, null_expert_forward(x, an, model.null), alpha).data
        np.testing.assert_allclose(z.data, plain, atol=1e-6)

    def test_composite_gradient_all_groups(self, small_setup):
        ds, ctx, experts, task = small_setup
        model = init_model(ctx, experts, FinetuneConfig(epochs=0, fusion_init=0.3, theta_init=0.05,
                                                         trade_off_init=-0.2, d_p=3, d_k=2, heads=2), task)
        rng = np.random.default_rng(0)
        model.prompt.data = rng.uniform(0.5, 1.5, size=model.prompt.shape)
        model.router.W.data += rng.normal(scale=0.3, size=model.router.W.shape)
        params = dict(model.named_parameters())
        assert {"prompt", "null_W", "router_W", "router_b", "W_p", "w_c", "theta_thres", "w_s"} <= set(params)
        errs = gradcheck(lambda: finetune_loss(model, ctx)[0], params, h=1e-6)
        assert max(errs.values()) < 1e-4, errs

    def test_ablation_flags(self, small_setup):
        ds, ctx, experts, task = small_setup
        model = finetune(ctx, experts, FinetuneConfig(epochs=3, use_routing=False, use_gsl=False), task)
        for a in model.routing_trace:
            np.testing.assert_allclose(a, 1 / 3, atol=1e-15)
        names = {k for k, _ in model.named_parameters()}
        assert names == {"prompt", "null_W"}
        assert all(row[2] == 0.0 and row[3] == 0.0 for row in model.loss_trace)
        assert model.refined is None

    def test_config_errors(self):
        with pytest.raises(ValueError):
            FinetuneConfig(lambda_m=-1)
        with pytest.raises(ValueError):
            FinetuneConfig(tau=0)

    def test_support_loss_descends(self, sbm_suite):
        target, ensemble = sbm_suite
        ctx = TargetContext.build(target, d0=4)
        wins = 0
        for seed in range(20):
            task = sample_few_shot(target, 5, seed=seed)
            model = finetune(ctx, ensemble, FinetuneConfig(epochs=100, seed=seed), task)
            wins += model.loss_trace[-1][1] < model.loss_trace[0][1]
        assert wins >= 18


class TestEvaluate:
    def _setup(self, sbm_suite, **kw):
        target, ensemble = sbm_suite
        return EvalSetup(target, tuple(ensemble), FinetuneConfig(epochs=10), d0=4, **kw)

    def test_single_repeat_zero_std(self, sbm_suite):
        m = evaluate(self._setup(sbm_suite), repeats=1)
        assert m.std == 0.0 and len(m.accuracies) == 1

    def test_same_seeds_same_metrics(self, sbm_suite):
        setup = self._setup(sbm_suite)
        assert evaluate(setup, 2, [3, 4]) == evaluate(setup, 2, [3, 4])

    def test_default_repeats(self):
        import inspect
        assert inspect.signature(evaluate).parameters["repeats"].default == 20

    def test_zero_noise_matches_clean(self, sbm_suite):
        clean = evaluate(self._setup(sbm_suite), 2, [0, 1])
        for mode in ("evasion", "poisoning"):
            noisy = evaluate(self._setup(sbm_suite, perturbation=PerturbationSpec("feature-gaussian", 0.0,
                                                                                   mode=mode)), 2, [0, 1])
            assert noisy.accuracies == clean.accuracies

    def test_targeted_evasion_scores_targets(self, sbm_suite):
        spec = PerturbationSpec("targeted", budget=2, mode="evasion")
        run = run_once(self._setup(sbm_suite, perturbation=spec, attack_targets=5), 0)
        assert run.accuracy in {k / 5 for k in range(6)}

    def test_errors(self, sbm_suite):
        with pytest.raises(ValueError):
            evaluate(self._setup(sbm_suite), repeats=0)
        with pytest.raises(ValueError):
            evaluate(self._setup(sbm_suite), repeats=3, seeds=[1])

    def test_majority_baseline(self):
        task = FewShotTask(np.array([0]), np.array([0]), np.arange(1, 5), np.array([0, 1, 1, 1]), 2, 1)
        assert majority_baseline(task) == 0.75


def test_exports(tmp_path, small_setup):
    ds, ctx, experts, task = small_setup
    m = Metrics(0.5, 0.1, (0.4, 0.6), (7, 8))
    write_metrics(m, tmp_path / "m.csv", tmp_path / "m.json", {"a": 1})
    rows = list(csv.reader((tmp_path / "m.csv").open()))
    assert rows == [["run", "seed", "accuracy"], ["0", "7", "0.4"], ["1", "8", "0.6"]]
    summary = json.loads((tmp_path / "m.json").read_text())
    assert summary == {"mean": 0.5, "std": 0.1, "config_hash": config_hash({"a": 1})}

    model = finetune(ctx, experts, FinetuneConfig(epochs=2), task)
    export_loss_trace(model, tmp_path / "loss.csv")
    assert list(csv.reader((tmp_path / "loss.csv").open()))[0] == ["epoch", "cls", "moe", "uncertainty", "total"]
    export_embeddings(model, ctx, tmp_path / "z.bin", tmp_path / "y.csv")
    assert read_matrix(tmp_path / "z.bin").shape == (ds.num_nodes, 3)
    assert len(list(csv.reader((tmp_path / "y.csv").open()))) == ds.num_nodes + 1
