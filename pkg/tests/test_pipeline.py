import numpy as np
import pytest

from tailshare.errors import ConfigError, DomainError, StructuralError
from tailshare.datagen import GenConfig, TaskSplit, generate
from tailshare.nn import ModelSpec, OptConfig, bce_loss_grad, init_params
from tailshare.pipeline import (
    AssembledModel,
    RunConfig,
    assemble,
    build_task_data,
    evaluate,
    full_run,
    logit_offsets,
    refine_decoders,
    select_structure,
    stage1,
    stage2,
    task_offsets,
)


SPEC = ModelSpec(4, (8, 8), (3, 3), activation="tanh")


def toy_dataset(seed=11):
    return generate(GenConfig(6, 4, 10.0, 120, class_mean_scale=1.8, noise_sigma=1.0, seed=seed))


def run_config(**overrides):
    base = dict(
        spec=SPEC,
        stage1_opt=OptConfig(0.3, epochs=25, batch_size=64, seed=1),
        stage2_opt=OptConfig(0.3, epochs=25, batch_size=64, seed=2),
        refine_opt=OptConfig(0.1, epochs=5, batch_size=64, seed=3),
        init_seed=5,
    )
    base.update(overrides)
    return RunConfig(**base)


class TestLogitOffsets:
    def test_uniform_priors_equal_offsets(self):
        offs = logit_offsets(np.full(4, 0.25), 1.0)
        assert np.allclose(offs, offs[0])

    def test_tau_zero_gives_zeros(self):
        assert np.all(logit_offsets(np.array([0.9, 0.1]), 0.0) == 0.0)

    def test_hand_values(self):
        offs = logit_offsets(np.array([0.9, 0.1]), 1.0)
        assert offs == pytest.approx([-0.105361, -2.302585], abs=1e-5)

    def test_zero_prior_rejected(self):
        with pytest.raises(DomainError):
            logit_offsets(np.array([1.0, 0.0]), 1.0)

    def test_task_offsets_follow_group_order(self):
        priors = np.array([0.4, 0.3, 0.2, 0.1])
        split = TaskSplit((1, 0), (3, 2))
        off_a, off_b = task_offsets(priors, 1.0, split)
        assert np.allclose(off_a, np.log([0.3, 0.4]))
        assert np.allclose(off_b, np.log([0.1, 0.2]))


class TestStage1:
    def test_deterministic(self):
        td = build_task_data(toy_dataset())
        cfg = run_config()
        a = stage1(cfg, td)
        b = stage1(cfg, td)
        assert np.array_equal(a.params_a.values, b.params_a.values)
        assert np.array_equal(a.fisher_b.values, b.fisher_b.values)

    def test_task_a_never_reads_tail_labels(self):
        td = build_task_data(toy_dataset())
        cfg = run_config()
        ref = stage1(cfg, td)
        scrambled = build_task_data(toy_dataset())
        scrambled.z_b = scrambled.z_b[:, ::-1].copy()  # permute tail columns only
        other = stage1(cfg, scrambled)
        assert np.array_equal(ref.params_a.values, other.params_a.values)
        assert not np.array_equal(ref.params_b.values, other.params_b.values)

    def test_losses_recorded_and_decreasing_overall(self):
        td = build_task_data(toy_dataset())
        s1 = stage1(run_config(), td)
        assert s1.losses_a[-1] < s1.losses_a[0]
        assert s1.losses_b[-1] < s1.losses_b[0]


class TestSelectStructure:
    def test_degenerate_single_candidate(self):
        td = build_task_data(toy_dataset())
        s1 = stage1(run_config(), td)
        res = select_structure(s1, td.n, SPEC, c_values=(1,), w_values=(0.7,))
        assert (res.c_star, res.w_star) == (1, 0.7)

    def test_argmin_row_is_table_minimum(self):
        td = build_task_data(toy_dataset())
        s1 = stage1(run_config(), td)
        res = select_structure(s1, td.n, SPEC)
        assert res.cell(res.c_star, res.w_star).total == min(r.total for r in res.table)


class TestStage2:
    def test_pure_head_weights_reproduce_stage1_trajectory(self):
        td = build_task_data(toy_dataset())
        opt = OptConfig(0.3, epochs=10, batch_size=64, seed=7)
        cfg = run_config(stage1_opt=opt, stage2_opt=opt)
        s1 = stage1(cfg, td)
        s2 = stage2(cfg, td, 1.0)
        assert s2.epoch_losses == s1.losses_a

    def test_objective_consistency_full_batch(self):
        td = build_task_data(toy_dataset())
        opt = OptConfig(0.3, epochs=1, batch_size=td.n, seed=9)
        cfg = run_config(stage1_opt=opt, stage2_opt=opt)
        w_a = 0.3
        s2 = stage2(cfg, td, w_a)
        init = init_params(SPEC, cfg.init_seed)
        offs = task_offsets(td.priors, cfg.tau, td.split)
        la, _ = bce_loss_grad(init, SPEC, td.batch(), "A", offs[0])
        lb, _ = bce_loss_grad(init, SPEC, td.batch(), "B", offs[1])
        assert abs(s2.epoch_losses[0] - (w_a * la + (1 - w_a) * lb)) < 1e-10

    def test_warm_start_requires_stage1(self):
        td = build_task_data(toy_dataset())
        cfg = run_config(warm_start_stage2=True)
        with pytest.raises(ConfigError):
            stage2(cfg, td, 0.5, None)

    def test_warm_start_uses_stage1_heads(self):
        td = build_task_data(toy_dataset())
        cfg = run_config(warm_start_stage2=True,
                         stage2_opt=OptConfig(0.3, epochs=0, batch_size=64, seed=2))
        s1 = stage1(cfg, td)
        s2 = stage2(cfg, td, 0.5, s1)
        assert np.array_equal(s2.params.block("head_b"), s1.params_b.block("head_b"))
        assert np.array_equal(s2.params.block("trunk1"), s1.params_a.block("trunk1"))


class TestAssemble:
    def build(self, c):
        td = build_task_data(toy_dataset())
        cfg = run_config()
        s1 = stage1(cfg, td)
        s2 = stage2(cfg, td, 0.6)
        return td, s1, s2, assemble(SPEC, c, s2.params, s1, td.split, td.priors)

    def test_depth_zero_equals_stage1_networks(self):
        _, s1, _, model = self.build(0)
        assert np.array_equal(model.branch_a.values, s1.params_a.values)
        assert np.array_equal(model.branch_b.values, s1.params_b.values)

    def test_full_depth_keeps_only_stage1_heads(self):
        _, s1, s2, model = self.build(SPEC.depth)
        d = SPEC.encoder_params(SPEC.depth)
        assert np.array_equal(model.branch_a.values[:d], s2.params.values[:d])
        assert np.array_equal(model.branch_a.block("head_a"), s1.params_a.block("head_a"))
        assert np.array_equal(model.branch_b.block("head_b"), s1.params_b.block("head_b"))

    def test_every_parameter_has_declared_origin(self):
        _, s1, s2, model = self.build(1)
        d = SPEC.encoder_params(1)
        for branch, source in ((model.branch_a, s1.params_a), (model.branch_b, s1.params_b)):
            for j in range(SPEC.param_count):
                expected = s2.params.values[j] if j < d else source.values[j]
                assert branch.values[j] == expected

    def test_idempotent(self):
        td, s1, s2, model = self.build(1)
        again = assemble(SPEC, 1, s2.params, s1, td.split, td.priors)
        assert np.array_equal(model.branch_a.values, again.branch_a.values)
        assert np.array_equal(model.branch_b.values, again.branch_b.values)

    def test_branches_share_encoder_bit_exactly(self):
        _, _, _, model = self.build(2)
        d = SPEC.encoder_params(2)
        assert np.array_equal(model.branch_a.values[:d], model.branch_b.values[:d])

    def test_shape_mismatch_rejected(self):
        td, s1, s2, _ = self.build(1)
        other = init_params(ModelSpec(4, (8, 7), (3, 3)), 0)
        with pytest.raises(StructuralError):
            assemble(SPEC, 1, other, s1, td.split, td.priors)


class TestRefine:
    def test_zero_epochs_leave_model_unchanged(self):
        td, _, _, model = TestAssemble().build(1)
        out = refine_decoders(model, td, OptConfig(0.1, epochs=0, batch_size=64, seed=4))
        assert np.array_equal(out.branch_a.values, model.branch_a.values)
        assert np.array_equal(out.branch_b.values, model.branch_b.values)

    def test_encoder_bitwise_frozen(self):
        td, _, _, model = TestAssemble().build(1)
        out = refine_decoders(model, td, OptConfig(0.1, epochs=4, batch_size=64, seed=4))
        d = SPEC.encoder_params(1)
        assert np.array_equal(out.branch_a.values[:d], model.branch_a.values[:d])
        assert np.array_equal(out.branch_b.values[:d], model.branch_b.values[:d])
        assert not np.array_equal(out.branch_a.values[d:], model.branch_a.values[d:])

    def test_mean_training_bce_does_not_increase(self):
        deltas = []
        for seed in range(5):
            ds = toy_dataset(seed=20 + seed)
            td = build_task_data(ds)
            cfg = run_config(init_seed=seed)
            s1 = stage1(cfg, td)
            s2 = stage2(cfg, td, 0.5)
            model = assemble(SPEC, 1, s2.params, s1, td.split, td.priors)
            before = evaluate(model, ds.features, ds.labels)
            out = refine_decoders(model, td, OptConfig(0.1, epochs=8, batch_size=64, seed=seed))
            after = evaluate(out, ds.features, ds.labels)
            deltas.append((after.bce_a + after.bce_b) - (before.bce_a + before.bce_b))
        assert np.mean(deltas) <= 1e-6


class TestPredict:
    def hand_model(self, head_bias, tail_bias, split):
        spec = ModelSpec(2, (2,), (len(head_bias), len(tail_bias)), activation="tanh")
        branch_a = init_params(spec, 0)
        branch_a.values[:] = 0.0
        branch_b = branch_a.copy()
        fan = 2 * len(head_bias)
        branch_a.block("head_a")[fan:] = head_bias
        branch_b.block("head_b")[2 * len(tail_bias):] = tail_bias
        priors = np.full(split.n_classes, 1.0 / split.n_classes)
        return AssembledModel(spec, 0, split, priors, branch_a, branch_b)

    def test_argmax_of_concatenated_scores(self):
        model = self.hand_model([2.0, 0.1], [0.5], TaskSplit((0, 1), (2,)))
        assert model.predict(np.array([0.3, -0.2])) == 0

    def test_tail_order_permutation_invariance(self):
        a = self.hand_model([0.1, 0.2], [3.0, 1.0], TaskSplit((0, 1), (2, 3)))
        b = self.hand_model([0.1, 0.2], [1.0, 3.0], TaskSplit((0, 1), (3, 2)))
        y = np.array([[0.5, 0.5], [-1.0, 2.0]])
        assert np.array_equal(a.predict(y), b.predict(y))

    def test_exact_tie_picks_smallest_class(self):
        model = self.hand_model([0.0, 0.0], [0.0], TaskSplit((0, 1), (2,)))
        assert model.predict(np.array([1.0, 1.0])) == 0

    def test_scores_map_back_to_original_indices(self):
        model = self.hand_model([2.0, 0.1], [0.5], TaskSplit((1, 2), (0,)))
        scores = model.scores(np.array([[0.0, 0.0]]))
        assert np.allclose(scores, [[0.5, 2.0, 0.1]])

    def test_posthoc_adjustment_shifts_scores(self):
        split = TaskSplit((0, 1), (2,))
        model = self.hand_model([1.0, 1.0], [1.0], split)
        model.priors = np.array([0.6, 0.3, 0.1])
        raw = model.scores(np.array([[0.0, 0.0]]))
        adj = model.scores(np.array([[0.0, 0.0]]), posthoc_tau=1.0)
        assert np.allclose(adj, raw - np.log(model.priors))


class TestFullRun:
    def test_end_to_end_determinism(self):
        ds = toy_dataset()
        cfg = run_config()
        a = full_run(cfg, ds)
        b = full_run(cfg, ds)
        assert (a.selection.c_star, a.selection.w_star) == (b.selection.c_star, b.selection.w_star)
        assert np.array_equal(a.model.branch_a.values, b.model.branch_a.values)
        assert a.metrics.as_dict() == b.metrics.as_dict()

    def test_selection_comes_from_candidate_grids(self):
        ds = toy_dataset()
        cfg = run_config(c_values=(0, 2), w_values=(0.4, 0.6))
        res = full_run(cfg, ds)
        assert res.selection.c_star in (0, 2)
        assert res.selection.w_star in (0.4, 0.6)

    def test_refine_flag_controls_refinement(self):
        ds = toy_dataset()
        plain = full_run(run_config(), ds)
        refined = full_run(run_config(refine=True), ds)
        assert not plain.refined
        assert refined.refined

    def test_metrics_reasonable_on_train_data(self):
        ds = toy_dataset()
        res = full_run(run_config(), ds)
        assert res.metrics.overall_accuracy > 0.5
        assert res.metrics.n_eval == ds.n


def test_evaluate_group_accuracies():
    ds = toy_dataset()
    res = full_run(run_config(), ds)
    rep = evaluate(res.model, ds.features, ds.labels)
    truth = ds.labels.argmax(axis=1)
    picks = res.model.predict(ds.features)
    head_rows = np.isin(truth, res.model.split.head_classes)
    assert rep.head_accuracy == pytest.approx((picks[head_rows] == truth[head_rows]).mean())
    assert rep.tail_accuracy == pytest.approx((picks[~head_rows] == truth[~head_rows]).mean())
