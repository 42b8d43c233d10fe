"""Acceptance suite: one test per criterion, each printing a PASS line.

The training-based criteria (overfit capability, directional multi-task
claims, attention-scaling) run real training loops and dominate the suite's
runtime; everything else is seconds.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from scenemotion import (
    loss as L,
    masking as mk,
    metrics as MT,
    model as M,
    scene as sc,
    synthgen as sg,
    tensor as T,
    trainer as TR,
)

from conftest import simple_scene


def report(number: int, description: str) -> None:
    print(f"ACCEPTANCE {number:02d} PASS  {description}")


def small_config(**kw):
    base = dict(
        feature_dim=16, num_heads=2, ff_multiplier=2, num_futures=2,
        pos_embed_channels=4, time_embed_channels=4,
    )
    base.update(kw)
    return M.ModelConfig(**base)


def gen_scenes(count, seed, template="intersection", **kw):
    cfg = sg.GenConfig(template=template, seed=seed, **kw)
    return [sg.generate_scene(cfg, i) for i in range(count)]


class TestCriterion01ParameterCounts:
    def test_exact_counts(self):
        start = time.perf_counter()
        params = M.ModelParams.build(M.ModelConfig(), np.random.default_rng(0))
        rows, _ = M.count_parameters(params)
        table = dict(rows)
        layers = [
            (name, count)
            for name, count in rows
            if name.startswith(("enc/", "dec/"))
            and any(name.endswith(s) for s in ("_time", "_agents", "_cross_static", "_cross_dynamic"))
        ]
        assert len(layers) == 18
        for name, count in layers:
            assert count == 789824, (name, count)
        assert table["dec/traj"] == 1799
        elapsed = time.perf_counter() - start
        assert elapsed < 1.0
        report(1, f"18 Transformer layers at 789,824 params; trajectory head 1,799 ({elapsed:.2f}s)")


class TestCriterion02GradientCorrectness:
    def test_every_parameter_matches_central_differences(self):
        start = time.perf_counter()
        cfg = M.ModelConfig(
            feature_dim=8, num_heads=2, ff_multiplier=2, num_futures=2,
            pos_embed_channels=4, time_embed_channels=4,
        )
        params = M.ModelParams.build(cfg, np.random.default_rng(7))
        gen = sg.GenConfig(template="intersection", num_agents=(2, 2), num_steps=6, current_step=2)
        scene = sg.generate_scene(gen, 3)
        # trim the road graph so each of the ~25k probe forwards stays cheap
        scene.roadgraph.static_polylines = scene.roadgraph.static_polylines[:3]
        mask = mk.make_mp_mask(scene)
        assert scene.num_agents == 2 and scene.num_steps == 6

        def loss_value():
            pred = M.forward(scene, mask, params, training=True)
            joint = L.scene_loss(pred, scene, mask, "joint", smoothing=0.1).total
            marginal = L.scene_loss(pred, scene, mask, "marginal", smoothing=0.1).total
            return joint + marginal

        graph = T.Graph()
        with graph:
            total = loss_value()
        grads = graph.backward(total)

        step = 1e-5
        checked = failures = 0
        for name, tensor in params.trainable():
            analytic = grads[tensor]
            flat = tensor.data.ravel()
            aflat = analytic.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = float(loss_value().data)
                flat[i] = orig - step
                lo = float(loss_value().data)
                flat[i] = orig
                fd = (hi - lo) / (2.0 * step)
                err = abs(aflat[i] - fd)
                checked += 1
                if err > 1e-3 * max(abs(aflat[i]), abs(fd)) and err > 1e-8:
                    failures += 1
        elapsed = time.perf_counter() - start
        assert failures == 0, f"{failures} of {checked} parameters disagree with finite differences"
        assert elapsed < 300.0
        report(2, f"{checked} parameter gradients match central differences ({elapsed:.0f}s)")


class TestCriterion03PermutationEquivariance:
    def test_fifty_scenes(self):
        start = time.perf_counter()
        params = M.ModelParams.build(small_config(), np.random.default_rng(5))
        rng = np.random.default_rng(0)
        worst = 0.0
        scenes = gen_scenes(50, seed=61, num_agents=(3, 5), interaction_rate=0.7)
        for scene in scenes:
            pred = M.forward(scene, mk.make_mp_mask(scene), params)
            perm = rng.permutation(scene.num_agents)
            permuted = sc.Scene(
                agents=[scene.agents[p] for p in perm],
                roadgraph=scene.roadgraph,
                agent_of_interest=int(np.nonzero(perm == scene.agent_of_interest)[0][0]),
                current_step=scene.current_step,
                dt=scene.dt,
            )
            pred_p = M.forward(permuted, mk.make_mp_mask(permuted), params)
            worst = max(worst, np.abs(pred_p.trajectories.data - pred.trajectories.data[:, perm]).max())
            worst = max(worst, np.abs(pred_p.trajectory_logits.data - pred.trajectory_logits.data[:, perm]).max())
            worst = max(worst, np.abs(pred_p.future_logits.data - pred.future_logits.data).max())
        elapsed = time.perf_counter() - start
        assert worst <= 1e-9, worst
        assert elapsed < 60.0
        report(3, f"50 scenes permutation-equivariant, max deviation {worst:.2e} ({elapsed:.0f}s)")


class TestCriterion04MaskLeakage:
    def test_hidden_randomization_bit_identical(self):
        start = time.perf_counter()
        params = M.ModelParams.build(small_config(), np.random.default_rng(5))
        rng = np.random.default_rng(1)
        scenes = gen_scenes(50, seed=62, num_agents=(3, 4), interaction_rate=1.0)
        count = 0
        for scene in scenes:
            for builder in ("mp", "cmp", "gcp"):
                probe = sg.generate_scene(
                    sg.GenConfig(template="intersection", seed=62, num_agents=(3, 4), interaction_rate=1.0),
                    count % 50,
                )
                mask = TR._mask_for_task(probe, builder)
                if mask is None:
                    continue
                before = M.forward(probe, mask, params)
                for i in range(probe.num_agents):
                    steps = np.nonzero(mask.hidden[i])[0]
                    probe.agents[i].positions[steps] = rng.normal(size=(len(steps), 3)) * 60
                    probe.agents[i].heading[steps] = rng.uniform(-3.14, 3.14, size=len(steps))
                    probe.agents[i].velocity[steps] = rng.normal(size=(len(steps), 2)) * 15
                after = M.forward(probe, mask, params)
                assert np.array_equal(before.trajectories.data, after.trajectories.data)
                assert np.array_equal(before.future_logits.data, after.future_logits.data)
                assert np.array_equal(before.trajectory_logits.data, after.trajectory_logits.data)
            count += 1
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0
        report(4, f"hidden-cell randomization leaves outputs bit-identical over {count} scenes ({elapsed:.0f}s)")


class TestCriterion05LossReductionOracle:
    def test_exhaustive_enumeration(self):
        start = time.perf_counter()
        rng = np.random.default_rng(3)
        for _ in range(10_000):
            f = int(rng.integers(1, 7))
            a = int(rng.integers(1, 9))
            mat = rng.uniform(0.0, 10.0, size=(f, a))
            tensor = T.Tensor(mat)
            marginal, best_m = L.reduce_marginal(tensor)
            joint, best_j = L.reduce_joint(tensor)
            # brute force: enumerate minima per column / per row explicitly
            exp_best_m = []
            for col in range(a):
                lowest = 0
                for row in range(1, f):
                    if mat[row, col] < mat[lowest, col]:
                        lowest = row
                exp_best_m.append(lowest)
            exp_marginal = np.sum(mat[exp_best_m, np.arange(a)])
            sums = np.asarray([np.sum(mat[row]) for row in range(f)])
            exp_best_j = 0
            for row in range(1, f):
                if sums[row] < sums[exp_best_j]:
                    exp_best_j = row
            exp_joint = sums[exp_best_j]
            assert float(marginal.data) == exp_marginal
            assert list(best_m) == exp_best_m
            assert float(joint.data) == exp_joint
            assert best_j == exp_best_j
            assert float(joint.data) >= float(marginal.data) - 1e-12
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0
        report(5, f"reductions match enumeration on 10,000 matrices; joint >= marginal ({elapsed:.1f}s)")


class TestCriterion06LaplaceKL:
    def test_quadrature_oracle(self):
        start = time.perf_counter()
        rng = np.random.default_rng(4)

        def oracle(mu1, b1, mu2, b2):
            def integrand(x):
                p = np.exp(-abs(x - mu1) / b1) / (2 * b1)
                q = np.exp(-abs(x - mu2) / b2) / (2 * b2)
                return p * (np.log(p) - np.log(q))

            span = 60.0 * max(b1, b2) + abs(mu1 - mu2)
            pts = [mu1 - span] + sorted({mu1, mu2}) + [mu1 + span]
            return sum(integrate.quad(integrand, lo, hi, limit=200)[0] for lo, hi in zip(pts[:-1], pts[1:]))

        for _ in range(100):
            mu_pred = float(rng.normal() * 4)
            b_pred = float(rng.uniform(0.1, 5.0))
            mu_gt = float(rng.normal() * 4)
            closed = float(L.laplace_kl(T.Tensor([mu_pred]), T.Tensor([b_pred]), T.Tensor([mu_gt]), 1.0).data[0])
            assert abs(closed - oracle(mu_gt, 1.0, mu_pred, b_pred)) < 1e-6
        same = float(L.laplace_kl(T.Tensor([1.3]), T.Tensor([0.7]), T.Tensor([1.3]), 0.7).data[0])
        assert same == 0.0
        elapsed = time.perf_counter() - start
        assert elapsed < 10.0
        report(6, f"closed-form KL within 1e-6 of quadrature on 100 pairs; KL(x||x)=0 ({elapsed:.1f}s)")


class TestCriterion07HeadingWrap:
    def test_exact_values(self):
        w = lambda x: float(T.wrap_angle(T.Tensor([x])).data[0])
        assert abs(w(3 * math.pi / 2) - (-math.pi / 2)) <= 1e-12
        assert abs(w(-3 * math.pi / 2) - (math.pi / 2)) <= 1e-12
        for theta in np.linspace(-math.pi + 1e-6, math.pi - 1e-6, 41):
            assert abs(w(theta) - theta) <= 1e-12
        report(7, "angle wrap matches the floormod formula to 1e-12")


class TestCriterion08MetricOracles:
    def test_brute_force_thousand(self):
        start = time.perf_counter()
        rng = np.random.default_rng(8)
        for _ in range(1000):
            f = int(rng.integers(1, 7))
            a = int(rng.integers(1, 5))
            t = int(rng.integers(2, 7))
            pred = rng.normal(size=(f, a, t, 2)) * 3
            gt = rng.normal(size=(a, t, 2)) * 3
            valid = rng.random((a, t)) > 0.25
            valid[:, 0] = True
            # marginal brute force per agent
            sades = []
            sfdes = []
            for i in range(a):
                d = np.linalg.norm(pred[:, i] - gt[i], axis=-1)
                ades = d[:, valid[i]].mean(axis=1)
                last = np.nonzero(valid[i])[0][-1]
                fdes = d[:, last]
                assert MT.min_ade(pred[:, i], gt[i], valid[i]) == ades.min()
                assert MT.min_fde(pred[:, i], gt[i], valid[i]) == fdes.min()
                assert MT.is_miss(pred[:, i], gt[i], valid[i]) == bool((fdes > 2.0).all())
                sades.append(ades)
                sfdes.append(fdes)
            sade_matrix = np.stack(sades, axis=1)  # [F, A]
            sfde_matrix = np.stack(sfdes, axis=1)
            expect_sade = sade_matrix.mean(axis=1).min()
            expect_sfde = sfde_matrix.mean(axis=1).min()
            expect_smr = bool((sfde_matrix > 2.0).any(axis=1).all())
            got = MT.scene_metrics(pred, gt, valid)
            assert got[0] == expect_sade and got[1] == expect_sfde and got[2] == expect_smr
            mean_min_ade = np.mean([MT.min_ade(pred[:, i], gt[i], valid[i]) for i in range(a)])
            assert got[0] >= mean_min_ade - 1e-12
        elapsed = time.perf_counter() - start
        assert elapsed < 30.0
        report(8, f"all displacement metrics match brute force on 1,000 instances ({elapsed:.1f}s)")


class TestCriterion09MarginalToJoint:
    def test_hundred_probability_sets(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            pa = rng.dirichlet(np.ones(6))
            pb = rng.dirichlet(np.ones(6))
            got = MT.marginal_to_joint(pa, pb)
            exhaustive = sorted(
                ((i, j, pa[i] * pb[j]) for i in range(6) for j in range(6)),
                key=lambda p: (-p[2], p[0], p[1]),
            )[:6]
            assert [(i, j) for i, j, _ in got] == [(i, j) for i, j, _ in exhaustive]
            z = sum(s for _, _, s in exhaustive)
            for (_, _, s_got), (_, _, s_raw) in zip(got, exhaustive):
                assert abs(s_got - s_raw / z) < 1e-12
        report(9, "top-6-of-36 pairing matches exhaustive enumeration on 100 sets")


class TestCriterion15CheckpointDeterminism:
    def test_train_resume_bit_identical(self, tmp_path):
        start = time.perf_counter()
        scenes = gen_scenes(8, seed=15, num_agents=(3, 3), interaction_rate=1.0)
        config = TR.TrainConfig(batch_size=2, lr=3e-4, seed=10, total_epochs=100)

        straight = M.ModelParams.build(small_config(), np.random.default_rng(6))
        TR.train(scenes, straight, config, steps=101)

        resumed = M.ModelParams.build(small_config(), np.random.default_rng(6))
        result = TR.train(scenes, resumed, config, steps=100)
        path = tmp_path / "mid.bin"
        TR.save_training_checkpoint(path, resumed, result.state)
        loaded, state = TR.load_training_checkpoint(path)
        TR.train(scenes, loaded, config, steps=1, state=state, start_step=state.step)

        for name, tensor in straight.trainable():
            assert np.array_equal(tensor.data, loaded[name].data), name
        elapsed = time.perf_counter() - start
        assert elapsed < 120.0
        report(15, f"100+1 resumed steps bit-identical to 101 straight ({elapsed:.0f}s)")
