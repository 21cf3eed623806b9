import logging

import numpy as np
import pytest

from sr3d import geometry, metrics
from sr3d.assignment import GroundTruthObject
from sr3d.errors import ConfigurationError, GenerationError
from sr3d.geometry import Box3
from sr3d.harness import detector
from sr3d.harness.detector import ExperimentConfig, optimize
from sr3d.harness.experiment import hyperparameter_sweep, run_ablation, run_config_on_scene, sign_test
from sr3d.harness.scene import (AnchorGridSpec, Scene, SceneSpec, generate_anchors, generate_scene,
                                generate_suite, scene_seed)

SMALL_ROOM = SceneSpec(room_extent=(3.0, 3.0, 2.0), num_objects=(2, 3))


def quick(name="q", assignment="spota", cls_loss="ras", **kw):
    kw.setdefault("iterations", 20)
    kw.setdefault("eval_every", 10)
    return ExperimentConfig(name, assignment, cls_loss, **kw)


@pytest.fixture(scope="module")
def small_suite():
    scenes = generate_suite(SMALL_ROOM, 3, 5)
    return scenes, generate_anchors(AnchorGridSpec(), SMALL_ROOM.room_extent)


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(SceneSpec(), 42), generate_scene(SceneSpec(), 42)
        assert a == b

    def test_inside_room_and_on_floor(self):
        spec = SceneSpec()
        for s in generate_suite(spec, 20, 1):
            assert spec.num_objects[0] <= len(s.objects) <= spec.num_objects[1]
            for o in s.objects:
                assert np.all(o.box.min_corner >= -1e-6)
                assert np.all(o.box.max_corner <= np.array(spec.room_extent) + 1e-6)
                assert o.box.min_corner[2] == pytest.approx(0.0, abs=1e-6)

    def test_clutter_cap_respected(self):
        spec = SceneSpec(clutter_cap=0.1)
        for s in generate_suite(spec, 20, 2):
            c, z = geometry.boxes_to_arrays([o.box for o in s.objects])
            ov = geometry.iou(c[:, None], z[:, None], c[None], z[None])
            np.fill_diagonal(ov, 0)
            assert ov.max() <= 0.1 + 1e-12

    def test_cap_zero_disjoint(self):
        spec = SceneSpec(clutter_cap=0.0, num_objects=(2, 6))
        for s in generate_suite(spec, 20, 3):
            c, z = geometry.boxes_to_arrays([o.box for o in s.objects])
            inter = geometry.intersection_volume(c[:, None], z[:, None], c[None], z[None])
            np.fill_diagonal(inter, 0)
            assert inter.max() == 0.0

    def test_infeasible_raises(self):
        spec = SceneSpec(room_extent=(2.2, 2.2, 2.0), num_objects=(4, 4), clutter_cap=0.0,
                         size_means=((2.0, 2.0, 0.5),), class_count=1, size_stds=((0.01, 0.01, 0.01),),
                         placement_retries=20)
        with pytest.raises(GenerationError):
            generate_scene(spec, 0)

    def test_relaxation_warns(self, caplog):
        spec = SceneSpec(room_extent=(3.0, 3.0, 2.0), num_objects=(1, 12), clutter_cap=0.0,
                         size_means=((1.4, 1.4, 0.5),), class_count=1, size_stds=((0.01, 0.01, 0.01),),
                         placement_retries=30)
        relaxed = []
        with caplog.at_level(logging.WARNING):
            for seed in range(10):
                relaxed.append(generate_scene(spec, seed).relaxed)
        assert any(relaxed)
        assert "placed" in caplog.text

    def test_size_statistics(self):
        spec = SceneSpec()
        sizes = {k: [] for k in range(spec.class_count)}
        for s in generate_suite(spec, 1000, 11):
            for o in s.objects:
                sizes[o.class_id].append(o.box.size)
        for k, v in sizes.items():
            v = np.array(v)
            se = spec.stds()[k] / np.sqrt(len(v))
            assert np.all(np.abs(v.mean(axis=0) - spec.means()[k]) < 3 * se), k

    def test_scene_seed_independent_of_order(self):
        assert scene_seed(0, 5) == scene_seed(0, 5)
        assert len({scene_seed(0, i) for i in range(100)}) == 100
        suite = generate_suite(SceneSpec(), 6, 9)
        assert generate_scene(SceneSpec(), scene_seed(9, 4), 4) == suite[4]

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            SceneSpec(room_extent=(0, 1, 1))
        with pytest.raises(ConfigurationError):
            SceneSpec(num_objects=(3, 2))
        with pytest.raises(ConfigurationError):
            SceneSpec(clutter_cap=1.5)

    def test_spec_dict_round_trip(self):
        spec = SceneSpec(num_objects=(2, 5))
        assert SceneSpec.from_dict(spec.to_dict()) == SceneSpec(num_objects=(2, 5), size_stds=tuple(
            tuple(r) for r in spec.stds()))


class TestAnchors:
    def test_lattice_count(self):
        a = generate_anchors(AnchorGridSpec(strides=(1.0,)), (2.0, 2.0, 2.0))
        assert len(a) == 8
        np.testing.assert_allclose(a.centers[0], [0.5, 0.5, 0.5])

    def test_additive_levels(self):
        room = (6.0, 6.0, 3.0)
        n1 = len(generate_anchors(AnchorGridSpec(strides=(0.4,)), room))
        n2 = len(generate_anchors(AnchorGridSpec(strides=(0.8,)), room))
        both = generate_anchors(AnchorGridSpec(), room)
        assert len(both) == n1 + n2 == 1722

    def test_ordering(self):
        a = generate_anchors(AnchorGridSpec(), (6.0, 6.0, 3.0))
        b = generate_anchors(AnchorGridSpec(), (6.0, 6.0, 3.0))
        np.testing.assert_array_equal(a.centers, b.centers)
        assert np.all(np.diff(a.levels) >= 0)
        lvl0 = a.centers[a.levels == 0]
        keys = [tuple(c) for c in lvl0]
        assert keys == sorted(keys)

    def test_bad_stride(self):
        with pytest.raises(ConfigurationError):
            AnchorGridSpec(strides=(0.0,))


class TestConfig:
    def test_from_dict_missing_field(self):
        with pytest.raises(KeyError, match="cls_loss"):
            ExperimentConfig.from_dict({"name": "x", "assignment": "spota"})

    def test_unknown_values(self):
        with pytest.raises(ConfigurationError):
            ExperimentConfig("x", "hungarian", "ras")
        with pytest.raises(ConfigurationError):
            ExperimentConfig("x", "spota", "softmax")
        with pytest.raises(ConfigurationError):
            ExperimentConfig("x", "spota", "ras", mu=0)

    def test_round_trip_and_digest(self):
        c = quick(mu=2.0)
        assert ExperimentConfig.from_dict(c.to_dict()) == c
        assert c.digest() == ExperimentConfig.from_dict(c.to_dict()).digest()
        assert c.digest() != quick(mu=3.0).digest()

    def test_extra_fields_ignored(self):
        c = ExperimentConfig.from_dict({"name": "x", "assignment": "spota", "cls_loss": "ras", "comment": "hi"})
        assert c.name == "x"


class TestDetector:
    def test_decoded_sizes_positive(self, small_suite):
        scenes, anchors = small_suite
        st = detector.init_state(anchors, 5, quick(), scenes[0].seed)
        st.log_size[:] = -100
        _, sizes = st.decode(anchors)
        assert np.all(sizes >= geometry.MIN_SIZE)

    def test_zero_iterations_is_initial_state(self, small_suite):
        scenes, anchors = small_suite
        cfg = quick(iterations=0)
        traj = optimize(scenes[0], anchors, cfg, keep_states=True)
        init = detector.init_state(anchors, 5, cfg, scenes[0].seed)
        assert len(traj.epochs) == 1
        np.testing.assert_array_equal(traj.final_state.logits, init.logits)
        np.testing.assert_array_equal(traj.final_state.log_size, init.log_size)
        kept = detector.nms_detections(init, anchors, cfg)
        ev = detector.evaluate(kept, metrics.GroundTruthArrays.from_list(scenes[0].objects), cfg)
        assert traj.epochs[0].ap25 == ev.ap25 and traj.epochs[0].pce == ev.pce

    def test_deterministic(self, small_suite):
        scenes, anchors = small_suite
        a = optimize(scenes[0], anchors, quick())
        b = optimize(scenes[0], anchors, quick())
        np.testing.assert_array_equal(a.final_state.logits, b.final_state.logits)
        assert [e.aic for e in a.epochs] == [e.aic for e in b.epochs]

    @pytest.mark.parametrize("assignment", detector.ASSIGNMENTS)
    def test_partition_every_step(self, small_suite, assignment):
        scenes, anchors = small_suite
        traj = optimize(scenes[1], anchors, quick(assignment=assignment, iterations=10))
        assert traj.positives_valid
        assert all(np.isfinite(e.aic) for e in traj.epochs)

    def test_spota_ignores_class_scores(self, small_suite, rng):
        scenes, anchors = small_suite
        cfg = quick()
        st = detector.init_state(anchors, 5, cfg, 1)
        c, s = st.decode(anchors)
        ref = detector.assign(cfg, scenes[0].objects, anchors, c, s, st.scores())
        for _ in range(5):
            other = detector.assign(cfg, scenes[0].objects, anchors, c, s, rng.uniform(0.01, 0.99, (len(c), 5)))
            assert other.positives == ref.positives

    def test_single_gt_converges(self):
        g = [GroundTruthObject(0, Box3((1.0, 1.0, 0.6), (0.9, 0.7, 0.8)), 2)]
        scene = Scene(0, 3, g, room_extent=(2.0, 2.0, 1.6))
        anchors = generate_anchors(AnchorGridSpec(strides=(0.4,)), scene.room_extent)
        # gamma=0 keeps the logit gradient alive near sigma=1; ras deliberately settles below q
        cfg = ExperimentConfig("conv", "spota", "focal-only", gamma=0.0, step_size=0.1, iterations=3000,
                               eval_every=1000)
        traj = optimize(scene, anchors, cfg, num_classes=5)
        c, s = traj.final_state.decode(anchors)
        q = geometry.iou(c, s, np.array(g[0].box.center), np.array(g[0].box.size))
        best = int(np.argmax(q))
        assert q[best] >= 0.99
        assert traj.final_state.scores()[best, 2] >= 0.9

    def test_divergence_aborts(self, small_suite):
        from sr3d.errors import DivergenceError

        scenes, anchors = small_suite
        with pytest.raises(DivergenceError) as info:
            optimize(scenes[0], anchors, quick(step_size=1e4, iterations=30, eval_every=1))
        assert len(info.value.trajectory.epochs) >= 1


class TestExperiment:
    def test_single_cell(self, small_suite):
        scenes, anchors = small_suite
        rep = run_ablation([quick("only")], scenes, anchors)
        assert len(rep.rows) == 1 and len(rep.rows[0].scenes) == len(scenes)
        direct = run_config_on_scene(scenes[0], anchors, quick("only"))
        assert rep.rows[0].scenes[0] == direct

    def test_order_independent(self, small_suite):
        scenes, anchors = small_suite
        a, b = quick("a", cls_loss="focal-only"), quick("b")
        r1 = run_ablation([a, b], scenes, anchors)
        r2 = run_ablation([b, a], scenes, anchors)
        assert r1.row("a").scenes == r2.row("a").scenes
        assert r1.row("b").scenes == r2.row("b").scenes

    def test_jobs_do_not_change_results(self, small_suite):
        scenes, anchors = small_suite
        m = [quick("a", cls_loss="focal-only"), quick("b")]
        r1 = run_ablation(m, scenes, anchors, jobs=1)
        r2 = run_ablation(m, scenes, anchors, jobs=2)
        for x, y in zip(r1.rows, r2.rows):
            assert x.scenes == y.scenes

    def test_failed_cell_isolated(self, small_suite):
        scenes, anchors = small_suite
        good = quick("good").to_dict()
        bad = dict(good, name="bad", cls_loss="softmax")
        missing = {"name": "missing", "assignment": "spota"}
        rep = run_ablation([good, bad, missing], scenes, anchors)
        assert not rep.row("good").failed
        assert rep.row("bad").failed and rep.row("missing").failed
        assert "cls_loss" in rep.row("missing").error

    def test_deltas_against_first_row(self, small_suite):
        scenes, anchors = small_suite
        rep = run_ablation([quick("a", cls_loss="focal-only"), quick("b")], scenes, anchors)
        a, b = rep.rows
        assert a.deltas["ap25"] == 0.0
        assert b.deltas["ap25"] == pytest.approx(np.mean(b.values("ap25") - a.values("ap25")))

    def test_sweep_single_value_equals_cell(self, small_suite):
        scenes, anchors = small_suite
        base = quick("base")
        sw = hyperparameter_sweep(base, "mu", [2.0], scenes, anchors)
        cell = run_ablation([quick("mu=2", mu=2.0)], scenes, anchors)
        assert sw.points[0].row.scenes == cell.rows[0].scenes

    def test_sweep_rejects_unknown_param(self, small_suite):
        scenes, anchors = small_suite
        with pytest.raises(ConfigurationError):
            hyperparameter_sweep(quick(), "alpha", [0.1], scenes, anchors)

    def test_sign_test(self):
        w, l, p = sign_test([1, 1, 1, 1, 1, 0, -1])
        assert (w, l) == (5, 1)
        assert p == pytest.approx(7 / 64)
        assert sign_test([0, 0])[2] == 1.0

    def test_empty_suite(self, small_suite):
        _, anchors = small_suite
        with pytest.raises(ConfigurationError):
            run_ablation([quick()], [], anchors)
