import numpy as np
import pytest

from scenemotion import synthgen as sg


def pair_min_distance(scene):
    a, b = scene.agents[0], scene.agents[1]
    live = ~(a.padding | b.padding)
    return np.linalg.norm(a.positions[live, :2] - b.positions[live, :2], axis=1).min()


class TestDeterminism:
    def test_identical_bytes(self, tmp_path):
        cfg = sg.GenConfig(template="intersection", seed=7)
        for i in (0, 3):
            sg.write_scene(tmp_path / "a.scene", sg.generate_scene(cfg, i))
            sg.write_scene(tmp_path / "b.scene", sg.generate_scene(cfg, i))
            assert (tmp_path / "a.scene").read_bytes() == (tmp_path / "b.scene").read_bytes()

    def test_different_indices_differ(self):
        cfg = sg.GenConfig(template="intersection", seed=7)
        a = sg.generate_scene(cfg, 0)
        b = sg.generate_scene(cfg, 1)
        assert not np.array_equal(a.agents[0].positions, b.agents[0].positions)


class TestSceneQuality:
    @pytest.mark.parametrize("template", sg.TEMPLATES)
    def test_invariants_across_seeds(self, template):
        cfg = sg.GenConfig(template=template, interaction_rate=0.7, seed=2)
        for i in range(40):
            scene = sg.generate_scene(cfg, i)
            scene.validate()  # raises on any violated invariant
            assert any(a.is_av for a in scene.agents)
            assert sum(a.is_predicted for a in scene.agents) >= 1

    def test_thousand_seeds_valid(self):
        cfg = sg.GenConfig(template="intersection", interaction_rate=0.5, seed=0)
        for i in range(1000):
            sg.generate_scene(cfg, i).validate()

    def test_interacting_pairs_pass_close(self):
        for template in ("intersection", "merge", "narrow_passage"):
            cfg = sg.GenConfig(template=template, interaction_rate=1.0, seed=5)
            for i in range(20):
                scene = sg.generate_scene(cfg, i)
                assert pair_min_distance(scene) < 5.0, template
                assert scene.agents[0].is_predicted and scene.agents[1].is_predicted

    def test_no_interaction_keeps_agents_apart(self):
        cfg = sg.GenConfig(template="straight_road", interaction_rate=0.0, seed=5)
        for i in range(20):
            scene = sg.generate_scene(cfg, i)
            for x in range(scene.num_agents):
                for y in range(x + 1, scene.num_agents):
                    live = ~(scene.agents[x].padding | scene.agents[y].padding)
                    if live.any():
                        d = np.linalg.norm(
                            scene.agents[x].positions[live, :2] - scene.agents[y].positions[live, :2], axis=1
                        ).min()
                        assert d > 3.0

    def test_headings_match_displacement(self):
        for template in sg.TEMPLATES:
            cfg = sg.GenConfig(template=template, interaction_rate=1.0, seed=4)
            for i in range(15):
                scene = sg.generate_scene(cfg, i)
                for a in scene.agents:
                    speed = np.linalg.norm(a.velocity, axis=1)
                    for t in range(1, scene.num_steps - 1):
                        if speed[t] > 0.5 and not a.padding[t - 1 : t + 2].any():
                            fd = a.positions[t + 1, :2] - a.positions[t - 1, :2]
                            ang = np.arctan2(fd[1], fd[0])
                            err = abs(np.angle(np.exp(1j * (ang - a.heading[t]))))
                            assert err <= 0.1

    def test_coin_is_invisible_in_history(self):
        """Interacting pair histories are independent of the yield outcome:
        speeds stay constant through the current step."""
        cfg = sg.GenConfig(template="intersection", interaction_rate=1.0, seed=8)
        for i in range(20):
            scene = sg.generate_scene(cfg, i)
            for a in scene.agents[:2]:
                speeds = np.linalg.norm(a.velocity[: scene.current_step + 1], axis=1)
                np.testing.assert_allclose(speeds, speeds[0], atol=1e-9)

    def test_promotion_flag(self):
        cfg = sg.GenConfig(
            template="straight_road", interaction_rate=0.0, seed=3, promote_moving_background=True,
            num_agents=(5, 6),
        )
        promoted = 0
        for i in range(30):
            scene = sg.generate_scene(cfg, i)
            for a in scene.agents[1:]:
                if a.is_predicted and not a.padding.any():
                    moved = np.linalg.norm(a.positions[-1, :2] - a.positions[0, :2])
                    if moved >= 6.0:
                        promoted += 1
        assert promoted > 0


class TestSceneFiles:
    def test_round_trip_structural_equality(self, tmp_path):
        cfg = sg.GenConfig(template="intersection", seed=1)
        scene = sg.generate_scene(cfg, 2)
        path = tmp_path / "s.scene"
        sg.write_scene(path, scene)
        loaded = sg.read_scene(path)
        assert loaded.num_agents == scene.num_agents
        assert loaded.dt == scene.dt and loaded.current_step == scene.current_step
        for a, b in zip(scene.agents, loaded.agents):
            np.testing.assert_array_equal(a.positions, b.positions)
            np.testing.assert_array_equal(a.heading, b.heading)
            np.testing.assert_array_equal(a.velocity, b.velocity)
            np.testing.assert_array_equal(a.padding, b.padding)
            assert a.extent == b.extent and a.agent_type == b.agent_type
            assert a.is_av == b.is_av and a.is_predicted == b.is_predicted
        for p, q in zip(scene.roadgraph.static_polylines, loaded.roadgraph.static_polylines):
            np.testing.assert_array_equal(p.points, q.points)
            assert p.lane_type == q.lane_type
        for d, e in zip(scene.roadgraph.dynamic_elements, loaded.roadgraph.dynamic_elements):
            np.testing.assert_array_equal(d.state, e.state)
            np.testing.assert_array_equal(d.padding, e.padding)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = sg.GenConfig(template="straight_road", seed=1)
        path = tmp_path / "s.scene"
        sg.write_scene(path, sg.generate_scene(cfg, 0))
        text = path.read_text().splitlines()
        (tmp_path / "t.scene").write_text("\n".join(text[: len(text) // 2]))
        with pytest.raises(sg.SceneParseError, match="line"):
            sg.read_scene(tmp_path / "t.scene")

    def test_unknown_version_rejected(self, tmp_path):
        cfg = sg.GenConfig(template="straight_road", seed=1)
        path = tmp_path / "s.scene"
        sg.write_scene(path, sg.generate_scene(cfg, 0))
        lines = path.read_text().splitlines()
        lines[0] = "scenemotion-scene 99"
        (tmp_path / "v.scene").write_text("\n".join(lines) + "\n")
        with pytest.raises(sg.SceneParseError, match="version"):
            sg.read_scene(tmp_path / "v.scene")

    def test_garbled_field_rejected_with_line(self, tmp_path):
        cfg = sg.GenConfig(template="straight_road", seed=1)
        path = tmp_path / "s.scene"
        sg.write_scene(path, sg.generate_scene(cfg, 0))
        lines = path.read_text().splitlines()
        lines[9] = lines[9].rsplit(" ", 1)[0] + " not_a_number"
        (tmp_path / "g.scene").write_text("\n".join(lines) + "\n")
        with pytest.raises(sg.SceneParseError, match="line"):
            sg.read_scene(tmp_path / "g.scene")


class TestConfig:
    def test_bad_template(self):
        with pytest.raises(ValueError, match="template"):
            sg.GenConfig(template="freeway").validate()

    def test_bad_interaction_rate(self):
        with pytest.raises(ValueError, match="probability"):
            sg.GenConfig(interaction_rate=1.5).validate()
