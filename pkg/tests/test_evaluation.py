import json

import numpy as np
import pytest

from vlapatch import evaluation as ev
from vlapatch import scene
from vlapatch.defenses import DefenseSpec
from vlapatch.patch import Placement, init_patch
from vlapatch.scene import EpisodeLog, TaskSpec


def fake_log(n, success=True, drift=0.0):
    t = TaskSpec("reach")
    st = scene.reset(t, 0)
    ref = np.zeros((n, 7))
    pred = ref.copy()
    pred[:, 0] = drift
    return EpisodeLog(t, 0, [st] * n, pred, ref, success, st)


def test_failure_rate():
    assert ev.failure_rate([fake_log(3)] * 4) == 0.0
    assert ev.failure_rate([fake_log(3, False)] * 3 + [fake_log(3)] * 7) == pytest.approx(0.3)
    assert ev.failure_rate([fake_log(3, False)] * 2) == 1.0
    with pytest.raises(ValueError):
        ev.failure_rate([])


def test_episode_nad():
    assert ev.episode_nad(fake_log(5)) == 0.0
    one = fake_log(1, drift=0.4)
    assert ev.episode_nad(one, mask=[0]) == pytest.approx(0.4)
    a, b = fake_log(2, drift=0.2), fake_log(6, drift=0.6)
    pooled = ev.pooled_nad([a, b], mask=[0])
    assert pooled == pytest.approx((2 * 0.2 + 6 * 0.6) / 8)


def test_base_placements():
    got = {k: ev.base_placement(k, 14) for k in scene.TASK_KINDS}
    assert got["reach"] == Placement(34, 46)
    assert got["pick"] == Placement(9, 43)
    assert got["place"] == Placement(4, 45)
    assert got["pick-and-place"] == Placement(3, 46)
    for p in got.values():
        for q in ev.placement_grid(p):
            q.check(14, 64)


def test_grid_is_the_nine_point_lattice():
    grid = ev.placement_grid(Placement(10, 20))
    assert len(grid) == 9
    assert {(p.px, p.py) for p in grid} == {(10 + dx, 20 + dy) for dx in (-3, 0, 3) for dy in (-3, 0, 3)}


def test_placement_grid_eval():
    patch = init_patch(0.05, 64, 0)
    t = TaskSpec("reach")
    rep = ev.placement_grid_eval(scene.expert_policy, patch, t, (34, 46), trials=2)
    assert len(rep.conditions) == 10
    assert all(c["episodes"] == 2 for k, c in rep.conditions.items() if k != "overall")
    assert rep.conditions["overall"]["episodes"] == 18
    assert rep.conditions["dx=+0,dy=+0"]["failure_rate"] == 0.0
    again = ev.placement_grid_eval(scene.expert_policy, patch, t, (34, 46), trials=2)
    assert again.to_json() == rep.to_json()
    with pytest.raises(ValueError):
        ev.placement_grid_eval(scene.expert_policy, patch, t, (34, 46), trials=0)
    with pytest.raises(ValueError, match="placement"):
        ev.placement_grid_eval(scene.expert_policy, patch, t, (49, 46), trials=1)


def test_transfer_matrix_shape_and_repeatability():
    patches = {"a": init_patch(0.05, 64, 0), "b": init_patch(0.05, 64, 1)}
    victims = [TaskSpec("reach"), TaskSpec("place"), TaskSpec("pick")]
    m = ev.transfer_matrix(scene.expert_policy, patches, victims, trials=2)
    assert m.shape == (2, 3)
    np.testing.assert_array_equal(m, ev.transfer_matrix(scene.expert_policy, patches, victims, trials=2))


def test_defense_sweep_and_curves(tmp_path):
    patch = init_patch(0.05, 64, 0)
    grid = {"gaussian": (0.0, 0.05), "bitdepth": (6,)}
    rep = ev.defense_sweep(scene.expert_policy, patch, TaskSpec("reach"), Placement(34, 46), 2, grid=grid)
    assert set(rep.conditions) == {"none", "gaussian=0.0", "gaussian=0.05", "bitdepth=6"}
    assert (rep.conditions["gaussian=0.0"]["adversarial"]["failure_rate"]
            == rep.conditions["none"]["adversarial"]["failure_rate"])
    paths = ev.write_sweep(rep, tmp_path)
    assert sorted(p.split("/")[-1] for p in paths) == ["bitdepth.csv", "gaussian.csv"]
    text = (tmp_path / "curves" / "gaussian.csv").read_text().splitlines()
    assert text[0] == "param,benign_fr,adversarial_fr"
    assert [r.split(",")[0] for r in text[1:]] == ["0.0", "0.05"]


def test_identity_defense_reproduces_undefended_rollout():
    t = TaskSpec("pick")
    patch = init_patch(0.05, 64, 3)
    plain = ev.run_condition(scene.expert_policy, t, [100000], patch, (9, 43))[0]
    noisy = ev.run_condition(scene.expert_policy, t, [100000], patch, (9, 43),
                             defense=DefenseSpec("gaussian", 0.0))[0]
    assert plain.to_csv() == noisy.to_csv()


def test_trajectory_report(tmp_path):
    t = TaskSpec("pick")
    benign = ev.run_condition(scene.expert_policy, t, [100000, 100001])
    adv = ev.run_condition(scene.zero_policy, TaskSpec("pick", horizon=10), [100000])
    csv_path, svg_path = ev.emit_trajectory_report(benign, adv, tmp_path, "demo")
    lines = open(csv_path).read().splitlines()
    assert len(lines) - 1 == sum(len(l) for l in benign + adv) + 3
    assert lines[0].startswith("series,task,seed,step,ee_x")
    assert sum(1 for l in lines if ",success," in l) == 3
    svg = open(svg_path).read()
    assert "series-benign" in svg and "series-adversarial" in svg
    assert "xy projection" in svg and "xz projection" in svg
    first = (open(csv_path, "rb").read(), open(svg_path, "rb").read())
    ev.emit_trajectory_report(benign, adv, tmp_path, "demo")
    assert first == (open(csv_path, "rb").read(), open(svg_path, "rb").read())


def test_trajectory_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    log = ev.run_condition(scene.expert_policy, TaskSpec("reach"), [1])
    with pytest.raises(OSError):
        ev.emit_trajectory_report(log, [], blocker)


def test_report_json_carries_digest_and_seeds():
    patch = init_patch(0.05, 64, 0)
    rep = ev.placement_grid_eval(scene.expert_policy, patch, TaskSpec("reach"), (34, 46), trials=1)
    d = json.loads(rep.to_json())
    assert len(d["config_digest"]) == 64
    assert d["seeds"] == [ev.EVAL_SEED_BASE]
    for c in d["conditions"].values():
        assert 0.0 <= c["failure_rate"] <= 1.0
        assert c["failure_rate"] + c["success_rate"] == 1.0
        assert 0.0 <= c["nad"] <= 1.0


def test_config_digest_stable():
    assert ev.config_digest({"a": 1, "b": (1, 2)}) == ev.config_digest({"b": [1, 2], "a": 1})
    assert ev.config_digest({"a": 1}) != ev.config_digest({"a": 2})
