import json
from importlib import resources

import numpy as np
import pytest

from conceptloop import synthbench as sb
from conceptloop.geometry import BoxN, box_iou, to_global


def obj(i, box, shape="rect", color="red", track=-1):
    return sb.SceneObject(i, BoxN(*box), shape, color, track)


def scene(objs, bg=(0.0, 0.0, 0.0)):
    return sb.Scene(64, 64, tuple(objs), bg)


def test_scene_determinism():
    a = sb.gen_scene(sb.SceneSpec(), 42)
    assert a == sb.gen_scene(sb.SceneSpec(), 42)
    assert np.array_equal(a.features, sb.gen_scene(sb.SceneSpec(), 42).features)


def test_two_object_spec_gives_disjoint_boxes():
    s = sb.gen_scene(sb.SceneSpec(n_objects=2), 7)
    assert len(s.objects) == 2
    assert box_iou(s.objects[0].box, s.objects[1].box) == 0.0


@pytest.mark.parametrize("n", [1, 9])
def test_object_count_bounds(n):
    with pytest.raises(ValueError):
        sb.SceneSpec(n_objects=n)


def test_infeasible_spec_raises_generation_error():
    spec = sb.SceneSpec(n_objects=8, width=16, height=16, min_size_px=9, max_size_px=9)
    with pytest.raises(sb.GenerationError):
        sb.gen_scene(spec, 0)


def test_scene_invariants_property_sweep():
    for seed in range(1000):
        spec = sb.SceneSpec(n_objects=2 + seed % 7)
        s = sb.gen_scene(spec, seed)
        ids = [o.id for o in s.objects]
        assert len(set(ids)) == len(ids) == spec.n_objects
        for o in s.objects:
            assert 0 <= o.box.x1 < o.box.x2 <= 1 and 0 <= o.box.y1 < o.box.y2 <= 1
        if seed % 50 == 0:
            for o in s.objects:
                m = s.object_mask(o.id)
                assert m.sum() > 0 and np.all(s.image[m > 0] == o.rgb)


def test_saliency_and_camouflage_oracles():
    s = scene([obj(0, (0, 0, .1, .1), color="yellow"), obj(1, (.5, .5, .6, .6), color="blue")])
    assert s.contrast(s.objects[0]) > s.contrast(s.objects[1])
    assert sb.rule_oracle(sb.TaskRule("CD_saliency"), [s], 0) == 0
    assert sb.rule_oracle(sb.TaskRule("CD_camouflage"), [s], 0) == 1


def test_logical_oracle_by_area():
    s = scene([obj(0, (0, 0, .1, .1)), obj(1, (.2, .2, .4, .4)), obj(2, (.6, .6, .6 + .02 ** .5, .6 + .02 ** .5))])
    assert sb.rule_oracle(sb.TaskRule("CR_logical", "largest"), [s], 0) == 1
    assert sb.rule_oracle(sb.TaskRule("CR_logical", "smallest"), [s], 0) == 0


def test_anomaly_oracle():
    s = scene([obj(0, (0, 0, .1, .1)), obj(1, (.2, .2, .3, .3)), obj(2, (.5, .5, .6, .6), "disc")])
    assert sb.rule_oracle(sb.TaskRule("CD_anomaly"), [s], 0) == 2
    with pytest.raises(sb.ConstructionError):
        sb.rule_oracle(sb.TaskRule("CD_anomaly"), [scene(s.objects[:2])], 0)


def test_consistency_and_difference_oracles():
    a = scene([obj(0, (0, 0, .1, .1), "disc", "blue"), obj(1, (.5, .5, .6, .6), color="green")])
    b = scene([obj(0, (0, 0, .1, .1), "disc", "blue"), obj(1, (.5, .5, .6, .6), color="cyan")])
    q = scene([obj(0, (0, 0, .1, .1), color="magenta"), obj(1, (.5, .5, .6, .6), "disc", "blue")])
    assert sb.rule_oracle(sb.TaskRule("CR_consistency"), [a, b, q], 2) == 1
    assert sb.rule_oracle(sb.TaskRule("CR_difference"), [a, b, q], 2) == 0
    with pytest.raises(sb.ConstructionError):
        sb.rule_oracle(sb.TaskRule("CR_consistency"), [q], 0)


def test_moved_oracle_uses_tracks():
    a = scene([obj(0, (0, 0, .1, .1), track=0), obj(1, (.5, .5, .6, .6), track=1)])
    b = scene([obj(0, (0, 0, .1, .1), track=0), obj(1, (.7, .5, .8, .6), track=1)])
    assert sb.rule_oracle(sb.TaskRule("CR_moved"), [a, b], 1) == 1


def test_ci_oracle_picks_lowest_id_and_rejects_absent_color():
    s = scene([obj(0, (0, 0, .1, .1), color="red"), obj(1, (.5, .5, .6, .6), color="red")])
    assert sb.rule_oracle(sb.TaskRule("CI_attribute", "red"), [s], 0) == 0
    with pytest.raises(sb.ConstructionError):
        sb.rule_oracle(sb.TaskRule("CI_attribute", "blue"), [s], 0)


@pytest.mark.parametrize("family", sb.FAMILIES)
def test_episode_ground_truths_are_rederivable(family):
    for seed in range(30):
        rule = sb.random_rule(family, np.random.default_rng(seed))
        ep = sb.build_episode(rule, 2, seed)
        assert len(ep.tiles) == 4 and len(ep.layout.support_indices) == 3
        assert sb.consistent_rules(ep) == [rule]
        scenes = ep.scenes
        assert ep.target_id == sb.rule_oracle(rule, scenes, len(scenes) - 1)
        p = ep.proxy_tile
        want = to_global(ep.layout, p, ep.tiles[p].obj(sb.rule_oracle(rule, scenes, p)).box)
        assert ep.gt_check == want
        assert np.array_equal(ep.gt_mask, ep.query.object_mask(ep.target_id))


@pytest.mark.parametrize("family", sb.FAMILIES)
def test_recompose_moves_tiles_but_keeps_the_task(family):
    rng = np.random.default_rng(5)
    for seed in range(10):
        ep = sb.build_episode(sb.random_rule(family, np.random.default_rng(seed)), 3, seed)
        new = sb.recompose(ep, rng)
        assert sb.consistent_rules(new) == [ep.rule]
        assert new.query == ep.query
        assert new.target_id == sb.rule_oracle(ep.rule, new.scenes, len(new.scenes) - 1)
        assert new.tiles[new.proxy_tile] == ep.tiles[ep.proxy_tile]
        assert sorted(map(id, new.tiles)) == sorted(map(id, ep.tiles))
        for t, scene in enumerate(new.tiles):
            assert new.tile_targets[t] == sb.rule_oracle(ep.rule, new.scenes, t)


def test_saliency_episode_check_is_proxy_max_contrast():
    ep = sb.build_episode(sb.TaskRule("CD_saliency"), 2, 11)
    proxy = ep.tiles[ep.proxy_tile]
    best = max(proxy.objects, key=lambda o: (proxy.contrast(o), -o.id))
    assert ep.gt_check == to_global(ep.layout, ep.proxy_tile, best.box)


def test_k1_has_no_proxy():
    ep = sb.build_episode(sb.TaskRule("CD_saliency"), 1, 3)
    assert ep.proxy_tile is None and ep.gt_check is None and len(ep.tiles) == 1


@pytest.mark.parametrize("k", [0, 4])
def test_bad_mosaic_order(k):
    with pytest.raises(ValueError):
        sb.build_episode(sb.TaskRule("CD_saliency"), k, 0)


def test_episode_determinism_and_json_round_trip(tmp_path):
    a = sb.gen_dataset(16, 5, k=3)
    assert [e.to_json() for e in a] == [e.to_json() for e in sb.gen_dataset(16, 5, k=3)]
    sb.write_dataset(a, tmp_path, {"seed": 5})
    back = sb.load_dataset(tmp_path)
    assert [e.to_json() for e in back] == [e.to_json() for e in a]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["count"] == 16 and sum(manifest["families"].values()) == 16


def test_instruction_word_counts_span_router_range():
    counts = {len(p.format(c="red").split()) for bank in sb.PHRASES.values() for p in bank}
    assert min(counts) == 1 and max(counts) >= 5


@pytest.mark.parametrize("family", sb.FAMILIES)
def test_no_positional_shortcut(family):
    n = 1000
    eps = sb.gen_dataset(n, 77, families=[family])
    slots = len(eps[0].query.objects)
    freq = np.bincount([e.target_id for e in eps], minlength=slots)
    p = 1.0 / slots
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(freq - n * p) <= 3 * sigma), freq


def test_fixture_bundle_ships_64_episodes():
    root = resources.files("conceptloop.data").joinpath("fixture")
    eps = sb.load_dataset(root)
    assert len(eps) == 64
    assert {e.rule.family for e in eps} == set(sb.FAMILIES)
