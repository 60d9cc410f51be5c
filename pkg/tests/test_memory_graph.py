import json

import numpy as np
import pytest

from memshape import PRIORS_DIR
from memshape.exceptions import ConfigError, DanglingReferenceError, PriorParseError
from memshape.gridworlds import DoorKey, encode_key
from memshape.memory_graph import AGENT_ROLLOUT, GoalNode, MemoryGraph, Step, SubgoalNode, load_priors


def doc(trajectories=(), subgoals=("k1", "k2")):
    return {
        "goal": {"id": "g", "label": "reach_goal"},
        "subgoals": [{"id": s, "label": f"label_{s}"} for s in subgoals],
        "edges": [["g", s] for s in subgoals],
        "trajectories": list(trajectories),
    }


def steps(keys, action=2):
    return [Step(k, action, None) for k in keys]


def graph_with_nodes(n, cap=256, decay=0.99, pinned=False):
    g = MemoryGraph.single_goal("g", cap=cap, decay=decay)
    for i in range(n):
        g.add_trajectory(steps([f"k{i}"]), pinned=pinned)
    return g


# -- load_priors ------------------------------------------------------------

def test_load_degenerate_document():
    g = load_priors(doc())
    assert g.node_count == 3 and len(g) == 0 and g.index == {}
    assert g.goal.subgoal_children == ["k1", "k2"]


def test_load_one_trajectory_indexes_every_step():
    tr = {"zeta": "g", "estimated_reward": 0.8,
          "steps": [{"obs_key": k, "action": 1} for k in ("a", "b", "c", "d")]}
    g = load_priors(doc([tr]))
    assert sum(len(v) for v in g.index.values()) == 4 and len(g.index) == 4
    node = g.trajectories[0]
    assert node.pinned and node.estimated_reward == 0.8 and node.origin == "offline_prior"


def test_zeta_symbol_alias():
    tr = {"ζ": "k1", "steps": [{"obs_key": "a", "action": 0}]}
    g = load_priors(json.dumps(doc([tr]), ensure_ascii=False))
    assert g.trajectories[0].goal_term == "k1" and g.trajectories[0].estimated_reward == 1.0


def test_roundtrip(tmp_path):
    tr = {"zeta": "k2", "estimated_reward": 0.5, "pinned": False,
          "steps": [{"obs_key": "x", "action": 3, "position": [1, 2]}, {"obs_key": "y", "action": 0}]}
    g = load_priors(doc([tr]))
    g.trajectories[0].access_score = 3.25
    path = tmp_path / "graph.json"
    g.save(path)
    h = load_priors(path)
    assert g.structurally_equal(h)
    assert h.trajectories[0].steps[0].position == (1, 2)
    assert h.trajectories[0].access_score == 3.25


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.update(extra=1), "document"),
    (lambda d: d["goal"].pop("id"), "goal"),
    (lambda d: d["subgoals"][0].update(color="red"), "subgoals[0]"),
    (lambda d: d["trajectories"][0].update(estimated_reward=2.0), "trajectories[0].estimated_reward"),
    (lambda d: d["trajectories"][0]["steps"][0].update(action="up"), "trajectories[0].steps[0].action"),
    (lambda d: d["trajectories"][0].update(steps=[]), "trajectories[0].steps"),
    (lambda d: d["trajectories"][0].update(pinned="yes"), "trajectories[0].pinned"),
    (lambda d: d["subgoals"][0].update(detection_event="sneezed"), "subgoals[0].detection_event"),
])
def test_schema_errors_name_the_field(mutate, field):
    d = doc([{"zeta": "g", "steps": [{"obs_key": "a", "action": 0}]}])
    mutate(d)
    with pytest.raises(PriorParseError) as err:
        load_priors(d)
    assert field in str(err.value)


def test_dangling_zeta_and_edge():
    with pytest.raises(DanglingReferenceError, match="k9"):
        load_priors(doc([{"zeta": "k9", "steps": [{"obs_key": "a", "action": 0}]}]))
    d = doc()
    d["edges"].append(["g", "nope"])
    with pytest.raises(DanglingReferenceError):
        load_priors(d)


def test_position_only_steps_need_a_key_function():
    d = doc([{"zeta": "g", "steps": [{"position": [0, 1], "action": 2}]}])
    with pytest.raises(PriorParseError, match="obs_key"):
        load_priors(d)
    g = load_priors(d, position_key=lambda p: encode_key((p[0] * 8 + p[1],)))
    assert g.trajectories[0].steps[0].obs_key == encode_key((1,))


def test_invalid_json_text():
    with pytest.raises(PriorParseError):
        load_priors("{not json")


def test_shipped_priors_load():
    fl = load_priors(PRIORS_DIR / "frozenlake_8x8.json", position_key=lambda p: encode_key((p[0] * 8 + p[1],)))
    assert len(fl) == 1 and len(fl.trajectories[0].steps) == 14
    dk = load_priors(PRIORS_DIR / "doorkey_6.json")
    assert {s.label for s in dk.subgoals.values()} == {"pickup_key", "open_door"}
    assert len(dk) == 1


def test_shipped_doorkey_demo_replays_on_its_layout():
    dk = load_priors(PRIORS_DIR / "doorkey_6.json")
    node = dk.trajectories[0]
    env = DoorKey(6)
    obs = env.reset(seed=2024)
    for s in node.steps:
        assert obs.obs_key == s.obs_key and obs.position == s.position
        r = env.step(s.action)
        obs = r.observation
    assert r.done and r.reward > 0.9


# -- insertion ----------------------------------------------------------------

def test_insert_rollout_rules():
    g = MemoryGraph.single_goal("g")
    ep = steps(["a", "b", "c"])
    assert not g.insert_rollout(ep, 0.0, 1.0)
    assert g.insert_rollout(ep, 1.0, 1.0)
    node = g.trajectories[0]
    assert node.origin == AGENT_ROLLOUT and not node.pinned and node.estimated_reward == 1.0
    assert not g.insert_rollout(ep, 1.0, 1.0)  # overlap 1.0
    assert len(g) == 1
    # same keys, different actions are novel
    assert g.insert_rollout(steps(["a", "b", "c"], action=0), 1.0, 1.0)


def test_novelty_fraction_boundary():
    g = MemoryGraph.single_goal("g")
    g.add_trajectory(steps(["a", "b"]))
    assert g.overlap_fraction(steps(["a", "b", "x", "y"])) == 0.5
    assert not g.insert_rollout(steps(["a", "b", "x", "y"]), 1.0, 1.0, novelty_threshold=0.5)
    assert g.insert_rollout(steps(["a", "x", "y", "z"]), 1.0, 1.0, novelty_threshold=0.5)


# -- lookup / scores ---------------------------------------------------------

def test_lookup_counts():
    g = MemoryGraph.single_goal("g")
    g.add_trajectory(steps(["a", "b"]))
    g.add_trajectory(steps(["b", "c"]))
    assert g.lookup("zzz") == []
    assert all(n.access_score == 0 for n in g.trajectories.values())
    assert g.lookup("b") == [(0, 1), (1, 0)]
    assert g.trajectories[0].access_score == 1 and g.trajectories[1].access_score == 1


def test_repeated_lookups_against_scalar_decay_model():
    g = MemoryGraph.single_goal("g", decay=0.95)
    g.add_trajectory(steps(["a"]))
    g.add_trajectory(steps(["b"]))
    model = 0.0
    for i in range(1000):
        g.lookup("a")
        model += 1.0
        if i % 100 == 99:
            g.prune()
            model *= 0.95
    assert g.trajectories[0].access_score == pytest.approx(model, rel=1e-12)
    assert g.trajectories[1].access_score == 0.0


# -- pruning -------------------------------------------------------------------

def test_prune_within_cap_removes_nothing():
    g = graph_with_nodes(3, cap=3)
    assert g.prune() == []


def test_prune_argmin():
    g = graph_with_nodes(3, cap=2, decay=1.0)
    for nid, score in zip(range(3), (5, 1, 3)):
        g.trajectories[nid].access_score = score
    assert g.prune() == [1]


def test_prune_pinned_precedence():
    g = MemoryGraph.single_goal("g", cap=1)
    g.add_trajectory(steps(["p"]), pinned=True)
    g.add_trajectory(steps(["u"]), access_score=99)
    assert g.prune() == [1]
    assert list(g.trajectories) == [0]


def test_prune_ties_remove_oldest():
    g = graph_with_nodes(4, cap=2)
    assert g.prune() == [0, 1]


def test_too_many_pinned_nodes():
    g = graph_with_nodes(2, cap=2, pinned=True)
    with pytest.raises(ConfigError):
        g.add_trajectory(steps(["x"]), pinned=True)


def test_random_workload_bounds():
    rng = np.random.default_rng(0)
    g = MemoryGraph.single_goal("g", cap=16)
    pinned = {g.add_trajectory(steps([f"p{i}", "shared"]), pinned=True).node_id for i in range(4)}
    keys = [f"k{i}" for i in range(40)]
    for op in range(10_000):
        kind = rng.random()
        if kind < 0.4:
            ep = [Step(keys[int(rng.integers(40))], int(rng.integers(4))) for _ in range(int(rng.integers(1, 6)))]
            g.insert_rollout(ep, float(rng.random()), 0.3)
        elif kind < 0.8:
            g.lookup(keys[int(rng.integers(40))])
        else:
            g.prune()
            assert len(g) <= g.cap
            assert pinned <= set(g.trajectories)
    g.prune()
    assert len(g) <= g.cap and pinned <= set(g.trajectories)
    g.check_consistency()


# -- goal sets -------------------------------------------------------------------

def test_goal_set_closure():
    g = MemoryGraph(GoalNode("g", "goal", ["k1", "k2"]), [SubgoalNode("k1", "a"), SubgoalNode("k2", "b")])
    n1 = g.add_trajectory(steps(["x"]), "g")
    n2 = g.add_trajectory(steps(["y"]), "k1")
    assert g.goal_set(n1) == {"g", "k1", "k2"}
    assert g.goal_set(n2) == {"k1", "g"}
    bare = MemoryGraph.single_goal("solo")
    assert bare.goal_set(bare.add_trajectory(steps(["z"]))) == {"solo"}


def test_remove_keeps_index_consistent():
    g = MemoryGraph.single_goal("g")
    g.add_trajectory(steps(["a", "b", "a"]))
    g.add_trajectory(steps(["a"]))
    g.remove(0)
    g.check_consistency()
    assert g.index == {"a": [(1, 0)]}
