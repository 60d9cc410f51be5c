import json
import threading
import time
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memshape.exceptions import ConfigError, DanglingReferenceError
from memshape.gridworlds import DoorKey, FrozenLake
from memshape.guidance import (
    ADD_TO_GRAPH,
    INJECT,
    GuidancePlan,
    GuidanceState,
    HttpProvider,
    MockProvider,
    ParseFailure,
    ProviderError,
    TriggerState,
    apply_plan,
    build_prompt,
    inject_logits,
    parse_plan,
    update_trigger,
)
from memshape.memory_graph import GoalNode, MemoryGraph, SubgoalNode
from memshape.neuralnet import softmax

DK_ACTIONS = DoorKey.action_names


def replay_trigger(utilities, **kw):
    state, fired = TriggerState(), []
    for ep, u in enumerate(utilities, start=1):
        state, fire = update_trigger(state, u, **kw)
        if fire:
            fired.append(ep)
    return state, fired


# -- trigger ----------------------------------------------------------------

def test_trigger_reset_rule():
    state, fired = replay_trigger([0.0] * 9 + [0.5])
    assert fired == [] and state.consecutive_starved_episodes == 0


def test_trigger_fires_on_tenth():
    _, fired = replay_trigger([0.0] * 10)
    assert fired == [10]


def test_trigger_thirty_episodes():
    state, fired = replay_trigger([0.0] * 30, u_min=0.05, patience=10, cooldown=20)
    assert fired == [10, 30] and state.queries_issued == 2


def test_trigger_query_budget_bound():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 300))
        us = (rng.random(n) < 0.9) * 0.0 + (rng.random(n) < 0.1) * 0.5
        _, fired = replay_trigger(us.tolist())
        assert len(fired) <= n / 10 + 1
        assert all(b - a >= 10 for a, b in zip(fired, fired[1:]))


# -- parsing ----------------------------------------------------------------

def test_parse_inject_plan():
    plan = parse_plan("MODE: inject\nSTEP: forward\nSTEP: pickup", DK_ACTIONS)
    assert plan.mode == INJECT and plan.actions == [2, 3] and len(plan.steps) == 2


def test_parse_defaults_to_add_and_accepts_subgoals():
    plan = parse_plan("SUBGOAL: pickup_key\nSTEP: Forward\n", DK_ACTIONS, ["pickup_key"])
    assert plan.mode == ADD_TO_GRAPH and plan.subgoal_labels == ["pickup_key"] and plan.actions == [2]


@pytest.mark.parametrize("reply, reason", [
    ("hello", "no steps"),
    ("SUBGOAL: pickup_key\nSTEP: forward", "pickup_key"),
    ("STEP: jump", "jump"),
    ("MODE: teleport\nSTEP: forward", "teleport"),
    ("MODE: inject\nSUBGOAL: k\nSTEP: forward", "inject"),
    (None, "not text"),
])
def test_parse_failures(reply, reason):
    labels = ["k"] if "SUBGOAL: k" in str(reply) else []
    out = parse_plan(reply, DK_ACTIONS, labels)
    assert isinstance(out, ParseFailure) and not out
    assert reason in out.reason


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=400))
def test_parse_never_raises_on_bytes(data):
    out = parse_plan(data, DK_ACTIONS, ["pickup_key"])
    assert isinstance(out, (GuidancePlan, ParseFailure))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(["MODE: inject", "MODE: add", "STEP: forward", "STEP: left",
                                 "SUBGOAL: pickup_key", "STEP: ???", "garbage", ":", "STEP:"]),
                max_size=12))
def test_parse_grammar_fuzz(lines):
    out = parse_plan("\n".join(lines), DK_ACTIONS, ["pickup_key"])
    if isinstance(out, GuidancePlan):
        assert out.actions and all(0 <= a < 5 for a in out.actions)


# -- injection ----------------------------------------------------------------

def test_inject_examples():
    plan = GuidancePlan(1, [("action", 2)], INJECT, beta=1.0, horizon=50)
    np.testing.assert_array_equal(inject_logits(np.zeros(4), plan, 0.0), np.zeros(4))
    out = inject_logits(np.zeros(4), plan, 1.0)
    assert softmax(out)[2] == pytest.approx(np.e / (3 + np.e)) and softmax(out)[2] == pytest.approx(0.4754, abs=1e-4)
    plan.cursor = 1
    np.testing.assert_array_equal(inject_logits(np.zeros(4), plan, 1.0), np.zeros(4))


def test_injection_locality_and_decay():
    rng = np.random.default_rng(0)
    plan = GuidancePlan(1, [("action", a) for a in (0, 1, 2, 3, 0)], INJECT, beta=2.0, horizon=10)
    while plan.active:
        logits = rng.normal(size=4)
        out = plan.apply(logits)
        diff = out - logits
        assert np.count_nonzero(diff) == 1
        assert diff[plan.suggested_action()] == pytest.approx(2.0 * (1 - plan.cursor / 10))
        plan.observe(plan.suggested_action())
    assert plan.cursor == 5


def test_attempt_budget_and_horizon():
    plan = GuidancePlan(1, [("action", 1), ("action", 2)], INJECT, horizon=50, attempt_budget=3)
    for _ in range(3):
        plan.observe(0)  # never follows the suggestion
    assert plan.cursor == 1
    short = GuidancePlan(1, [("action", 1)] * 10, INJECT, horizon=4)
    for _ in range(4):
        short.observe(1)
    assert not short.active and short.cursor == 4


# -- prompts ------------------------------------------------------------------

def test_doorkey_prompt_contains_only_the_view():
    env = DoorKey(6)
    obs = env.reset(seed=0)
    # agent in a corner facing the outer wall
    env.state.agent_pos, env.state.agent_dir = (1, 1), 3
    view_key = env._observe(frozenset()).obs_key
    prompt = build_prompt([env.view_glyphs(view_key)], DK_ACTIONS, "reach_goal", ["pickup_key"])
    assert "?" not in prompt
    glyph_lines = env.view_glyphs(view_key).splitlines()[:5]
    assert all(len(line) == 5 for line in glyph_lines)
    assert env.render_text() not in prompt
    assert build_prompt([env.view_glyphs(obs.obs_key)], DK_ACTIONS, "g") == \
        build_prompt([env.view_glyphs(obs.obs_key)], DK_ACTIONS, "g")


def test_frozenlake_prompt_shows_only_3x3():
    env = FrozenLake()
    obs = env.reset()
    view = env.view_glyphs(obs.obs_key)
    assert view.splitlines() == ["###", "#AF", "#FF"]
    prompt = build_prompt([view], env.action_names, "reach_goal")
    shown = prompt.split("[0]\n")[1].split("Reply with")[0]
    assert shown.strip() == view
    # goal and holes are far away, so neither glyph appears
    assert "G" not in shown and "H" not in shown


def test_sentinel_outside_view_is_absent():
    env = DoorKey(6)
    env.reset(seed=1)
    grid = env.state.grid
    grid[1:-1, 1:-1] = 0  # empty interior, walls kept
    grid[2, 1] = 6  # a key directly behind the agent
    env.state.agent_pos, env.state.agent_dir = (2, 3), 0  # facing east
    key = env._observe(frozenset()).obs_key
    assert "K" not in build_prompt([env.view_glyphs(key)], DK_ACTIONS, "g")
    env.state.agent_dir = 2  # turn around: now it is visible
    key = env._observe(frozenset()).obs_key
    assert "K" in build_prompt([env.view_glyphs(key)], DK_ACTIONS, "g")


def test_prompt_requires_views():
    with pytest.raises(ValueError):
        build_prompt([], DK_ACTIONS, "g")


# -- providers ----------------------------------------------------------------

def test_mock_provider_repeats_and_records(tmp_path):
    mock = MockProvider(["MODE: inject\nSTEP: forward"])
    assert mock.query("p1") == mock.query("p2") == "MODE: inject\nSTEP: forward"
    assert mock.prompts == ["p1", "p2"]
    with pytest.raises(ConfigError):
        MockProvider([])
    path = tmp_path / "script.json"
    path.write_text(json.dumps(["a", "b"]))
    m = MockProvider.from_file(path)
    assert [m.query("x") for _ in range(3)] == ["a", "b", "b"]


def test_mock_driven_trigger_consumes_one_reply_per_fire():
    mock = MockProvider(["r1", "r2", "r3"])
    state = TriggerState()
    for _ in range(30):
        state, fire = update_trigger(state, 0.0)
        if fire:
            mock.query("prompt")
    assert len(mock.prompts) == 2


def test_http_provider_request_and_reply(monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "STEP: forward"}}]})

    monkeypatch.setenv("MEMSHAPE_LLM_API_KEY", "sk-test")
    monkeypatch.setenv("MEMSHAPE_LLM_BASE_URL", "http://llm.local/")
    prov = HttpProvider(model="m1", transport=httpx.MockTransport(handler))
    assert prov.query("hi") == "STEP: forward"
    assert seen["url"] == "http://llm.local/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-test"
    assert seen["body"] == {"model": "m1", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0}


def test_http_provider_errors_are_soft():
    def boom(request):
        return httpx.Response(500, text="oops")

    def malformed(request):
        return httpx.Response(200, json={"nothing": []})

    for handler in (boom, malformed):
        prov = HttpProvider(base_url="http://x", transport=httpx.MockTransport(handler))
        with pytest.raises(ProviderError):
            prov.query("hi")


def test_http_provider_needs_base_url(monkeypatch):
    monkeypatch.delenv("MEMSHAPE_LLM_BASE_URL", raising=False)
    with pytest.raises(ConfigError):
        HttpProvider()


def test_http_provider_timeout_against_slow_server():
    class Slow(BaseHTTPRequestHandler):
        def do_POST(self):
            time.sleep(1.0)
            try:
                self.send_response(200)
                self.end_headers()
            except OSError:
                pass

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Slow)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        prov = HttpProvider(base_url=f"http://127.0.0.1:{server.server_port}", timeout=0.2)
        with pytest.raises(ProviderError, match="timed out"):
            prov.query("hi")
    finally:
        server.shutdown()


# -- apply_plan -----------------------------------------------------------------

def _dk_graph():
    return MemoryGraph(GoalNode("g", "reach_goal", ["k1"]), [SubgoalNode("k1", "pickup_key")])


def test_apply_add_plan_grows_graph():
    env = DoorKey(6)
    obs = env.reset(seed=3)
    before = (env.state.agent_pos, env.state.agent_dir, env.state.step_count)
    g = _dk_graph()
    plan = parse_plan("STEP: left\nSTEP: left\nSTEP: right", DK_ACTIONS, ["pickup_key"])
    state = GuidanceState()
    assert apply_plan(plan, g, state, env=env, start_obs=obs, estimated_reward=0.7) == "added"
    node = g.trajectories[0]
    assert len(g) == 1 and node.origin == "online_llm" and node.estimated_reward == 0.7
    assert node.steps[0].obs_key == obs.obs_key and sum(len(v) for v in g.index.values()) == 3
    # simulated on a clone; the live environment is untouched
    assert (env.state.agent_pos, env.state.agent_dir, env.state.step_count) == before


def test_apply_inject_plan_replaces_previous():
    g = _dk_graph()
    state = GuidanceState()
    p1 = parse_plan("MODE: inject\nSTEP: forward", DK_ACTIONS)
    p2 = parse_plan("MODE: inject\nSTEP: pickup", DK_ACTIONS)
    assert apply_plan(p1, g, state) == "injecting"
    assert apply_plan(p2, g, state) == "injecting"
    assert state.active_plan is p2 and len(g) == 0


def test_apply_plan_dangling_subgoal():
    plan = GuidancePlan(1, [("subgoal", "open_door"), ("action", 2)], ADD_TO_GRAPH)
    with pytest.raises(DanglingReferenceError):
        apply_plan(plan, _dk_graph(), GuidanceState())
