import json
import random

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabiot.engine import PolicyStore, detect_conflicts
from collabiot.llm.backends import (
    BackendError,
    EchoBackend,
    EndpointConfig,
    HttpChatBackend,
    ScriptedBackend,
    extract_text,
)
from collabiot.llm.pipeline import (
    ACCEPTED,
    BACKEND_ERROR,
    REJECTED,
    GenerationRequest,
    UnparseableVerdict,
    critic_check,
    generate,
    load_fewshot,
    parse_verdict,
)
from collabiot.llm.render import render_policy_text
from collabiot.model import (
    AccessPolicy,
    AttributeConstraint,
    CapabilityEntry,
    GroupSpec,
    Limit,
    PolicyDocument,
    parse_policy_document,
    serialize_policy_document,
)

from conftest import HOME_YAML, home_fleet

FRIENDS_GAMING = {"policies": [{"name": "friends-gaming", "source": "GD", "destination": "FD",
                                "capability": {"includes": [{"name": "laptop_getinference"},
                                                            {"name": "console_play"}]}}]}
OFFICE_GROUP = {"groups": [{"name": "OFFICE", "spec": {"attributes": {"location": {"includes": [{"name": "office"}]}}}}]}
NO_NAME = {"groups": [{"spec": {"attributes": {"location": {"includes": [{"name": "office"}]}}}}]}
YES = {"verdict": "yes", "reason": "same meaning"}


def stages(outcome):
    return [(e.stage, e.verdict, e.round) for e in outcome.transcript]


# -- rendering ---------------------------------------------------------------


def test_render_living_room_group(home_doc):
    assert render_policy_text(home_doc.groups[0]) == (
        "Group LR: devices whose location is livingroom and whose type is lock, tv, or bulb.")


def test_render_single_include():
    g = GroupSpec("F", {"relation": AttributeConstraint(includes=("friend",))})
    assert render_policy_text(g) == "Group F: devices whose relation is friend."


def test_render_policies(home_doc):
    assert render_policy_text(home_doc.policies[0]) == (
        "Policy policy1: devices in group FD may use every capability except lock_setconf "
        "on devices in group LR.")
    assert "laptop_getinference (at most 10 requests per second, burst 10)" in render_policy_text(home_doc.policies[1])
    p = AccessPolicy("r", "G", "R", includes=(CapabilityEntry("lock_unlock", Limit.max_uses(2)),), ttl=900)
    assert render_policy_text(p).endswith("lock_unlock (at most 2 uses) on devices in group G. "
                                          "Access expires after 900 seconds.")
    with pytest.raises(TypeError):
        render_policy_text("nope")


def random_model(rng):
    values = ["a", "b", "c", "d"]
    if rng.random() < 0.5:
        constraints = {}
        for attr in rng.sample(["location", "type", "owner"], rng.randint(1, 3)):
            picked = rng.sample(values, rng.randint(1, 3))
            split = rng.randint(0, len(picked))
            constraints[attr] = AttributeConstraint(tuple(picked[:split]) or None, tuple(picked[split:]) or None)
        return GroupSpec(rng.choice(["G1", "G2", "G3"]), constraints)
    src, dst = rng.sample(["G1", "G2", "G3"], 2)
    caps = rng.sample(["tv_switch", "tv_volume", "lock_lock"], rng.randint(1, 3))
    if rng.random() < 0.5:
        inc = tuple(CapabilityEntry(c, rng.choice([None, Limit.per_second(2), Limit.max_uses(3)])) for c in caps)
        return AccessPolicy(rng.choice(["p", "q"]), src, dst, includes=inc, ttl=rng.choice([None, 60.0]))
    return AccessPolicy(rng.choice(["p", "q"]), src, dst, excludes=tuple(caps), ttl=rng.choice([None, 60.0]))


def test_render_is_injective_on_random_models():
    rng = random.Random(5)
    models = []
    while len(models) < 100:
        m = random_model(rng)
        if m not in models:
            models.append(m)
    texts = [render_policy_text(m) for m in models]
    assert len(set(texts)) == 100


# -- critic ------------------------------------------------------------------


@pytest.mark.parametrize("reply, verdict, reason", [
    ('{"verdict": "yes", "reason": "ok"}', "match", "ok"),
    ('{"verdict": "no", "reason": "wrong room"}', "mismatch", "wrong room"),
    ('{"same": true}', "match", ""),
    ("no: wrong room", "mismatch", "wrong room"),
    ("Yes. Both grant the laptop.", "match", "Both grant the laptop."),
])
def test_parse_verdict(reply, verdict, reason):
    r = parse_verdict(reply)
    assert (r.verdict, r.explanation) == (verdict, reason)


@pytest.mark.parametrize("reply", ["maybe", '{"verdict": "perhaps"}', "", "nope"])
def test_unparseable_verdict(reply):
    with pytest.raises(UnparseableVerdict):
        parse_verdict(reply)


def test_critic_identity_with_echo_backend():
    text = "Policy p: devices in group FD may use console_play on devices in group GD."
    assert critic_check(text, text, EchoBackend()).match
    assert not critic_check(text, text.replace("FD", "LR"), EchoBackend()).match


def test_critic_fails_closed_on_garbage():
    r = critic_check("a", "b", ScriptedBackend(["I am not sure"]))
    assert not r.match and "unparseable" in r.explanation


def test_critic_uses_its_own_context():
    backend = ScriptedBackend([YES])
    critic_check("friends can use the gaming laptop", "Policy ...", backend)
    assert backend.calls[0]["system"] == load_fewshot("critic")
    assert backend.calls[0]["schema"] == "verdict"


# -- pipeline ----------------------------------------------------------------


def test_friends_gaming_prompt_accepted(home_store):
    backend = ScriptedBackend([FRIENDS_GAMING, YES])
    out = generate(GenerationRequest("Allow my-friends to use the gaming-device", "policy"), backend, home_store)
    assert out.status == ACCEPTED
    assert (out.artifact.source, out.artifact.destination) == ("GD", "FD")
    assert stages(out) == [("generate", "ok", 1), ("schema", "pass", 1), ("semantic", "match", 1),
                           ("attribute", "pass", 1)]
    assert "Current system:" in backend.calls[0]["system"]
    assert backend.calls[0]["schema"] == "policy"


def test_perfect_backend_single_generate(home_store):
    out = generate(GenerationRequest("devices in the office", "group"), ScriptedBackend([OFFICE_GROUP, YES]), home_store)
    assert out.status == ACCEPTED and isinstance(out.artifact, GroupSpec)
    assert [e.stage for e in out.transcript].count("generate") == 1


def test_schema_repair_round(home_store):
    backend = ScriptedBackend([NO_NAME, OFFICE_GROUP, YES])
    out = generate(GenerationRequest("devices in the office", "group"), backend, home_store)
    assert out.status == ACCEPTED
    assert stages(out)[:4] == [("generate", "ok", 1), ("schema", "fail", 1), ("generate", "ok", 2),
                               ("schema", "pass", 2)]
    assert "groups[0].name" in out.transcript[1].detail
    assert "rejected by the validator" in backend.calls[1]["user"]


def test_semantic_mismatch_gets_one_repair(home_store):
    backend = ScriptedBackend([OFFICE_GROUP, "no: wrong room", OFFICE_GROUP, "no: still wrong"])
    out = generate(GenerationRequest("devices in the kitchen", "group"), backend, home_store)
    assert out.status == REJECTED
    assert ("semantic", "mismatch", 1) in stages(out)
    assert out.transcript[2].detail == "wrong room"
    assert "wrong room" in backend.calls[2]["user"]
    assert len(backend.calls) == 4


def test_exhausted_repairs_need_user(home_store):
    backend = ScriptedBackend(["not yaml: [", NO_NAME, "{}"])
    out = generate(GenerationRequest("office stuff", "group", max_repair_rounds=3), backend, home_store)
    assert out.status == REJECTED and out.artifact is None
    assert len(backend.calls) == 3


def test_hard_conflict_rejected(home_store):
    dup = {"policies": [dict(FRIENDS_GAMING["policies"][0], name="policy1")]}
    out = generate(GenerationRequest("friends gaming", "policy"), ScriptedBackend([dup, YES]), home_store)
    assert out.status == REJECTED
    assert {c.kind for c in out.conflicts} == {"duplicate-name"}
    assert stages(out)[-1] == ("attribute", "fail", 1)


def test_unknown_attribute_value_escalates(home_store):
    attic = {"groups": [{"name": "ATTIC", "spec": {"attributes": {"location": {"includes": [{"name": "attic"}]}}}}]}
    out = generate(GenerationRequest("attic devices", "group"), ScriptedBackend([attic, YES]), home_store)
    assert out.status == REJECTED and out.conflicts[0].kind == "unknown-attribute-value"


def test_backend_error(home_store):
    out = generate(GenerationRequest("x", "group"), ScriptedBackend([{"error": "timeout"}]), home_store)
    assert out.status == BACKEND_ERROR and out.transcript[-1].verdict == "error"
    out = generate(GenerationRequest("x", "group"), ScriptedBackend([OFFICE_GROUP]), home_store)
    assert out.status == BACKEND_ERROR and out.transcript[-1].stage == "semantic"


def test_request_validation():
    with pytest.raises(ValueError):
        GenerationRequest("  ", "group")
    with pytest.raises(ValueError):
        GenerationRequest("x", "rule")
    with pytest.raises(ValueError):
        GenerationRequest("x", "group", max_repair_rounds=0)


def test_transcripts_are_byte_identical(home_store):
    script = [NO_NAME, OFFICE_GROUP, "no: wrong", OFFICE_GROUP, YES]
    runs = [generate(GenerationRequest("office devices", "group"), ScriptedBackend(script), home_store)
            for _ in range(3)]
    assert len({r.transcript_json() for r in runs}) == 1


REPLY_POOL = [OFFICE_GROUP, NO_NAME, FRIENDS_GAMING, "garbage", YES, {"verdict": "no", "reason": "x"}, "maybe",
              {"policies": [dict(FRIENDS_GAMING["policies"][0], name="policy1")]},
              {"groups": [{"name": "A", "spec": {"attributes": {"mood": {"includes": [{"name": "sad"}]}}}}]}]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from(range(len(REPLY_POOL))), min_size=0, max_size=10),
       st.sampled_from(["group", "policy"]), st.integers(1, 4))
def test_accepted_artifacts_always_valid_and_work_bounded(picks, kind, rounds):
    home_store = PolicyStore.from_document(parse_policy_document(HOME_YAML), home_fleet())
    backend = ScriptedBackend([REPLY_POOL[i] for i in picks])
    out = generate(GenerationRequest("some request", kind, max_repair_rounds=rounds), backend, home_store)
    gen_calls = sum(c["schema"] != "verdict" for c in backend.calls)
    critic_calls = sum(c["schema"] == "verdict" for c in backend.calls)
    assert gen_calls <= rounds and critic_calls <= 2
    assert out.transcript
    if out.status == ACCEPTED:
        doc = PolicyDocument(groups=(out.artifact,)) if kind == "group" else PolicyDocument(policies=(out.artifact,))
        assert parse_policy_document(serialize_policy_document(doc), registry=None) == doc
        assert not any(c.hard for c in detect_conflicts(out.artifact, home_store))


# -- HTTP backend ------------------------------------------------------------


def test_http_backend_request_and_reply():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        return httpx.Response(200, json={"message": {"role": "assistant", "content": "hello"}})

    client = httpx.Client(transport=httpx.MockTransport(handler))
    backend = HttpChatBackend(EndpointConfig("http://llm.test/api/chat", "gemma", api_key="k"), client)
    assert backend.complete("sys", "user", {"title": "group", "type": "object"}) == "hello"
    assert seen["auth"] == "Bearer k"
    body = seen["body"]
    assert body["model"] == "gemma"
    assert body["messages"] == [{"role": "system", "content": "sys"}, {"role": "user", "content": "user"}]
    assert body["format"]["title"] == "group"
    assert body["response_format"]["json_schema"]["schema"]["type"] == "object"


def test_http_backend_errors():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    backend = HttpChatBackend(EndpointConfig("http://llm.test/x", "m"), client)
    with pytest.raises(BackendError):
        backend.complete("s", "u", {})
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(200, content=b"not json")))
    with pytest.raises(BackendError):
        HttpChatBackend(EndpointConfig("http://llm.test/x", "m"), client).complete("s", "u", {})


def test_extract_text_shapes():
    assert extract_text({"choices": [{"message": {"content": "a"}}]}) == "a"
    assert extract_text({"response": "b"}) == "b"
    with pytest.raises(BackendError):
        extract_text({"other": 1})


def test_endpoint_from_env(monkeypatch):
    monkeypatch.delenv("COLLABIOT_LLM_URL", raising=False)
    monkeypatch.delenv("COLLABIOT_LLM_MODEL", raising=False)
    with pytest.raises(BackendError):
        EndpointConfig.from_env()
    monkeypatch.setenv("COLLABIOT_LLM_URL", "http://x/api")
    monkeypatch.setenv("COLLABIOT_LLM_MODEL", "m")
    monkeypatch.setenv("COLLABIOT_LLM_KEY", "secret")
    cfg = EndpointConfig.from_env({"timeout": 5})
    assert (cfg.base_url, cfg.model, cfg.api_key, cfg.timeout) == ("http://x/api", "m", "secret", 5.0)


def test_scripted_backend_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps([OFFICE_GROUP, "yes"]))
    backend = ScriptedBackend.from_file(path)
    assert json.loads(backend.complete("s", "u", {"title": "group"})) == OFFICE_GROUP
    assert backend.complete("s", "u", {"title": "verdict"}) == "yes"
    with pytest.raises(BackendError):
        backend.complete("s", "u", {})
    path.write_text("{}")
    with pytest.raises(ValueError):
        ScriptedBackend.from_file(path)


def test_fewshot_fixtures_have_two_examples_each():
    for kind in ("group", "policy"):
        text = load_fewshot(kind)
        assert text.lower().count("example") >= 2
