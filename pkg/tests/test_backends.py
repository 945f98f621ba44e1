import json
import logging

import httpx
import pytest

from vlmpolyp.backends import (
    EVALUATION_PARAMS,
    TILENSE_PARAMS,
    AuthError,
    Conversation,
    GenerationParams,
    MalformedReply,
    MockBackend,
    NetworkError,
    RateLimiter,
    RateLimitExhausted,
    RemoteBackend,
    ResponseCache,
    RunLedger,
    Turn,
    UnscriptedRequest,
    cached_complete,
    converse,
    load_backend,
    request_digest,
)
from vlmpolyp.backends.remote import fill_template, load_backend_config
from vlmpolyp.backends import CONFIG_DIR

IMG = b"\x89PNG\r\n\x1a\n fake image bytes"


def conv(text="What is this image?", image=IMG):
    return Conversation((Turn(text, image),))


class VirtualClock:
    def __init__(self):
        self.now = 0.0
        self.sleeps = []

    def clock(self):
        return self.now

    def sleep(self, dt):
        self.sleeps.append(dt)
        self.now += dt


def remote(handler, ledger=None, env=None, **overrides):
    cfg = load_backend_config(CONFIG_DIR / "openai_gpt4.json")
    cfg.update(overrides)
    vc = VirtualClock()
    limiter = RateLimiter(cfg["rate_limit_per_minute"], clock=vc.clock, sleep=vc.sleep)
    backend = RemoteBackend.from_config(cfg, ledger=ledger, limiter=limiter,
                                        transport=httpx.MockTransport(handler), sleep=vc.sleep,
                                        env={"OPENAI_API_KEY": "sk-test"} if env is None else env)
    return backend, vc


def ok_body(text):
    return {"choices": [{"message": {"content": text}}]}


def test_scripted_mock_lookup():
    c = conv()
    d = request_digest(c, EVALUATION_PARAMS, "mock")
    b = MockBackend(script={d: "1. normal"})
    r = b.complete(c, EVALUATION_PARAMS)
    assert r.raw_text == "1. normal" and r.request_digest == d and not r.cache_hit


def test_strict_mock_rejects_unknown():
    with pytest.raises(UnscriptedRequest, match="unscripted request"):
        MockBackend(strict=True).complete(conv(), EVALUATION_PARAMS)


def test_mock_rules_and_default():
    b = MockBackend(rules=[{"contains": "pathology", "reply": "hyperplastic polyp"}], default="normal")
    assert b.complete(conv("What is the pathology?"), EVALUATION_PARAMS).raw_text == "hyperplastic polyp"
    assert b.complete(conv("Other"), EVALUATION_PARAMS).raw_text == "normal"


def test_digest_depends_on_image_bytes_not_path(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    a.write_bytes(IMG)
    b.write_bytes(IMG)
    assert request_digest(conv(image=a), EVALUATION_PARAMS, "x") == request_digest(conv(image=b), EVALUATION_PARAMS, "x")
    assert request_digest(conv(), EVALUATION_PARAMS, "x") != request_digest(conv(), TILENSE_PARAMS, "x")
    assert request_digest(conv(), EVALUATION_PARAMS, "x") != request_digest(conv(), EVALUATION_PARAMS, "y")


def test_retry_on_429_then_success():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) <= 2:
            return httpx.Response(429, headers={"Retry-After": "3"})
        return httpx.Response(200, json=ok_body("a polyp"))

    ledger = RunLedger()
    b, vc = remote(handler, ledger=ledger)
    r = b.complete(conv(), EVALUATION_PARAMS)
    assert r.raw_text == "a polyp" and r.retries == 2
    assert len(calls) == 3
    assert [e["retries"] for e in ledger.entries] == [2]
    assert vc.sleeps == [3.0, 3.0]  # Retry-After beats the 1s/2s exponential schedule


def test_retry_exhaustion():
    b, _ = remote(lambda req: httpx.Response(503), max_retries=2)
    with pytest.raises(NetworkError) as exc:
        b.complete(conv(), EVALUATION_PARAMS)
    assert exc.value.retries == 2


def test_429_exhaustion_is_rate_limit_error():
    b, vc = remote(lambda req: httpx.Response(429), max_retries=3)
    with pytest.raises(RateLimitExhausted):
        b.complete(conv(), EVALUATION_PARAMS)
    assert vc.sleeps == [1.0, 2.0, 4.0]


def test_auth_failure_not_retried():
    calls = []

    def handler(req):
        calls.append(req)
        return httpx.Response(401)

    b, _ = remote(handler)
    with pytest.raises(AuthError):
        b.complete(conv(), EVALUATION_PARAMS)
    assert len(calls) == 1


def test_missing_credential():
    b, _ = remote(lambda req: httpx.Response(200, json=ok_body("x")), env={})
    with pytest.raises(AuthError, match="OPENAI_API_KEY"):
        b.complete(conv(), EVALUATION_PARAMS)


def test_malformed_reply():
    b, _ = remote(lambda req: httpx.Response(200, json={"unexpected": 1}))
    with pytest.raises(MalformedReply):
        b.complete(conv(), EVALUATION_PARAMS)


def test_request_body_shape():
    seen = {}

    def handler(req):
        seen["body"] = json.loads(req.content)
        seen["auth"] = req.headers["authorization"]
        return httpx.Response(200, json=ok_body("ok"))

    b, _ = remote(handler)
    b.complete(conv(), TILENSE_PARAMS)
    body = seen["body"]
    assert seen["auth"] == "Bearer sk-test"
    assert "seed" not in body  # seedless params drop the key
    assert body["max_tokens"] == 300
    parts = body["messages"][0]["content"]
    assert parts[0] == {"type": "text", "text": "What is this image?"}
    assert parts[1]["image_url"]["url"].startswith("data:image/png;base64,")


@pytest.mark.parametrize("name", ["openai_gpt4.json", "anthropic_claude3_opus.json", "google_gemini15_pro.json"])
def test_shipped_configs_build_requests(name):
    cfg = load_backend_config(CONFIG_DIR / name)
    b = RemoteBackend.from_config(cfg, env={cfg["auth_env"]: "k"})
    body = b.build_request(conv().then(Turn("reply", role="assistant"), Turn("next?")), EVALUATION_PARAMS)
    assert json.dumps(body)


def test_fill_template():
    tpl = {"a": "$x", "b": "pre-$y", "c": ["$x"], "d": "$none"}
    assert fill_template(tpl, {"x": 3, "y": "z", "none": None}) == {"a": 3, "b": "pre-z", "c": [3]}


def test_rate_limiter_virtual_clock():
    vc = VirtualClock()
    lim = RateLimiter(3, period=60.0, clock=vc.clock, sleep=vc.sleep)
    grants = [lim.acquire() for _ in range(7)]
    assert grants == [0, 0, 0, 60, 60, 60, 120]
    # No 60 s window holds more than 3 grants.
    for g in grants:
        assert sum(g <= h < g + 60 for h in grants) <= 3


def test_cache_hit_for_seeded_params(tmp_path):
    cache = ResponseCache(tmp_path)
    b = MockBackend(default="a polyp")
    first = cached_complete(cache, b, conv(), EVALUATION_PARAMS)
    second = cached_complete(cache, b, conv(), EVALUATION_PARAMS)
    assert not first.cache_hit and second.cache_hit
    assert second.raw_text == first.raw_text
    assert b.call_count == 1


def test_cache_bypassed_without_seed(tmp_path):
    cache = ResponseCache(tmp_path)
    b = MockBackend(default="a polyp")
    cached_complete(cache, b, conv(), TILENSE_PARAMS)
    cached_complete(cache, b, conv(), TILENSE_PARAMS)
    assert b.call_count == 2
    cached_complete(cache, b, conv(), TILENSE_PARAMS, replay=True)
    assert cached_complete(cache, b, conv(), TILENSE_PARAMS, replay=True).cache_hit
    assert b.call_count == 3


def test_truncated_cache_entry_is_a_miss(tmp_path, caplog):
    cache = ResponseCache(tmp_path)
    b = MockBackend(default="a polyp")
    r = cached_complete(cache, b, conv(), EVALUATION_PARAMS)
    path = cache.path(r.request_digest)
    path.write_text(path.read_text()[:10])
    with caplog.at_level(logging.WARNING):
        again = cached_complete(cache, b, conv(), EVALUATION_PARAMS)
    assert not again.cache_hit and again.raw_text == "a polyp"
    assert "unusable" in caplog.text
    assert b.call_count == 2


def test_converse_threads_replies():
    seen = []

    def responder(c, params):
        seen.append([t.role for t in c.turns])
        return f"reply {len(seen)}"

    b = MockBackend(responder=responder)
    two = conv().then(Turn("What is the pathology class?"))
    out = converse(b, two, EVALUATION_PARAMS)
    assert [r.raw_text for r in out] == ["reply 1", "reply 2"]
    assert seen == [["user"], ["user", "assistant", "user"]]


def test_ledger_file(tmp_path):
    ledger = RunLedger(tmp_path / "l.jsonl")
    b = MockBackend(default="x", ledger=ledger)
    b.complete(conv(), EVALUATION_PARAMS)
    rows = RunLedger.read(tmp_path / "l.jsonl")
    assert len(rows) == 1 and rows[0]["status"] == "ok" and rows[0]["retries"] == 0


def test_load_backend_mock():
    assert load_backend("mock").complete(conv(), EVALUATION_PARAMS).raw_text


def test_params_validation():
    with pytest.raises(ValueError):
        GenerationParams(temperature=-1)
