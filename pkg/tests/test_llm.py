import json
import logging
import threading
import time
from pathlib import Path

import httpx
import pytest
from hypothesis import given, strategies as st

from recknow.corpus import RankingTask
from recknow.errors import CacheMiss, ConfigError, GatewayError, RateLimited, Timeout
from recknow.knowledge import KnowledgePack
from recknow.llm import (
    CompletionConfig, Gateway, RankedList, ReplayCache, cache_key, extract_array, mock_oracle_rank,
    normalize_title, parse_ranking, serialize_ranking, summarize_then_rank, token_overlap,
)
from recknow.prompts import RenderedPrompt

CASES = json.loads((Path(__file__).parent / "fixtures" / "parser_cases.json").read_text(encoding="utf-8"))
SECRET = "sk-test-very-secret-value"
TITLES20 = [f"Movie Number {k} ({1980 + k})" for k in range(20)]


def task_of(titles, user="u1"):
    return RankingTask(user, ("h1",), tuple(titles), 0)


def prompt(text="rank these", task=None):
    return RenderedPrompt(text, "u1", "none", "none", 3, task)


def reply(content):
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def http_gateway(handler, tmp_path=None, **cfg):
    sleeps = []
    config = CompletionConfig(endpoint="https://llm.test/v1/chat/completions", **cfg)
    gw = Gateway(config, "http", tmp_path, transport=httpx.MockTransport(handler), sleep=sleeps.append,
                 environ={"OPENAI_API_KEY": SECRET})
    return gw, sleeps


# ------------------------------------------------------------------ parsing

@pytest.mark.parametrize("case", CASES["cases"], ids=[c["name"] for c in CASES["cases"]])
def test_adversarial_parser_fixture(case):
    task = task_of(CASES["candidates"])
    got = parse_ranking(case["raw"], task)
    assert list(got.order) == case["order"]
    for key, value in case["report"].items():
        assert got.parse_report[key] == value, key
    assert sorted(got.order) == list(range(20))
    rep = got.parse_report
    assert rep["matched"] + rep["fuzzy"] + rep["missing"] == 20


def test_reversed_twenty():
    task = task_of(TITLES20)
    got = parse_ranking(json.dumps(TITLES20[::-1]), task)
    assert list(got.order) == list(range(19, -1, -1))
    assert got.parse_report["matched"] == 20


def test_two_missing_appended_in_original_order():
    task = task_of(TITLES20)
    shown = [t for k, t in enumerate(TITLES20) if k not in (3, 11)][::-1]
    got = parse_ranking(json.dumps(shown), task)
    assert got.parse_report["matched"] == 18 and got.parse_report["missing"] == 2
    assert list(got.order[-2:]) == [3, 11]


@given(st.text(max_size=300))
def test_any_text_gives_a_permutation(raw):
    got = parse_ranking(raw, task_of(TITLES20))
    assert sorted(got.order) == list(range(20))


@given(st.lists(st.sampled_from(TITLES20 + ["Nope", "movie number 3", "MOVIE NUMBER 7 (1987)"]), max_size=30))
def test_parse_is_idempotent(names):
    task = task_of(TITLES20)
    first = parse_ranking(json.dumps(names), task)
    again = parse_ranking(serialize_ranking(first, task), task)
    assert again.order == first.order
    assert sorted(first.order) == list(range(20))


def test_normalisation_helpers():
    assert normalize_title("  The   Heat (1995) ") == "the heat"
    assert token_overlap("Toy Story", "toy story (1995)") == 1.0
    assert token_overlap("Toy", "Toy Story") == 0.5
    assert token_overlap("", "x") == 0.0
    assert extract_array('x ["a"] y') == ["a"]
    assert extract_array("nothing") is None


def test_ranked_list_helpers():
    task = task_of(["a", "b", "c"])
    r = RankedList((2, 0, 1), {"matched": 3})
    assert r.rank_of(0) == 2 and r.items(task) == ["c", "a", "b"]
    assert RankedList.from_dict(r.to_dict()) == r


# --------------------------------------------------------------- mock oracle

def test_mock_oracle_none_keeps_order():
    task = task_of(["a", "b", "c"])
    assert json.loads(mock_oracle_rank(task, KnowledgePack("none"))) == ["a", "b", "c"]


def test_mock_oracle_follows_u2i():
    task = task_of(["a", "b", "c"])
    pack = KnowledgePack("his_cand_u2i", u2i_list=[("c", 3.0), ("a", 2.0), ("b", 1.0)])
    assert json.loads(mock_oracle_rank(task, pack, str.upper)) == ["C", "A", "B"]


def test_mock_oracle_max_anchor_score():
    task = task_of(["a", "b", "c", "d"])
    pack = KnowledgePack("his_cand_i2i", [("x", [("b", 0.4), ("c", 0.2)]), ("y", [("c", 0.9), ("d", 0.4)])])
    # max scores: c 0.9, b 0.4, d 0.4 (b first by original order), a unscored
    assert json.loads(mock_oracle_rank(task, pack)) == ["c", "b", "d", "a"]


def test_mock_backend_reads_prompt_task():
    task = task_of(["a", "b"])
    gw = Gateway(backend="mock_oracle")
    pack = KnowledgePack("his_cand_u2i", u2i_list=[("b", 1.0), ("a", 0.0)])
    assert json.loads(gw.complete(prompt(task=task), pack)) == ["b", "a"]
    with pytest.raises(ConfigError):
        gw.complete(prompt())


# ----------------------------------------------------------------- http path

def test_http_request_shape_and_cache_write(tmp_path):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers["authorization"]
        return httpx.Response(200, json=reply('["a"]'))

    gw, sleeps = http_gateway(handler, tmp_path, model="m1")
    assert gw.complete(prompt("hello")) == '["a"]'
    assert seen["body"]["model"] == "m1" and seen["body"]["temperature"] == 0.0
    assert seen["body"]["messages"] == [{"role": "user", "content": "hello"}]
    assert seen["auth"] == f"Bearer {SECRET}"
    assert sleeps == []
    record = json.loads((tmp_path / f"{cache_key('m1', 0.0, 'hello')}.json").read_text())
    assert set(record) == {"prompt_sha", "response_text", "model", "timestamp"}
    assert SECRET not in json.dumps(record)


def test_retries_with_exponential_backoff():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(429) if len(calls) < 3 else httpx.Response(200, json=reply("ok"))

    gw, sleeps = http_gateway(handler)
    assert gw.complete(prompt()) == "ok"
    assert sleeps == [1.0, 2.0]


@pytest.mark.parametrize("status,exc", [(429, RateLimited), (503, GatewayError)])
def test_retries_exhausted(status, exc):
    gw, sleeps = http_gateway(lambda r: httpx.Response(status))
    with pytest.raises(exc):
        gw.complete(prompt())
    assert sleeps == [1.0, 2.0, 4.0, 8.0]


def test_timeout_after_retries():
    def handler(request):
        raise httpx.ReadTimeout("slow", request=request)

    gw, sleeps = http_gateway(handler, max_attempts=2)
    with pytest.raises(Timeout):
        gw.complete(prompt())
    assert sleeps == [1.0]


def test_client_error_is_not_retried():
    gw, sleeps = http_gateway(lambda r: httpx.Response(400, text="bad request"))
    with pytest.raises(GatewayError):
        gw.complete(prompt())
    assert sleeps == []


def test_bad_response_shape():
    gw, _ = http_gateway(lambda r: httpx.Response(200, json={"nope": 1}))
    with pytest.raises(GatewayError):
        gw.complete(prompt())


def test_missing_key_names_variable_only():
    gw = Gateway(CompletionConfig(api_key_env="MY_KEY"), "http",
                 transport=httpx.MockTransport(lambda r: httpx.Response(200, json=reply("x"))), environ={})
    with pytest.raises(ConfigError, match="MY_KEY"):
        gw.complete(prompt())


def test_key_never_logged(caplog):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500) if len(calls) < 3 else httpx.Response(200, json=reply("ok"))

    gw, _ = http_gateway(handler)
    with caplog.at_level(logging.DEBUG):
        gw.complete(prompt())
        try:
            http_gateway(lambda r: httpx.Response(401, text="denied"))[0].complete(prompt())
        except GatewayError as exc:
            assert SECRET not in str(exc)
    assert caplog.records
    assert SECRET not in caplog.text


def test_concurrency_limit_is_respected():
    state = {"now": 0, "peak": 0}
    lock = threading.Lock()

    def handler(request):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.02)
        with lock:
            state["now"] -= 1
        return httpx.Response(200, json=reply(json.loads(request.content)["messages"][0]["content"]))

    gw, _ = http_gateway(handler, concurrency=3)
    prompts = [prompt(f"p{k}") for k in range(15)]
    out = gw.complete_many(prompts)
    assert out == [f"p{k}" for k in range(15)]
    assert 1 <= state["peak"] <= 3


# ------------------------------------------------------------------ replay

def test_replay_hit_is_byte_identical(tmp_path):
    gw, _ = http_gateway(lambda r: httpx.Response(200, json=reply('["Heat (1995)"]\n')), tmp_path)
    first = gw.complete(prompt("q"))
    replay = Gateway(CompletionConfig(), "replay", tmp_path)
    assert replay.complete(prompt("q")) == first
    assert replay.complete(prompt("q")) == first


def test_replay_miss(tmp_path):
    replay = Gateway(CompletionConfig(), "replay", tmp_path)
    with pytest.raises(CacheMiss):
        replay.complete(prompt("never seen"))
    out = replay.complete_many([prompt("a"), prompt("b")])
    assert all(isinstance(x, CacheMiss) for x in out)


def test_cache_key_depends_on_model_temperature_prompt():
    base = cache_key("m", 0.0, "p")
    assert base != cache_key("m2", 0.0, "p") != cache_key("m", 0.5, "p")
    assert base != cache_key("m", 0.0, "p ")
    assert base == cache_key("m", 0, "p")


def test_concurrent_cache_writes(tmp_path):
    cache = ReplayCache(tmp_path)
    threads = [threading.Thread(target=cache.put, args=(f"k{k % 3}", "p", f"r{k}", "m")) for k in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["k0.json", "k1.json", "k2.json"]
    assert cache.get("k0").startswith("r")


def test_config_validation():
    with pytest.raises(ConfigError):
        CompletionConfig(temperature=-0.1)
    with pytest.raises(ConfigError):
        CompletionConfig(max_attempts=0)
    with pytest.raises(ConfigError):
        Gateway(backend="carrier_pigeon")
    with pytest.raises(ConfigError):
        Gateway(backend="replay")


# ---------------------------------------------------------- two-call ranking

def test_summarize_then_rank():
    contents = []

    def handler(request):
        text = json.loads(request.content)["messages"][0]["content"]
        contents.append(text)
        if len(contents) == 1:
            return httpx.Response(200, json=reply("Likes crime dramas."))
        return httpx.Response(200, json=reply('["b", "a"]'))

    gw, _ = http_gateway(handler)
    task = RankingTask("u1", ("h",), ("a", "b"), 0)
    ranked = summarize_then_rank(gw, task)
    assert list(ranked.order) == [1, 0]
    assert "[h]" in contents[0]
    assert "Likes crime dramas." in contents[1] and "[a, b]" in contents[1]
