import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from uab.backends import (
    BackendError,
    BackendRequest,
    BetaLaw,
    FixedProbs,
    HttpBackend,
    HttpBackendConfig,
    JudgeLabel,
    ResponseCache,
    SimulatedBackend,
    SimulatedWorld,
    TwoPointLaw,
    UnknownQuestionError,
    WorldConfig,
    judge_classify,
    simulated_generate,
)
from uab.core import FinishReason, ValidationError
from uab.signals import anll, score_to_prob


def make_world(m=6, sigma=0.0, rho=0.0, seed=11, probs=None, **kw):
    law = FixedProbs(tuple(probs)) if probs is not None else BetaLaw(2, 2)
    return SimulatedWorld(
        WorldConfig(
            m_questions=m,
            prob_law=law,
            signal_noise_sigma=sigma,
            correlation_rho=rho,
            rng_seed=seed,
            **kw,
        )
    )


class TestSimulatedWorld:
    def test_fixed_probs_respected(self):
        world = make_world(m=3, probs=[0.9, 0.5, 0.1])
        assert [world.p_star[q.id] for q in world.questions] == [0.9, 0.5, 0.1]

    def test_fixed_probs_length_mismatch(self):
        with pytest.raises(ValidationError):
            make_world(m=3, probs=[0.9, 0.5])

    def test_two_point_law(self):
        world = SimulatedWorld(
            WorldConfig(m_questions=200, prob_law=TwoPointLaw(0.1, 0.8, 0.5), rng_seed=0)
        )
        values = set(world.p_star.values())
        assert values <= {0.1, 0.8}
        assert len(values) == 2

    def test_question_invariants(self):
        world = make_world(m=10)
        ids = [q.id for q in world.questions]
        assert len(set(ids)) == 10
        for q in world.questions:
            assert q.length_chars == len(q.prompt)
            assert q.gold_answer == world.gold[q.id]


class TestSimulatedBackend:
    def test_certain_question_always_gold(self):
        world = make_world(m=2, probs=[1.0, 1.0])
        backend = SimulatedBackend(world, run_seed=0)
        for s in range(20):
            out = backend.sample_outcome("q00000", s)
            assert world.gold["q00000"] in out.text

    def test_empirical_rate_matches_p_star(self):
        world = make_world(m=1, probs=[0.5])
        backend = SimulatedBackend(world, run_seed=1)
        n = 20000
        gold = world.gold["q00000"]
        hits = sum(gold in backend.sample_outcome("q00000", s).text for s in range(n))
        sigma = 3 * math.sqrt(0.25 / n)
        assert abs(hits / n - 0.5) < sigma

    def test_noiseless_anll_inverts_to_p_star(self):
        world = make_world(m=8, sigma=0.0)
        backend = SimulatedBackend(world, run_seed=2)
        for q in world.questions:
            for s in range(4):
                out = backend.sample_outcome(q.id, s)
                recovered = score_to_prob(anll(out.token_logprobs), world.config.world_temperature)
                assert abs(recovered - world.p_star[q.id]) <= 1e-9

    def test_full_correlation_makes_samples_agree(self):
        # all samples of a question are correct together or incorrect together
        world = make_world(m=12, rho=1.0, probs=None, seed=5)
        backend = SimulatedBackend(world, run_seed=3)
        for q in world.questions:
            gold = world.gold[q.id]
            outcomes = {gold in backend.sample_outcome(q.id, s).text for s in range(8)}
            assert len(outcomes) == 1

    def test_zero_correlation_independence_chi_square(self):
        world = make_world(m=1, probs=[0.5], rho=0.0)
        backend = SimulatedBackend(world, run_seed=4)
        gold = world.gold["q00000"]
        n_pairs = 50000
        table = np.zeros((2, 2))
        for t in range(n_pairs):
            a = gold in backend.sample_outcome("q00000", 2 * t).text
            b = gold in backend.sample_outcome("q00000", 2 * t + 1).text
            table[int(a), int(b)] += 1
        total = table.sum()
        row = table.sum(axis=1)
        col = table.sum(axis=0)
        expected = np.outer(row, col) / total
        stat = ((table - expected) ** 2 / expected).sum()
        assert stat < 6.635  # chi-square df=1 critical value at alpha=0.01

    def test_determinism_and_order_independence(self):
        world = make_world(m=4)
        b1 = SimulatedBackend(world, run_seed=9)
        b2 = SimulatedBackend(world, run_seed=9)
        forward = [b1.sample_outcome("q00001", s).text for s in range(6)]
        backward = [b2.sample_outcome("q00001", s).text for s in reversed(range(6))]
        assert forward == list(reversed(backward))

    def test_different_run_seeds_differ(self):
        world = make_world(m=1, probs=[0.5])
        t1 = [SimulatedBackend(world, run_seed=0).sample_outcome("q00000", s).text for s in range(30)]
        t2 = [SimulatedBackend(world, run_seed=1).sample_outcome("q00000", s).text for s in range(30)]
        assert t1 != t2

    def test_unknown_question(self):
        backend = SimulatedBackend(make_world(m=2), run_seed=0)
        with pytest.raises(UnknownQuestionError):
            backend.sample_outcome("nope", 0)

    def test_generate_counts_samples_and_continues_indices(self):
        world = make_world(m=2)
        backend = SimulatedBackend(world, run_seed=0)
        r1 = backend.generate(BackendRequest("q00000", "prompt", 2, first_sample_index=0))
        r2 = backend.generate(BackendRequest("q00000", "prompt", 3, first_sample_index=2))
        assert backend.generation_samples == 5
        direct = [backend.sample_outcome("q00000", s).text for s in range(5)]
        assert [s.text for s in r1.samples] + [s.text for s in r2.samples] == direct

    def test_simulated_generate_records(self):
        world = make_world(m=2)
        backend = SimulatedBackend(world, run_seed=0)
        records = simulated_generate(backend, "q00001", 3, first_sample_index=1)
        assert [r.sample_index for r in records] == [1, 2, 3]
        for r in records:
            assert r.finish_reason == FinishReason.STOP
            assert len(r.token_logprobs) == 8
            assert all(lp <= 0 for lp in r.token_logprobs)


class TestJudge:
    def test_sim_judge_labels_follow_difficulty(self):
        world = make_world(m=2, probs=[0.9, 0.1])
        backend = SimulatedBackend(world, run_seed=0)
        labels = [judge_classify(q, backend) for q in world.questions]
        assert labels == [JudgeLabel.EASY, JudgeLabel.HARD]
        assert backend.judge_calls == 2
        assert backend.generation_samples == 0

    def test_parsing_rules(self):
        class CannedBackend:
            def __init__(self, text):
                self.text = text

            def generate(self, request):
                from uab.backends import BackendResponse, SampleOutput

                return BackendResponse([SampleOutput(self.text, (), FinishReason.STOP)])

        from uab.core import QuestionRecord

        q = QuestionRecord(id="q1", prompt="??")
        assert judge_classify(q, CannedBackend("easy")) == JudgeLabel.EASY
        assert judge_classify(q, CannedBackend("Hard.")) == JudgeLabel.HARD
        assert judge_classify(q, CannedBackend("I think moderately difficult")) == JudgeLabel.HARD
        assert judge_classify(q, CannedBackend("Easy, definitely")) == JudgeLabel.EASY


class TestResponseCache:
    def test_round_trip(self, tmp_path):
        cache = ResponseCache(tmp_path)
        key = ResponseCache.make_key("http://e", "m", "p", {"temperature": 0.9}, 0)
        payload = {"text": "hello", "token_logprobs": [-0.5], "finish_reason": "stop"}
        cache.put(key, payload)
        assert cache.get(key) == payload

    def test_missing_key_is_miss(self, tmp_path):
        cache = ResponseCache(tmp_path)
        assert cache.get("0" * 64) is None
        assert cache.misses == 1

    def test_corruption_treated_as_miss(self, tmp_path, caplog):
        cache = ResponseCache(tmp_path)
        key = ResponseCache.make_key("e", "m", "p", {}, 1)
        cache.put(key, {"text": "x"})
        (tmp_path / f"{key}.json").write_text("{not json", encoding="utf-8")
        with caplog.at_level(logging.WARNING):
            assert cache.get(key) is None
        assert "treating as miss" in caplog.text

    def test_overwrite_last_write_wins(self, tmp_path, caplog):
        cache = ResponseCache(tmp_path)
        key = ResponseCache.make_key("e", "m", "p", {}, 2)
        cache.put(key, {"text": "first"})
        with caplog.at_level(logging.INFO):
            cache.put(key, {"text": "second"})
        assert cache.get(key)["text"] == "second"
        assert "overwritten" in caplog.text

    def test_key_sensitivity(self):
        base = ("http://e", "m", "prompt", {"temperature": 0.9, "max_tokens": 8}, 0)
        k0 = ResponseCache.make_key(*base)
        assert ResponseCache.make_key("http://e", "m", "prompt", {"temperature": 0.9, "max_tokens": 8}, 1) != k0
        assert ResponseCache.make_key("http://e", "m2", "prompt", {"temperature": 0.9, "max_tokens": 8}, 0) != k0
        # parameter order does not matter
        assert ResponseCache.make_key("http://e", "m", "prompt", {"max_tokens": 8, "temperature": 0.9}, 0) == k0


# ---------------------------------------------------------------------------
# HTTP contract tests against a protocol-compatible local stub
# ---------------------------------------------------------------------------


class _StubState:
    def __init__(self):
        self.fail_statuses = []
        self.with_logprobs = True
        self.requests = []
        self.retry_after = None


def _make_stub_handler(state: _StubState):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, *args):
            pass

        def do_POST(self):
            length = int(self.headers["Content-Length"])
            body = json.loads(self.rfile.read(length))
            state.requests.append((self.path, body))
            if state.fail_statuses:
                status = state.fail_statuses.pop(0)
                self.send_response(status)
                if state.retry_after is not None:
                    self.send_header("Retry-After", str(state.retry_after))
                self.end_headers()
                return
            n = body.get("n", 1)
            choices = []
            for i in range(n):
                choice = {
                    "index": i,
                    "message": {"role": "assistant", "content": f"The answer is \\boxed{{{i}}}."},
                    "finish_reason": "stop",
                }
                if state.with_logprobs and body.get("logprobs"):
                    choice["logprobs"] = {
                        "content": [{"logprob": -0.1 * (i + 1)}, {"logprob": -0.2}]
                    }
                choices.append(choice)
            payload = json.dumps({"choices": choices}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

    return Handler


@pytest.fixture
def stub_server():
    state = _StubState()
    server = ThreadingHTTPServer(("127.0.0.1", 0), _make_stub_handler(state))
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", state
    finally:
        server.shutdown()


def _http_backend(url, cache=None, retries=3):
    cfg = HttpBackendConfig(
        base_url=url, model="stub-model", api_key="k", max_retries=retries,
        backoff_seconds=0.01, timeout_seconds=5.0,
    )
    return HttpBackend(cfg, cache=cache)


class TestHttpBackend:
    def test_logprob_capable_endpoint(self, stub_server):
        url, state = stub_server
        backend = _http_backend(url)
        resp = backend.generate(BackendRequest("q1", "what is 2+2", 3, want_logprobs=True))
        assert len(resp.samples) == 3
        assert not resp.logprobs_missing
        for s in resp.samples:
            assert len(s.token_logprobs) == 2
            assert s.finish_reason == FinishReason.STOP
        path, body = state.requests[-1]
        assert path == "/v1/chat/completions"
        assert body["model"] == "stub-model"
        assert body["messages"] == [{"role": "user", "content": "what is 2+2"}]
        assert body["n"] == 3 and body["logprobs"] is True

    def test_rate_limit_retry_then_success(self, stub_server, caplog):
        url, state = stub_server
        state.fail_statuses = [429, 429]
        state.retry_after = 0.01
        backend = _http_backend(url)
        with caplog.at_level(logging.INFO, logger="uab.backends"):
            resp = backend.generate(BackendRequest("q1", "p", 1))
        assert len(resp.samples) == 1
        assert "after 2 retries" in caplog.text

    def test_retries_exhausted(self, stub_server):
        url, state = stub_server
        state.fail_statuses = [500] * 10
        backend = _http_backend(url, retries=2)
        with pytest.raises(BackendError, match="after 2 retries"):
            backend.generate(BackendRequest("q1", "p", 1))

    def test_missing_logprobs_degrades_with_flag(self, stub_server, caplog):
        url, state = stub_server
        state.with_logprobs = False
        backend = _http_backend(url)
        with caplog.at_level(logging.WARNING, logger="uab.backends"):
            resp = backend.generate(BackendRequest("q1", "p", 2, want_logprobs=True))
        assert resp.logprobs_missing
        assert all(s.token_logprobs == () for s in resp.samples)
        assert "omitted token logprobs" in caplog.text

    def test_cache_replays_byte_identical(self, stub_server, tmp_path):
        url, state = stub_server
        cache = ResponseCache(tmp_path)
        backend = _http_backend(url, cache=cache)
        req = BackendRequest("q1", "cached prompt", 2, want_logprobs=True)
        first = backend.generate(req)
        calls_after_first = len(state.requests)
        second = backend.generate(req)
        assert len(state.requests) == calls_after_first  # served from cache
        assert [s.text for s in first.samples] == [s.text for s in second.samples]
        assert [s.token_logprobs for s in first.samples] == [
            s.token_logprobs for s in second.samples
        ]
        assert cache.hits == 2

    def test_client_error_no_retry(self, stub_server):
        url, state = stub_server
        state.fail_statuses = [404]
        backend = _http_backend(url)
        with pytest.raises(BackendError, match="404"):
            backend.generate(BackendRequest("q1", "p", 1))
        assert len(state.requests) == 1
