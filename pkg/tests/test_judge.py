import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from almlab.errors import DataError, ExternalServiceError, JudgeParseError
from almlab.judge import (
    ChatItem,
    HttpJudgeClient,
    JudgeConfig,
    StubJudgeClient,
    build_messages,
    extract_answers,
    judge_pair,
    judge_pair_detail,
    length_policy,
    load_chat_items,
    load_template,
    parse_scores,
    run_chat_eval,
)

ITEMS = [
    ChatItem("a", "What is playing?", "A violin solo.", "music"),
    ChatItem("b", "Who speaks?", "A woman reading the news.", "speech"),
    ChatItem("c", "What happens?", "Rain on a roof.", "sound"),
]


class TestParsing:
    @pytest.mark.parametrize("reply,want", [("7 9", (7.0, 9.0)), ("8.5 3\nbecause", (8.5, 3.0)), ("\n 10, 1", (10.0, 1.0))])
    def test_ok(self, reply, want):
        assert parse_scores(reply) == want

    @pytest.mark.parametrize("reply", ["", "seven nine", "7", "7 9 3", "0 5", "11 2"])
    def test_fail(self, reply):
        with pytest.raises(JudgeParseError):
            parse_scores(reply)

    def test_template_roundtrip(self):
        msgs = build_messages("q", "first answer", "second\nanswer")
        assert extract_answers(msgs) == ("first answer", "second\nanswer")
        assert "{question}" in load_template() and "{answer_2}" in load_template()


class TestJudgePair:
    def test_mean_of_two(self):
        stub = StubJudgeClient(replies=["5 7", "9 5"])
        assert judge_pair("q", "ref", "cand", stub) == 8.0

    def test_orders_swapped(self):
        seen = []

        def policy(a1, a2):
            seen.append((a1, a2))
            # slot-dependent: first slot scores 1, second slot 2
            return 1.0, 2.0

        stub = StubJudgeClient(policy=policy)
        d = judge_pair_detail("q", "ref", "cand", stub)
        assert seen == [("ref", "cand"), ("cand", "ref")]
        # candidate scored 2 in second slot, then 1 in first slot
        assert d.candidate_scores == (2.0, 1.0) and d.score == 1.5

    def test_retry_once_then_succeed(self):
        stub = StubJudgeClient(replies=["garbled", "5 7", "7 5"])
        assert judge_pair("q", "r", "c", stub) == 7.0
        assert len(stub.calls) == 3

    def test_two_failures_raise(self):
        stub = StubJudgeClient(replies=["nope", "still nope"])
        with pytest.raises(JudgeParseError):
            judge_pair("q", "r", "c", stub)

    def test_order_symmetry(self):
        # symmetric policy: a score depends only on the answer, never its slot
        stub = StubJudgeClient(policy=length_policy)
        a = judge_pair_detail("q", "short", "a much longer answer here", stub)
        b = judge_pair_detail("q", "a much longer answer here", "short", stub)
        assert a.score == sum(b.reference_scores) / 2
        assert b.score == sum(a.reference_scores) / 2


class TestRunChatEval:
    def test_median_of_trial_means(self):
        item = [ITEMS[0]]
        replies = ["5 6.1", "6.1 5", "5 6.3", "6.3 5", "5 5.9", "5.9 5"]
        rep = run_chat_eval(item, {"a": "x"}, StubJudgeClient(replies=replies), trials=3, max_workers=1)
        assert rep.trial_means == pytest.approx([6.1, 6.3, 5.9])
        assert rep.median == pytest.approx(6.1)

    def test_single_trial(self):
        rep = run_chat_eval([ITEMS[0]], {"a": "x"}, StubJudgeClient(replies=["1 4", "6 1"]), trials=1, max_workers=1)
        assert rep.median == rep.trial_means[0] == 5.0

    def test_deterministic_stub(self):
        responses = {"a": "a violin", "b": "someone talks about things", "c": "rain"}
        rep = run_chat_eval(ITEMS, responses, StubJudgeClient(policy=length_policy), trials=3)
        assert rep.trial_means[0] == rep.trial_means[1] == rep.trial_means[2] == rep.median
        assert set(rep.per_category) == {"music", "speech", "sound"}

    def test_parallel_matches_serial(self):
        responses = {"a": "a violin", "b": "talk", "c": "rain falls"}
        ser = run_chat_eval(ITEMS, responses, StubJudgeClient(policy=length_policy), trials=2, max_workers=1)
        par = run_chat_eval(ITEMS, responses, StubJudgeClient(policy=length_policy), trials=2, max_workers=4)
        assert ser.to_dict() == par.to_dict()

    def test_parse_failure_flags_and_continues(self):
        def policy(a1, a2):
            # 0 is outside 1-10, so the reply never parses
            return (0.0, 0.0) if "broken" in (a1, a2) else (6.0, 6.0)

        responses = {"a": "fine", "b": "broken", "c": "ok"}
        rep = run_chat_eval(ITEMS, responses, StubJudgeClient(policy=policy), trials=1, max_workers=1)
        assert rep.flagged and rep.flagged[0]["id"] == "b"
        assert rep.median == 6.0
        assert set(rep.scores[0]) == {"a", "c"}

    def test_missing_response_judged_empty(self):
        stub = StubJudgeClient(policy=length_policy)
        rep = run_chat_eval([ITEMS[0]], {}, stub, trials=1, max_workers=1)
        assert ("A violin solo.", "") in stub.calls
        assert rep.median == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            run_chat_eval(ITEMS, {}, StubJudgeClient(policy=length_policy), trials=0)
        with pytest.raises(DataError):
            run_chat_eval([], {}, StubJudgeClient(policy=length_policy))
        with pytest.raises(DataError):
            ChatItem("x", "q", "r", "noise")

    def test_load_items(self, tmp_path):
        p = tmp_path / "items.jsonl"
        p.write_text(json.dumps({"id": "a", "question": "q", "reference": "r", "category": "speech"}) + "\n\n")
        assert load_chat_items(p)[0].category == "speech"
        p.write_text("{bad\n")
        with pytest.raises(DataError, match="line 1"):
            load_chat_items(p)


class _Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        srv = self.server
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        srv.requests.append((dict(self.headers), body))
        if srv.status != 200:
            self.send_response(srv.status)
            self.end_headers()
            return
        out = json.dumps({"choices": [{"message": {"content": "6 8"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    srv.requests = []
    srv.status = 200
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    yield srv
    srv.shutdown()
    srv.server_close()


class TestHttpClient:
    def _cfg(self, srv, **kw):
        return JudgeConfig(endpoint=f"http://127.0.0.1:{srv.server_port}/v1/chat/completions", backoff=0.0, **kw)

    def test_request_and_auth(self, server, monkeypatch):
        monkeypatch.setenv("JUDGE_API_KEY", "secret")
        client = HttpJudgeClient(self._cfg(server, model="m1"))
        assert client.complete(build_messages("q", "a", "b")) == "6 8"
        headers, body = server.requests[0]
        assert headers["Authorization"] == "Bearer secret"
        assert body["model"] == "m1" and body["temperature"] in (1.0, 2.0)
        assert body["messages"][-1]["role"] == "user"

    def test_cache_hit_avoids_network(self, server, tmp_path):
        msgs = build_messages("q", "a", "b")
        first = HttpJudgeClient(self._cfg(server, cache_dir=str(tmp_path)))
        first.complete(msgs)
        again = HttpJudgeClient(self._cfg(server, cache_dir=str(tmp_path)))
        assert again.complete(msgs) == "6 8"
        assert len(server.requests) == 1

    def test_server_error(self, server):
        server.status = 503
        client = HttpJudgeClient(self._cfg(server, max_retries=2))
        with pytest.raises(ExternalServiceError):
            client.complete(build_messages("q", "a", "b"))
        assert len(server.requests) == 2

    def test_client_error_not_retried(self, server):
        server.status = 401
        client = HttpJudgeClient(self._cfg(server, max_retries=3))
        with pytest.raises(ExternalServiceError):
            client.complete(build_messages("q", "a", "b"))
        assert len(server.requests) == 1

    def test_unreachable(self):
        client = HttpJudgeClient(JudgeConfig(endpoint="http://127.0.0.1:9/x", max_retries=1, timeout=1.0))
        with pytest.raises(ExternalServiceError):
            client.complete(build_messages("q", "a", "b"))
