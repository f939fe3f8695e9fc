"""Chat service: replies, feedback loop, journal replay, HTTP endpoints."""

import json

import numpy as np
import pytest

from fedbot.chat import BadRequest, ChatService, NotFound, NotReady, serve_chat
from fedbot.client import FederatedClient
from fedbot.data import Pair
from fedbot.errors import ConfigError
from fedbot.model import init_weights
from fedbot.protocol import RoundResult

from conftest import make_copy_pairs, tiny_config, word_vocab

try:
    import httpx
except ImportError:
    httpx = None


@pytest.fixture()
def setup():
    vocab = word_vocab(12)
    config = tiny_config(vocab_size=len(vocab), dropout=0.0,
                         attention_dropout=0.0, activation_dropout=0.0)
    weights = init_weights(config, seed=0)
    return vocab, config, weights


def _result(weights, t=1, **extra):
    base = dict(t=t, n_received=2, mean_train_acc=40.0, mean_val_acc=35.0,
                mean_train_loss=1.5, mean_val_loss=1.7, weights=weights)
    base.update(extra)
    return RoundResult(**base)


class TestChatService:
    def test_vocab_size_must_match(self, setup):
        vocab, _, _ = setup
        bad = tiny_config(vocab_size=len(vocab) + 3)
        with pytest.raises(ConfigError, match="vocabulary"):
            ChatService(bad, vocab)

    def test_not_ready_without_weights(self, setup):
        vocab, config, _ = setup
        service = ChatService(config, vocab)
        with pytest.raises(NotReady):
            service.chat("hello")

    def test_chat_reply(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        out = service.chat("w1 w2 w3")
        assert set(out) == {"message_id", "reply", "round"}
        assert isinstance(out["reply"], str)
        assert out["round"] == 0
        assert len(out["message_id"]) == 12

    def test_chat_rejects_blank(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        for bad in ("", "   ", None, 42):
            with pytest.raises(BadRequest):
                service.chat(bad)

    def test_round_result_updates_model_and_metrics(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab)
        service.on_round_result(_result(weights, t=1))
        service.on_round_result(_result(weights, t=2, global_acc=50.0, global_loss=1.0))
        out = service.chat("w1")
        assert out["round"] == 2
        rows = service.metrics()
        assert [r["t"] for r in rows] == [1, 2]
        assert rows[1]["global_acc"] == pytest.approx(50.0)
        assert rows[0]["global_acc"] is None

    def test_feedback_unknown_id(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        with pytest.raises(NotFound):
            service.feedback("nope", True)

    def test_feedback_without_client(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        out = service.chat("w1 w2")
        result = service.feedback(out["message_id"], correct=True)
        assert result["recorded"] is True
        assert result["n_k"] is None

    def test_corrected_response_feeds_client(self, setup):
        vocab, config, weights = setup
        pairs = make_copy_pairs(5, [f"w{i}" for i in range(12)], seed=0)
        client = FederatedClient("client_00", pairs, [], vocab, config)
        service = ChatService(config, vocab, weights=weights, feedback_client=client)
        out = service.chat("w1 w2")
        result = service.feedback(out["message_id"], correct=False,
                                  corrected_response="w2 W1 @someone")
        assert result["n_k"] == 6
        assert client.n_k == 6
        assert client._pending[0].response == "w2 w1 <user>"
        assert client._pending[0].query == "w1 w2"

    def test_feedback_last_write_wins(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        out = service.chat("w1")
        service.feedback(out["message_id"], correct=False)
        service.feedback(out["message_id"], correct=True)
        assert service._messages[out["message_id"]]["feedback"]["correct"] is True

    def test_degraded_status_without_combiner(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights)
        service.chat("w1")
        status = service.federation_status()
        assert status["degraded"] is True
        assert status["messages"] == 1

    def test_unreachable_combiner_degrades(self, setup):
        vocab, config, weights = setup
        service = ChatService(config, vocab, weights=weights,
                              combiner_status_url="http://127.0.0.1:1/federation/status")
        assert service.federation_status()["degraded"] is True


class TestJournal:
    def test_chat_and_feedback_replayed(self, setup, tmp_path):
        vocab, config, weights = setup
        journal = tmp_path / "journal.jsonl"
        service = ChatService(config, vocab, weights=weights, journal_path=str(journal))
        out = service.chat("w1 w2")
        service.feedback(out["message_id"], correct=False, corrected_response="w3 w4")

        pairs = make_copy_pairs(4, [f"w{i}" for i in range(12)], seed=0)
        client = FederatedClient("client_00", pairs, [], vocab, config)
        revived = ChatService(config, vocab, weights=weights,
                              feedback_client=client, journal_path=str(journal))
        assert out["message_id"] in revived._messages
        assert revived._messages[out["message_id"]]["feedback"]["correct"] is False
        # the corrected pair flows back into the client's silo on replay
        assert client.n_k == 5

    def test_journal_stores_normalized_text_only(self, setup, tmp_path):
        vocab, config, weights = setup
        journal = tmp_path / "journal.jsonl"
        service = ChatService(config, vocab, weights=weights, journal_path=str(journal))
        service.chat("Hello @Support http://x.y w1")
        raw = journal.read_text()
        assert "@Support" not in raw
        assert "http://x.y" not in raw
        assert "<user>" in raw and "<url>" in raw

    def test_corrupt_lines_skipped(self, setup, tmp_path):
        vocab, config, weights = setup
        journal = tmp_path / "journal.jsonl"
        journal.write_text('{"type":"chat","id":"abc","query":"w1","reply":"w2"}\n{nonsense\n')
        service = ChatService(config, vocab, weights=weights, journal_path=str(journal))
        assert "abc" in service._messages


@pytest.mark.skipif(httpx is None, reason="httpx not installed")
class TestHttp:
    @pytest.fixture()
    def server(self, setup):
        vocab, config, weights = setup
        pairs = make_copy_pairs(5, [f"w{i}" for i in range(12)], seed=0)
        client = FederatedClient("client_00", pairs, [], vocab, config)
        service = ChatService(config, vocab, weights=weights, feedback_client=client)
        httpd = serve_chat(service, port=0)
        base = f"http://127.0.0.1:{httpd.server_address[1]}"
        yield base, service
        httpd.shutdown()
        httpd.server_close()

    def test_chat_and_feedback_flow(self, server):
        base, _ = server
        reply = httpx.post(f"{base}/chat", json={"message": "w1 w2"})
        assert reply.status_code == 200
        message_id = reply.json()["message_id"]
        fb = httpx.post(f"{base}/feedback", json={
            "message_id": message_id, "correct": False, "corrected_response": "w5 w6",
        })
        assert fb.status_code == 200
        assert fb.json()["n_k"] == 6

    def test_error_mapping(self, server):
        base, _ = server
        assert httpx.post(f"{base}/chat", json={"message": ""}).status_code == 400
        assert httpx.post(f"{base}/chat", content=b"{bad json").status_code == 400
        assert httpx.post(f"{base}/feedback", json={"message_id": "zz"}).status_code == 404
        assert httpx.post(f"{base}/nothing", json={}).status_code == 404
        assert httpx.get(f"{base}/unknown").status_code == 404

    def test_not_ready_maps_to_503(self, setup):
        vocab, config, _ = setup
        service = ChatService(config, vocab)
        httpd = serve_chat(service, port=0)
        base = f"http://127.0.0.1:{httpd.server_address[1]}"
        try:
            assert httpx.post(f"{base}/chat", json={"message": "w1"}).status_code == 503
        finally:
            httpd.shutdown()
            httpd.server_close()

    def test_metrics_and_health(self, server):
        base, service = server
        service.on_round_result(_result(init_weights(service.config, seed=0), t=1))
        rows = httpx.get(f"{base}/metrics").json()["rows"]
        assert rows and rows[0]["t"] == 1
        assert httpx.get(f"{base}/healthz").json() == {"ok": True}
        status = httpx.get(f"{base}/federation/status").json()
        assert status["degraded"] is True

    def test_cors_headers(self, server):
        base, _ = server
        preflight = httpx.options(f"{base}/chat")
        assert preflight.status_code == 204
        assert preflight.headers["access-control-allow-origin"] == "*"
        reply = httpx.get(f"{base}/healthz")
        assert reply.headers["access-control-allow-origin"] == "*"
