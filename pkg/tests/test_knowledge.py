"""Prompts, backends, caching, report normalization and text encoding."""

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from knowsurv.knowledge import (
    PBK_FIXTURES,
    BackendError,
    FixtureBackend,
    HashedTextEmbedder,
    HttpBackend,
    ResponseCache,
    build_pbk_prompt,
    cached_complete,
    encode_knowledge,
    generate_pbk,
    normalize_report,
    refine_report,
    tokenize,
)

# ------------------------------------------------------------------- prompts


def test_pbk_prompt_pathology_exact():
    assert build_pbk_prompt("BRCA", "pathology") == (
        "For patients diagnosed with BRCA, what pathology image features "
        "indicate that the patient is at high or low risk? "
        "Please describe these features in 100 words."
    )


def test_pbk_prompt_genomic_exact():
    assert build_pbk_prompt("BRCA", "genomic") == (
        "For patients diagnosed with BRCA, what genomic data features "
        "indicate that the patient is at high or low risk? "
        "Please describe these features in 100 words."
    )


def test_pbk_prompt_rejects_bad_args():
    with pytest.raises(ValueError):
        build_pbk_prompt("", "pathology")
    with pytest.raises(ValueError):
        build_pbk_prompt("BRCA", "radiology")


def test_pbk_prompt_pure_function():
    a = build_pbk_prompt("LUAD", "pathology")
    b = build_pbk_prompt("LUAD", "pathology")
    assert a == b


# ------------------------------------------------------------------ fixtures


def test_fixture_backend_committed_texts():
    backend = FixtureBackend()
    p1, g1 = generate_pbk("LUAD", backend)
    p2, g2 = generate_pbk("LUAD", FixtureBackend())
    assert (p1, g1) == (p2, g2)
    assert p1 == PBK_FIXTURES["LUAD"]["pathology"]
    assert g1 == PBK_FIXTURES["LUAD"]["genomic"]
    assert all(ct in PBK_FIXTURES for ct in ("BRCA", "LUAD", "UCEC", "LUSC", "KIRC"))


def test_fixture_backend_unknown_type_deterministic():
    backend = FixtureBackend()
    p1, g1 = generate_pbk("SYNT", backend)
    p2, g2 = generate_pbk("SYNT", FixtureBackend())
    assert (p1, g1) == (p2, g2)
    assert p1 and g1


# ------------------------------------------------------------------- caching


def test_cache_hit_skips_backend(tmp_path):
    backend = FixtureBackend()
    cache = ResponseCache(tmp_path)
    generate_pbk("KIRC", backend, cache)
    assert backend.request_count == 2
    generate_pbk("KIRC", backend, cache)
    assert backend.request_count == 2  # warm cache: zero new requests
    # fresh and cached responses byte-identical
    fresh = FixtureBackend()
    assert generate_pbk("KIRC", fresh, None) == generate_pbk("KIRC", backend, cache)


def test_cache_key_depends_on_backend_id(tmp_path):
    prompt = build_pbk_prompt("BRCA", "pathology")
    k1 = ResponseCache.key_for({"backend": "fixture:v1", "prompt": prompt})
    k2 = ResponseCache.key_for({"backend": "http:gpt@url", "prompt": prompt})
    assert k1 != k2
    cache = ResponseCache(tmp_path)
    cached_complete(FixtureBackend(), prompt, cache)
    files = list(tmp_path.iterdir())
    assert len(files) == 1 and files[0].stem == k1


# ---------------------------------------------------------- report refinement


UNIFORM = "Diagnosis: invasive carcinoma\nGrade: 3 of 3\nMargins: negative"


def test_normalize_uniform_report_unchanged():
    assert normalize_report(UNIFORM) == UNIFORM


def test_normalize_idempotent():
    messy = "  margins:  negative \n\n DIAGNOSIS:   invasive   carcinoma\ngrade: 3 of 3"
    once = normalize_report(messy)
    assert normalize_report(once) == once


def test_normalize_reorders_shuffled_headers():
    shuffled = "Stage: pT2\nDiagnosis: adenocarcinoma\nHistology: acinar"
    out = normalize_report(shuffled)
    assert out.splitlines() == [
        "Diagnosis: adenocarcinoma",
        "Histology: acinar",
        "Stage: pT2",
    ]


def test_refine_report_fixture_mode(tmp_path):
    backend = FixtureBackend()
    cache = ResponseCache(tmp_path)
    out = refine_report("grade: 3\ndiagnosis: carcinoma", backend, cache)
    assert out == "Diagnosis: carcinoma\nGrade: 3"
    assert refine_report("grade: 3\ndiagnosis: carcinoma", backend, cache) == out
    with pytest.raises(ValueError):
        refine_report("   ", backend, cache)


# -------------------------------------------------------------- http backend


class _Handler(BaseHTTPRequestHandler):
    fail_first = 0
    requests = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append(
            {"body": body, "auth": self.headers.get("Authorization")}
        )
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(500)
            self.end_headers()
            return
        prompt = body["messages"][0]["content"]
        reply = {"choices": [{"message": {"content": f"reply to: {prompt[:24]}"}}]}
        raw = json.dumps(reply).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def log_message(self, *args):
        pass


@pytest.fixture()
def http_server():
    _Handler.fail_first = 0
    _Handler.requests = []
    server = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}", _Handler
    server.shutdown()
    thread.join()


def test_http_backend_request_response(http_server, monkeypatch, tmp_path):
    url, handler = http_server
    monkeypatch.setenv("KNOWSURV_LLM_TOKEN", "sekrit")
    backend = HttpBackend(url=url, model="test-model", backoff=0.01)
    cache = ResponseCache(tmp_path)
    text = cached_complete(backend, "hello there", cache)
    assert text == "reply to: hello there"
    req = handler.requests[0]
    assert req["body"]["model"] == "test-model"
    assert req["body"]["messages"] == [{"role": "user", "content": "hello there"}]
    assert req["auth"] == "Bearer sekrit"
    # cached second call: no extra HTTP request
    assert cached_complete(backend, "hello there", cache) == text
    assert len(handler.requests) == 1


def test_http_backend_retries_then_succeeds(http_server):
    url, handler = http_server
    handler.fail_first = 2
    backend = HttpBackend(url=url, model="m", backoff=0.01)
    assert backend.complete("x") == "reply to: x"
    assert backend.request_count == 3


def test_http_backend_fails_after_bounded_retries(http_server):
    url, handler = http_server
    handler.fail_first = 10
    backend = HttpBackend(url=url, model="m", max_attempts=3, backoff=0.01)
    with pytest.raises(BackendError, match="after 3 attempts"):
        backend.complete("x")
    assert backend.request_count == 3


# ----------------------------------------------------------------- tokenizer


def test_tokenize_words_and_punctuation():
    assert tokenize("High-grade tumor, stage II.") == [
        "high", "-", "grade", "tumor", ",", "stage", "ii", ".",
    ]


def test_embedder_position_independent():
    emb = HashedTextEmbedder(d_k=16, seed=0)
    a = emb.encode(["necrosis", "tumor", "necrosis"])
    assert np.array_equal(a[0], a[2])
    assert not np.array_equal(a[0], a[1])
    # independent instance, same seed: identical vectors
    b = HashedTextEmbedder(d_k=16, seed=0).encode(["necrosis"])
    assert np.array_equal(a[0], b[0])
    # different seed: different table
    c = HashedTextEmbedder(d_k=16, seed=1).encode(["necrosis"])
    assert not np.array_equal(a[0], c[0])


# ----------------------------------------------------------- encode_knowledge


def test_encode_single_word():
    seq = encode_knowledge("tumor", "", "", max_tokens=8,
                           embedder=HashedTextEmbedder(4, 0), allow_empty=False)
    assert seq.n_tokens == 1
    assert seq.embeddings.shape == (1, 4)
    assert seq.source_spans["report"] == (0, 1)


def test_encode_truncation_keeps_report_first():
    emb = HashedTextEmbedder(4, 0)
    seq = encode_knowledge("a b c d", "e f g", "h i", max_tokens=6, embedder=emb)
    assert seq.n_tokens == 6
    assert seq.tokens == ["a", "b", "c", "d", "e", "f"]
    assert seq.source_spans["report"] == (0, 4)  # all report tokens retained
    assert seq.source_spans["pbk_pathology"] == (4, 6)
    assert seq.source_spans["pbk_genomic"] == (6, 6)


def test_encode_deterministic():
    emb = HashedTextEmbedder(8, 0)
    s1 = encode_knowledge("tumor necrosis seen", "risk", "genes", embedder=emb)
    s2 = encode_knowledge("tumor necrosis seen", "risk", "genes",
                          embedder=HashedTextEmbedder(8, 0))
    assert s1.tokens == s2.tokens
    assert np.array_equal(s1.embeddings, s2.embeddings)


def test_encode_empty_errors_outside_ablation():
    with pytest.raises(ValueError, match="ablation"):
        encode_knowledge("", "", "", embedder=HashedTextEmbedder(4, 0))
    seq = encode_knowledge("", "", "", embedder=HashedTextEmbedder(4, 0),
                           allow_empty=True)
    assert seq.n_tokens == 0
