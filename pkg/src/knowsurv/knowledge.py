"""Knowledge-text pipeline: prompt templating, LLM backends with response
caching, report normalization, tokenization and the hashed embedding
stand-in for a pretrained text encoder.

The fixture backend is fully offline and deterministic so the entire
pipeline (and CI) runs with zero network access; the HTTP backend speaks
a minimal chat-completion JSON protocol for real model swaps.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LLM_TOKEN_ENV = "KNOWSURV_LLM_TOKEN"
DEFAULT_MAX_TOKENS = 512

PBK_PROMPT = (
    "For patients diagnosed with {cancer_type}, what {modality} features "
    "indicate that the patient is at high or low risk? "
    "Please describe these features in 100 words."
)
_MODALITY_PHRASE = {"pathology": "pathology image", "genomic": "genomic data"}

REFINE_INSTRUCTION = (
    "Rewrite the following pathology report into a uniform structure with "
    "sections Diagnosis, Histology, Grade, Stage, Margins, Lymph Nodes, "
    "Comments, keeping all clinical content:\n\n"
)

CANONICAL_HEADERS = (
    "Diagnosis",
    "Histology",
    "Grade",
    "Stage",
    "Margins",
    "Lymph Nodes",
    "Comments",
)


class BackendError(RuntimeError):
    """LLM backend failure (after retries) or malformed response."""


def build_pbk_prompt(cancer_type: str, modality: str) -> str:
    """Render the background-knowledge question for one modality."""
    if not cancer_type:
        raise ValueError("cancer_type must be nonempty")
    if modality not in _MODALITY_PHRASE:
        raise ValueError(f"unknown modality {modality!r}, expected pathology|genomic")
    return PBK_PROMPT.format(
        cancer_type=cancer_type, modality=_MODALITY_PHRASE[modality]
    )


# --------------------------------------------------------------------------
# Response cache: one file per key, key = hex digest of the request payload.
# Writes go through a temp file + rename so concurrent readers never see a
# partial entry (single-writer, many-reader).


class ResponseCache:
    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key_for(payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.txt"

    def get(self, key: str):
        path = self._path(key)
        if path.exists():
            return path.read_text(encoding="utf-8")
        return None

    def put(self, key: str, text: str) -> None:
        path = self._path(key)
        tmp = path.with_suffix(f".tmp.{os.getpid()}")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)


# --------------------------------------------------------------------------
# Backends


class FixtureBackend:
    """Offline deterministic backend shipping committed PBK texts.

    Unknown cancer types get a deterministic generic description so
    synthetic cohorts can run through the same code path.
    """

    kind = "fixture"

    def __init__(self):
        self.backend_id = "fixture:v1"
        self.request_count = 0

    def complete(self, prompt: str) -> str:
        self.request_count += 1
        m = re.fullmatch(
            r"For patients diagnosed with (?P<ct>.+), what (?P<mod>pathology image|"
            r"genomic data) features indicate that the patient is at high or low "
            r"risk\? Please describe these features in 100 words\.",
            prompt,
        )
        if m:
            modality = "pathology" if m.group("mod") == "pathology image" else "genomic"
            fixture = PBK_FIXTURES.get(m.group("ct"))
            if fixture is not None:
                return fixture[modality]
            return _generic_pbk(m.group("ct"), modality)
        if prompt.startswith(REFINE_INSTRUCTION):
            return normalize_report(prompt[len(REFINE_INSTRUCTION):])
        raise BackendError(f"fixture backend has no answer for prompt: {prompt[:80]}...")


class HttpBackend:
    """Chat-completion endpoint client with bounded retries.

    Request:  POST {"model": ..., "messages": [{"role": "user", "content": ...}]}
    Response: {"choices": [{"message": {"content": ...}}]}
    The bearer token is read from the environment (LLM_TOKEN_ENV).
    """

    kind = "http-endpoint"

    def __init__(self, url, model, timeout=60.0, max_attempts=3, backoff=0.5,
                 token_env=LLM_TOKEN_ENV):
        self.url = url
        self.model = model
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.token_env = token_env
        self.backend_id = f"http:{model}@{url}"
        self.request_count = 0

    def complete(self, prompt: str) -> str:
        payload = json.dumps(
            {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_err = None
        for attempt in range(self.max_attempts):
            self.request_count += 1
            try:
                req = urllib.request.Request(self.url, data=payload, headers=headers)
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                return body["choices"][0]["message"]["content"]
            except (urllib.error.URLError, KeyError, IndexError, json.JSONDecodeError,
                    TimeoutError) as err:
                last_err = err
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff * 2**attempt)
        raise BackendError(
            f"backend {self.backend_id} failed after {self.max_attempts} attempts: "
            f"{last_err}"
        )


def cached_complete(backend, prompt: str, cache: ResponseCache | None) -> str:
    """Route one prompt through the cache, hitting the backend at most once."""
    key = None
    if cache is not None:
        key = cache.key_for({"backend": backend.backend_id, "prompt": prompt})
        hit = cache.get(key)
        if hit is not None:
            return hit
    text = backend.complete(prompt)
    if not text or not text.strip():
        raise BackendError(f"backend {backend.backend_id} returned an empty response")
    if cache is not None:
        cache.put(key, text)
    return text


def generate_pbk(cancer_type: str, backend, cache: ResponseCache | None = None):
    """Return (pathology_text, genomic_text) background knowledge."""
    path_text = cached_complete(backend, build_pbk_prompt(cancer_type, "pathology"), cache)
    gen_text = cached_complete(backend, build_pbk_prompt(cancer_type, "genomic"), cache)
    return path_text, gen_text


def refine_report(raw_report: str, backend, cache: ResponseCache | None = None) -> str:
    """Rewrite a raw report into the uniform sectioned structure.

    Fixture mode applies the local deterministic normalization; the HTTP
    backend is asked to do the rewrite. Either way the result is cached.
    """
    if not raw_report or not raw_report.strip():
        raise ValueError("raw report must be nonempty")
    out = cached_complete(backend, REFINE_INSTRUCTION + raw_report, cache)
    if not out.strip():
        raise BackendError("refined report is empty")
    return out


_HEADER_RE = re.compile(
    r"(?i)\b(" + "|".join(h.replace(" ", r"\s+") for h in CANONICAL_HEADERS) + r")\s*:"
)


def _collapse(text: str) -> str:
    return " ".join(text.split())


def normalize_report(raw: str) -> str:
    """Whitespace collapse plus section reordering by the fixed header list.

    Idempotent: already-uniform reports pass through unchanged. Text before
    the first recognized header is kept first; repeated sections merge in
    reading order.
    """
    pieces = _HEADER_RE.split(raw)
    preamble = _collapse(pieces[0])
    sections: dict[str, list[str]] = {}
    for i in range(1, len(pieces), 2):
        header = " ".join(w.capitalize() for w in pieces[i].split())
        body = _collapse(pieces[i + 1]) if i + 1 < len(pieces) else ""
        sections.setdefault(header, []).append(body)
    lines = []
    if preamble:
        lines.append(preamble)
    for header in CANONICAL_HEADERS:
        if header in sections:
            body = " ".join(b for b in sections[header] if b)
            lines.append(f"{header}: {body}")
    return "\n".join(lines)


def _generic_pbk(cancer_type: str, modality: str) -> str:
    if modality == "pathology":
        return (
            f"In {cancer_type}, high-risk pathology features include high nuclear "
            "grade, brisk mitotic activity, tumor necrosis, lymphovascular invasion "
            "and an infiltrative border, while low-risk tumors show well "
            "differentiated morphology, low mitotic counts, pushing borders and "
            "prominent lymphocytic infiltrates."
        )
    return (
        f"In {cancer_type}, high-risk genomic features include TP53 mutation, "
        "high proliferation signatures, widespread copy-number alteration and "
        "loss of tumor suppressors, while low-risk profiles show low mutational "
        "burden, intact cell-cycle checkpoints and favorable expression subtypes."
    )


# --------------------------------------------------------------------------
# Tokenization and the hashed-embedding text encoder stand-in


_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace/punctuation tokenization."""
    return _TOKEN_RE.findall(text.lower())


class HashedTextEmbedder:
    """Deterministic token-to-vector table of width d_k.

    Each token's vector is seeded from a sha256 digest of (seed, token),
    so embeddings depend only on the token string and the seed, never on
    position or call order. Stable across platforms and processes.
    """

    def __init__(self, d_k: int, seed: int = 0):
        if d_k < 1:
            raise ValueError("d_k must be positive")
        self.d_k = d_k
        self.seed = seed
        self._memo: dict[str, np.ndarray] = {}

    def vector(self, token: str) -> np.ndarray:
        vec = self._memo.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.d_k) / np.sqrt(self.d_k)
            self._memo[token] = vec
        return vec

    def encode(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.d_k))
        return np.stack([self.vector(t) for t in tokens])


@dataclass
class KnowledgeSequence:
    """Tokenized merged knowledge text with per-token embeddings.

    source_spans maps each text part to its [start, end) token range
    after truncation.
    """

    tokens: list[str]
    embeddings: np.ndarray
    source_spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)


def encode_knowledge(
    report: str,
    pbk_pathology: str,
    pbk_genomic: str,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    embedder: HashedTextEmbedder | None = None,
    allow_empty: bool = False,
) -> KnowledgeSequence:
    """Merge (report, PBK) into one token sequence and embed it.

    The report comes first and is kept in full before any PBK token
    survives truncation; PBK pathology text precedes PBK genomic text.
    """
    if embedder is None:
        embedder = HashedTextEmbedder(d_k=64)
    parts = [
        ("report", tokenize(report)),
        ("pbk_pathology", tokenize(pbk_pathology)),
        ("pbk_genomic", tokenize(pbk_genomic)),
    ]
    if max_tokens < 1:
        raise ValueError("max_tokens must be positive")
    tokens: list[str] = []
    spans: dict[str, tuple[int, int]] = {}
    for name, part in parts:
        start = len(tokens)
        room = max_tokens - start
        kept = part[: max(room, 0)]
        tokens.extend(kept)
        spans[name] = (start, start + len(kept))
    if not tokens:
        if allow_empty:
            return KnowledgeSequence(tokens=[], embeddings=np.zeros((0, embedder.d_k)),
                                     source_spans=spans)
        raise ValueError("all knowledge texts are empty (only valid under ablation)")
    emb = embedder.encode(tokens)
    if not np.all(np.isfinite(emb)):
        raise ValueError("non-finite token embeddings")
    return KnowledgeSequence(tokens=tokens, embeddings=emb, source_spans=spans)


# --------------------------------------------------------------------------
# Committed offline background-knowledge texts, one pair per cancer type.

PBK_FIXTURES: dict[str, dict[str, str]] = {
    "BRCA": {
        "pathology": (
            "In breast invasive carcinoma, high-risk pathology features include "
            "high histologic grade with marked nuclear pleomorphism, frequent "
            "mitoses, comedo-type necrosis, lymphovascular invasion and extensive "
            "nodal involvement. An infiltrative growth pattern with a scant "
            "stromal lymphocytic response and dense desmoplasia also portends "
            "poor outcome. Low-risk tumors are small, well differentiated, "
            "tubule-forming lesions with low mitotic counts, pushing margins, "
            "absent vascular invasion and brisk tumor-infiltrating lymphocytes. "
            "Hormone-receptor-consistent morphology such as low-grade luminal "
            "architecture suggests an indolent course, whereas medullary-like "
            "sheets without lymphocytes and skin or chest-wall extension signal "
            "aggressive disease."
        ),
        "genomic": (
            "In breast invasive carcinoma, high-risk genomic features include "
            "TP53 mutation, ERBB2 amplification with basal-like expression, high "
            "proliferation scores driven by MKI67 and AURKA, extensive "
            "copy-number instability, and loss of RB1 or PTEN. Elevated "
            "expression of cell-cycle and DNA-repair-deficiency signatures, or "
            "BRCA1/2 inactivation with genomic scarring, marks aggressive "
            "disease. Low-risk profiles show luminal-A expression with high ESR1 "
            "and PGR, low proliferation indices, quiet diploid genomes, few "
            "structural variants and intact checkpoint genes, a pattern "
            "associated with prolonged survival under endocrine therapy."
        ),
    },
    "LUAD": {
        "pathology": (
            "In lung adenocarcinoma, high-risk pathology features include solid "
            "or micropapillary predominant growth, tumor spread through air "
            "spaces, pleural or lymphovascular invasion, necrosis and high "
            "mitotic activity with cribriform architecture. Poorly "
            "differentiated, widely invasive tumors with nodal metastases carry "
            "poor prognosis. Low-risk tumors are lepidic predominant, small and "
            "peripheral with intact elastic layers, minimal invasion, low "
            "nuclear grade and rare mitoses. Abundant stromal lymphocytes and "
            "absence of air-space spread indicate favorable outcome, whereas "
            "sarcomatoid change or extensive desmoplastic stroma indicates "
            "aggressive behavior."
        ),
        "genomic": (
            "In lung adenocarcinoma, high-risk genomic features include TP53 and "
            "KEAP1 co-mutation, SMARCA4 loss, MYC amplification, high tumor "
            "mutational burden with chromosomal instability and proliferative "
            "expression programs. STK11 inactivation with immune-cold expression "
            "also predicts poor outcome. Low-risk profiles harbor targetable "
            "EGFR exon mutations or ALK fusions with otherwise quiet genomes, "
            "low copy-number burden, and expression signatures of terminal "
            "respiratory-unit differentiation such as NKX2-1 and SFTPC, which "
            "associate with longer survival."
        ),
    },
    "UCEC": {
        "pathology": (
            "In uterine corpus endometrial carcinoma, high-risk pathology "
            "features include serous or clear-cell histology, grade 3 "
            "endometrioid morphology, deep myometrial invasion beyond half the "
            "wall, lymphovascular space invasion, cervical stromal involvement "
            "and tumor necrosis. Papillary architecture with marked atypia "
            "signals aggressive disease. Low-risk cases show grade 1 "
            "endometrioid glands with squamous morules, superficial or absent "
            "myoinvasion, intact serosa and no vascular invasion, often on a "
            "background of hyperplasia, indicating excellent survival."
        ),
        "genomic": (
            "In uterine corpus endometrial carcinoma, high-risk genomic features "
            "include TP53 mutation with serous-like extensive copy-number "
            "alteration, ERBB2 amplification, CCNE1 gain and low mutational "
            "burden of the copy-number-high subtype. PIK3CA with TP53 "
            "co-alteration also portends recurrence. Low-risk profiles include "
            "POLE-ultramutated tumors with intense immune infiltration and, to a "
            "lesser degree, microsatellite-unstable cancers; copy-number-quiet "
            "endometrioid tumors with PTEN and ARID1A mutations and high "
            "hormone-receptor expression follow an indolent course."
        ),
    },
    "LUSC": {
        "pathology": (
            "In lung squamous cell carcinoma, high-risk pathology features "
            "include poor differentiation with minimal keratinization, extensive "
            "tumor necrosis, vascular and pleural invasion, large tumor size "
            "with nodal metastases and an infiltrative border with single-cell "
            "invasion. Basaloid morphology carries poor prognosis. Low-risk "
            "tumors are well differentiated and keratinizing with pushing "
            "borders, limited size, absent vascular invasion and prominent "
            "peritumoral lymphocytes. Central cavitation without transmural "
            "invasion and carcinoma in situ components suggest more favorable "
            "outcome."
        ),
        "genomic": (
            "In lung squamous cell carcinoma, high-risk genomic features include "
            "amplification of SOX2 with PIK3CA, 3q gain, CDKN2A deletion, "
            "near-universal TP53 mutation with high chromosomal instability, and "
            "hypoxia or proliferation expression programs. NFE2L2/KEAP1 pathway "
            "activation predicts resistance and worse survival. Lower-risk "
            "profiles show modest copy-number burden, retained CDKN2A, immune-"
            "inflamed expression with antigen-presentation signatures and "
            "squamous differentiation programs, which together associate with "
            "better outcomes."
        ),
    },
    "KIRC": {
        "pathology": (
            "In kidney renal clear cell carcinoma, high-risk pathology features "
            "include high nucleolar grade, rhabdoid or sarcomatoid "
            "dedifferentiation, tumor necrosis, renal vein or vena cava "
            "invasion, perinephric fat extension and positive surgical margins. "
            "Dense microvascular invasion predicts early metastasis. Low-risk "
            "tumors are small, organ-confined, low-grade lesions with classic "
            "clear cytoplasm, alveolar architecture, delicate vasculature, no "
            "necrosis and intact capsule, features associated with prolonged "
            "recurrence-free survival after resection."
        ),
        "genomic": (
            "In kidney renal clear cell carcinoma, high-risk genomic features "
            "include BAP1 mutation, CDKN2A loss, 9p and 14q deletions, elevated "
            "cell-cycle and hypoxia expression signatures and high chromosomal "
            "complexity. SETD2 mutation with aggressive metabolic reprogramming "
            "also worsens prognosis. Low-risk profiles carry VHL mutation with "
            "PBRM1 as the sole additional driver, quiet karyotypes, "
            "angiogenesis-high expression subtypes responsive to targeted "
            "therapy, and absence of BAP1 or TP53 alterations, correlating with "
            "indolent behavior."
        ),
    },
}
