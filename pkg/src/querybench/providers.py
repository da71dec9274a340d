"""Chat and embedding provider clients plus deterministic offline mocks.

HTTP clients speak the OpenAI-compatible JSON shapes. Mock clients are pure
functions of (request, seed): the mock chat client is keyed on ``## task:``
marker lines inside prompts, the mock embedder feature-hashes tokens.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx
import numpy as np

MODES = ("dense", "sparse", "multivec")


class ProviderError(Exception):
    def __init__(self, kind: str, detail: str, retryable: bool):
        if kind in ("rate_limited", "timeout") and not retryable:
            raise ValueError(f"{kind} errors are retryable by definition")
        super().__init__(f"{kind}: {detail}")
        self.kind = kind
        self.detail = detail
        self.retryable = retryable

    @classmethod
    def rate_limited(cls, detail: str) -> "ProviderError":
        return cls("rate_limited", detail, retryable=True)

    @classmethod
    def timeout(cls, detail: str) -> "ProviderError":
        return cls("timeout", detail, retryable=True)

    @classmethod
    def transport(cls, detail: str, retryable: bool) -> "ProviderError":
        return cls("transport", detail, retryable)

    @classmethod
    def malformed(cls, detail: str) -> "ProviderError":
        return cls("malformed_response", detail, retryable=False)


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"bad message role {self.role!r}")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.7
    max_output_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    @classmethod
    def single_user(cls, model_id: str, prompt: str, **kw) -> "ChatRequest":
        return cls(model_id=model_id, messages=(ChatMessage("user", prompt),), **kw)

    def last_user_content(self) -> str:
        for msg in reversed(self.messages):
            if msg.role == "user":
                return msg.content
        return self.messages[-1].content


@dataclass
class EmbeddingBundle:
    dense: np.ndarray | None = None
    sparse: dict[str, float] | None = None
    multivec: np.ndarray | None = None

    def validate(self, dense_dim: int | None = None) -> None:
        if self.dense is not None and dense_dim is not None and self.dense.shape != (dense_dim,):
            raise ProviderError.malformed(
                f"dense embedding has shape {self.dense.shape}, expected ({dense_dim},)")
        if self.sparse is not None and any(w < 0 for w in self.sparse.values()):
            raise ProviderError.malformed("sparse weights must be non-negative")
        if self.multivec is not None and len(self.multivec):
            norms = np.linalg.norm(self.multivec, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ProviderError.malformed("multivec rows must be unit-normalized")


class AuditLog:
    """Append-only JSONL of raw provider exchanges."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, kind: str, request: dict, response: dict | None,
               error: str | None = None) -> None:
        entry = {"kind": kind, "request": request, "response": response, "error": error}
        line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class _RetryingHttp:
    def __init__(self, base_url: str, api_key: str | None, max_retries: int,
                 timeout: float, max_concurrency: int, backoff_base: float,
                 transport: httpx.BaseTransport | None):
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url, headers=headers,
                                    timeout=timeout, transport=transport)
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._semaphore = threading.Semaphore(max_concurrency)

    def post_json(self, path: str, payload: dict) -> dict:
        last_err: ProviderError | None = None
        for attempt in range(self.max_retries + 1):
            if attempt and self.backoff_base:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                with self._semaphore:
                    response = self._client.post(path, json=payload)
            except httpx.TimeoutException as exc:
                last_err = ProviderError.timeout(str(exc))
                continue
            except httpx.TransportError as exc:
                last_err = ProviderError.transport(str(exc), retryable=True)
                continue
            if response.status_code == 429:
                last_err = ProviderError.rate_limited(f"429 from {path}")
                continue
            if response.status_code >= 500:
                last_err = ProviderError.transport(
                    f"{response.status_code} from {path}", retryable=True)
                continue
            if response.status_code >= 400:
                raise ProviderError.transport(
                    f"{response.status_code} from {path}: {response.text[:200]}",
                    retryable=False)
            try:
                return response.json()
            except ValueError as exc:
                raise ProviderError.malformed(f"non-JSON body from {path}: {exc}") from exc
        assert last_err is not None
        raise last_err

    def close(self) -> None:
        self._client.close()


class HttpChatClient:
    """OpenAI-compatible chat-completions client with bounded retries."""

    def __init__(self, base_url: str, api_key: str | None = None, *,
                 max_retries: int = 3, timeout: float = 60.0,
                 max_concurrency: int = 8, backoff_base: float = 0.5,
                 audit_log: AuditLog | None = None,
                 transport: httpx.BaseTransport | None = None):
        self._http = _RetryingHttp(base_url, api_key, max_retries, timeout,
                                   max_concurrency, backoff_base, transport)
        self._audit = audit_log

    def chat_complete(self, request: ChatRequest) -> str:
        payload = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        try:
            body = self._http.post_json("/chat/completions", payload)
        except ProviderError as exc:
            if self._audit:
                self._audit.record("chat", payload, None, error=str(exc))
            raise
        if self._audit:
            self._audit.record("chat", payload, body)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError.malformed(f"chat response missing content: {exc}") from exc
        if not isinstance(text, str):
            raise ProviderError.malformed("chat content is not a string")
        return text

    def close(self) -> None:
        self._http.close()


class HttpEmbeddingClient:
    """Embeddings client; dense follows the OpenAI schema, providers may add
    ``sparse`` (term→weight map) and ``multivec`` (list of rows) per item."""

    def __init__(self, base_url: str, model_id: str, dense_dim: int,
                 api_key: str | None = None, *, max_retries: int = 3,
                 timeout: float = 60.0, max_concurrency: int = 8,
                 backoff_base: float = 0.5, audit_log: AuditLog | None = None,
                 transport: httpx.BaseTransport | None = None):
        self._http = _RetryingHttp(base_url, api_key, max_retries, timeout,
                                   max_concurrency, backoff_base, transport)
        self.model_id = model_id
        self.dense_dim = dense_dim
        self._audit = audit_log

    def embed(self, texts: Sequence[str], modes: Iterable[str]) -> list[EmbeddingBundle]:
        modes = _check_modes(modes, texts)
        payload = {"model": self.model_id, "input": list(texts), "modes": sorted(modes)}
        body = self._http.post_json("/embeddings", payload)
        if self._audit:
            self._audit.record("embed", payload, body)
        try:
            items = body["data"]
        except (KeyError, TypeError) as exc:
            raise ProviderError.malformed("embedding response missing data") from exc
        if len(items) != len(texts):
            raise ProviderError.malformed(
                f"embedding response has {len(items)} items for {len(texts)} inputs")
        bundles = []
        for item in items:
            bundle = EmbeddingBundle(
                dense=np.asarray(item["embedding"], dtype=float) if "dense" in modes else None,
                sparse={str(k): float(v) for k, v in item["sparse"].items()}
                if "sparse" in modes else None,
                multivec=np.asarray(item["multivec"], dtype=float) if "multivec" in modes else None,
            )
            bundle.validate(dense_dim=self.dense_dim)
            bundles.append(bundle)
        return bundles

    def close(self) -> None:
        self._http.close()


def _check_modes(modes: Iterable[str], texts: Sequence[str]) -> set[str]:
    modes = set(modes)
    if not modes:
        raise ValueError("at least one embedding mode must be requested")
    unknown = modes - set(MODES)
    if unknown:
        raise ValueError(f"unknown embedding modes: {sorted(unknown)}")
    if not texts:
        raise ValueError("texts must be non-empty")
    return modes


# ---------------------------------------------------------------------------
# Deterministic mocks

_TOKEN = re.compile(r"\w+")

# Function words the mock evaluator ignores when measuring query/context
# overlap; aligned with the phrasing the mock generators emit.
MOCK_STOPWORDS = frozenset("""
a an and also the is are was were be been of in on for to do does did how what
which where when why who whose about with without compare compared comparing
versus vs between differ differs difference addition customers customer mean
means other this that these those it its if any
""".split())


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def content_tokens(text: str) -> set[str]:
    return {t for t in tokenize(text) if t not in MOCK_STOPWORDS}


_MARKER = re.compile(r"^## task: (\S+)", re.MULTILINE)


def _block(prompt: str, name: str) -> str:
    """Text between '### {name}' and the next '### ' heading (or the end)."""
    pattern = re.compile(rf"^### {re.escape(name)}\n(.*?)(?=^### |\Z)",
                         re.MULTILINE | re.DOTALL)
    match = pattern.search(prompt)
    if not match:
        raise ValueError(f"prompt is missing a '### {name}' block")
    return match.group(1).strip()


def _distinctive_token(text: str) -> str:
    """Longest token, first-seen wins ties; fixtures plant a long code token."""
    best = ""
    for token in tokenize(text):
        if len(token) > len(best):
            best = token
    if not best:
        raise ValueError("no tokens to pick from")
    return best


def mock_answerability_completion(contexts: str, query: str) -> str:
    content = content_tokens(query)
    ctx = set(tokenize(contexts))
    hits = sorted(content & ctx)
    coverage = len(hits) / len(content) if content else 0.0
    score = round(1.0 + 4.0 * coverage, 2)
    return (
        "<think>\n"
        f"query terms: {sorted(content)}\n"
        f"found in context: {hits}\n"
        f"coverage {len(hits)}/{max(len(content), 1)}\n"
        "</think>\n"
        f"Score: {score}"
    )


class MockChatClient:
    """Keyed on '## task:' markers; output depends only on the prompt text.

    Generators pull each source's most distinctive token into the query so the
    mock evaluator sees full overlap on the combined context but only partial
    overlap on any single passage.
    """

    def __init__(self, vet_decider: Callable[[list[str]], set[str]] | None = None):
        self._vet_decider = vet_decider
        self.calls = 0

    def chat_complete(self, request: ChatRequest) -> str:
        self.calls += 1
        prompt = request.last_user_content()
        marker = _MARKER.search(prompt)
        if not marker:
            raise ValueError("mock chat client needs a '## task:' marker in the prompt")
        task = marker.group(1)
        if task == "generate-single":
            passage = _block(prompt, "Passage")
            return f"What does {_distinctive_token(passage)} mean?"
        if task in ("generate-merged", "generate-deepened"):
            blocks = _numbered_items(_block(prompt, "Queries" if task == "generate-merged" else "Pairs"))
            tokens = [_distinctive_token(b) for b in blocks]
            joiner = " and " if task == "generate-merged" else " and also "
            return f"What about {joiner.join(tokens)}?"
        if task == "generate-comparing":
            blocks = _numbered_items(_block(prompt, "Passages"))
            tokens = [_distinctive_token(b) for b in blocks]
            return f"How do {' and '.join(tokens)} compare?"
        if task.startswith("vet-"):
            ids = _candidate_ids(_block(prompt, "Candidates"))
            accepted = set(ids) if self._vet_decider is None else self._vet_decider(ids)
            return "\n".join(f"{cid}: {'ACCEPT' if cid in accepted else 'REJECT'}"
                             for cid in ids)
        if task == "score-answerability":
            return mock_answerability_completion(_block(prompt, "Contexts"),
                                                 _block(prompt, "Query"))
        raise ValueError(f"mock chat client does not know task {task!r}")


def _numbered_items(block: str) -> list[str]:
    """Split a block of '[i]'-prefixed items into their texts."""
    parts = re.split(r"^\[\d+\]\s*", block, flags=re.MULTILINE)
    items = [p.strip() for p in parts if p.strip()]
    if not items:
        raise ValueError("no numbered items found in block")
    return items


def _candidate_ids(block: str) -> list[str]:
    ids = re.findall(r"^\(([^)]+)\)", block, flags=re.MULTILINE)
    if not ids:
        raise ValueError("no candidate ids found in block")
    return ids


class ScriptedChatClient:
    """Pops canned completions in order; for exercising parse and filter paths."""

    def __init__(self, completions: Sequence[str]):
        self._queue = list(completions)
        self.requests: list[ChatRequest] = []

    def chat_complete(self, request: ChatRequest) -> str:
        self.requests.append(request)
        if not self._queue:
            raise ProviderError.transport("scripted client exhausted", retryable=False)
        return self._queue.pop(0)


def _stable_digest(*parts: str) -> int:
    digest = hashlib.blake2b("\x1f".join(parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big")


class MockEmbeddingClient:
    """Seeded feature hashing; identical (text, seed) gives identical bundles."""

    def __init__(self, seed: int = 0, dense_dim: int = 32, token_dim: int = 8):
        self.seed = seed
        self.dense_dim = dense_dim
        self.token_dim = token_dim
        self.calls = 0

    def _dense(self, tokens: list[str]) -> np.ndarray:
        vec = np.zeros(self.dense_dim)
        for token in tokens:
            h = _stable_digest("dense", str(self.seed), token)
            sign = 1.0 if (h >> 32) & 1 else -1.0
            vec[h % self.dense_dim] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def _sparse(self, tokens: list[str]) -> dict[str, float]:
        weights: dict[str, float] = {}
        for token in tokens:
            weights[token] = weights.get(token, 0.0) + 1.0
        return weights

    def _multivec(self, tokens: list[str]) -> np.ndarray:
        uniq = sorted(set(tokens))
        if not uniq:
            return np.zeros((0, self.token_dim))
        rows = []
        for token in uniq:
            rng = np.random.default_rng(_stable_digest("multivec", str(self.seed), token))
            row = rng.normal(size=self.token_dim)
            rows.append(row / np.linalg.norm(row))
        return np.vstack(rows)

    def embed(self, texts: Sequence[str], modes: Iterable[str]) -> list[EmbeddingBundle]:
        modes = _check_modes(modes, texts)
        self.calls += 1
        bundles = []
        for text in texts:
            tokens = tokenize(text)
            bundle = EmbeddingBundle(
                dense=self._dense(tokens) if "dense" in modes else None,
                sparse=self._sparse(tokens) if "sparse" in modes else None,
                multivec=self._multivec(tokens) if "multivec" in modes else None,
            )
            bundle.validate(dense_dim=self.dense_dim)
            bundles.append(bundle)
        return bundles
