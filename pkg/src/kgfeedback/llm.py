"""Chat-completion client with record/replay fixtures, and prompt templates."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import requests

logger = logging.getLogger(__name__)

PURPOSES = ("generate", "judge", "label")
NO_KNOWLEDGE = "(no retrieved knowledge)"
DEFAULT_MODEL = "gpt-4o-mini"


class LLMError(Exception):
    pass


class TransportError(LLMError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts


class FixtureMissError(LLMError):
    def __init__(self, digest: str):
        super().__init__(f"no fixture recorded for request {digest}")
        self.digest = digest


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    return resources.files("kgfeedback").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")


def template_hash(name: str) -> str:
    return hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()[:12]


def template_hashes() -> dict[str, str]:
    return {name: template_hash(name) for name in PURPOSES}


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_tokens: int = 256
    temperature: float = 0.0
    purpose: str = "generate"

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.purpose in ("judge", "label") and self.temperature != 0:
            raise ValueError(f"{self.purpose} requests must use temperature 0")


def _chat_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/chat/completions") else endpoint + "/chat/completions"


class ChatClient:
    """Minimal chat-completion client.

    ``mode`` selects live calls, live calls captured into ``fixture_dir``
    (record), or fixture lookups only (replay). Replay never falls back to
    the network.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        model: str = DEFAULT_MODEL,
        *,
        mode: str = "live",
        fixture_dir: str | os.PathLike | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        if mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode != "live" and fixture_dir is None:
            raise ValueError(f"{mode} mode requires fixture_dir")
        self.endpoint = endpoint or os.environ.get("LLM_ENDPOINT")
        self.api_key = api_key or os.environ.get("LLM_API_KEY", "")
        self.model = model
        self.mode = mode
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        if mode != "replay" and not self.endpoint:
            raise LLMError("LLM_ENDPOINT is not configured")

    def request_body(self, req: CompletionRequest) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }

    def digest(self, req: CompletionRequest) -> str:
        canon = json.dumps(self.request_body(req), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def _fixture_path(self, digest: str) -> Path:
        return self.fixture_dir / f"{digest}.json"

    def complete(self, req: CompletionRequest) -> str:
        digest = self.digest(req)
        if self.mode == "replay":
            path = self._fixture_path(digest)
            if not path.exists():
                raise FixtureMissError(digest)
            return json.loads(path.read_text(encoding="utf-8"))["response"]
        text = self._post(self.request_body(req))
        if self.mode == "record":
            self.fixture_dir.mkdir(parents=True, exist_ok=True)
            record = {"request": self.request_body(req), "response": text}
            self._fixture_path(digest).write_text(
                json.dumps(record, sort_keys=True, ensure_ascii=False, indent=1), encoding="utf-8"
            )
        return text

    def _post(self, body: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last: Exception | None = None
        with self._slots:
            for attempt in range(1, self.retries + 1):
                try:
                    resp = self.session.post(
                        _chat_url(self.endpoint), json=body, headers=headers, timeout=self.timeout
                    )
                    if resp.status_code in (429, 500, 502, 503, 504):
                        raise requests.HTTPError(f"HTTP {resp.status_code}", response=resp)
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"]
                except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                    last = exc
                    logger.warning("completion failed (attempt %d/%d): %s", attempt, self.retries, exc)
                    if attempt < self.retries:
                        time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(str(last), self.retries)


def count_tokens(text: str) -> int:
    """Whitespace token count, used for prompt budgeting."""
    return len(text.split())


def render_generation_prompt(question: str, context: str, token_budget: int | None = None) -> str:
    """Fill the generation template, dropping trailing (lowest priority) paths to fit."""
    template = load_template("generate")
    lines = context.splitlines() if context else []
    while True:
        body = "\n".join(lines) if lines else NO_KNOWLEDGE
        prompt = template.format(context=body, question=question)
        if token_budget is None or count_tokens(prompt) <= token_budget or not lines:
            return prompt
        lines.pop()


def generate_response(client: ChatClient, question: str, context: str, *, token_budget: int = 2048,
                      max_tokens: int = 128, temperature: float = 0.0) -> str:
    prompt = render_generation_prompt(question, context, token_budget)
    return client.complete(
        CompletionRequest(prompt, max_tokens=max_tokens, temperature=temperature, purpose="generate")
    )
