"""LLM access behind one call interface.

Two implementations: a remote chat-completion client (retries, audit log,
bounded concurrency) and a deterministic scripted backend keyed by a stable
request fingerprint, used for tests and offline runs. Both are interchangeable
behind :class:`LlmBackend`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping

import httpx

logger = logging.getLogger(__name__)

AUDIT_PREVIEW_CHARS = 200


class BackendError(Exception):
    """Base class for backend failures."""


class MissingSlot(BackendError):
    """A required template slot was not provided."""


class ScriptMiss(BackendError):
    """The scripted backend has no entry for a request fingerprint."""


class RemoteError(BackendError):
    """The remote endpoint failed after all retry attempts."""


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt body with ``{slot}`` placeholders.

    Every required slot must occur in the body; unknown braces in the body are
    left untouched when filling.
    """

    name: str
    body: str
    required_slots: frozenset[str]

    def __post_init__(self) -> None:
        missing = [s for s in sorted(self.required_slots) if "{" + s + "}" not in self.body]
        if missing:
            raise ValueError(f"template {self.name!r} body lacks slots: {missing}")

    def fill(self, slots: Mapping[str, str]) -> str:
        """Render the body, substituting every provided slot.

        Raises:
            MissingSlot: naming the first required slot absent from ``slots``.
        """
        check_slots(self, slots)
        text = self.body
        for name, value in slots.items():
            text = text.replace("{" + name + "}", value)
        return text


def check_slots(template: PromptTemplate, slots: Mapping[str, str]) -> None:
    missing = sorted(template.required_slots - set(slots))
    if missing:
        raise MissingSlot(f"template {template.name!r} missing slot {missing[0]!r}")


def fingerprint(template_name: str, slots: Mapping[str, str]) -> str:
    """Stable request fingerprint: template name plus canonicalized slots.

    Slot values are line-ending normalized and serialized in sorted slot
    order, so the digest is identical across runs and platforms.
    """
    canonical = {
        name: value.replace("\r\n", "\n").replace("\r", "\n")
        for name, value in slots.items()
    }
    payload = json.dumps(
        {"template": template_name, "slots": canonical},
        sort_keys=True,
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class AuditRecord:
    """One backend call: template, request fingerprint, latency, response head."""

    template: str
    slot_hash: str
    latency_s: float
    response_preview: str


class LlmBackend(ABC):
    """Single-call interface every pipeline stage talks to."""

    @abstractmethod
    def complete(self, template: PromptTemplate, slots: Mapping[str, str]) -> str:
        """Return the response text for a filled prompt."""


class DefaultPolicy(Enum):
    """What a scripted backend does on a fingerprint miss."""

    ERROR = "error"
    ECHO = "echo"


class ScriptedBackend(LlmBackend):
    """Deterministic fingerprint -> response table.

    A pure function of the request fingerprint: the same template and slots
    always yield the same bytes. On a miss it either raises ``ScriptMiss`` or
    echoes the rendered prompt, per ``default_policy``.
    """

    def __init__(
        self,
        script: Mapping[str, str] | None = None,
        default_policy: DefaultPolicy = DefaultPolicy.ERROR,
    ) -> None:
        self.script: dict[str, str] = dict(script or {})
        self.default_policy = default_policy
        self.calls: list[str] = []

    def complete(self, template: PromptTemplate, slots: Mapping[str, str]) -> str:
        check_slots(template, slots)
        key = fingerprint(template.name, slots)
        self.calls.append(key)
        if key in self.script:
            return self.script[key]
        if self.default_policy is DefaultPolicy.ECHO:
            return template.fill(slots)
        raise ScriptMiss(f"no scripted response for {template.name!r} fingerprint {key}")

    def add(self, template: PromptTemplate, slots: Mapping[str, str], response: str) -> str:
        """Register a response for a request; returns the fingerprint."""
        key = fingerprint(template.name, slots)
        self.script[key] = response
        return key

    def save(self, path: str | Path) -> None:
        """Write the script as line-delimited (fingerprint, response) records."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key in sorted(self.script):
                record = {"fingerprint": key, "response": self.script[key]}
                fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False))
                fh.write("\n")

    @classmethod
    def from_file(
        cls, path: str | Path, default_policy: DefaultPolicy = DefaultPolicy.ERROR
    ) -> "ScriptedBackend":
        script: dict[str, str] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    record = json.loads(line)
                    script[record["fingerprint"]] = record["response"]
        return cls(script, default_policy)


@dataclass
class RemoteConfig:
    """Connection settings for a chat-completion endpoint.

    The API key is read from the environment variable named by
    ``api_key_env``; the endpoint URL and model name come from the run config.
    """

    endpoint: str
    model: str
    api_key_env: str = "LLM_API_KEY"
    temperature: float = 0.0
    timeout_s: float = 60.0
    max_attempts: int = 3
    max_in_flight: int = 4
    backoff_base_s: float = 0.5


class RemoteBackend(LlmBackend):
    """Chat-completion client with retry, audit, and an in-flight cap.

    Transient failures (HTTP 429/5xx and transport errors) are retried with
    exponential backoff up to ``max_attempts``; the response payload is
    treated as opaque apart from the first choice's message content.
    """

    def __init__(
        self,
        config: RemoteConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.audit: list[AuditRecord] = []
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)
        self._audit_lock = threading.Lock()
        self._client = httpx.Client(
            transport=transport, timeout=config.timeout_s
        )

    def complete(self, template: PromptTemplate, slots: Mapping[str, str]) -> str:
        prompt = template.fill(slots)
        key = fingerprint(template.name, slots)
        api_key = os.environ.get(self.config.api_key_env, "")
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
        }
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

        start = time.monotonic()
        last_error: Exception | None = None
        with self._semaphore:
            for attempt in range(self.config.max_attempts):
                if attempt:
                    self._sleep(self.config.backoff_base_s * 2 ** (attempt - 1))
                try:
                    response = self._client.post(
                        self.config.endpoint, json=payload, headers=headers
                    )
                except httpx.HTTPError as exc:
                    last_error = exc
                    logger.warning("remote call failed (attempt %d): %s", attempt + 1, exc)
                    continue
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = RemoteError(f"HTTP {response.status_code}")
                    logger.warning(
                        "remote call returned %d (attempt %d)",
                        response.status_code,
                        attempt + 1,
                    )
                    continue
                if response.status_code != 200:
                    raise RemoteError(
                        f"HTTP {response.status_code}: {response.text[:AUDIT_PREVIEW_CHARS]}"
                    )
                text = response.json()["choices"][0]["message"]["content"]
                self._record(template.name, key, time.monotonic() - start, text)
                return text
        raise RemoteError(
            f"remote backend failed after {self.config.max_attempts} attempts: {last_error}"
        )

    def _record(self, template: str, key: str, latency: float, text: str) -> None:
        with self._audit_lock:
            self.audit.append(
                AuditRecord(
                    template=template,
                    slot_hash=key,
                    latency_s=latency,
                    response_preview=text[:AUDIT_PREVIEW_CHARS],
                )
            )

    def write_audit(self, path: str | Path) -> None:
        """Dump audit records as line-delimited JSON (latency is wall-clock)."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for record in self.audit:
                fh.write(
                    json.dumps(
                        {
                            "template": record.template,
                            "slot_hash": record.slot_hash,
                            "latency_s": record.latency_s,
                            "response_preview": record.response_preview,
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                )
                fh.write("\n")


# Required slots per shipped template.
TEMPLATE_SLOTS: dict[str, frozenset[str]] = {
    "fact_table": frozenset({"company-ticker", "number-of-facts", "earnings-call-transcript"}),
    "decision": frozenset({"company-ticker", "min-facts", "max-facts", "fact-table"}),
    "reflection": frozenset({"min-facts", "max-facts", "fact-table", "previous-incorrect-outputs"}),
}


def load_template(directory: str | Path, name: str) -> PromptTemplate:
    body = Path(directory, f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name=name, body=body, required_slots=TEMPLATE_SLOTS[name])


def load_templates(directory: str | Path) -> dict[str, PromptTemplate]:
    """Load the fact-table, decision, and reflection templates from a directory."""
    return {name: load_template(directory, name) for name in TEMPLATE_SLOTS}


def default_template_dir() -> Path:
    """Directory of the templates shipped with the package."""
    return Path(__file__).parent / "templates"
