"""HTTP backend for any OpenAI-compatible chat + embeddings endpoint.

Every response is validated before it reaches the loop. Rate limits, server
errors and timeouts are retried with bounded exponential backoff; a response
that parses but makes no sense raises :class:`MalformedResponse`, which the
loop treats as a per-item skip.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import httpx
import numpy as np
import yaml

from ..evidence_log import Attribution, Capsule, Confidence
from ..skill_model import Skill
from .base import CallContext, Grader, MalformedResponse, OracleUnavailable, Oracles, Task, VerdictDraft

log = logging.getLogger(__name__)


class Timeout(OracleUnavailable):
    pass


class RateLimited(OracleUnavailable):
    pass


class MissingCredentials(OracleUnavailable):
    pass


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    embed_model: str
    embed_dim: int
    api_key_env: str = "SKILLBANK_API_KEY"
    timeout: float = 120.0
    max_retries: int = 4
    backoff: float = 1.0
    backoff_cap: float = 30.0
    temperature: float = 0.0
    embed_batch: int = 64
    audit_path: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        return cls(**dict(data))


def load_templates() -> dict[str, Any]:
    text = resources.files("skillbank").joinpath("data/prompts.yaml").read_text()
    return yaml.safe_load(text)


_FENCE = re.compile(r"^```[a-zA-Z]*\s*\n(.*?)\n```\s*$", re.DOTALL)


def strip_fences(text: str) -> str:
    text = text.strip()
    m = _FENCE.match(text)
    return m.group(1) if m else text


class RemoteClient:
    """Thread-safe JSON-over-HTTP client with retries and an audit trail."""

    def __init__(self, cfg: EndpointConfig, *, transport: httpx.BaseTransport | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        key = os.environ.get(cfg.api_key_env)
        if key is None and transport is None:
            raise MissingCredentials(f"set {cfg.api_key_env} to the endpoint API key")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self.cfg = cfg
        self._http = httpx.Client(base_url=cfg.base_url, headers=headers, timeout=cfg.timeout, transport=transport)
        self._sleep = sleep
        self._audit_lock = threading.Lock()

    def close(self) -> None:
        self._http.close()

    def _audit(self, path: str, request: Any, status: int | None, response: Any) -> None:
        if not self.cfg.audit_path:
            return
        row = {"ts": time.time(), "path": path, "request": request, "status": status, "response": response}
        with self._audit_lock, open(self.cfg.audit_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    def _delay(self, attempt: int, retry_after: str | None) -> float:
        if retry_after:
            try:
                return min(self.cfg.backoff_cap, float(retry_after))
            except ValueError:
                pass
        return min(self.cfg.backoff_cap, self.cfg.backoff * 2**attempt)

    def post(self, path: str, payload: Mapping[str, Any]) -> dict[str, Any]:
        last: OracleUnavailable | None = None
        retry_after: str | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                self._sleep(self._delay(attempt - 1, retry_after))
                retry_after = None
            try:
                resp = self._http.post(path, json=payload)
            except httpx.TimeoutException as exc:
                self._audit(path, payload, None, f"timeout: {exc}")
                last = Timeout(f"{path} timed out")
                continue
            except httpx.TransportError as exc:
                self._audit(path, payload, None, f"transport: {exc}")
                last = OracleUnavailable(f"{path}: {exc}")
                continue
            body: Any
            try:
                body = resp.json()
            except ValueError:
                body = resp.text
            self._audit(path, payload, resp.status_code, body)
            if resp.status_code == 429:
                retry_after = resp.headers.get("retry-after")
                last = RateLimited(f"{path} rate limited")
                continue
            if resp.status_code >= 500:
                last = OracleUnavailable(f"{path} returned {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise OracleUnavailable(f"{path} returned {resp.status_code}: {str(body)[:200]}")
            if not isinstance(body, dict):
                raise MalformedResponse(f"{path} returned non-object JSON")
            return body
        assert last is not None
        raise last

    def chat(self, system: str, user: str) -> str:
        payload = {
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        }
        body = self.post("/v1/chat/completions", payload)
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("chat response lacks choices[0].message.content") from None
        if not isinstance(content, str):
            raise MalformedResponse("chat content is not a string")
        return content

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = self.post("/v1/embeddings", {"model": self.cfg.embed_model, "input": list(texts)})
        try:
            rows = sorted(body["data"], key=lambda r: r["index"])
            vecs = [np.asarray(r["embedding"], dtype=float) for r in rows]
        except (KeyError, TypeError, ValueError):
            raise MalformedResponse("embedding response lacks data[].embedding") from None
        if len(vecs) != len(texts):
            raise MalformedResponse(f"asked for {len(texts)} embeddings, got {len(vecs)}")
        return vecs


# --------------------------------------------------------------------------- oracle roles


class RemoteEmbedder:
    def __init__(self, client: RemoteClient):
        self.client = client
        self.dim = client.cfg.embed_dim
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        step = self.client.cfg.embed_batch
        for i in range(0, len(missing), step):
            batch = missing[i:i + step]
            vecs = self.client.embed(batch)
            for text, vec in zip(batch, vecs):
                if vec.shape != (self.dim,):
                    raise MalformedResponse(f"embedding has shape {vec.shape}, expected ({self.dim},)")
                with self._lock:
                    self._cache[text] = vec
        return [self._cache[t] for t in texts]


class RemoteSolver:
    def __init__(self, client: RemoteClient, templates: Mapping[str, Any]):
        self.client = client
        self.t = templates

    def solve(self, task: Task, skill: Skill | None, ctx: CallContext) -> str:
        block = self.t["skill_block"].format(guidance=skill.guidance.render()) if skill else ""
        return self.client.chat(self.t["solver"]["system"], self.t["solver"]["user"].format(task=task.prompt,
                                                                                             skill_block=block))


class RemoteCritic:
    def __init__(self, client: RemoteClient, templates: Mapping[str, Any]):
        self.client = client
        self.t = templates

    def critique(self, task: Task, skill: Skill | None, capsule: Capsule, ctx: CallContext) -> VerdictDraft:
        user = self.t["critic"]["user"].format(task=task.prompt, skill=skill.yaml if skill else "NONE",
                                               output=capsule.solver_output)
        return parse_verdict(self.client.chat(self.t["critic"]["system"], user))


def parse_verdict(text: str) -> VerdictDraft:
    try:
        data = yaml.safe_load(strip_fences(text))
    except yaml.YAMLError as exc:
        raise MalformedResponse(f"critic output is not YAML: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedResponse("critic output is not a mapping")
    try:
        attribution = Attribution(str(data["attribution"]).strip().upper()).value
        confidence = Confidence(str(data.get("confidence", "MEDIUM")).strip().upper()).value
        pattern = str(data["pattern"]).strip()
    except (KeyError, ValueError):
        raise MalformedResponse("critic output lacks a valid attribution or pattern") from None
    if not pattern:
        raise MalformedResponse("critic pattern is empty")
    return VerdictDraft(attribution, pattern, confidence, str(data.get("reason", "")).strip())


class RemoteSynth:
    def __init__(self, client: RemoteClient, templates: Mapping[str, Any]):
        self.client = client
        self.t = templates

    def synthesize(self, guidance_text: str, cluster_digest: str, bank_digest: str, char_budget: int) -> str:
        user = self.t["synth"]["user"].format(authoring_guidance=guidance_text, capsule_summary=cluster_digest,
                                              active_bank=bank_digest or "(none)", char_budget=char_budget)
        return strip_fences(self.client.chat(self.t["synth"]["system"], user))


class RemoteGate:
    def __init__(self, client: RemoteClient, templates: Mapping[str, Any]):
        self.client = client
        self.t = templates

    def adjudicate(self, task: Task, candidates: Sequence[Skill]) -> str | None:
        listing = "\n".join(f"- {s.id}: {s.intent} (applies when: {s.guidance.applies_when})" for s in candidates)
        answer = self.client.chat(self.t["gate"]["system"], self.t["gate"]["user"].format(task=task.prompt,
                                                                                         candidates=listing))
        token = strip_fences(answer).strip().strip("`'\".").split()
        if not token:
            raise MalformedResponse("empty gate answer")
        return None if token[0].upper() == "NONE" else token[0]


class RemoteMeta:
    def __init__(self, client: RemoteClient, templates: Mapping[str, Any]):
        self.client = client
        self.t = templates

    def refresh(self, current_markdown: str, verdict_digest: str) -> str:
        user = self.t["meta"]["user"].format(current=current_markdown, verdicts=verdict_digest or "(none)")
        return strip_fences(self.client.chat(self.t["meta"]["system"], user))


class ExpectedOutputGrader:
    """Passes when the output matches the task's expected regex.

    Benchmark graders (test execution, containers) are out of scope; plug a
    real :class:`Grader` in for those.
    """

    def __init__(self, expected: Mapping[str, str]):
        self.expected = {k: re.compile(v) for k, v in expected.items()}

    def grade(self, task: Task, output: str, ctx: CallContext) -> bool:
        pattern = self.expected.get(task.task_id)
        return bool(pattern and pattern.search(output))


def remote_oracles(cfg: EndpointConfig, grader: Grader, *, transport: httpx.BaseTransport | None = None,
                   sleep: Callable[[float], None] = time.sleep) -> Oracles:
    client = RemoteClient(cfg, transport=transport, sleep=sleep)
    t = load_templates()
    return Oracles(
        solver=RemoteSolver(client, t),
        grader=grader,
        critic=RemoteCritic(client, t),
        synth=RemoteSynth(client, t),
        gate=RemoteGate(client, t),
        embedder=RemoteEmbedder(client),
        meta=RemoteMeta(client, t),
    )


def load_endpoint(path: str | Path) -> EndpointConfig:
    return EndpointConfig.from_dict(yaml.safe_load(Path(path).read_text()))
