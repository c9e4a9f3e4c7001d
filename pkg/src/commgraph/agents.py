"""Agent backends and team configuration.

Two backends: deterministic scripted agents (fixed reply lists or string
templates, used for tests and offline runs) and an HTTP client for
OpenAI-compatible chat-completions endpoints. Agent names are informational
only; the planning policy never sees them, it consumes response embeddings.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests
import yaml

from .embedding import EmbedderConfig
from .evaluation import VerifierChoice
from .policy.graph import DecodeConfig
from .trainer import RewardRule, TrainerConfig

DEFAULT_UPDATE_TEMPLATE = (
    "{query}\n"
    "\n"
    "Responses from other agents:\n"
    "{parent_responses}\n"
    "\n"
    "Consider the responses above, then provide your revised final answer."
)

TRANSIENT_STATUS = (429, 500, 502, 503, 504)


class ConfigError(ValueError):
    """A team configuration file is missing or malformed."""


class AgentError(RuntimeError):
    """Base class for agent backend failures."""


class ScriptExhaustedError(AgentError):
    """A scripted agent was called more times than it has replies."""


class AgentTransportError(AgentError):
    """The chat endpoint could not be reached."""


class AgentTimeoutError(AgentError):
    """The chat endpoint did not answer within the configured timeout."""


class AgentStatusError(AgentError):
    """The chat endpoint answered with a non-success status."""

    def __init__(self, status_code: int, detail: str = ""):
        super().__init__(f"chat endpoint returned status {status_code}"
                         + (f": {detail}" if detail else ""))
        self.status_code = status_code


class AgentSchemaError(AgentError):
    """The chat endpoint response did not match the expected JSON shape."""


@dataclass(frozen=True)
class AgentReply:
    """One scripted reply with its declared token usage."""

    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass(frozen=True)
class AgentResponse:
    """What a backend returns for one call."""

    text: str
    prompt_tokens: int
    completion_tokens: int
    tokens_approximate: bool = False


@dataclass
class AgentSpec:
    """Description of one agent backend.

    ``name`` is a human-facing label and must never feed the policy input.
    Scripted agents use either ``replies`` (consumed in call order) or
    ``template`` with ``{query}`` / ``{parents}`` placeholders.
    """

    kind: str
    name: str = ""
    replies: list[AgentReply] | None = None
    template: str | None = None
    endpoint: str | None = None
    model: str | None = None
    temperature: float = 0.0
    max_tokens: int = 1024
    system_prompt: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_attempts: int = 3
    retry_backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("scripted", "http"):
            raise ConfigError(f"agent kind must be scripted or http, "
                              f"got {self.kind!r}")
        if self.kind == "scripted":
            if (self.replies is None) == (self.template is None):
                raise ConfigError(
                    "scripted agent needs exactly one of replies or template")
        else:
            if not self.endpoint:
                raise ConfigError("http agent requires an endpoint")


def approximate_tokens(text: str) -> int:
    """Whitespace token count, used when no declared/reported usage exists."""
    return len(text.split())


def render_parent_block(parents: Sequence[tuple[int, str]]) -> str:
    """Numbered parent texts, one per line, already sorted by order position."""
    return "\n".join(f"{i}. {text}" for i, (_, text) in enumerate(parents, 1))


def build_update_prompt(query: str, parents: Sequence[tuple[int, str]],
                        template: str = DEFAULT_UPDATE_TEMPLATE) -> str:
    """Render the refinement prompt for a node with incoming edges."""
    return template.format(query=query,
                           parent_responses=render_parent_block(parents))


class ScriptedAgent:
    """Deterministic agent for tests and offline runs.

    Reply-list agents return replies in call order; template agents format
    ``{query}`` and ``{parents}`` (parent texts joined by newlines).
    """

    def __init__(self, spec: AgentSpec):
        if spec.kind != "scripted":
            raise ValueError("ScriptedAgent requires a scripted spec")
        self.spec = spec
        self._cursor = 0

    def clone_for_episode(self) -> "ScriptedAgent":
        return ScriptedAgent(self.spec)

    def respond(self, query: str,
                parents: Sequence[tuple[int, str]] = ()) -> AgentResponse:
        if self.spec.replies is not None:
            if self._cursor >= len(self.spec.replies):
                raise ScriptExhaustedError(
                    f"agent {self.spec.name or 'scripted'} exhausted its "
                    f"{len(self.spec.replies)} scripted replies")
            reply = self.spec.replies[self._cursor]
            self._cursor += 1
            return AgentResponse(reply.text, reply.prompt_tokens,
                                 reply.completion_tokens)
        assert self.spec.template is not None
        text = self.spec.template.format(
            query=query, parents="\n".join(t for _, t in parents))
        return AgentResponse(text, prompt_tokens=approximate_tokens(query),
                             completion_tokens=approximate_tokens(text),
                             tokens_approximate=True)


class HttpAgent:
    """Client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(self, spec: AgentSpec,
                 update_template: str = DEFAULT_UPDATE_TEMPLATE):
        if spec.kind != "http":
            raise ValueError("HttpAgent requires an http spec")
        self.spec = spec
        self.update_template = update_template
        self._session = requests.Session()

    def clone_for_episode(self) -> "HttpAgent":
        return self  # stateless between calls; session reuse is intentional

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.spec.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def _user_message(self, query: str,
                      parents: Sequence[tuple[int, str]]) -> str:
        if not parents:
            return query
        return build_update_prompt(query, parents, self.update_template)

    def respond(self, query: str,
                parents: Sequence[tuple[int, str]] = ()) -> AgentResponse:
        messages = []
        if self.spec.system_prompt:
            messages.append({"role": "system", "content": self.spec.system_prompt})
        messages.append({"role": "user",
                         "content": self._user_message(query, parents)})
        payload = {
            "model": self.spec.model or "",
            "messages": messages,
            "temperature": self.spec.temperature,
            "max_tokens": self.spec.max_tokens,
        }

        last_error: AgentError | None = None
        for attempt in range(self.spec.max_attempts):
            if attempt:
                time.sleep(self.spec.retry_backoff * 2 ** (attempt - 1))
            try:
                response = self._session.post(self.spec.endpoint, json=payload,
                                              headers=self._headers(),
                                              timeout=self.spec.timeout)
            except requests.Timeout as exc:
                last_error = AgentTimeoutError(
                    f"chat endpoint timed out after {self.spec.timeout}s")
                last_error.__cause__ = exc
                continue
            except requests.RequestException as exc:
                last_error = AgentTransportError(
                    f"failed to reach chat endpoint {self.spec.endpoint}: {exc}")
                last_error.__cause__ = exc
                continue
            if response.status_code in TRANSIENT_STATUS:
                last_error = AgentStatusError(response.status_code,
                                              response.text[:200])
                continue
            if not 200 <= response.status_code < 300:
                raise AgentStatusError(response.status_code, response.text[:200])
            return self._parse(response, messages)
        assert last_error is not None
        raise last_error

    def _parse(self, response: requests.Response,
               messages: list[dict]) -> AgentResponse:
        try:
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise AgentSchemaError(
                f"malformed chat completion response: {exc}") from exc
        if not isinstance(text, str):
            raise AgentSchemaError("message content is not a string")
        usage = body.get("usage") or {}
        try:
            prompt_tokens = int(usage["prompt_tokens"])
            completion_tokens = int(usage["completion_tokens"])
            approximate = False
        except (KeyError, TypeError, ValueError):
            prompt_tokens = approximate_tokens(
                " ".join(m["content"] for m in messages))
            completion_tokens = approximate_tokens(text)
            approximate = True
        return AgentResponse(text, prompt_tokens, completion_tokens,
                             tokens_approximate=approximate)


Agent = ScriptedAgent | HttpAgent


def build_agent(spec: AgentSpec,
                update_template: str = DEFAULT_UPDATE_TEMPLATE) -> Agent:
    if spec.kind == "scripted":
        return ScriptedAgent(spec)
    return HttpAgent(spec, update_template)


def respond(spec: AgentSpec, query: str,
            parents: Sequence[tuple[int, str]] = ()) -> AgentResponse:
    """One-shot call through a fresh backend instance for ``spec``."""
    return build_agent(spec).respond(query, parents)


@dataclass
class TeamConfig:
    """Validated contents of a team configuration file."""

    agents: list[AgentSpec]
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    verifier: VerifierChoice = field(default_factory=VerifierChoice)
    training: TrainerConfig = field(default_factory=TrainerConfig)
    reward: RewardRule = field(default_factory=RewardRule)
    hidden_dim: int = 128
    ff_dim: int | None = None
    dropout: float = 0.3
    workers: int = 1
    update_template: str = DEFAULT_UPDATE_TEMPLATE
    schema_version: int = 1

    def __post_init__(self) -> None:
        if len(self.agents) < 1:
            raise ConfigError("team must contain at least one agent")

    @property
    def n_agents(self) -> int:
        return len(self.agents)


def _parse_reply(raw, where: str) -> AgentReply:
    if isinstance(raw, str):
        return AgentReply(text=raw)
    if isinstance(raw, dict):
        try:
            return AgentReply(text=str(raw["text"]),
                              prompt_tokens=int(raw.get("prompt_tokens", 0)),
                              completion_tokens=int(
                                  raw.get("completion_tokens", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad reply entry: {exc}") from exc
    raise ConfigError(f"{where}: replies must be strings or mappings")


def _parse_agent(raw: dict, index: int) -> AgentSpec:
    where = f"agents[{index}]"
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    kind = raw.get("kind")
    if kind not in ("scripted", "http"):
        raise ConfigError(f"{where}.kind must be 'scripted' or 'http'")
    common = {"kind": kind, "name": str(raw.get("name", ""))}
    try:
        if kind == "scripted":
            replies = raw.get("replies")
            template = raw.get("template")
            if replies is not None:
                replies = [_parse_reply(r, where) for r in replies]
            return AgentSpec(**common, replies=replies, template=template)
        if not raw.get("endpoint"):
            raise ConfigError(f"{where}.endpoint is required for http agents")
        return AgentSpec(
            **common,
            endpoint=str(raw["endpoint"]),
            model=raw.get("model"),
            temperature=float(raw.get("temperature", 0.0)),
            max_tokens=int(raw.get("max_tokens", 1024)),
            system_prompt=raw.get("system_prompt"),
            api_key_env=str(raw.get("api_key_env", "OPENAI_API_KEY")),
            timeout=float(raw.get("timeout", 60.0)),
            max_attempts=int(raw.get("max_attempts", 3)),
            retry_backoff=float(raw.get("retry_backoff", 0.5)))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_reward(raw) -> RewardRule:
    if raw is None or raw == "task":
        return RewardRule()
    if isinstance(raw, dict):
        kind = raw.get("kind")
        try:
            if kind == "constant":
                return RewardRule(kind="constant",
                                  value=float(raw.get("value", 1.0)))
            if kind == "designated-edge":
                m, n = raw["edge"]
                return RewardRule(kind="designated-edge",
                                  edge=(int(m), int(n)))
            if kind == "task":
                return RewardRule()
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"training.reward: {exc}") from exc
    raise ConfigError(f"training.reward: unrecognized value {raw!r}")


def _build_section(cls, raw: dict | None, where: str):
    try:
        return cls(**(raw or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_team(path: str | Path) -> TeamConfig:
    """Parse and validate a YAML team configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    schema_version = int(raw.get("schema_version", 1))
    if schema_version != 1:
        raise ConfigError(f"{path}: unsupported schema_version "
                          f"{schema_version} (expected 1)")

    agents_raw = raw.get("agents")
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError(f"{path}: agents must be a nonempty list")
    agents = [_parse_agent(a, i) for i, a in enumerate(agents_raw)]

    training_raw = dict(raw.get("training") or {})
    reward = _parse_reward(training_raw.pop("reward", None))

    policy_raw = dict(raw.get("policy") or {})
    runtime_raw = dict(raw.get("runtime") or {})

    try:
        return TeamConfig(
            agents=agents,
            embedder=_build_section(EmbedderConfig, raw.get("embedder"),
                                    "embedder"),
            decode=_build_section(DecodeConfig, raw.get("decode"), "decode"),
            verifier=_build_section(VerifierChoice, raw.get("verifier"),
                                    "verifier"),
            training=_build_section(TrainerConfig, training_raw, "training"),
            reward=reward,
            hidden_dim=int(policy_raw.get("hidden_dim", 128)),
            ff_dim=(int(policy_raw["ff_dim"])
                    if policy_raw.get("ff_dim") is not None else None),
            dropout=float(policy_raw.get("dropout", 0.3)),
            workers=int(runtime_raw.get("workers", 1)),
            update_template=str(runtime_raw.get("update_template",
                                                DEFAULT_UPDATE_TEMPLATE)),
            schema_version=schema_version)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
