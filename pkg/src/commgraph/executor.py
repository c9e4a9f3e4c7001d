"""Episode execution: parallel drafts, plan prediction, one optional
propagation pass over the sampled DAG, and judge-free aggregation.

An episode never re-invokes an agent more than once after the draft stage:
a node is updated iff it has at least one incoming edge, and the empty plan
degenerates to pure parallel execution with zero second-stage calls.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .agents import (DEFAULT_UPDATE_TEMPLATE, Agent, AgentError, TeamConfig,
                     build_agent)
from .contribution import contribution_order, contribution_scores
from .embedding import build_embedder, cosine
from .evaluation import VerifierChoice, verify
from .policy.encoder import encode
from .policy.graph import DecodeConfig, GraphPlan, edge_logits, sample_graph
from .policy.params import PolicyParameters
from .trainer import EpisodeSample, RewardRule, sample_training_plan

TRACE_SCHEMA_VERSION = 1


class EpisodeError(RuntimeError):
    """A stage of episode execution failed; carries the stage and partials."""

    def __init__(self, stage: str, message: str,
                 partial_trace: dict | None = None):
        super().__init__(f"{stage} stage failed: {message}")
        self.stage = stage
        self.partial_trace = partial_trace


@dataclass
class ResponseRecord:
    """One agent response (draft or updated) with usage accounting."""

    agent_index: int
    stage: str  # "draft" | "updated"
    text: str
    embedding: np.ndarray | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    tokens_approximate: bool = False

    def to_json_dict(self) -> dict:
        return {"agent": self.agent_index, "stage": self.stage,
                "text": self.text, "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
                "tokens_approximate": self.tokens_approximate}

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "ResponseRecord":
        return cls(agent_index=int(payload["agent"]),
                   stage=str(payload["stage"]), text=str(payload["text"]),
                   prompt_tokens=int(payload["prompt_tokens"]),
                   completion_tokens=int(payload["completion_tokens"]),
                   tokens_approximate=bool(
                       payload.get("tokens_approximate", False)))


@dataclass
class EpisodeTrace:
    """Full record of one query's execution.

    Embedding vectors are kept in memory but not serialized; they are
    reproducible from the texts and the embedder configuration.
    """

    query: str
    drafts: list[ResponseRecord]
    psi: list[float]
    plan: GraphPlan
    updated: dict[int, ResponseRecord]
    final_index: int
    final_text: str
    draft_final_index: int
    draft_final_text: str
    task_reward: int | None = None
    draft_task_reward: int | None = None
    aggregate_fallback: bool = False
    draft_aggregate_fallback: bool = False
    schema_version: int = TRACE_SCHEMA_VERSION

    @property
    def prompt_tokens(self) -> int:
        records = list(self.drafts) + list(self.updated.values())
        return sum(r.prompt_tokens for r in records)

    @property
    def completion_tokens(self) -> int:
        records = list(self.drafts) + list(self.updated.values())
        return sum(r.completion_tokens for r in records)

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "query": self.query,
            "psi": [float(p) for p in self.psi],
            "order": list(self.plan.order.order),
            "plan": self.plan.to_json_dict(),
            "drafts": [r.to_json_dict() for r in self.drafts],
            "updated": [self.updated[i].to_json_dict()
                        for i in sorted(self.updated)],
            "final_index": self.final_index,
            "final_text": self.final_text,
            "draft_final_index": self.draft_final_index,
            "draft_final_text": self.draft_final_text,
            "task_reward": self.task_reward,
            "draft_task_reward": self.draft_task_reward,
            "aggregate_fallback": self.aggregate_fallback,
            "draft_aggregate_fallback": self.draft_aggregate_fallback,
            "tokens": {"prompt": self.prompt_tokens,
                       "completion": self.completion_tokens,
                       "total": self.prompt_tokens + self.completion_tokens},
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "EpisodeTrace":
        version = int(payload.get("schema_version", -1))
        if version != TRACE_SCHEMA_VERSION:
            raise ValueError(f"unsupported trace schema_version {version} "
                             f"(expected {TRACE_SCHEMA_VERSION})")
        return cls(
            query=str(payload["query"]),
            drafts=[ResponseRecord.from_json_dict(r)
                    for r in payload["drafts"]],
            psi=[float(p) for p in payload["psi"]],
            plan=GraphPlan.from_json_dict(payload["plan"]),
            updated={int(r["agent"]): ResponseRecord.from_json_dict(r)
                     for r in payload["updated"]},
            final_index=int(payload["final_index"]),
            final_text=str(payload["final_text"]),
            draft_final_index=int(payload["draft_final_index"]),
            draft_final_text=str(payload["draft_final_text"]),
            task_reward=(None if payload.get("task_reward") is None
                         else int(payload["task_reward"])),
            draft_task_reward=(None if payload.get("draft_task_reward") is None
                               else int(payload["draft_task_reward"])),
            aggregate_fallback=bool(payload.get("aggregate_fallback", False)),
            draft_aggregate_fallback=bool(
                payload.get("draft_aggregate_fallback", False)),
            schema_version=version)


def _map_concurrently(fn, items: Sequence, workers: int) -> list:
    """Apply ``fn`` over items, preserving input order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def draft_stage(query: str, agents: Sequence[Agent], embedder,
                workers: int = 1) -> list[ResponseRecord]:
    """Call every agent in parallel with the bare query; embed the drafts.

    Records come back in agent-index order regardless of completion order.
    The episode cannot proceed with a partial team, so any failure aborts.
    """
    if len(agents) < 1:
        raise ValueError("draft stage requires at least one agent")

    def call(indexed) -> ResponseRecord:
        index, agent = indexed
        try:
            response = agent.respond(query)
        except AgentError as exc:
            raise EpisodeError("draft", f"agent {index}: {exc}") from exc
        return ResponseRecord(agent_index=index, stage="draft",
                              text=response.text,
                              prompt_tokens=response.prompt_tokens,
                              completion_tokens=response.completion_tokens,
                              tokens_approximate=response.tokens_approximate)

    records = _map_concurrently(call, list(enumerate(agents, start=1)),
                                workers)
    vectors = embedder.transform([r.text for r in records])
    for record, vec in zip(records, vectors):
        record.embedding = vec
    return records


def activation(plan: GraphPlan) -> np.ndarray:
    """Boolean vector u: u[n-1] is True iff node n has an incoming edge."""
    u = np.zeros(plan.order.n_agents, dtype=bool)
    for _, target in plan.edges:
        u[target - 1] = True
    return u


def _propagation_levels(plan: GraphPlan) -> list[list[int]]:
    """Group activated nodes into precedence levels along the order.

    A node's level is one past the deepest activated parent; nodes in the
    same level share no edges and may run concurrently.
    """
    parents: dict[int, list[int]] = {}
    for m, n in plan.edges:
        parents.setdefault(n, []).append(m)
    level: dict[int, int] = {}
    for agent in plan.order.order:  # order position = topological order
        if agent in parents:
            level[agent] = 1 + max(level.get(m, 0) for m in parents[agent])
    grouped: dict[int, list[int]] = {}
    for agent, lv in level.items():
        grouped.setdefault(lv, []).append(agent)
    return [sorted(grouped[lv]) for lv in sorted(grouped)]


def propagate(plan: GraphPlan, drafts: Sequence[ResponseRecord],
              agents: Sequence[Agent], query: str, embedder,
              update_template: str = DEFAULT_UPDATE_TEMPLATE,
              workers: int = 1) -> dict[int, ResponseRecord]:
    """One sequential consolidation pass over the sampled DAG.

    Each activated node is called exactly once, seeing for every parent the
    parent's updated text when the parent ran earlier in this pass, else the
    parent's draft. Nodes without incoming edges keep their drafts.
    """
    order = plan.order
    parents_of: dict[int, list[int]] = {}
    for m, n in plan.edges:
        parents_of.setdefault(n, []).append(m)

    updated: dict[int, ResponseRecord] = {}

    def call(agent_index: int) -> ResponseRecord:
        parent_items = []
        for m in sorted(parents_of[agent_index],
                        key=lambda a: order.position(a)):
            # precedence contract: every parent is finalized before this read
            assert order.position(m) < order.position(agent_index), \
                "propagation read a parent that does not precede the node"
            source = updated.get(m) or drafts[m - 1]
            parent_items.append((order.position(m), source.text))
        try:
            response = agents[agent_index - 1].respond(query, parent_items)
        except AgentError as exc:
            raise EpisodeError("propagate",
                               f"agent {agent_index}: {exc}") from exc
        return ResponseRecord(agent_index=agent_index, stage="updated",
                              text=response.text,
                              prompt_tokens=response.prompt_tokens,
                              completion_tokens=response.completion_tokens,
                              tokens_approximate=response.tokens_approximate)

    for level in _propagation_levels(plan):
        for record in _map_concurrently(call, level, workers):
            updated[record.agent_index] = record

    if updated:
        texts = [updated[i].text for i in sorted(updated)]
        vectors = embedder.transform(texts)
        for agent_index, vec in zip(sorted(updated), vectors):
            updated[agent_index].embedding = vec
    return updated


@dataclass
class AggregateResult:
    final_index: int
    final_text: str
    weights: np.ndarray
    uniform_fallback: bool = False


def aggregate(records: Sequence[ResponseRecord]) -> AggregateResult:
    """Pick the response closest to the contribution-weighted centroid.

    Weights are cosine-to-mean similarities clamped at zero; if every weight
    clamps to zero the centroid falls back to the unweighted mean and the
    result is flagged. Ties go to the lowest agent index.
    """
    if len(records) == 0:
        raise ValueError("aggregate requires at least one record")
    ordered = sorted(records, key=lambda r: r.agent_index)
    if any(r.embedding is None for r in ordered):
        raise ValueError("aggregate requires embeddings on every record")
    Z = np.stack([r.embedding for r in ordered])
    center = Z.mean(axis=0)
    weights = np.array([cosine(z, center) for z in Z])
    clamped = np.maximum(weights, 0.0)
    fallback = bool(np.all(clamped == 0.0))
    if fallback:
        clamped = np.ones_like(clamped)
    centroid = (clamped[:, None] * Z).sum(axis=0) / clamped.sum()
    sims = np.array([cosine(z, centroid) for z in Z])
    best = int(np.argmax(sims))  # argmax takes the first, i.e. lowest index
    return AggregateResult(final_index=ordered[best].agent_index,
                           final_text=ordered[best].text,
                           weights=weights, uniform_fallback=fallback)


class EpisodeRunner:
    """Executes episodes for a fixed team, embedder, and policy parameters."""

    def __init__(self, agents: Sequence[Agent], embedder,
                 params: PolicyParameters,
                 decode: DecodeConfig | None = None,
                 verifier: VerifierChoice | None = None, workers: int = 1,
                 update_template: str = DEFAULT_UPDATE_TEMPLATE):
        if len(agents) < 1:
            raise ValueError("team must contain at least one agent")
        self.agents = list(agents)
        self.embedder = embedder
        self.params = params
        self.decode = decode or DecodeConfig()
        self.verifier = verifier
        self.workers = workers
        self.update_template = update_template

    @classmethod
    def from_team(cls, team: TeamConfig,
                  params: PolicyParameters) -> "EpisodeRunner":
        agents = [build_agent(spec, team.update_template)
                  for spec in team.agents]
        return cls(agents=agents, embedder=build_embedder(team.embedder),
                   params=params, decode=team.decode, verifier=team.verifier,
                   workers=team.workers, update_template=team.update_template)

    def _verify(self, text: str, gold: str | None) -> int | None:
        if gold is None or self.verifier is None:
            return None
        return verify(text, gold, self.verifier)

    def _execute(self, query: str, rng: np.random.Generator | None,
                 gold: str | None, *, train: bool, temperature: float = 1.0):
        agents = [a.clone_for_episode() for a in self.agents]
        drafts = draft_stage(query, agents, self.embedder, self.workers)
        X = np.stack([r.embedding for r in drafts])
        psi = contribution_scores(X)
        order = contribution_order(psi)

        masks = None
        if train:
            if rng is None:
                raise ValueError("training episodes require an rng")
            plan, masks = sample_training_plan(X, self.params, rng, order,
                                               temperature)
        else:
            H = encode(X, self.params)
            logits = edge_logits(H, order)
            plan = sample_graph(logits, order, mode=self.decode.mode,
                                temperature=self.decode.temperature, rng=rng)

        draft_agg = aggregate(drafts)
        if plan.edges:
            try:
                updated = propagate(plan, drafts, agents, query,
                                    self.embedder, self.update_template,
                                    self.workers)
            except EpisodeError as exc:
                exc.partial_trace = {
                    "query": query,
                    "drafts": [r.to_json_dict() for r in drafts],
                    "plan": plan.to_json_dict(),
                }
                raise
            candidates = [updated.get(i, drafts[i - 1])
                          for i in range(1, len(drafts) + 1)]
            final_agg = aggregate(candidates)
        else:
            updated = {}
            final_agg = draft_agg

        trace = EpisodeTrace(
            query=query,
            drafts=drafts,
            psi=[float(p) for p in psi],
            plan=plan,
            updated=updated,
            final_index=final_agg.final_index,
            final_text=final_agg.final_text,
            draft_final_index=draft_agg.final_index,
            draft_final_text=draft_agg.final_text,
            task_reward=self._verify(final_agg.final_text, gold),
            draft_task_reward=self._verify(draft_agg.final_text, gold),
            aggregate_fallback=final_agg.uniform_fallback,
            draft_aggregate_fallback=draft_agg.uniform_fallback)
        # single-pass bound: at most one update call per agent
        assert len(updated) <= len(drafts)
        return trace, X, order, plan, masks

    def run_episode(self, query: str, rng: np.random.Generator | None = None,
                    gold: str | None = None) -> EpisodeTrace:
        """Draft → score → order → plan → (propagate) → aggregate."""
        trace, _, _, _, _ = self._execute(query, rng, gold, train=False)
        return trace

    def collect_training_episode(
            self, query: str, rng: np.random.Generator,
            gold: str | None = None,
            reward_rule: RewardRule | None = None,
            temperature: float = 1.0) -> tuple[EpisodeTrace, EpisodeSample]:
        """Run one train-mode episode and package it for the trainer."""
        rule = reward_rule or RewardRule()
        trace, X, order, plan, masks = self._execute(
            query, rng, gold, train=True, temperature=temperature)
        reward = rule.task_reward(trace.task_reward, plan)
        sample = EpisodeSample(inputs=X, order=order, edges=plan.edges,
                               task_reward=reward,
                               feasible_count=plan.feasible_count,
                               dropout_masks=masks, temperature=temperature)
        return trace, sample
