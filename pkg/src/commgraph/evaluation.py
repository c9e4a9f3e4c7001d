"""Binary answer verification and episode-level diagnostics.

Verifiers map (prediction, gold) to {0, 1}. Diagnostics summarize how
communication changed answers across an evaluation run: rescue (draft wrong,
final right), harm (draft right, final wrong), preservation (right stayed
right), communication sparsity, and token usage.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import requests

CURRENCY_CHARS = "$€£¥₹"
_NUMERIC_CLEAN = re.compile(f"[,{CURRENCY_CHARS}\\s]")


class VerifierError(RuntimeError):
    """An external verifier call failed (transport, status, or schema)."""


@dataclass
class VerifierChoice:
    """Which verification rule to apply and its normalization options."""

    kind: str = "exact-match"
    case_fold: bool = True
    collapse_whitespace: bool = True
    numeric_tolerance: float = 1e-9
    endpoint: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.kind not in ("exact-match", "normalized-numeric", "external"):
            raise ValueError(f"unknown verifier kind {self.kind!r}")
        if self.kind == "external" and not self.endpoint:
            raise ValueError("external verifier requires an endpoint")


def _parse_number(text: str) -> float | None:
    cleaned = _NUMERIC_CLEAN.sub("", text)
    if not cleaned:
        return None
    try:
        return float(cleaned)
    except ValueError:
        return None


def _normalize_text(text: str, choice: VerifierChoice) -> str:
    if choice.collapse_whitespace:
        text = " ".join(text.split())
    if choice.case_fold:
        text = text.casefold()
    return text


def _verify_external(prediction: str, gold: str, choice: VerifierChoice) -> int:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(choice.api_key_env, "")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    try:
        response = requests.post(choice.endpoint,
                                 json={"prediction": prediction, "gold": gold},
                                 headers=headers, timeout=choice.timeout)
    except requests.RequestException as exc:
        raise VerifierError(f"failed to reach verifier endpoint: {exc}") from exc
    if not 200 <= response.status_code < 300:
        raise VerifierError(
            f"verifier endpoint returned status {response.status_code}")
    try:
        return 1 if bool(response.json()["correct"]) else 0
    except (ValueError, KeyError, TypeError) as exc:
        raise VerifierError(f"malformed verifier response: {exc}") from exc


def verify(prediction: str, gold: str, choice: VerifierChoice) -> int:
    """1 iff the prediction matches the gold answer under the chosen rule.

    ``exact-match`` is byte comparison. ``normalized-numeric`` strips
    whitespace, commas, and currency symbols, then compares as decimals
    within the configured absolute tolerance, falling back to normalized
    string equality when either side fails to parse.
    """
    if choice.kind == "exact-match":
        return 1 if prediction == gold else 0
    if choice.kind == "normalized-numeric":
        a = _parse_number(prediction)
        b = _parse_number(gold)
        if a is not None and b is not None:
            return 1 if abs(a - b) <= choice.numeric_tolerance else 0
        return (1 if _normalize_text(prediction, choice)
                == _normalize_text(gold, choice) else 0)
    return _verify_external(prediction, gold, choice)


@dataclass
class BehaviorStats:
    """2x2 correctness decomposition plus sparsity and token diagnostics."""

    episodes: int
    draft_correct: int
    draft_wrong: int
    preserved: int
    harmed: int
    rescued: int
    unrescued: int
    rescue_rate: float | None
    harm_rate: float | None
    preservation_rate: float | None
    low_edge_fraction: float
    mean_edge_count: float
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)

    def format_table(self) -> str:
        def fmt(rate: float | None) -> str:
            return "n/a" if rate is None else f"{rate:.4f}"

        rows = [
            ("episodes", str(self.episodes)),
            ("draft correct", str(self.draft_correct)),
            ("draft wrong", str(self.draft_wrong)),
            ("preserved (right→right)", str(self.preserved)),
            ("harmed (right→wrong)", str(self.harmed)),
            ("rescued (wrong→right)", str(self.rescued)),
            ("rescue rate", fmt(self.rescue_rate)),
            ("harm rate", fmt(self.harm_rate)),
            ("preservation rate", fmt(self.preservation_rate)),
            ("low-edge fraction", f"{self.low_edge_fraction:.4f}"),
            ("mean edge count", f"{self.mean_edge_count:.4f}"),
            ("prompt tokens", str(self.prompt_tokens)),
            ("completion tokens", str(self.completion_tokens)),
            ("total tokens", str(self.total_tokens)),
        ]
        width = max(len(label) for label, _ in rows)
        return "\n".join(f"{label.ljust(width)}  {value}"
                         for label, value in rows)


def _trace_view(trace, index: int) -> dict:
    """Extract the fields diagnostics need from a trace object or JSON dict."""
    if isinstance(trace, Mapping):
        plan = trace.get("plan") or {}
        edges = plan.get("edges", [])
        order = plan.get("order", trace.get("order", []))
        tokens = trace.get("tokens") or {}
        view = {
            "draft_correct": trace.get("draft_task_reward"),
            "final_correct": trace.get("task_reward"),
            "edge_count": len(edges),
            "n_agents": len(order),
            "prompt_tokens": int(tokens.get("prompt", 0)),
            "completion_tokens": int(tokens.get("completion", 0)),
        }
    else:
        view = {
            "draft_correct": trace.draft_task_reward,
            "final_correct": trace.task_reward,
            "edge_count": trace.plan.edge_count,
            "n_agents": trace.plan.order.n_agents,
            "prompt_tokens": trace.prompt_tokens,
            "completion_tokens": trace.completion_tokens,
        }
    if view["draft_correct"] is None or view["final_correct"] is None:
        raise ValueError(
            f"trace {index} lacks draft/final correctness; behavior stats "
            f"need gold-labeled episodes")
    return view


def behavior_stats(traces: Sequence) -> BehaviorStats:
    """Aggregate the rescue/harm/preservation decomposition over traces.

    A trace counts as low-edge when its plan uses at most half of the
    feasible pairs. Rates with an empty denominator are reported as None.
    """
    views = [_trace_view(t, i) for i, t in enumerate(traces)]
    if not views:
        raise ValueError("no episodes to evaluate")

    draft_correct = sum(1 for v in views if v["draft_correct"])
    draft_wrong = len(views) - draft_correct
    preserved = sum(1 for v in views
                    if v["draft_correct"] and v["final_correct"])
    harmed = sum(1 for v in views
                 if v["draft_correct"] and not v["final_correct"])
    rescued = sum(1 for v in views
                  if not v["draft_correct"] and v["final_correct"])
    unrescued = sum(1 for v in views
                    if not v["draft_correct"] and not v["final_correct"])

    low_edge = sum(
        1 for v in views
        if v["edge_count"] <= v["n_agents"] * (v["n_agents"] - 1) / 2 / 2)

    return BehaviorStats(
        episodes=len(views),
        draft_correct=draft_correct,
        draft_wrong=draft_wrong,
        preserved=preserved,
        harmed=harmed,
        rescued=rescued,
        unrescued=unrescued,
        rescue_rate=rescued / draft_wrong if draft_wrong else None,
        harm_rate=harmed / draft_correct if draft_correct else None,
        preservation_rate=preserved / draft_correct if draft_correct else None,
        low_edge_fraction=low_edge / len(views),
        mean_edge_count=sum(v["edge_count"] for v in views) / len(views),
        prompt_tokens=sum(v["prompt_tokens"] for v in views),
        completion_tokens=sum(v["completion_tokens"] for v in views),
        total_tokens=sum(v["prompt_tokens"] + v["completion_tokens"]
                         for v in views))


def token_totals(traces: Iterable) -> tuple[int, int, int]:
    """Exact (prompt, completion, total) sums across traces."""
    prompt = completion = 0
    for trace in traces:
        if isinstance(trace, Mapping):
            tokens = trace.get("tokens") or {}
            prompt += int(tokens.get("prompt", 0))
            completion += int(tokens.get("completion", 0))
        else:
            prompt += trace.prompt_tokens
            completion += trace.completion_tokens
    return prompt, completion, prompt + completion
