"""Edge logits, graph sampling/decoding, and graph log-probabilities.

The score of a candidate edge m→n is the bare inner product of the two
contextualized node states; no scaling or bias is applied before the sigmoid.
Infeasible (backward, self) pairs carry a -inf logit, i.e. probability
exactly zero, and never enter the log-probability.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..contribution import AgentOrder, feasible_mask
from ..validation import check_positive

PROB_CLAMP = 1e-7  # probabilities are clipped to [PROB_CLAMP, 1 - PROB_CLAMP] before logs

DECODE_MODES = ("sample", "threshold")


@dataclass(frozen=True)
class DecodeConfig:
    """How a plan is read off the edge probabilities."""

    mode: str = "sample"
    temperature: float = 0.5

    def __post_init__(self) -> None:
        if self.mode not in DECODE_MODES:
            raise ValueError(f"decode mode must be one of {DECODE_MODES}, "
                             f"got {self.mode!r}")
        check_positive(self.temperature, "temperature")


@dataclass
class GraphPlan:
    """A decoded communication graph plus its Bernoulli factorization.

    ``edges`` is a subset of the forward-feasible pairs (1-based agent
    indices), so the graph is acyclic by construction. ``edge_probs`` maps
    every feasible pair to its decode probability.
    """

    order: AgentOrder
    edges: frozenset[tuple[int, int]]
    edge_probs: dict[tuple[int, int], float]
    log_prob: float
    decode_mode: str
    temperature: float

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def feasible_count(self) -> int:
        return len(self.edge_probs)

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def to_json_dict(self) -> dict:
        return {
            "order": list(self.order.order),
            "edges": [list(e) for e in self.sorted_edges()],
            "edge_probs": [[m, n, self.edge_probs[(m, n)]]
                           for m, n in sorted(self.edge_probs)],
            "log_prob": self.log_prob,
            "decode_mode": self.decode_mode,
            "temperature": self.temperature,
        }

    @classmethod
    def from_json_dict(cls, payload: Mapping) -> "GraphPlan":
        return cls(
            order=AgentOrder(tuple(int(a) for a in payload["order"])),
            edges=frozenset((int(m), int(n)) for m, n in payload["edges"]),
            edge_probs={(int(m), int(n)): float(p)
                        for m, n, p in payload["edge_probs"]},
            log_prob=float(payload["log_prob"]),
            decode_mode=str(payload["decode_mode"]),
            temperature=float(payload["temperature"]),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def edge_logits(H: np.ndarray, order: AgentOrder) -> np.ndarray:
    """Pairwise inner-product logits, -inf outside the feasible forward set."""
    h = np.asarray(H, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != order.n_agents:
        raise ValueError(
            f"H must be ({order.n_agents}, d_h), got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("H contains non-finite entries")
    logits = h @ h.T
    logits[~feasible_mask(order)] = -np.inf
    return logits


def _bernoulli_log_prob(present: np.ndarray, probs: np.ndarray,
                        mask: np.ndarray) -> float:
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = np.where(present, np.log(p), np.log1p(-p))
    return float(terms[mask].sum())


def sample_graph(logits: np.ndarray, order: AgentOrder, mode: str = "sample",
                 temperature: float = 1.0,
                 rng: np.random.Generator | None = None) -> GraphPlan:
    """Draw or decode an edge set from masked logits.

    ``sample`` draws each feasible edge independently from
    Bernoulli(sigmoid(logit / temperature)); ``threshold`` keeps exactly the
    edges with positive logit (equivalently sigmoid > 0.5 at any temperature).
    """
    decode = DecodeConfig(mode=mode, temperature=temperature)
    mask = feasible_mask(order)
    n = order.n_agents
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (n, n):
        raise ValueError(f"logits must be ({n}, {n}), got {logits.shape}")

    probs = np.zeros((n, n), dtype=np.float64)
    probs[mask] = _sigmoid(logits[mask] / decode.temperature)

    if decode.mode == "sample":
        if rng is None:
            raise ValueError("sample mode requires an rng")
        present = mask & (rng.random((n, n)) < probs)
    else:
        present = mask & (logits > 0.0)

    edges = frozenset(
        (int(m) + 1, int(n_) + 1) for m, n_ in zip(*np.nonzero(present)))
    edge_probs = {(int(m) + 1, int(n_) + 1): float(probs[m, n_])
                  for m, n_ in zip(*np.nonzero(mask))}
    log_prob = _bernoulli_log_prob(present, probs, mask)
    return GraphPlan(order=order, edges=edges, edge_probs=edge_probs,
                     log_prob=log_prob, decode_mode=decode.mode,
                     temperature=decode.temperature)


def graph_log_prob(plan: GraphPlan) -> float:
    """Sum of per-edge Bernoulli log-likelihoods over all feasible pairs."""
    total = 0.0
    for pair, prob in plan.edge_probs.items():
        p = min(max(prob, PROB_CLAMP), 1.0 - PROB_CLAMP)
        total += np.log(p) if pair in plan.edges else np.log1p(-p)
    return float(total)
