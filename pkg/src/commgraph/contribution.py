"""Contribution scores and the contribution-defined forward order.

Each agent's score is the cosine between its response embedding and the mean
embedding of all responses. Sorting scores in descending order fixes the
topological order every communication edge must respect, which is what makes
any sampled edge set acyclic by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import cosine
from .validation import as_matrix, as_vector


def contribution_scores(embeddings: np.ndarray) -> np.ndarray:
    """Per-agent cosine similarity to the mean response embedding.

    ``embeddings`` is an (N, d) matrix with one response vector per row.
    """
    X = as_matrix(embeddings, name="embeddings")
    center = X.mean(axis=0)
    return np.array([cosine(row, center) for row in X])


@dataclass(frozen=True)
class AgentOrder:
    """A permutation of agent indices 1..N, highest contribution first.

    ``order[k]`` is the agent occupying position ``k`` (0-based position,
    1-based agent index).
    """

    order: tuple[int, ...]
    _positions: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.order)
        if n < 1:
            raise ValueError("order must contain at least one agent")
        if sorted(self.order) != list(range(1, n + 1)):
            raise ValueError(f"order {self.order!r} is not a permutation of 1..{n}")
        object.__setattr__(
            self, "_positions",
            {agent: pos for pos, agent in enumerate(self.order)})

    @property
    def n_agents(self) -> int:
        return len(self.order)

    def position(self, agent: int) -> int:
        """0-based position of a 1-based agent index within the order."""
        return self._positions[agent]


def contribution_order(psi: np.ndarray) -> AgentOrder:
    """Sort agents by descending score; ties keep ascending agent index."""
    scores = as_vector(psi, name="psi")
    ranked = np.argsort(-scores, kind="stable")
    return AgentOrder(tuple(int(i) + 1 for i in ranked))


def feasible_edges(order: AgentOrder) -> frozenset[tuple[int, int]]:
    """All forward pairs (m, n) with m placed before n; |result| = N(N-1)/2."""
    return frozenset(
        (order.order[i], order.order[j])
        for i in range(order.n_agents)
        for j in range(i + 1, order.n_agents))


def feasible_count(n_agents: int) -> int:
    return n_agents * (n_agents - 1) // 2


def feasible_mask(order: AgentOrder) -> np.ndarray:
    """Boolean (N, N) matrix; entry [m-1, n-1] is True iff m→n moves forward."""
    n = order.n_agents
    pos = np.empty(n, dtype=np.int64)
    for agent in range(1, n + 1):
        pos[agent - 1] = order.position(agent)
    return pos[:, None] < pos[None, :]
