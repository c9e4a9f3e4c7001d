"""sklearn-style facade over the graph policy.

``CommunicationPolicy`` carries the hyperparameters, owns a
``PolicyParameters`` instance once initialized (or loaded), and turns a
matrix of response embeddings into a communication plan: contribution
scores -> forward order -> encoder -> edge logits -> decode.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..contribution import contribution_order, contribution_scores
from ..validation import as_matrix
from .encoder import encode
from .graph import GraphPlan, edge_logits, sample_graph
from .params import PolicyParameters, init_params, load_params, save_params


class CommunicationPolicy(BaseEstimator):
    """Response-conditioned policy over forward communication edges.

    Parameters
    ----------
    embed_dim : width of the response embeddings.
    hidden_dim : encoder state width.
    ff_dim : feed-forward width; defaults to ``4 * hidden_dim``.
    dropout : dropout rate used during training forwards.
    decode_mode : default decode for :meth:`plan` ("sample" or "threshold").
    temperature : default sampling temperature for :meth:`plan`.
    random_state : seed for weight initialization and default sampling.
    """

    def __init__(self, embed_dim: int = 384, hidden_dim: int = 128,
                 ff_dim: int | None = None, dropout: float = 0.3,
                 decode_mode: str = "sample", temperature: float = 0.5,
                 random_state: int | None = None):
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.ff_dim = ff_dim
        self.dropout = dropout
        self.decode_mode = decode_mode
        self.temperature = temperature
        self.random_state = random_state

    def initialize(self) -> "CommunicationPolicy":
        """Create fresh seeded parameters; returns self."""
        self.params_ = init_params(self.embed_dim, self.hidden_dim,
                                   self.ff_dim, self.dropout,
                                   rng=self.random_state)
        return self

    @property
    def parameters(self) -> PolicyParameters:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "CommunicationPolicy has no parameters; call initialize(), "
                "load(), or attach trained parameters first")
        return self.params_

    def _prepared(self, X: np.ndarray):
        X = as_matrix(X, cols=self.parameters.embed_dim, name="X")
        order = contribution_order(contribution_scores(X))
        return X, order

    def plan(self, X: np.ndarray, rng: np.random.Generator | None = None, *,
             decode_mode: str | None = None,
             temperature: float | None = None) -> GraphPlan:
        """Decode a plan for one response set using the configured decode."""
        X, order = self._prepared(X)
        mode = decode_mode or self.decode_mode
        if rng is None and mode == "sample":
            rng = np.random.default_rng(self.random_state)
        H = encode(X, self.parameters)
        logits = edge_logits(H, order)
        return sample_graph(
            logits, order, mode=mode,
            temperature=self.temperature if temperature is None else temperature,
            rng=rng)

    def predict(self, X: np.ndarray) -> GraphPlan:
        """Deterministic threshold decode (edge kept iff its logit is positive)."""
        return self.plan(X, decode_mode="threshold")

    def sample(self, X: np.ndarray, rng: np.random.Generator,
               temperature: float | None = None) -> GraphPlan:
        return self.plan(X, rng, decode_mode="sample", temperature=temperature)

    def edge_probabilities(self, X: np.ndarray,
                           temperature: float | None = None
                           ) -> dict[tuple[int, int], float]:
        """Decode probabilities for every feasible pair, without sampling."""
        return self.plan(X, decode_mode="threshold",
                         temperature=temperature).edge_probs

    def save(self, path: str | Path) -> None:
        save_params(self.parameters, path)

    @classmethod
    def load(cls, path: str | Path, *, decode_mode: str = "sample",
             temperature: float = 0.5) -> "CommunicationPolicy":
        params = load_params(path)
        policy = cls(embed_dim=params.embed_dim, hidden_dim=params.hidden_dim,
                     ff_dim=params.ff_dim, dropout=params.dropout,
                     decode_mode=decode_mode, temperature=temperature)
        policy.params_ = params
        return policy
