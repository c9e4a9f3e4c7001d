"""Policy-gradient training: sparsity-shaped rewards, batch-mean baseline,
exact REINFORCE gradients, Adam with global-norm clipping, and a
finite-difference gradient checker.

An episode used for training replays the exact forward pass it was sampled
from: when dropout was active during sampling, the recorded masks are applied
again in the gradient pass so the differentiated log-probability matches the
sampling distribution.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .contribution import AgentOrder, feasible_mask
from .policy.encoder import (DropoutMasks, draw_dropout_masks, encoder_backward,
                             encoder_forward)
from .policy.graph import PROB_CLAMP, GraphPlan, edge_logits, sample_graph
from .policy.params import TENSOR_NAMES, PolicyParameters
from .validation import check_nonnegative, check_positive


class TrainingError(RuntimeError):
    """Non-finite loss, gradient, or update; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainerConfig:
    """Hyperparameters for policy-gradient training.

    ``adam_eps`` defaults to 1e-2 rather than the textbook 1e-8: at the
    default learning rate of 0.1, a tiny epsilon turns every Adam update
    into a full +/-0.1 sign step per parameter, which empirically drives
    the edge head into saturation (all probabilities pinned at 0/1, zero
    advantage variance, training frozen). A larger epsilon makes steps
    proportional to small gradients while leaving large ones untouched.
    """

    batch_size: int = 32
    updates: int = 50
    learning_rate: float = 0.1
    sparsity_coef: float = 0.1
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-2
    seed: int = 0

    def __post_init__(self) -> None:
        check_positive(self.batch_size, "batch_size")
        check_nonnegative(self.updates, "updates")
        check_positive(self.learning_rate, "learning_rate")
        check_nonnegative(self.sparsity_coef, "sparsity_coef")
        check_positive(self.clip_norm, "clip_norm")
        check_positive(self.adam_eps, "adam_eps")
        for name in ("adam_beta1", "adam_beta2"):
            beta = getattr(self, name)
            if not 0.0 <= beta < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {beta}")


@dataclass
class EpisodeSample:
    """Everything needed to recompute one episode's plan log-probability."""

    inputs: np.ndarray
    order: AgentOrder
    edges: frozenset[tuple[int, int]]
    task_reward: float
    feasible_count: int
    dropout_masks: DropoutMasks | None = None
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if len(self.edges) > self.feasible_count:
            raise ValueError("edge count exceeds the feasible-pair count")

    @property
    def edge_count(self) -> int:
        return len(self.edges)


@dataclass
class RewardRule:
    """Task reward source: the verifier, a constant, or a designated edge.

    The synthetic modes exist for controlled training runs and diagnostics;
    ``task`` is the production setting.
    """

    kind: str = "task"
    value: float = 1.0
    edge: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("task", "constant", "designated-edge"):
            raise ValueError(f"unknown reward rule {self.kind!r}")
        if self.kind == "designated-edge" and self.edge is None:
            raise ValueError("designated-edge reward requires an edge")

    def task_reward(self, verified: float | None, plan: GraphPlan) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "designated-edge":
            return 1.0 if tuple(self.edge) in plan.edges else 0.0
        if verified is None:
            raise ValueError("task reward requires a verifier result")
        return float(verified)


def sparsity_reward(task_reward: float, edge_count: int, feasible_count: int,
                    sparsity_coef: float) -> float:
    """Task reward minus the edge-count penalty (fractional edge usage)."""
    if not 0 <= edge_count <= max(feasible_count, 0):
        raise ValueError(
            f"edge_count {edge_count} outside [0, {feasible_count}]")
    check_nonnegative(sparsity_coef, "sparsity_coef")
    if feasible_count == 0:
        return float(task_reward)
    return float(task_reward) - sparsity_coef * edge_count / feasible_count


def batch_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Rewards minus their batch mean; sums to zero."""
    if len(rewards) == 0:
        raise ValueError("cannot compute advantages of an empty batch")
    arr = np.asarray(rewards, dtype=np.float64)
    return arr - arr.mean()


def _present_matrix(sample: EpisodeSample) -> np.ndarray:
    n = sample.order.n_agents
    present = np.zeros((n, n), dtype=bool)
    for m, n_ in sample.edges:
        present[m - 1, n_ - 1] = True
    return present


def _sample_log_prob_forward(sample: EpisodeSample, params: PolicyParameters):
    """Recompute log p(edges | inputs, order) plus backward ingredients.

    Also returns the smoothness signature of this forward (ReLU signs and
    probability-clamp activity), which the gradient checker uses to detect
    probe steps that straddle a nondifferentiable point.
    """
    h, cache = encoder_forward(
        sample.inputs, params,
        train_mode=sample.dropout_masks is not None,
        masks=sample.dropout_masks)
    logits = edge_logits(h, sample.order)
    mask = feasible_mask(sample.order)
    present = _present_matrix(sample)

    scaled = np.zeros_like(logits)
    scaled[mask] = logits[mask] / sample.temperature
    probs = np.zeros_like(logits)
    probs[mask] = 1.0 / (1.0 + np.exp(-scaled[mask]))
    clamped = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    terms = np.where(present, np.log(clamped), np.log1p(-clamped))
    log_prob = float(terms[mask].sum())

    # d log-likelihood / d logit is (e - p) where the clamp is inactive
    active = mask & (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    d_logits = np.zeros_like(logits)
    d_logits[active] = (present[active] - probs[active]) / sample.temperature
    signature = np.concatenate([(cache.ff_pre > 0.0).ravel(), active[mask]])
    return log_prob, d_logits, h, cache, signature


def reinforce_loss(batch: Sequence[EpisodeSample], params: PolicyParameters,
                   config: TrainerConfig | None = None,
                   advantages: Sequence[float] | None = None,
                   compute_grads: bool = True
                   ) -> tuple[float, dict[str, np.ndarray] | None]:
    """Policy-gradient surrogate loss and its exact parameter gradients.

    The loss is ``-(1/B) * sum_i A_i * log p(edges_i | inputs_i, order_i)``.
    Advantages default to the batch-mean-baselined sparsity-shaped rewards;
    passing them explicitly overrides that (useful for targeted tests).
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    cfg = config or TrainerConfig()
    if advantages is None:
        rewards = [sparsity_reward(s.task_reward, s.edge_count,
                                   s.feasible_count, cfg.sparsity_coef)
                   for s in batch]
        advantages = batch_advantages(rewards)
    elif len(advantages) != len(batch):
        raise ValueError("advantages length must match batch size")

    b = len(batch)
    loss = 0.0
    grads: dict[str, np.ndarray] | None = None
    if compute_grads:
        grads = {name: np.zeros(getattr(params, name).shape, dtype=np.float64)
                 for name in TENSOR_NAMES}

    for sample, advantage in zip(batch, advantages):
        log_prob, d_logits, h, cache, _ = _sample_log_prob_forward(sample,
                                                                   params)
        coeff = -float(advantage) / b
        loss += coeff * log_prob
        if not compute_grads or coeff == 0.0:
            continue
        d_lambda = coeff * d_logits
        d_h = (d_lambda + d_lambda.T) @ h
        for name, grad in encoder_backward(d_h, cache, params).items():
            grads[name] += grad

    if not np.isfinite(loss) or (
            grads is not None
            and any(not np.all(np.isfinite(g)) for g in grads.values())):
        raise TrainingError(
            "non-finite loss or gradient",
            diagnostics={"loss": loss,
                         "batch_edges": [s.edge_count for s in batch],
                         "advantages": list(map(float, advantages))})
    return loss, grads


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale gradients in place to a global L2 norm of at most ``clip_norm``.

    Returns the pre-clip global norm.
    """
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if clip_norm > 0 and total > clip_norm:
        scale = clip_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per tensor."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: PolicyParameters) -> "AdamState":
        return cls(
            step=0,
            m={name: np.zeros(arr.shape, dtype=np.float64)
               for name, arr in params.tensor_items()},
            v={name: np.zeros(arr.shape, dtype=np.float64)
               for name, arr in params.tensor_items()})


@dataclass
class TrainStats:
    """Per-update summary written to the training log."""

    loss: float
    grad_norm: float
    mean_reward: float
    mean_task_reward: float
    mean_edge_count: float

    def to_json_dict(self) -> dict:
        return {"loss": self.loss, "grad_norm": self.grad_norm,
                "mean_reward": self.mean_reward,
                "mean_task_reward": self.mean_task_reward,
                "mean_edge_count": self.mean_edge_count}


def train_step(batch: Sequence[EpisodeSample], params: PolicyParameters,
               opt_state: AdamState, config: TrainerConfig,
               advantages: Sequence[float] | None = None) -> TrainStats:
    """One policy update: loss, global-norm clipping, Adam; mutates in place."""
    loss, grads = reinforce_loss(batch, params, config, advantages)
    assert grads is not None
    grad_norm = clip_gradients(grads, config.clip_norm)

    opt_state.step += 1
    t = opt_state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    for name in TENSOR_NAMES:
        g = grads[name]
        opt_state.m[name] = b1 * opt_state.m[name] + (1.0 - b1) * g
        opt_state.v[name] = b2 * opt_state.v[name] + (1.0 - b2) * g * g
        m_hat = opt_state.m[name] / (1.0 - b1 ** t)
        v_hat = opt_state.v[name] / (1.0 - b2 ** t)
        updated = (getattr(params, name).astype(np.float64)
                   - config.learning_rate * m_hat / (np.sqrt(v_hat)
                                                     + config.adam_eps))
        if not np.all(np.isfinite(updated)):
            raise TrainingError(f"non-finite update for tensor {name}",
                                diagnostics={"step": t, "grad_norm": grad_norm})
        getattr(params, name)[...] = updated.astype(np.float32)

    rewards = [sparsity_reward(s.task_reward, s.edge_count, s.feasible_count,
                               config.sparsity_coef) for s in batch]
    return TrainStats(
        loss=loss, grad_norm=grad_norm,
        mean_reward=float(np.mean(rewards)),
        mean_task_reward=float(np.mean([s.task_reward for s in batch])),
        mean_edge_count=float(np.mean([s.edge_count for s in batch])))


def sample_training_plan(X: np.ndarray, params: PolicyParameters,
                         rng: np.random.Generator, order: AgentOrder,
                         temperature: float = 1.0
                         ) -> tuple[GraphPlan, DropoutMasks | None]:
    """Train-mode plan sampling with recorded dropout masks for replay."""
    masks = (draw_dropout_masks(rng, X.shape[0], params)
             if params.dropout > 0.0 else None)
    h, _ = encoder_forward(X, params, train_mode=True, rng=rng, masks=masks)
    logits = edge_logits(h, order)
    plan = sample_graph(logits, order, mode="sample", temperature=temperature,
                        rng=rng)
    return plan, masks


EpisodeFn = Callable[[np.random.Generator, PolicyParameters], EpisodeSample]


def run_training(params: PolicyParameters, episode_fn: EpisodeFn,
                 config: TrainerConfig,
                 log_path: str | Path | None = None) -> list[TrainStats]:
    """Run the configured number of updates, optionally logging JSONL."""
    rng = np.random.default_rng(config.seed)
    opt_state = AdamState.zeros(params)
    history: list[TrainStats] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for update in range(config.updates):
            started = time.monotonic()
            batch = [episode_fn(rng, params) for _ in range(config.batch_size)]
            stats = train_step(batch, params, opt_state, config)
            history.append(stats)
            if log_fh is not None:
                record = {"update": update, **stats.to_json_dict(),
                          "wall_time_s": time.monotonic() - started}
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return history


@dataclass
class GradientCheckReport:
    """Per-tensor agreement between analytic and central-difference gradients."""

    per_tensor: dict[str, float]
    step: float
    tolerance: float
    kink_skips: dict[str, int]

    @property
    def max_relative_error(self) -> float:
        return max(self.per_tensor.values())

    @property
    def total_kink_skips(self) -> int:
        return sum(self.kink_skips.values())

    @property
    def flagged(self) -> list[str]:
        return [name for name, err in sorted(self.per_tensor.items())
                if err >= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.flagged


def gradient_check(params: PolicyParameters, batch: Sequence[EpisodeSample],
                   config: TrainerConfig | None = None, step: float = 1e-4,
                   tolerance: float = 1e-4,
                   advantages: Sequence[float] | None = None,
                   analytic_grads: dict[str, np.ndarray] | None = None
                   ) -> GradientCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs on a float64 copy of the parameters so the probe step is exact.
    The per-tensor error is ``max|analytic - numeric|`` divided by the
    largest gradient magnitude seen in that tensor. The scale is floored at
    1e-6 so tensors whose true gradient is identically zero (the key bias
    cancels inside the row softmax) measure finite-difference noise against
    a fixed absolute scale instead of dividing noise by noise.

    A central difference only estimates the derivative where the loss is
    smooth across the whole probe interval. Elements whose +/- evaluations
    land on different sides of a ReLU kink or of the probability clamp are
    excluded and counted in ``kink_skips``.

    ``analytic_grads`` overrides the computed gradients, which lets the
    checker validate itself against a deliberately corrupted input.
    """
    cfg = config or TrainerConfig()
    if advantages is None:
        rewards = [sparsity_reward(s.task_reward, s.edge_count,
                                   s.feasible_count, cfg.sparsity_coef)
                   for s in batch]
        advantages = batch_advantages(rewards)

    params64 = params.copy(dtype=np.float64)
    if analytic_grads is None:
        _, analytic_grads = reinforce_loss(batch, params64, cfg, advantages)
        assert analytic_grads is not None

    b = len(batch)

    def loss_and_signature() -> tuple[float, np.ndarray]:
        loss = 0.0
        signatures = []
        for sample, advantage in zip(batch, advantages):
            log_prob, _, _, _, sig = _sample_log_prob_forward(sample, params64)
            loss += -float(advantage) / b * log_prob
            signatures.append(sig)
        return loss, np.concatenate(signatures)

    per_tensor: dict[str, float] = {}
    kink_skips: dict[str, int] = {}
    for name in TENSOR_NAMES:
        tensor = getattr(params64, name)
        analytic = analytic_grads[name]
        numeric = analytic.copy()  # skipped elements contribute zero error
        skips = 0
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            original = tensor[idx]
            tensor[idx] = original + step
            upper, sig_up = loss_and_signature()
            tensor[idx] = original - step
            lower, sig_lo = loss_and_signature()
            tensor[idx] = original
            if np.array_equal(sig_up, sig_lo):
                numeric[idx] = (upper - lower) / (2.0 * step)
            else:
                skips += 1
            it.iternext()
        scale = max(float(np.max(np.abs(analytic))),
                    float(np.max(np.abs(numeric))), 1e-6)
        per_tensor[name] = float(np.max(np.abs(analytic - numeric))) / scale
        kink_skips[name] = skips
    return GradientCheckReport(per_tensor=per_tensor, step=step,
                               tolerance=tolerance, kink_skips=kink_skips)
