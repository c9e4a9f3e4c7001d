"""Learned communication-graph orchestration for multi-agent LLM teams.

Agents draft answers in parallel; a trainable response-conditioned policy
reads the embedded drafts and predicts a sparse forward-edge DAG that decides
whether (and how) one sequential refinement pass runs; a judge-free weighted
centroid picks the final answer.
"""
from .agents import (AgentReply, AgentSpec, ConfigError, ScriptedAgent,
                     TeamConfig, build_agent, load_team, respond)
from .contribution import (AgentOrder, contribution_order,
                           contribution_scores, feasible_count,
                           feasible_edges)
from .embedding import (EmbedderConfig, HttpEmbedder, MockEmbedder,
                        build_embedder, cosine, mean_vector)
from .evaluation import (BehaviorStats, VerifierChoice, behavior_stats,
                         token_totals, verify)
from .executor import (EpisodeError, EpisodeRunner, EpisodeTrace,
                       ResponseRecord, activation, aggregate, draft_stage,
                       propagate)
from .policy import (CommunicationPolicy, DecodeConfig, GraphPlan,
                     PolicyParameters, edge_logits, encode, graph_log_prob,
                     init_params, load_params, sample_graph, save_params)
from .trainer import (AdamState, EpisodeSample, RewardRule, TrainerConfig,
                      batch_advantages, gradient_check, reinforce_loss,
                      run_training, sparsity_reward, train_step)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AgentOrder",
    "AgentReply",
    "AgentSpec",
    "BehaviorStats",
    "CommunicationPolicy",
    "ConfigError",
    "DecodeConfig",
    "EmbedderConfig",
    "EpisodeError",
    "EpisodeRunner",
    "EpisodeSample",
    "EpisodeTrace",
    "GraphPlan",
    "HttpEmbedder",
    "MockEmbedder",
    "PolicyParameters",
    "ResponseRecord",
    "RewardRule",
    "ScriptedAgent",
    "TeamConfig",
    "TrainerConfig",
    "VerifierChoice",
    "activation",
    "aggregate",
    "batch_advantages",
    "behavior_stats",
    "build_agent",
    "build_embedder",
    "contribution_order",
    "contribution_scores",
    "cosine",
    "draft_stage",
    "edge_logits",
    "encode",
    "feasible_count",
    "feasible_edges",
    "graph_log_prob",
    "gradient_check",
    "init_params",
    "load_params",
    "load_team",
    "mean_vector",
    "propagate",
    "reinforce_loss",
    "respond",
    "run_training",
    "sample_graph",
    "save_params",
    "sparsity_reward",
    "token_totals",
    "train_step",
    "verify",
]
