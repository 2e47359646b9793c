"""Tabular laboratory for group-relative policy-gradient updates with verifiable rewards."""

from .algorithms import AlgorithmConfig, assemble_update, gate_tokens
from .env import make_task, verify
from .metrics import lambda_report, pass_at_k_unbiased
from .policy import DecodingState, TabularPolicy
from .runner import ExperimentConfig, IOConfig, ScheduleConfig, evaluate, load_config, train

__all__ = [
    "AlgorithmConfig", "DecodingState", "ExperimentConfig", "IOConfig", "ScheduleConfig", "TabularPolicy",
    "assemble_update", "evaluate", "gate_tokens", "lambda_report", "load_config", "make_task",
    "pass_at_k_unbiased", "train", "verify",
]
