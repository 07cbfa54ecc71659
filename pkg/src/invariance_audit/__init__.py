"""Audit whether a language model's pronoun choice stays invariant under uninformative discourse context."""

from .backend import BackendConfig, ChatRequest, Gateway, GenerationParams, build_prompt, complete
from .cbd import CbdSystem, coupling_oracle, delta_c, is_contextual, joint_mixture, joint_product
from .collector import Measurement, MeasurementLog, TrialPlan, parse_response, plan_trials, read_log, run
from .errors import (
    AnalysisError,
    AuditError,
    BackendHTTPError,
    CollectionError,
    ConfigError,
    DomainError,
    HeaderMismatchError,
    PairingError,
    SchemaError,
)
from .report import RunConfig
from .schema import ContextSetting, OptionOrder, Template, TemplatePair, expand, load_schema, pair_index
from .stats import estimate, kl_bernoulli, mean_kl, mi_discrete, mi_knn, spearman

__version__ = "0.1.0"

__all__ = [
    "AnalysisError",
    "AuditError",
    "BackendConfig",
    "BackendHTTPError",
    "CbdSystem",
    "ChatRequest",
    "CollectionError",
    "ConfigError",
    "ContextSetting",
    "DomainError",
    "Gateway",
    "GenerationParams",
    "HeaderMismatchError",
    "Measurement",
    "MeasurementLog",
    "OptionOrder",
    "PairingError",
    "RunConfig",
    "SchemaError",
    "Template",
    "TemplatePair",
    "TrialPlan",
    "build_prompt",
    "complete",
    "coupling_oracle",
    "delta_c",
    "estimate",
    "expand",
    "is_contextual",
    "joint_mixture",
    "joint_product",
    "kl_bernoulli",
    "load_schema",
    "mean_kl",
    "mi_discrete",
    "mi_knn",
    "pair_index",
    "parse_response",
    "plan_trials",
    "read_log",
    "run",
    "spearman",
]
