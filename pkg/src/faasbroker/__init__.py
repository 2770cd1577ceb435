"""Serverless-style publish/subscribe broker running on an emulated FaaS runtime."""

from faasbroker.broker import Broker, PipelineConfig
from faasbroker.gateway import DeliveryGateway
from faasbroker.model import (
    Constraint,
    ContentSubscription,
    DeliveryFrame,
    FunctionSubscription,
    Op,
    Publication,
    TopicSubscription,
    normalize_properties,
    satisfies,
    topic_matches,
)
from faasbroker.runtime import FaasRuntime, RuntimeLimits
from faasbroker.store import DocumentStore, LookupBudget

__all__ = [
    "Broker",
    "Constraint",
    "ContentSubscription",
    "DeliveryFrame",
    "DeliveryGateway",
    "DocumentStore",
    "FaasRuntime",
    "FunctionSubscription",
    "LookupBudget",
    "Op",
    "PipelineConfig",
    "Publication",
    "RuntimeLimits",
    "TopicSubscription",
    "normalize_properties",
    "satisfies",
    "topic_matches",
]

__version__ = "0.1.0"
