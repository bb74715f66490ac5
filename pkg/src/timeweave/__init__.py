"""Entangled secure timelines: authenticated skip lists, persistent
authenticated search trees and cross-service temporal mapping."""

from .canon import ServiceId, SigningKey, Suite
from .entangle import (
    EventProof, Inconclusive, PrecedenceEvidence, TemporalMapping, map_event, map_time,
    transfer_mapping, verify_bundle,
)
from .node import Node, NodeConfig
from .rbbtree import RbbConfig, RbbTree
from .skiplist import SkipList
from .timeline import Timeline

__all__ = [
    "EventProof", "Inconclusive", "Node", "NodeConfig", "PrecedenceEvidence", "RbbConfig",
    "RbbTree", "ServiceId", "SigningKey", "SkipList", "Suite", "TemporalMapping", "Timeline",
    "map_event", "map_time", "transfer_mapping", "verify_bundle",
]
