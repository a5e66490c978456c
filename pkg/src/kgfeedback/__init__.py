"""Feedback-driven knowledge-graph retrieval with learned triplet contribution scores."""

from kgfeedback.graph import KnowledgeGraph, Triplet
from kgfeedback.retrieval import Query, Retriever

__all__ = ["KnowledgeGraph", "Query", "Retriever", "Triplet"]
__version__ = "0.1.0"
