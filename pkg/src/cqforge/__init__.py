"""Forge complex commonsense QA datasets from conjunctive queries over an event graph."""

from cqforge.kg import KnowledgeGraph, Relation, Triple, graph_stats, load_graph
from cqforge.queries import (
    AnswerSet,
    QueryInstance,
    QueryKind,
    answer_query,
    batch_sample,
    brute_force_answers,
    sample_query,
)

__all__ = [
    "AnswerSet",
    "KnowledgeGraph",
    "QueryInstance",
    "QueryKind",
    "Relation",
    "Triple",
    "answer_query",
    "batch_sample",
    "brute_force_answers",
    "graph_stats",
    "load_graph",
    "sample_query",
]

__version__ = "0.1.0"
