"""Per-answer greedy selection of lexically diverse items."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence, TypeVar

from cqforge.textutil import unigrams

T = TypeVar("T")


@dataclass
class SelectionStep:
    item_id: Hashable
    gain: int
    new_terms: tuple[str, ...]


@dataclass
class DiversityState:
    vocabulary: set[str] = field(default_factory=set)
    trace: list[SelectionStep] = field(default_factory=list)


def greedy_select(
    items: Sequence[T],
    k: int,
    text: Callable[[T], str],
    item_id: Callable[[T], Hashable],
) -> tuple[list[T], DiversityState]:
    """Repeatedly take the item adding the most unseen unigrams.

    Ties go to the smallest id. Items adding nothing stay eligible, so groups
    smaller than ``k`` are kept whole.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    grams = [set(unigrams(text(it))) for it in items]
    remaining = sorted(range(len(items)), key=lambda i: item_id(items[i]))
    rank = {i: pos for pos, i in enumerate(remaining)}
    state = DiversityState()
    selected: list[T] = []
    while remaining and len(selected) < k:
        best = max(remaining, key=lambda i: (len(grams[i] - state.vocabulary), -rank[i]))
        new = grams[best] - state.vocabulary
        state.vocabulary |= new
        state.trace.append(SelectionStep(item_id(items[best]), len(new), tuple(sorted(new))))
        selected.append(items[best])
        remaining.remove(best)
    return selected, state


def diversity_filter(
    items: Iterable[T],
    k: int = 20,
    text: Callable[[T], str] = lambda it: it.context,
    group: Callable[[T], Hashable] = lambda it: it.answer_text,
    item_id: Callable[[T], Hashable] = lambda it: it.item_id,
) -> tuple[list[T], dict[Hashable, DiversityState]]:
    """Group items by gold answer and keep at most ``k`` per group.

    Output keeps groups in first-appearance order and each group in selection
    order; the per-group states carry the selection traces.
    """
    groups: dict[Hashable, list[T]] = defaultdict(list)
    for it in items:
        groups[group(it)].append(it)
    out: list[T] = []
    states = {}
    for key, members in groups.items():
        chosen, state = greedy_select(members, k, text, item_id)
        out.extend(chosen)
        states[key] = state
    return out, states
