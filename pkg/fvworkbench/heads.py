"""Attention head coordinates.

A head is addressed by (layer, head). On the command line and in artifact
files heads are written as "layer.head", e.g. "9.14".
"""

import typing as t
from collections import namedtuple

HeadId = namedtuple("HeadId", ["layer", "head"])

__all__ = ["HeadId", "all_heads", "head_factory", "head_to_str", "sort_heads"]


def head_to_str(head: HeadId) -> str:
    """Format a HeadId as 'layer.head'"""
    return f"{head.layer}.{head.head}"


def head_factory(head_str: str) -> HeadId:
    """Creates a HeadId namedtuple from a string in format 'layer.head'

    Args:
        head_str: head in format 'layer.head' (a comma may be used instead of the dot)

    Returns:
        HeadId namedtuple

    Notes:
        head_factory("9.14") -> HeadId(9, 14)
        head_factory("9,14") -> HeadId(9, 14)
    """
    values = head_str.replace(",", ".").split(".")
    if len(values) != 2:
        raise ValueError(f"head must be in format 'layer.head': {head_str}")
    try:
        layer, head = (int(v.strip()) for v in values)
    except ValueError as e:
        raise ValueError(f"head must be in format 'layer.head': {head_str}") from e
    if layer < 0 or head < 0:
        raise ValueError(f"layer and head must be non-negative: {head_str}")
    return HeadId(layer, head)


def all_heads(n_layers: int, n_heads: int) -> t.List[HeadId]:
    """All heads of a model in (layer, head) order"""
    return [HeadId(layer, head) for layer in range(n_layers) for head in range(n_heads)]


def sort_heads(heads: t.Iterable[HeadId]) -> t.List[HeadId]:
    """Sort heads by (layer, head)"""
    return sorted(HeadId(*h) for h in heads)
