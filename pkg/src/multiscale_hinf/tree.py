"""Addressing and traversal for uniform-arity multiscale trees.

Nodes are addressed as ``(level, index)`` with 1-based indices; the root is
``(0, 1)``.  Node ``(k, m)`` has children ``(k+1, c*(m-1)+1) .. (k+1, c*m)``
and parent ``(k-1, ceil(m/c))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple


class TreeError(ValueError):
    """Raised for navigation past the root or below the leaves."""


class NodeId(NamedTuple):
    level: int
    index: int

    def __str__(self) -> str:
        return f"({self.level},{self.index})"


ROOT = NodeId(0, 1)


@dataclass(frozen=True)
class TreeTopology:
    """A complete tree with ``depth`` edge stages (levels ``0..depth``)."""

    depth: int
    arity: int = 2

    def __post_init__(self):
        if int(self.depth) != self.depth or self.depth < 1:
            raise TreeError(f"depth must be an integer >= 1, got {self.depth!r}")
        if int(self.arity) != self.arity or self.arity < 2:
            raise TreeError(f"arity must be an integer >= 2, got {self.arity!r}")

    @property
    def levels(self) -> range:
        return range(self.depth + 1)

    def level_size(self, level: int) -> int:
        if not 0 <= level <= self.depth:
            raise TreeError(f"level {level} outside [0, {self.depth}]")
        return self.arity**level

    @property
    def num_nodes(self) -> int:
        c = self.arity
        return (c ** (self.depth + 1) - 1) // (c - 1)

    @property
    def num_edges(self) -> int:
        return self.num_nodes - 1

    def contains(self, node: NodeId) -> bool:
        k, m = node
        return 0 <= k <= self.depth and 1 <= m <= self.arity**k

    def check(self, node: NodeId) -> NodeId:
        node = NodeId(*node)
        if not self.contains(node):
            raise TreeError(f"node {node} is not in a tree of depth {self.depth}, arity {self.arity}")
        return node

    def children(self, node: NodeId) -> list[NodeId]:
        k, m = self.check(node)
        if k == self.depth:
            raise TreeError(f"leaf node {node} has no children")
        c = self.arity
        return [NodeId(k + 1, c * (m - 1) + j) for j in range(1, c + 1)]

    def parent(self, node: NodeId) -> NodeId:
        k, m = self.check(node)
        if k == 0:
            raise TreeError("the root has no parent")
        return NodeId(k - 1, -(-m // self.arity))

    def level_nodes(self, level: int) -> Iterator[NodeId]:
        for m in range(1, self.level_size(level) + 1):
            yield NodeId(level, m)

    def level_order(self) -> Iterator[NodeId]:
        for k in self.levels:
            yield from self.level_nodes(k)

    def edges(self) -> Iterator[NodeId]:
        """Edges identified by their child node, in level order."""
        for k in range(1, self.depth + 1):
            yield from self.level_nodes(k)

    def ancestors(self, node: NodeId) -> list[NodeId]:
        """Root path of ``node`` excluding itself, nearest first."""
        out = []
        node = self.check(node)
        while node.level > 0:
            node = self.parent(node)
            out.append(node)
        return out

    def subtree_range(self, node: NodeId, level: int) -> range:
        """1-based indices of the descendants of ``node`` found at ``level``."""
        k, m = self.check(node)
        if not k <= level <= self.depth:
            raise TreeError(f"level {level} is not at or below {node}")
        span = self.arity ** (level - k)
        return range((m - 1) * span + 1, m * span + 1)


def children(topology: TreeTopology, node: NodeId) -> list[NodeId]:
    return topology.children(node)


def parent(topology: TreeTopology, node: NodeId) -> NodeId:
    return topology.parent(node)


def level_order(topology: TreeTopology) -> Iterator[NodeId]:
    return topology.level_order()
