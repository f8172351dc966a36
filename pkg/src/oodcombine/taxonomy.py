"""Weighted hierarchical class tree and conceptual distance between classes.

Classes live at the leaves (level 0) of a rooted tree. The distance between
two nodes is the sum of edge weights along the unique path through their
lowest common ancestor. The edge joining a level-l node to its parent has
weight w(l); by default w(l) = 0.5 * 2**l, so two leaves under the same
parent sit at distance 1.0 and divergence higher in the tree costs more.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class TaxonomyError(ValueError):
    """Raised for structurally invalid trees or unknown node ids."""


def default_level_weights(max_level: int) -> list[float]:
    """Doubling weight schedule: w(l) = 0.5 * 2**l for l = 0..max_level."""
    return [0.5 * 2.0**level for level in range(max_level + 1)]


@dataclass(frozen=True)
class TaxonNode:
    node_id: int
    name: str
    level: int
    parent_id: int | None


@dataclass
class TaxonTree:
    """Immutable rooted tree with per-level edge weights.

    ``level_weights[l]`` is the weight of the edge joining a level-l node to
    its parent. The root has no parent edge.
    """

    nodes: dict[int, TaxonNode]
    root_id: int
    level_weights: list[float]
    _name_to_id: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._name_to_id = {n.name: n.node_id for n in self.nodes.values()}

    @property
    def leaf_ids(self) -> list[int]:
        parents = {n.parent_id for n in self.nodes.values() if n.parent_id is not None}
        return sorted(i for i in self.nodes if i not in parents)

    def node(self, node_id: int) -> TaxonNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise TaxonomyError(f"unknown node id {node_id}") from None

    def id_of(self, name: str) -> int:
        try:
            return self._name_to_id[name]
        except KeyError:
            raise TaxonomyError(f"no node named {name!r}") from None

    def edge_weight(self, node_id: int) -> float:
        level = self.node(node_id).level
        if level >= len(self.level_weights):
            raise TaxonomyError(f"no weight defined for level {level}")
        return self.level_weights[level]

    def path_to_root(self, node_id: int) -> list[int]:
        """Node ids from ``node_id`` up to and including the root."""
        path = [node_id]
        seen = {node_id}
        current = self.node(node_id)
        while current.parent_id is not None:
            if current.parent_id in seen:
                raise TaxonomyError(f"cycle through node {current.parent_id}")
            path.append(current.parent_id)
            seen.add(current.parent_id)
            current = self.node(current.parent_id)
        return path


def build_tree(
    records: list[dict],
    level_weights: list[float] | None = None,
) -> TaxonTree:
    """Assemble and validate a TaxonTree from node records.

    Each record needs keys id, name, level, parent_id (None for the root).
    Missing weights fall back to the doubling schedule.
    """
    nodes: dict[int, TaxonNode] = {}
    for rec in records:
        node = TaxonNode(
            node_id=int(rec["id"]),
            name=str(rec["name"]),
            level=int(rec["level"]),
            parent_id=None if rec["parent_id"] is None else int(rec["parent_id"]),
        )
        if node.node_id in nodes:
            raise TaxonomyError(f"duplicate node id {node.node_id}")
        nodes[node.node_id] = node

    roots = [i for i, n in nodes.items() if n.parent_id is None]
    if len(roots) != 1:
        raise TaxonomyError(f"expected exactly one root, found {len(roots)}")
    root_id = roots[0]

    max_nonroot_level = max(
        (n.level for n in nodes.values() if n.parent_id is not None), default=0
    )
    if level_weights is None:
        level_weights = default_level_weights(max_nonroot_level)
    if len(level_weights) <= max_nonroot_level:
        raise TaxonomyError(
            f"need weights for levels 0..{max_nonroot_level}, got {len(level_weights)}"
        )
    for level, weight in enumerate(level_weights):
        if weight <= 0:
            raise TaxonomyError(f"weight for level {level} must be positive")
        if level > 0 and weight < level_weights[level - 1]:
            raise TaxonomyError("level weights must be non-decreasing toward the root")

    tree = TaxonTree(nodes=nodes, root_id=root_id, level_weights=list(level_weights))
    for node in nodes.values():
        if node.parent_id is not None and node.parent_id not in nodes:
            raise TaxonomyError(f"node {node.node_id} has unknown parent {node.parent_id}")
        tree.path_to_root(node.node_id)  # raises on cycles
    return tree


def load_taxonomy(path: str | Path) -> TaxonTree:
    """Load a tree from a taxonomy.json file."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "nodes" not in doc:
        raise TaxonomyError("taxonomy file has no 'nodes' entry")
    return build_tree(doc["nodes"], doc.get("level_weights"))


def save_taxonomy(tree: TaxonTree, path: str | Path) -> None:
    doc = {
        "nodes": [
            {
                "id": n.node_id,
                "name": n.name,
                "level": n.level,
                "parent_id": n.parent_id,
            }
            for n in sorted(tree.nodes.values(), key=lambda n: n.node_id)
        ],
        "level_weights": tree.level_weights,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def taxon_distance(tree: TaxonTree, a: int, b: int) -> float:
    """Sum of edge weights along the path a -> LCA -> b.

    Zero iff a == b; symmetric by construction.
    """
    if a == b:
        tree.node(a)
        return 0.0
    path_a = tree.path_to_root(a)
    ancestors_a = {node_id: pos for pos, node_id in enumerate(path_a)}
    total = 0.0
    current = b
    while current not in ancestors_a:
        total += tree.edge_weight(current)
        parent = tree.node(current).parent_id
        if parent is None:
            raise TaxonomyError(f"nodes {a} and {b} share no ancestor")
        current = parent
    for node_id in path_a[: ancestors_a[current]]:
        total += tree.edge_weight(node_id)
    return total


def taxon_distance_by_name(tree: TaxonTree, name_a: str, name_b: str) -> float:
    return taxon_distance(tree, tree.id_of(name_a), tree.id_of(name_b))
