"""Bipartite constant/fact graphs and 1-WL color refinement.

Node ids: constants occupy ``0 .. M-1`` and fact nodes ``M .. M+F-1``.
Each edge links a constant to a fact that uses it at argument position
``pos`` and carries the fact value (0, 1, or ``UNKNOWN`` for the latent
facts of the augmented graph).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .kb import KnowledgeBase
from .logic import GroundAtom, grounding_count

UNKNOWN = 2
DEFAULT_AUGMENT_BUDGET = 10 ** 6


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class FactorGraph:
    n_constants: int
    fact_atoms: tuple
    fact_pred: np.ndarray
    fact_value: np.ndarray
    edge_const: np.ndarray
    edge_fact: np.ndarray
    edge_pos: np.ndarray
    edge_val: np.ndarray
    max_arity: int

    @property
    def n_facts(self) -> int:
        return len(self.fact_atoms)

    @property
    def n_nodes(self) -> int:
        return self.n_constants + self.n_facts

    @property
    def n_edges(self) -> int:
        return len(self.edge_const)

    @property
    def augmented(self) -> bool:
        return bool(np.any(self.fact_value == UNKNOWN))

    def fact_node(self, atom: GroundAtom) -> int:
        return self.n_constants + self._fact_index[atom]

    @property
    def _fact_index(self) -> dict:
        idx = self.__dict__.get("_fidx")
        if idx is None:
            idx = {a: i for i, a in enumerate(self.fact_atoms)}
            object.__setattr__(self, "_fidx", idx)
        return idx

    def edge_type(self) -> np.ndarray:
        """Integer edge-type code ``value * max_arity + pos``."""
        return self.edge_val * max(self.max_arity, 1) + self.edge_pos

    def constant_neighbors(self, c: int) -> list:
        """``[(fact index, pos, value)]`` incident to constant ``c``."""
        sel = np.flatnonzero(self.edge_const == c)
        return [(int(self.edge_fact[e]), int(self.edge_pos[e]), int(self.edge_val[e])) for e in sel]


def _assemble(M: int, atoms_values: list, max_arity: int) -> FactorGraph:
    atoms = tuple(a for a, _ in atoms_values)
    preds = np.fromiter((a.predicate for a in atoms), dtype=np.int64, count=len(atoms))
    values = np.fromiter((v for _, v in atoms_values), dtype=np.int64, count=len(atoms))
    ec, ef, ep, ev = [], [], [], []
    for f, (atom, v) in enumerate(atoms_values):
        for i, c in enumerate(atom.args):
            ec.append(c)
            ef.append(f)
            ep.append(i)
            ev.append(v)
    as_arr = lambda x: np.asarray(x, dtype=np.int64)
    return FactorGraph(M, atoms, preds, values, as_arr(ec), as_arr(ef), as_arr(ep), as_arr(ev), max_arity)


def build_graph(kb: KnowledgeBase) -> FactorGraph:
    """Factor graph over the observed facts, in canonical atom order."""
    max_arity = max((s.arity for s in kb.schemas), default=0)
    return _assemble(kb.n_entities, sorted(kb.facts.items()), max_arity)


def _all_groundings(schema, M):
    grid = np.indices((M,) * schema.arity).reshape(schema.arity, -1).T
    for row in grid:
        yield GroundAtom(schema.id, tuple(int(c) for c in row))


def build_augmented_graph(kb: KnowledgeBase, budget: int = DEFAULT_AUGMENT_BUDGET) -> FactorGraph:
    """Factor graph with every grounding; unobserved facts get value ``UNKNOWN``."""
    total = 0
    for s in kb.schemas:
        count, saturated = grounding_count(s, kb.n_entities)
        total += count
        if saturated or total > budget:
            raise BudgetExceeded(f"augmented graph needs more than {budget} fact nodes")
    rows = []
    for s in kb.schemas:
        for atom in _all_groundings(s, kb.n_entities):
            v = kb.facts.get(atom)
            rows.append((atom, UNKNOWN if v is None else v))
    max_arity = max((s.arity for s in kb.schemas), default=0)
    return _assemble(kb.n_entities, rows, max_arity)


# ---------------------------------------------------------------------------
# color refinement
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Coloring:
    colors: np.ndarray  # one dense color id per node
    n_constants: int
    rounds: int

    @property
    def constant_colors(self) -> np.ndarray:
        return self.colors[:self.n_constants]

    @property
    def fact_colors(self) -> np.ndarray:
        return self.colors[self.n_constants:]

    @property
    def n_colors(self) -> int:
        return int(self.colors.max()) + 1 if len(self.colors) else 0

    def constant_classes(self) -> list:
        """Constant ids grouped by color, sorted by smallest member."""
        groups = {}
        for c, col in enumerate(self.constant_colors):
            groups.setdefault(int(col), []).append(c)
        return sorted(groups.values())


def _relabel(signatures: list) -> np.ndarray:
    order = {sig: i for i, sig in enumerate(sorted(set(signatures)))}
    return np.fromiter((order[s] for s in signatures), dtype=np.int64, count=len(signatures))


def _refine_once(colors, src, dst, etype, n_nodes):
    # neighbour key = (edge type, neighbour color); sorting gives a canonical multiset
    keys = etype * (int(colors.max()) + 1) + colors[dst]
    order = np.lexsort((keys, src))
    src_sorted, keys_sorted = src[order], keys[order]
    bounds = np.searchsorted(src_sorted, np.arange(n_nodes + 1))
    ks = keys_sorted.tolist()
    sigs = [(int(colors[u]),) + tuple(ks[bounds[u]:bounds[u + 1]]) for u in range(n_nodes)]
    return _relabel(sigs)


def color_refine(graph: FactorGraph, max_rounds: int | None = None) -> Coloring:
    """Run 1-WL until the node partition is stable.

    Constants start with one shared color, fact nodes with one color per
    predicate. Each round hashes (own color, sorted multiset of
    (edge type, neighbour color)) into dense ids by sorting the distinct
    signatures, so the result is reproducible bit for bit.
    """
    M, F = graph.n_constants, graph.n_facts
    n = M + F
    init = [(0, 0)] * M + [(1, int(p)) for p in graph.fact_pred]
    colors = _relabel(init)
    fact_nodes = graph.edge_fact + M
    et = graph.edge_type()
    src = np.concatenate([graph.edge_const, fact_nodes])
    dst = np.concatenate([fact_nodes, graph.edge_const])
    etype = np.concatenate([et, et])
    n_colors = len(set(colors.tolist()))
    rounds = 0
    limit = n if max_rounds is None else max_rounds
    while rounds < limit:
        new = _refine_once(colors, src, dst, etype, n)
        new_n = int(new.max()) + 1 if n else 0
        if new_n == n_colors:
            break
        colors, n_colors = new, new_n
        rounds += 1
    return Coloring(colors, M, rounds)


def indistinguishable(coloring: Coloring, nodes: Sequence[int], other: Sequence[int]) -> bool:
    """True iff the two node sequences are pairwise color-equal."""
    if len(nodes) != len(other):
        raise ValueError("node sequences must have equal length")
    c = coloring.colors
    return all(c[a] == c[b] for a, b in zip(nodes, other))


def write_edge_list(graph: FactorGraph, kb: KnowledgeBase, out: TextIO) -> None:
    """Debug dump: ``constant<TAB>fact<TAB>pos<TAB>value`` per edge."""
    for c, f, p, v in zip(graph.edge_const, graph.edge_fact, graph.edge_pos, graph.edge_val):
        val = "?" if v == UNKNOWN else str(int(v))
        out.write(f"{kb.constants[c]}\t{kb.format_atom(graph.fact_atoms[f])}\t{int(p)}\t{val}\n")
