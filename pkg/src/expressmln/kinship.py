"""Synthetic two-generation kinship knowledge bases.

Entities are split into a first and a second generation; each generation is
cut into sibling subgroups. First-generation people from different subgroups
are coupled and every couple receives a second-generation subgroup as its
children. Walking the resulting family tree yields every true relation; a
seeded fraction of the related person pairs is kept as observed facts, together with the gender
of everyone outside the query set. The deduction task is to recover
``Male``/``Female`` for the held-out people.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kb import DatasetSplit, KnowledgeBase
from .logic import GroundAtom, PredicateSchema, parse_rules

RELATIONS = (
    ("Father", 2), ("Mother", 2), ("Son", 2), ("Daughter", 2),
    ("Husband", 2), ("Wife", 2), ("Brother", 2), ("Sister", 2),
    ("Uncle", 2), ("Aunt", 2), ("Nephew", 2), ("Niece", 2),
    ("Cousin", 2), ("Male", 1), ("Female", 1),
)

KINSHIP_RULES = """\
# gender evidence carried by relations
Father(x,y) => Male(x)
Mother(x,y) => Female(x)
Son(x,y) => Male(x)
Daughter(x,y) => Female(x)
Husband(x,y) => Male(x)
Wife(x,y) => Female(x)
Brother(x,y) => Male(x)
Sister(x,y) => Female(x)
Uncle(x,y) => Male(x)
Aunt(x,y) => Female(x)
Nephew(x,y) => Male(x)
Niece(x,y) => Female(x)
# exactly one gender
Male(x) => !Female(x)
!Male(x) => Female(x)
# structural rules
Husband(x,y) => Wife(y,x)
Wife(x,y) => Husband(y,x)
Father(x,z) & Mother(y,z) => Husband(x,y)
Father(x,z) & Husband(x,y) => Mother(y,z)
Son(y,x) => Father(x,y) | Mother(x,y)
Daughter(y,x) => Father(x,y) | Mother(x,y)
Father(x,y) & Male(y) => Son(y,x)
Mother(x,y) & Female(y) => Daughter(y,x)
"""


@dataclass(frozen=True)
class KinshipGenConfig:
    n_entities: int = 62
    seed: int = 0
    subgroup_size: tuple = (1, 2)
    query_fraction: float = 0.3
    relation_keep: float = 1 / 3

    def __post_init__(self):
        if self.n_entities < 4:
            raise ValueError("kinship generation needs at least 4 entities")
        lo, hi = self.subgroup_size
        if not 1 <= lo <= hi:
            raise ValueError("subgroup size range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.query_fraction <= 1.0:
            raise ValueError("query_fraction must lie in [0, 1]")
        if not 0.0 < self.relation_keep <= 1.0:
            raise ValueError("relation_keep must lie in (0, 1]")


def kinship_schemas() -> tuple:
    return tuple(PredicateSchema(i, name, arity) for i, (name, arity) in enumerate(RELATIONS))


def _subgroups(members, rng, lo, hi):
    groups, i = [], 0
    while i < len(members):
        size = int(rng.integers(lo, hi + 1))
        groups.append(list(members[i:i + size]))
        i += size
    return groups


def _family_tree(config: KinshipGenConfig, rng):
    n = config.n_entities
    order = rng.permutation(n)
    male = rng.integers(0, 2, size=n).astype(bool)
    n1 = n // 2
    gen1, gen2 = [int(x) for x in order[:n1]], [int(x) for x in order[n1:]]
    lo, hi = config.subgroup_size
    groups1 = _subgroups(gen1, rng, lo, hi)
    groups2 = _subgroups(gen2, rng, lo, hi)
    group_of = {p: g for g, members in enumerate(groups1) for p in members}

    men = [p for p in gen1 if male[p]]
    women = [p for p in gen1 if not male[p]]
    rng.shuffle(men)
    rng.shuffle(women)
    couples = []
    free_women = list(women)
    for m in men:
        for k, w in enumerate(free_women):
            if group_of[w] != group_of[m]:
                couples.append((m, w))
                free_women.pop(k)
                break
    couples = couples[:len(groups2)] if couples else couples
    children = [[] for _ in couples]
    if couples:
        for g, members in enumerate(groups2):
            target = g if g < len(couples) else int(rng.integers(len(couples)))
            children[target].extend(members)
    sib_groups = groups1 + [c for c in children if c]
    if not couples:
        sib_groups = groups1 + groups2
    return male, couples, children, sib_groups


def generate_kinship(config: KinshipGenConfig = KinshipGenConfig()):
    """Generate ``(kb, split)``; ``split.test`` holds the Male/Female queries."""
    rng = np.random.default_rng(config.seed)
    male, couples, children, sib_groups = _family_tree(config, rng)
    n = config.n_entities
    schemas = kinship_schemas()
    pid = {s.name: s.id for s in schemas}
    rel = set()

    def add(name, *args):
        rel.add(GroundAtom(pid[name], tuple(int(a) for a in args)))

    parents_of = {}
    for (h, w), kids in zip(couples, children):
        add("Husband", h, w)
        add("Wife", w, h)
        for c in kids:
            parents_of[c] = (h, w)
            add("Father", h, c)
            add("Mother", w, c)
            for p in (h, w):
                add("Son" if male[c] else "Daughter", c, p)
    siblings = {}
    for group in sib_groups:
        for x in group:
            siblings[x] = [y for y in group if y != x]
            for y in siblings[x]:
                add("Brother" if male[x] else "Sister", x, y)
    for c, parents in parents_of.items():
        for p in parents:
            for u in siblings.get(p, ()):
                add("Uncle" if male[u] else "Aunt", u, c)
                add("Nephew" if male[c] else "Niece", c, u)
                for cousin, cp in parents_of.items():
                    if u in cp and cousin != c:
                        add("Cousin", c, cousin)

    people = rng.permutation(n)
    n_query = int(round(config.query_fraction * n))
    query_people = set(int(p) for p in people[:n_query])
    # all relations between the same two people are observed or hidden together,
    # so inverse pairs such as Husband/Wife stay consistent
    pairs = sorted({tuple(sorted(a.args)) for a in rel})
    kept_pairs = {p for p, k in zip(pairs, rng.random(len(pairs)) < config.relation_keep) if k}
    facts = {a: 1 for a in sorted(rel) if tuple(sorted(a.args)) in kept_pairs}
    test = []
    for p in range(n):
        is_m = int(male[p])
        gender = [(GroundAtom(pid["Male"], (p,)), is_m), (GroundAtom(pid["Female"], (p,)), 1 - is_m)]
        if p in query_people:
            test.extend(gender)
        else:
            facts[gender[0][0] if is_m else gender[1][0]] = 1
    test.sort()
    clauses = parse_rules(KINSHIP_RULES, schemas)
    constants = tuple(f"p{i:03d}" for i in range(n))
    kb = KnowledgeBase(constants, schemas, tuple(clauses), facts,
                       query_predicates=frozenset({pid["Male"], pid["Female"]}))
    split = DatasetSplit(sorted(facts.items()), [], [], test)
    split.check()
    return kb, split
