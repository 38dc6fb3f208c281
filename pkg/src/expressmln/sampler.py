"""Stochastic sampling of ground formulae biased towards observed facts.

One draw picks a clause uniformly, visits its literal slots in random order
and, with probability ``p_obs``, instantiates a slot from a stored fact of
that predicate that agrees with the variables bound so far. Otherwise, or
when no agreeing fact turns up within ``max_fact_retries`` tries, the slot's
unbound variables receive uniform random constants. Groundings without any
latent atom are rejected and redrawn.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .kb import KnowledgeBase
from .logic import Clause, GroundAtom, is_variable

log = logging.getLogger(__name__)


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    p_obs: float = 0.9
    batch: int = 16
    reject_fully_observed: bool = True
    query_anchored: bool = False
    allow_repeated: bool = True
    max_fact_retries: int = 5
    max_resamples: int = 50

    def __post_init__(self):
        if not 0.0 <= self.p_obs <= 1.0:
            raise ValueError("p_obs must lie in [0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.max_fact_retries < 0 or self.max_resamples < 0:
            raise ValueError("retry budgets must be non-negative")


class GroundFormula(NamedTuple):
    clause: int
    binding: tuple  # constant id per clause variable, in clause order
    atoms: tuple  # GroundAtom per literal
    negated: tuple  # bool per literal
    values: tuple  # observed value per literal, None when latent

    @property
    def latent_atoms(self) -> tuple:
        seen = []
        for a, v in zip(self.atoms, self.values):
            if v is None and a not in seen:
                seen.append(a)
        return tuple(seen)

    @property
    def key(self) -> tuple:
        return (self.clause, tuple(zip(self.atoms, self.negated)))


@dataclass
class SamplerStats:
    draws: int = 0
    rejected: int = 0
    slots_with_facts: int = 0
    slots_observed: int = 0  # p_obs coin chose the observed branch
    slots_from_facts: int = 0  # slot actually copied from a stored fact

    @property
    def observed_fraction(self) -> float:
        return self.slots_observed / self.slots_with_facts if self.slots_with_facts else float("nan")

    @property
    def fact_fraction(self) -> float:
        return self.slots_from_facts / self.slots_with_facts if self.slots_with_facts else float("nan")


def clause_constants(kb: KnowledgeBase, clause: Clause) -> dict:
    out = {}
    for lit in clause.literals:
        for sym in lit.vars:
            if not is_variable(sym):
                if sym not in kb.constant_ids:
                    raise SamplerError(f"clause {clause.name} uses unknown constant {sym!r}")
                out[sym] = kb.constant_ids[sym]
    return out


def _unify(lit_vars, row, binding, consts, allow_repeated) -> dict | None:
    """Bindings implied by copying fact ``row`` into the literal, or None."""
    new = {}
    for sym, c in zip(lit_vars, row):
        c = int(c)
        if not is_variable(sym):
            if consts[sym] != c:
                return None
            continue
        have = binding.get(sym, new.get(sym))
        if have is None:
            new[sym] = c
        elif have != c:
            return None
    if not allow_repeated:
        used = set(binding.values())
        vals = list(new.values())
        if len(set(vals)) != len(vals) or used.intersection(vals):
            return None
    return new


def _bind_random(lit_vars, binding, M, rng, allow_repeated):
    for sym in lit_vars:
        if not is_variable(sym) or sym in binding:
            continue
        if allow_repeated:
            binding[sym] = int(rng.integers(M))
        else:
            used = set(binding.values())
            free = [c for c in range(M) if c not in used]
            if not free:
                raise SamplerError("not enough constants for distinct bindings")
            binding[sym] = free[int(rng.integers(len(free)))]


def instantiate(kb, clause_idx, clause, binding, consts) -> GroundFormula:
    atoms, neg = [], []
    for lit in clause.literals:
        args = tuple(binding[s] if is_variable(s) else consts[s] for s in lit.vars)
        atoms.append(GroundAtom(lit.predicate, args))
        neg.append(lit.negated)
    values = tuple(kb.value(a) for a in atoms)
    return GroundFormula(clause_idx, tuple(binding[v] for v in clause.variables), tuple(atoms),
                         tuple(neg), values)


def draw_grounding(kb: KnowledgeBase, clauses: Sequence[Clause], clause_idx: int,
                   config: SamplerConfig, rng: np.random.Generator,
                   stats: SamplerStats | None = None, preset: dict | None = None,
                   skip_slot: int | None = None) -> GroundFormula:
    """One grounding of ``clauses[clause_idx]``, without the rejection step."""
    clause = clauses[clause_idx]
    consts = clause_constants(kb, clause)
    binding = dict(preset or {})
    M = kb.n_entities
    stats = stats if stats is not None else SamplerStats()
    stats.draws += 1
    for j in rng.permutation(len(clause.literals)):
        if j == skip_slot:
            continue
        lit = clause.literals[j]
        facts = kb.facts_by_predicate[lit.predicate]
        if len(facts):
            stats.slots_with_facts += 1
            if rng.random() < config.p_obs:
                stats.slots_observed += 1
                for _ in range(config.max_fact_retries):
                    row = facts[int(rng.integers(len(facts)))]
                    new = _unify(lit.vars, row, binding, consts, config.allow_repeated)
                    if new is not None:
                        binding.update(new)
                        stats.slots_from_facts += 1
                        break
        _bind_random(lit.vars, binding, M, rng, config.allow_repeated)
    return instantiate(kb, clause_idx, clause, binding, consts)


def _accept(gf: GroundFormula, config: SamplerConfig) -> bool:
    return not config.reject_fully_observed or any(v is None for v in gf.values)


def sample_batch(kb: KnowledgeBase, clauses: Sequence[Clause], config: SamplerConfig,
                 rng: np.random.Generator, stats: SamplerStats | None = None) -> list:
    """``config.batch`` ground formulae; shorter, with a warning, if rejection runs dry."""
    if not clauses:
        raise SamplerError("sampling needs at least one clause")
    if kb.n_entities == 0:
        raise SamplerError("sampling needs at least one constant")
    stats = stats if stats is not None else SamplerStats()
    out = []
    for _ in range(config.batch):
        for _attempt in range(config.max_resamples + 1):
            gf = draw_grounding(kb, clauses, int(rng.integers(len(clauses))), config, rng, stats)
            if _accept(gf, config):
                out.append(gf)
                break
            stats.rejected += 1
    if len(out) < config.batch:
        log.warning("resample budget exhausted: %d of %d ground formulae", len(out), config.batch)
    return out


def query_anchors(clauses: Sequence[Clause], query: GroundAtom, kb: KnowledgeBase) -> list:
    """``(clause index, literal index, binding)`` for positive literals matching ``query``."""
    anchors = []
    for ci, clause in enumerate(clauses):
        consts = clause_constants(kb, clause)
        for li, lit in enumerate(clause.literals):
            if lit.negated or lit.predicate != query.predicate:
                continue
            new = _unify(lit.vars, query.args, {}, consts, True)
            if new is not None:
                anchors.append((ci, li, new))
    return anchors


def sample_query_batch(kb: KnowledgeBase, clauses: Sequence[Clause], query: GroundAtom,
                       config: SamplerConfig, rng: np.random.Generator,
                       stats: SamplerStats | None = None) -> list:
    """Ground formulae whose positive literal is ``query`` with its constants bound.

    Returns an empty list when no clause has a matching positive literal.
    """
    anchors = query_anchors(clauses, query, kb)
    if not anchors:
        return []
    stats = stats if stats is not None else SamplerStats()
    out = []
    for _ in range(config.batch):
        for _attempt in range(config.max_resamples + 1):
            ci, li, preset = anchors[int(rng.integers(len(anchors)))]
            gf = draw_grounding(kb, clauses, ci, config, rng, stats, preset=preset, skip_slot=li)
            if _accept(gf, config):
                out.append(gf)
                break
            stats.rejected += 1
    if len(out) < config.batch:
        log.warning("resample budget exhausted: %d of %d ground formulae", len(out), config.batch)
    return out
