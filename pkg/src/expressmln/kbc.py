"""Desk-scale knowledge-base completion: synthetic data, rule mining, training.

The generator builds typed entities linked by a few random *base* relations
and *derived* relations that follow from them through inverse, chain,
subsumption and transitive patterns, with dropped and spurious facts as
noise. Rules are mined back from the observed facts by counting with sparse
adjacency matrices, so the pipeline never sees the generating patterns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .gnn import PosteriorModel
from .kb import DatasetSplit, KnowledgeBase
from .logic import GroundAtom, PredicateSchema, parse_rules
from .meanfield import TrainConfig, TrainResult, train
from .metrics import completion_tasks, filtered_rank, mrr_hits
from .sampler import SamplerConfig, sample_batch, sample_query_batch

BASE = ("B0", "B1", "B2", "B3")
DERIVED = ("D0", "D1", "D2", "D3")


@dataclass(frozen=True)
class RelationalGenConfig:
    n_entities: int = 400
    n_types: int = 3
    out_degree: float = 1.5
    drop: float = 0.1
    noise: float = 0.05
    train_fraction: float = 0.3
    valid_fraction: float = 0.05
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_entities < 3 * self.n_types:
            raise ValueError("too few entities for the requested number of types")
        if self.train_fraction + self.valid_fraction + self.test_fraction >= 1.0:
            raise ValueError("query fractions must leave room for facts")


def _edges(rng, src, dst, degree):
    out = set()
    for s in src:
        for d in rng.choice(dst, size=rng.poisson(degree), replace=True):
            out.add((int(s), int(d)))
    return out


def _compose(a: set, b: set) -> set:
    by_head = {}
    for y, z in b:
        by_head.setdefault(y, []).append(z)
    return {(x, z) for x, y in a for z in by_head.get(y, ())}


def generate_relational(config: RelationalGenConfig = RelationalGenConfig()):
    """Return ``(kb, split)`` with queries drawn from the derived relations."""
    rng = np.random.default_rng(config.seed)
    n = config.n_entities
    types = rng.integers(config.n_types, size=n)
    of_type = [np.flatnonzero(types == t) for t in range(config.n_types)]
    t0, t1, t2 = of_type[0], of_type[1 % config.n_types], of_type[2 % config.n_types]
    base = {
        "B0": _edges(rng, t0, t0, config.out_degree),
        "B1": _edges(rng, t0, t1, config.out_degree),
        "B2": _edges(rng, t1, t2, config.out_degree),
        "B3": _edges(rng, t1, t0, config.out_degree),
    }
    derived = {
        "D0": {(y, x) for x, y in base["B0"]},
        "D1": _compose(base["B1"], base["B2"]),
        "D2": base["B3"] | _edges(rng, t1, t0, 0.3),
        "D3": _compose(base["B0"], base["B0"]),
    }
    schemas = tuple(PredicateSchema(i, name, 2) for i, name in enumerate(BASE + DERIVED))
    pid = {s.name: s.id for s in schemas}
    truth = set()
    for name, pairs in base.items():
        truth.update(GroundAtom(pid[name], p) for p in pairs)
    for name, pairs in derived.items():
        pairs = sorted(pairs)
        keep = rng.random(len(pairs)) >= config.drop
        truth.update(GroundAtom(pid[name], p) for p, k in zip(pairs, keep) if k)
        n_noise = int(round(config.noise * len(pairs)))
        for x, y in zip(rng.integers(n, size=n_noise), rng.integers(n, size=n_noise)):
            truth.add(GroundAtom(pid[name], (int(x), int(y))))
    derived_atoms = sorted(a for a in truth if schemas[a.predicate].name in DERIVED)
    order = rng.permutation(len(derived_atoms))
    n_tr = int(config.train_fraction * len(order))
    n_va = int(config.valid_fraction * len(order))
    n_te = int(config.test_fraction * len(order))
    pick = lambda idx: sorted((derived_atoms[i], 1) for i in idx)
    train_q = pick(order[:n_tr])
    valid_q = pick(order[n_tr:n_tr + n_va])
    test_q = pick(order[n_tr + n_va:n_tr + n_va + n_te])
    held = {a for a, _ in train_q + valid_q + test_q}
    facts = {a: 1 for a in sorted(truth) if a not in held}
    constants = tuple(f"e{i:03d}" for i in range(n))
    kb = KnowledgeBase(constants, schemas, (), facts,
                       query_predicates=frozenset(pid[d] for d in DERIVED))
    split = DatasetSplit(sorted(facts.items()), train_q, valid_q, test_q)
    split.check()
    return kb, split


# ---------------------------------------------------------------------------
# rule mining
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MinedRule:
    text: str
    confidence: float
    support: int


def _adjacency(kb: KnowledgeBase, facts) -> list:
    M = kb.n_entities
    rows = [[] for _ in kb.schemas]
    for atom, v in facts:
        if v == 1 and kb.schemas[atom.predicate].arity == 2:
            rows[atom.predicate].append(atom.args)
    mats = []
    for r in rows:
        r = np.asarray(r, dtype=np.int64).reshape(-1, 2)
        mats.append(sparse.csr_matrix((np.ones(len(r)), (r[:, 0], r[:, 1])), shape=(M, M)))
    return [(m > 0).astype(np.float64) for m in mats]


def mine_rules(kb: KnowledgeBase, facts, max_rules: int = 10, min_support: int = 3,
               heads: Sequence[int] | None = None) -> list:
    """Top rules by confidence among inverse, subsumption and chain templates.

    Confidence is ``|body & head| / |body|`` counted on ``facts``.
    """
    A = _adjacency(kb, facts)
    names = [s.name for s in kb.schemas]
    binary = [s.id for s in kb.schemas if s.arity == 2]
    heads = binary if heads is None else list(heads)
    found = []

    def consider(body, head, text):
        n_body = body.count_nonzero()
        if n_body == 0:
            return
        support = int(body.multiply(A[head]).count_nonzero())
        if support >= min_support:
            found.append(MinedRule(text, support / n_body, support))

    for h in heads:
        for b in binary:
            consider(A[b].T.tocsr(), h, f"{names[b]}(y,x) => {names[h]}(x,y)")
            if b != h:
                consider(A[b], h, f"{names[b]}(x,y) => {names[h]}(x,y)")
            for b2 in binary:
                path = (A[b] @ A[b2]).tocsr()
                path.data[:] = 1.0
                consider(path, h, f"{names[b]}(x,y) & {names[b2]}(y,z) => {names[h]}(x,z)")
    found.sort(key=lambda r: (-r.confidence, -r.support, r.text))
    return found[:max_rules]


def with_rules(kb: KnowledgeBase, rules: Sequence[MinedRule]) -> KnowledgeBase:
    clauses = parse_rules("\n".join(r.text for r in rules), kb.schemas)
    return kb.with_facts(kb.facts, clauses=tuple(clauses))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def completion_batch_fn(kb: KnowledgeBase, queries: Sequence[GroundAtom], sampler: SamplerConfig,
                        n_queries: int = 8, free_formulae: int = 8, n_facts: int = 16,
                        n_negatives: int = 32):
    """Batches for completion training.

    Each step anchors formulae on ``n_queries`` random training queries,
    draws ``free_formulae`` unanchored formulae so that rule heads without
    labelled queries still get signal, and adds ``n_facts`` random observed
    positives. Queries and facts are returned as the discriminative term's
    positives. ``n_negatives`` corrupted atoms, made by replacing one argument
    of a sampled positive with a random constant, are returned as its
    negatives (a local closed-world assumption); corruptions that hit a known
    positive are dropped.
    """
    clauses = kb.clauses
    anchored = SamplerConfig(p_obs=sampler.p_obs, batch=1, max_fact_retries=sampler.max_fact_retries,
                             max_resamples=sampler.max_resamples)
    free = SamplerConfig(p_obs=sampler.p_obs, batch=max(free_formulae, 1),
                         max_fact_retries=sampler.max_fact_retries, max_resamples=sampler.max_resamples)
    queries = list(queries)
    positives = sorted(a for a, v in kb.facts.items() if v == 1)
    known = set(positives) | set(queries)
    pool = positives + queries

    def batch_fn(rng):
        batch, extra = [], []
        if queries:
            for k in rng.integers(len(queries), size=n_queries):
                q = queries[int(k)]
                extra.append(q)
                batch.extend(sample_query_batch(kb, clauses, q, anchored, rng))
        if free_formulae:
            batch.extend(sample_batch(kb, clauses, free, rng))
        if positives and n_facts:
            extra.extend(positives[int(k)] for k in rng.integers(len(positives), size=n_facts))
        negative = []
        if pool and n_negatives:
            picks = rng.integers(len(pool), size=n_negatives)
            repl = rng.integers(kb.n_entities, size=n_negatives)
            for k, c in zip(picks, repl):
                a = pool[int(k)]
                slot = int(rng.integers(len(a.args)))
                args = a.args[:slot] + (int(c),) + a.args[slot + 1:]
                bad = GroundAtom(a.predicate, args)
                if bad not in known and kb.value(bad) is None:
                    negative.append(bad)
        return batch, extra, negative

    return batch_fn


def train_completion(kb: KnowledgeBase, queries: Sequence[GroundAtom], model: PosteriorModel,
                     sampler: SamplerConfig = SamplerConfig(), config: TrainConfig | None = None,
                     n_queries: int = 8, free_formulae: int = 8, n_facts: int = 16,
                     n_negatives: int = 32) -> TrainResult:
    config = config or TrainConfig(disc_weight=1.0)
    fn = completion_batch_fn(kb, queries, sampler, n_queries, free_formulae, n_facts, n_negatives)
    return train(kb, kb.clauses, model, sampler, config, batch_fn=fn)


def known_true(split: DatasetSplit) -> set:
    return {a for part in (split.facts, split.train, split.valid, split.test) for a, v in part if v == 1}


def evaluate_completion(score_fn, queries: Sequence[GroundAtom], n_entities: int, known: set):
    """``(MRR, Hits@10)`` of filtered head and tail ranks."""
    tasks = completion_tasks(score_fn, queries, n_entities, known)
    return mrr_hits(filtered_rank(t) for t in tasks)


def model_scores(model: PosteriorModel):
    return lambda atoms: model.logits(atoms).data


def constant_scores(atoms) -> np.ndarray:
    return np.zeros(len(atoms))


def inductive_split(kb: KnowledgeBase, split: DatasetSplit, test_relations: Sequence[str], seed: int = 0):
    """Training queries avoid ``test_relations``; test queries use only them.

    Facts of the test relations are removed too, so the model never sees a
    labelled instance of them.
    """
    held = {kb.predicate_ids[r] for r in test_relations}
    facts = {a: v for a, v in kb.facts.items() if a.predicate not in held}
    train_q = [(a, v) for a, v in split.train if a.predicate not in held]
    valid_q = [(a, v) for a, v in split.valid if a.predicate not in held]
    test_q = [(a, v) for part in (split.train, split.valid, split.test) for a, v in part
              if a.predicate in held]
    test_q += [(a, v) for a, v in kb.facts.items() if a.predicate in held]
    rng = np.random.default_rng(seed)
    test_q = sorted(test_q)
    keep = rng.permutation(len(test_q))[:max(1, len(split.test))]
    test_q = sorted(test_q[i] for i in keep)
    new_kb = kb.with_facts(facts)
    new_split = DatasetSplit(sorted(facts.items()), train_q, valid_q, test_q)
    new_split.check()
    return new_kb, new_split

