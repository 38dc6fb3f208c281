import numpy as np
import pytest

from expressmln.kb import KnowledgeBase
from expressmln.logic import Clause, GroundAtom, Literal, PredicateSchema, parse_rules

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def loop_kb() -> KnowledgeBase:
    """Four constants where A and B are indistinguishable by color refinement.

    F(A,E) and F(B,F) hold, F(B,E) and F(A,F) are false. A and B are
    symmetric under swapping E and F, but the pairs (A,E) and (B,E) are not.
    """
    schemas = (PredicateSchema(0, "F", 2), PredicateSchema(1, "L", 2))
    A, B, E, F = range(4)
    facts = {GroundAtom(0, (A, E)): 1, GroundAtom(0, (B, E)): 0,
             GroundAtom(0, (B, F)): 1, GroundAtom(0, (A, F)): 0}
    clauses = parse_rules("F(x,y) => L(x,y)", schemas)
    return KnowledgeBase(("A", "B", "E", "F"), schemas, tuple(clauses), facts)


@pytest.fixture
def loop():
    return loop_kb()


@pytest.fixture
def tiny_kb():
    schemas = (PredicateSchema(0, "Smokes", 1), PredicateSchema(1, "Friends", 2),
               PredicateSchema(2, "Cancer", 1))
    clauses = parse_rules("1.5: Smokes(x) => Cancer(x)\n0.8: Friends(x,y) & Smokes(x) => Smokes(y)", schemas)
    facts = {GroundAtom(0, (0,)): 1, GroundAtom(1, (0, 1)): 1, GroundAtom(1, (1, 2)): 1,
             GroundAtom(2, (2,)): 0}
    return KnowledgeBase(("ann", "bob", "cat"), schemas, tuple(clauses), facts)


def random_kb(rng: np.random.Generator, max_entities: int = 6, max_predicates: int = 3,
              max_arity: int = 2, fact_density: float = 0.3, n_clauses: int = 0,
              weight_scale: float = 1.0) -> KnowledgeBase:
    """Random KB with optional random clauses over up to three variables."""
    M = int(rng.integers(1, max_entities + 1))
    P = int(rng.integers(1, max_predicates + 1))
    schemas = tuple(PredicateSchema(i, f"P{i}", int(rng.integers(1, max_arity + 1))) for i in range(P))
    facts = {}
    for s in schemas:
        grid = np.indices((M,) * s.arity).reshape(s.arity, -1).T
        for row in grid:
            if rng.random() < fact_density:
                facts[GroundAtom(s.id, tuple(int(c) for c in row))] = int(rng.integers(2))
    clauses = []
    for k in range(n_clauses):
        lits = []
        for _ in range(int(rng.integers(1, 4))):
            s = schemas[int(rng.integers(P))]
            vars_ = tuple("xyz"[int(rng.integers(3))] for _ in range(s.arity))
            lits.append(Literal(s.id, vars_, bool(rng.integers(2))))
        variables = tuple(dict.fromkeys(v for lit in lits for v in lit.vars))
        clauses.append(Clause(f"f{k}", variables, tuple(lits), float(rng.normal(0, weight_scale))))
    return KnowledgeBase(tuple(f"c{i}" for i in range(M)), schemas, tuple(clauses), facts)


def random_enumerable_mln(rng: np.random.Generator, max_latent: int = 10):
    """Random KB whose full grounding has between 1 and ``max_latent`` latent atoms."""
    from expressmln.exact import build_mln, enumerate_groundings

    while True:
        kb = random_kb(rng, max_entities=3, max_predicates=2, fact_density=0.4,
                       n_clauses=int(rng.integers(1, 4)), weight_scale=1.5)
        groundings = enumerate_groundings(kb, kb.clauses)
        mln = build_mln(kb, kb.clauses, groundings, max_latent=64)
        if 1 <= mln.n_latent <= max_latent:
            return kb, groundings, mln


def fit_full_batch(kb, model, groundings, steps: int = 300, lr: float = 0.1):
    """Adam ascent on the objective over every grounding at once."""
    from expressmln.autodiff import Adam, Tape
    from expressmln.meanfield import elbo_batch

    params = model.params()
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        with Tape() as tape:
            terms = elbo_batch(groundings, model, kb.clauses)
        opt.step(tape.backward(terms.objective, params), maximize=True)
        model.invalidate()
    return elbo_batch(groundings, model, kb.clauses).value
