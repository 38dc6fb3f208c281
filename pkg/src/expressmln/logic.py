"""Symbolic core: predicate schemas, ground atoms, clauses and the rule DSL.

Rule syntax, one clause per line::

    [weight:] Lit | Lit | ...
    [weight:] Lit & Lit & ... => Lit | ...

where ``Lit`` is ``[!]Name(t1, ..., tk)``. Terms starting with a lowercase
letter are variables; capitalised terms are constants. ``#`` starts a
comment. Implications are rewritten into disjunctive form, so
``S(x) & F(x,y) => S(y)`` and ``!S(x) | !F(x,y) | S(y)`` parse to the same
clause.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

INT64_MAX = (1 << 63) - 1


class RuleError(ValueError):
    """Syntax or schema error in rule text, with 1-based line/column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)


class UnsupportedFeatureError(RuleError):
    pass


@dataclass(frozen=True)
class PredicateSchema:
    id: int
    name: str
    arity: int

    def __post_init__(self):
        if self.arity < 1:
            raise ValueError(f"predicate {self.name!r} must have arity >= 1")


class GroundAtom(NamedTuple):
    predicate: int
    args: tuple


@dataclass(frozen=True)
class Literal:
    predicate: int
    vars: tuple  # variable or constant symbols, in argument order
    negated: bool = False


@dataclass(frozen=True)
class Clause:
    name: str
    variables: tuple
    literals: tuple
    weight: float = 1.0

    def __post_init__(self):
        if not self.literals:
            raise ValueError("clause needs at least one literal")
        if not math.isfinite(self.weight):
            raise ValueError(f"clause {self.name!r} has non-finite weight")
        declared = set(self.variables)
        for lit in self.literals:
            for sym in lit.vars:
                if is_variable(sym) and sym not in declared:
                    raise ValueError(f"variable {sym!r} not declared in clause {self.name!r}")


class GroundingCount(NamedTuple):
    count: int
    saturated: bool


def is_variable(symbol: str) -> bool:
    return symbol[:1].islower()


def grounding_count(schema: PredicateSchema, n_entities: int) -> GroundingCount:
    """Number of groundings ``M ** arity``, saturated at int64 max."""
    if n_entities < 0:
        raise ValueError("entity count must be non-negative")
    count = n_entities ** schema.arity
    if count > INT64_MAX:
        return GroundingCount(INT64_MAX, True)
    return GroundingCount(count, False)


def ground_clause(clause: Clause, binding: Mapping[str, int],
                  constants: Mapping[str, int] | None = None) -> list:
    """Instantiate ``clause`` into ``[(GroundAtom, negated), ...]``.

    Constant symbols in the clause are resolved through ``constants``.
    """
    out = []
    for lit in clause.literals:
        args = []
        for sym in lit.vars:
            if is_variable(sym):
                try:
                    args.append(binding[sym])
                except KeyError:
                    raise KeyError(f"binding misses variable {sym!r} of clause {clause.name!r}") from None
            else:
                if constants is None or sym not in constants:
                    raise KeyError(f"unknown constant {sym!r} in clause {clause.name!r}")
                args.append(constants[sym])
        out.append((GroundAtom(lit.predicate, tuple(args)), lit.negated))
    return out


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t]+)
  | (?P<impl>=>|⇒)
  | (?P<and>&|∧)
  | (?P<or>\||∨)
  | (?P<not>!|¬|~)
  | (?P<lp>\()
  | (?P<rp>\))
  | (?P<comma>,)
  | (?P<plus>\+[A-Za-z_][A-Za-z0-9_]*)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)(?=\s*:)
  | (?P<colon>:)
  | (?P<name>[A-Za-z_][A-Za-z0-9_']*)
    """,
    re.VERBOSE,
)


def _tokenize(line: str, lineno: int):
    pos = 0
    tokens = []
    while pos < len(line):
        m = _TOKEN.match(line, pos)
        if m is None:
            raise RuleError(f"unexpected character {line[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos + 1))
        pos = m.end()
    tokens.append(("end", "", len(line) + 1))
    return tokens


class _LineParser:
    def __init__(self, line: str, lineno: int, schemas: Mapping[str, PredicateSchema]):
        self.tokens = _tokenize(line, lineno)
        self.i = 0
        self.lineno = lineno
        self.schemas = schemas

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind):
        tok = self.tokens[self.i]
        if tok[0] != kind:
            shown = tok[1] or "end of line"
            raise RuleError(f"expected {kind}, found {shown!r}", self.lineno, tok[2])
        self.i += 1
        return tok

    def literal(self):
        negated = False
        while self.peek()[0] == "not":
            self.i += 1
            negated = not negated
        _, name, col = self.take("name")
        schema = self.schemas.get(name)
        if schema is None:
            raise RuleError(f"unknown predicate {name!r}", self.lineno, col)
        self.take("lp")
        terms = []
        while True:
            tok = self.peek()
            if tok[0] == "plus":
                raise UnsupportedFeatureError(
                    f"per-constant weight template {tok[1]!r} is not supported", self.lineno, tok[2])
            terms.append(self.take("name")[1])
            if self.peek()[0] == "comma":
                self.i += 1
                continue
            self.take("rp")
            break
        if len(terms) != schema.arity:
            raise RuleError(
                f"predicate {name!r} has arity {schema.arity}, got {len(terms)} arguments",
                self.lineno, col)
        return Literal(schema.id, tuple(terms), negated)

    def clause(self, name: str) -> Clause:
        weight = 1.0
        if self.peek()[0] == "num":
            weight = float(self.take("num")[1])
            self.take("colon")
        first = [self.literal()]
        sep = self.peek()[0]
        literals: list
        if sep in ("and", "impl"):
            body = first
            while self.peek()[0] == "and":
                self.i += 1
                body.append(self.literal())
            self.take("impl")
            head = [self.literal()]
            while self.peek()[0] == "or":
                self.i += 1
                head.append(self.literal())
            literals = [Literal(l.predicate, l.vars, not l.negated) for l in body] + head
        else:
            literals = first
            while self.peek()[0] == "or":
                self.i += 1
                literals.append(self.literal())
        tok = self.peek()
        if tok[0] != "end":
            raise RuleError(f"unexpected {tok[1]!r}", self.lineno, tok[2])
        variables = []
        for lit in literals:
            for sym in lit.vars:
                if is_variable(sym) and sym not in variables:
                    variables.append(sym)
        return Clause(name, tuple(variables), tuple(literals), weight)


def _schema_map(schemas) -> dict:
    if isinstance(schemas, Mapping):
        return dict(schemas)
    return {s.name: s for s in schemas}


def parse_rules(text: str, schemas: Iterable[PredicateSchema] | Mapping[str, PredicateSchema]) -> list:
    """Parse rule-DSL text into clauses named ``f0, f1, ...`` in file order."""
    smap = _schema_map(schemas)
    clauses = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        clauses.append(_LineParser(line, lineno, smap).clause(f"f{len(clauses)}"))
    return clauses


def format_clause(clause: Clause, schemas: Sequence[PredicateSchema]) -> str:
    """Render a clause in canonical disjunctive DSL form."""
    by_id = {s.id: s.name for s in schemas}
    lits = []
    for lit in clause.literals:
        lits.append(("!" if lit.negated else "") + f"{by_id[lit.predicate]}({','.join(lit.vars)})")
    return f"{clause.weight!r}: " + " | ".join(lits)


def parse_schema(text: str) -> list:
    """Parse ``name<TAB>arity`` lines into schemas with dense ids."""
    schemas = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise RuleError("expected 'name<TAB>arity'", lineno, 1)
        name, arity = parts
        try:
            arity = int(arity)
        except ValueError:
            raise RuleError(f"arity {arity!r} is not an integer", lineno, len(name) + 2) from None
        if name in seen:
            raise RuleError(f"duplicate predicate {name!r}", lineno, 1)
        if arity < 1:
            raise RuleError(f"arity of {name!r} must be >= 1", lineno, len(name) + 2)
        seen.add(name)
        schemas.append(PredicateSchema(len(schemas), name, arity))
    return schemas


def format_schema(schemas: Sequence[PredicateSchema]) -> str:
    return "".join(f"{s.name}\t{s.arity}\n" for s in schemas)
