"""Knowledge bases: constants, schemas, observed facts and world semantics.

On-disk layout of a dataset directory::

    schema.tsv     name<TAB>arity
    entities.txt   one constant name per line (optional)
    facts.tsv      pred<TAB>c1<TAB>...<TAB>ck<TAB>{0|1}
    train.tsv      pred<TAB>c1<TAB>...<TAB>ck<TAB>label   (optional)
    valid.tsv      same                                   (optional)
    test.tsv       same                                   (optional)
    rules.txt      rule DSL                               (optional)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .logic import Clause, GroundAtom, PredicateSchema, parse_rules, parse_schema


class DataError(ValueError):
    """Malformed or inconsistent knowledge-base data."""


class Semantics(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    constants: tuple
    schemas: tuple
    clauses: tuple = ()
    facts: Mapping = field(default_factory=dict)
    semantics: Semantics = Semantics.OPEN
    query_predicates: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "constants", tuple(self.constants))
        object.__setattr__(self, "schemas", tuple(self.schemas))
        object.__setattr__(self, "clauses", tuple(self.clauses))
        object.__setattr__(self, "semantics", Semantics(self.semantics))
        object.__setattr__(self, "query_predicates", frozenset(self.query_predicates))
        if len(set(self.constants)) != len(self.constants):
            raise DataError("constant names must be unique")
        for i, s in enumerate(self.schemas):
            if s.id != i:
                raise DataError("predicate ids must be dense and ordered")
        M = len(self.constants)
        facts = dict(self.facts)
        for atom, v in facts.items():
            self._check_atom(atom, M)
            if v not in (0, 1):
                raise DataError(f"fact value must be 0 or 1, got {v!r}")
        object.__setattr__(self, "facts", MappingProxyType(facts))

    def _check_atom(self, atom, M=None):
        M = len(self.constants) if M is None else M
        if not 0 <= atom.predicate < len(self.schemas):
            raise DataError(f"unknown predicate id {atom.predicate}")
        if len(atom.args) != self.schemas[atom.predicate].arity:
            raise DataError(f"atom {atom} does not match arity of {self.schemas[atom.predicate].name}")
        for c in atom.args:
            if not 0 <= c < M:
                raise DataError(f"atom {atom} references unknown constant id {c}")

    @property
    def n_entities(self) -> int:
        return len(self.constants)

    @cached_property
    def constant_ids(self) -> dict:
        return {name: i for i, name in enumerate(self.constants)}

    @cached_property
    def predicate_ids(self) -> dict:
        return {s.name: s.id for s in self.schemas}

    @cached_property
    def facts_by_predicate(self) -> tuple:
        """Per predicate, an ``(n, arity)`` int array of fact arguments."""
        rows = [[] for _ in self.schemas]
        for atom in sorted(self.facts):
            rows[atom.predicate].append(atom.args)
        return tuple(np.asarray(r, dtype=np.int64).reshape(len(r), s.arity)
                     for r, s in zip(rows, self.schemas))

    @cached_property
    def _closed_predicates(self) -> frozenset:
        if self.semantics is Semantics.OPEN:
            return frozenset()
        present = {a.predicate for a in self.facts}
        return frozenset(present - self.query_predicates)

    def value(self, atom: GroundAtom):
        """Observed truth value of ``atom``, or ``None`` when it is latent."""
        v = self.facts.get(atom)
        if v is not None:
            return v
        if atom.predicate in self._closed_predicates:
            return 0
        return None

    def is_latent(self, atom: GroundAtom) -> bool:
        return self.value(atom) is None

    def atom(self, predicate: str, *args: str) -> GroundAtom:
        pid = self.predicate_ids[predicate]
        a = GroundAtom(pid, tuple(self.constant_ids[c] for c in args))
        self._check_atom(a)
        return a

    def format_atom(self, atom: GroundAtom) -> str:
        name = self.schemas[atom.predicate].name
        return f"{name}({','.join(self.constants[c] for c in atom.args)})"

    def with_facts(self, facts: Mapping, **changes) -> "KnowledgeBase":
        return replace(self, facts=facts, **changes)


@dataclass
class DatasetSplit:
    """Facts plus labelled query atoms for train/valid/test."""

    facts: list = field(default_factory=list)
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def check(self):
        seen = {}
        for part in ("train", "valid", "test"):
            for atom, _ in getattr(self, part):
                if atom in seen and seen[atom] != part:
                    raise DataError(f"atom {atom} in both {seen[atom]} and {part}")
                seen[atom] = part
        fact_atoms = {a for a, _ in self.facts}
        clash = fact_atoms & set(seen)
        if clash:
            raise DataError(f"{len(clash)} query atoms also appear as facts")

    @property
    def query_predicates(self) -> frozenset:
        return frozenset(a.predicate for part in (self.train, self.valid, self.test) for a, _ in part)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror or exc}") from exc


def _parse_atom_lines(text: str, path, schemas_by_name: Mapping, constants: dict, grow: bool):
    """Parse ``pred c1 .. ck value`` lines; returns ``[(atom, value)]``."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        schema = schemas_by_name.get(parts[0])
        if schema is None:
            raise DataError(f"{path}:{lineno}: unknown predicate {parts[0]!r}")
        if len(parts) != schema.arity + 2:
            raise DataError(f"{path}:{lineno}: {parts[0]} expects {schema.arity} arguments and a value")
        args = []
        for name in parts[1:-1]:
            cid = constants.get(name)
            if cid is None:
                if not grow:
                    raise DataError(f"{path}:{lineno}: unknown constant {name!r}")
                cid = constants[name] = len(constants)
            args.append(cid)
        if parts[-1] not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: value must be 0 or 1, got {parts[-1]!r}")
        out.append((GroundAtom(schema.id, tuple(args)), int(parts[-1])))
    return out


def _dedupe(pairs, path) -> dict:
    facts = {}
    for atom, v in pairs:
        old = facts.get(atom)
        if old is not None and old != v:
            raise DataError(f"{path}: conflicting values for atom {atom}")
        facts[atom] = v
    return facts


def load_kb(facts_path, schema_path, rules_path=None, semantics=Semantics.OPEN,
            query_predicates: Iterable[str] = (), entities_path=None) -> KnowledgeBase:
    """Load a knowledge base from TSV files.

    Under closed-world semantics the predicates named in ``query_predicates``
    stay open.
    """
    schemas = parse_schema(_read_text(schema_path))
    by_name = {s.name: s for s in schemas}
    constants: dict = {}
    if entities_path is not None:
        for name in _read_text(entities_path).split():
            constants.setdefault(name, len(constants))
    pairs = _parse_atom_lines(_read_text(facts_path), facts_path, by_name, constants, grow=True)
    facts = _dedupe(pairs, facts_path)
    clauses = parse_rules(_read_text(rules_path), schemas) if rules_path is not None else []
    qp = set()
    for name in query_predicates:
        if name not in by_name:
            raise DataError(f"unknown query predicate {name!r}")
        qp.add(by_name[name].id)
    return KnowledgeBase(tuple(constants), tuple(schemas), tuple(clauses), facts,
                         Semantics(semantics), frozenset(qp))


def load_dataset(directory, semantics=Semantics.OPEN, rules_path=None):
    """Load a dataset directory (see module docstring) as ``(kb, split)``."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory {d} does not exist")
    schemas = parse_schema(_read_text(d / "schema.tsv"))
    by_name = {s.name: s for s in schemas}
    constants: dict = {}
    if (d / "entities.txt").exists():
        for name in _read_text(d / "entities.txt").split():
            constants.setdefault(name, len(constants))
    fact_pairs = _parse_atom_lines(_read_text(d / "facts.tsv"), d / "facts.tsv", by_name, constants, True)
    parts = {}
    for part in ("train", "valid", "test"):
        p = d / f"{part}.tsv"
        parts[part] = _parse_atom_lines(_read_text(p), p, by_name, constants, True) if p.exists() else []
    facts = _dedupe(fact_pairs, d / "facts.tsv")
    split = DatasetSplit(sorted(facts.items()), parts["train"], parts["valid"], parts["test"])
    split.check()
    rp = rules_path if rules_path is not None else (d / "rules.txt" if (d / "rules.txt").exists() else None)
    clauses = parse_rules(_read_text(rp), schemas) if rp is not None else []
    kb = KnowledgeBase(tuple(constants), tuple(schemas), tuple(clauses), facts,
                       Semantics(semantics), split.query_predicates)
    return kb, split


def _atom_line(kb: KnowledgeBase, atom: GroundAtom, value: int) -> str:
    cols = [kb.schemas[atom.predicate].name] + [kb.constants[c] for c in atom.args] + [str(int(value))]
    return "\t".join(cols) + "\n"


def save_dataset(directory, kb: KnowledgeBase, split: DatasetSplit | None = None, rules_text: str | None = None):
    from .logic import format_clause, format_schema

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "schema.tsv").write_text(format_schema(kb.schemas), encoding="utf-8")
    (d / "entities.txt").write_text("".join(c + "\n" for c in kb.constants), encoding="utf-8")
    (d / "facts.tsv").write_text("".join(_atom_line(kb, a, v) for a, v in sorted(kb.facts.items())),
                                 encoding="utf-8")
    if split is not None:
        for part in ("train", "valid", "test"):
            rows = getattr(split, part)
            (d / f"{part}.tsv").write_text("".join(_atom_line(kb, a, v) for a, v in rows), encoding="utf-8")
    if rules_text is None and kb.clauses:
        rules_text = "".join(format_clause(c, kb.schemas) + "\n" for c in kb.clauses)
    if rules_text is not None:
        (d / "rules.txt").write_text(rules_text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subsampling
# ---------------------------------------------------------------------------


def subsample_kb(kb: KnowledgeBase, max_entities: int, seed: int = 0,
                 split: DatasetSplit | None = None):
    """Induced sub-KB on a random subset of at most ``max_entities`` constants.

    Returns the new KB, or ``(kb, split)`` when a split is given. Constant
    order is preserved, ids are re-densified.
    """
    if max_entities < 1:
        raise ValueError("max_entities must be >= 1")
    M = kb.n_entities
    if max_entities >= M:
        return kb if split is None else (kb, split)
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(M, size=max_entities, replace=False))
    remap = {int(old): new for new, old in enumerate(keep)}

    def move(atom):
        try:
            return GroundAtom(atom.predicate, tuple(remap[c] for c in atom.args))
        except KeyError:
            return None

    facts = {}
    for atom, v in kb.facts.items():
        m = move(atom)
        if m is not None:
            facts[m] = v
    sub = KnowledgeBase(tuple(kb.constants[i] for i in keep), kb.schemas, kb.clauses, facts,
                        kb.semantics, kb.query_predicates)
    if split is None:
        return sub

    def move_rows(rows):
        out = []
        for atom, v in rows:
            m = move(atom)
            if m is not None:
                out.append((m, v))
        return out

    new_split = DatasetSplit(sorted(facts.items()), move_rows(split.train),
                             move_rows(split.valid), move_rows(split.test))
    return sub, new_split
