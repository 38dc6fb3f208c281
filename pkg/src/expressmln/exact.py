"""Brute-force inference for small MLNs, used as a test oracle.

Joint states of the latent atoms are enumerated in lexicographic order:
state ``s`` assigns atom ``j`` (of ``k``) the bit ``(s >> (k - 1 - j)) & 1``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .kb import KnowledgeBase
from .logic import Clause
from .sampler import GroundFormula, clause_constants, instantiate

DEFAULT_STATE_BUDGET = 1 << 20


class OracleBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class EnumerableMln:
    latent: tuple  # GroundAtom per latent variable
    formulas: tuple  # GroundFormula, values resolved against the KB
    weights: np.ndarray

    @property
    def n_latent(self) -> int:
        return len(self.latent)


def enumerate_groundings(kb: KnowledgeBase, clauses: Sequence[Clause], budget: int = 10 ** 6,
                         allow_repeated: bool = True) -> list:
    """Every binding of every clause, deduplicated by ground literal list."""
    M = kb.n_entities
    total = sum(M ** len(c.variables) for c in clauses)
    if total > budget:
        raise OracleBudgetError(f"{total} groundings exceed budget {budget}")
    seen = set()
    out = []
    for ci, clause in enumerate(clauses):
        consts = clause_constants(kb, clause)
        for combo in itertools.product(range(M), repeat=len(clause.variables)):
            if not allow_repeated and len(set(combo)) != len(combo):
                continue
            gf = instantiate(kb, ci, clause, dict(zip(clause.variables, combo)), consts)
            if gf.key not in seen:
                seen.add(gf.key)
                out.append(gf)
    return out


def build_mln(kb: KnowledgeBase, clauses: Sequence[Clause], formulas: Sequence[GroundFormula] | None = None,
              max_latent: int = 24) -> EnumerableMln:
    """Collect the latent atoms of ``formulas`` (default: all groundings)."""
    if formulas is None:
        formulas = enumerate_groundings(kb, clauses)
    latent = sorted({a for gf in formulas for a in gf.latent_atoms})
    if len(latent) > max_latent:
        raise OracleBudgetError(f"{len(latent)} latent atoms exceed the limit {max_latent}")
    weights = np.array([clauses[gf.clause].weight for gf in formulas], dtype=np.float64)
    return EnumerableMln(tuple(latent), tuple(formulas), weights)


def _encode(mln: EnumerableMln):
    index = {a: j for j, a in enumerate(mln.latent)}
    F = len(mln.formulas)
    L = max((len(gf.atoms) for gf in mln.formulas), default=1)
    lit_atom = np.full((F, L), -1, dtype=np.int64)
    lit_neg = np.zeros((F, L), dtype=np.bool_)
    const_true = np.zeros(F, dtype=np.bool_)
    for f, gf in enumerate(mln.formulas):
        for j, (a, v, n) in enumerate(zip(gf.atoms, gf.values, gf.negated)):
            if v is None:
                lit_atom[f, j] = index[a]
                lit_neg[f, j] = n
            elif (v == 1) != n:
                const_true[f] = True
    return lit_atom, lit_neg, const_true


def log_potentials(mln: EnumerableMln, budget: int = DEFAULT_STATE_BUDGET) -> np.ndarray:
    """``sum_f w_f phi_f(state)`` for every joint latent state."""
    k = mln.n_latent
    if (1 << k) > budget:
        raise OracleBudgetError(f"2^{k} joint states exceed budget {budget}")
    lit_atom, lit_neg, const_true = _encode(mln)
    return _kernels.formula_log_potentials(lit_atom, lit_neg, const_true, mln.weights, k)


def exact_log_evidence(mln: EnumerableMln, budget: int = DEFAULT_STATE_BUDGET) -> float:
    """``log sum_H exp(sum_f w_f phi_f)`` with observed atoms clamped."""
    return float(logsumexp(log_potentials(mln, budget)))


def exact_marginals(mln: EnumerableMln, budget: int = DEFAULT_STATE_BUDGET) -> dict:
    """``{atom: P(atom = 1 | observed)}`` for every latent atom."""
    lp = log_potentials(mln, budget)
    k = mln.n_latent
    # ratios of sums of shifted weights; equal weights give exact dyadic results
    w = np.exp(lp - lp.max())
    z = w.sum()
    states = np.arange(1 << k)
    out = {}
    for j, atom in enumerate(mln.latent):
        on = ((states >> (k - 1 - j)) & 1).astype(bool)
        out[atom] = float(w[on].sum() / z)
    return out


def formula_truth(gf: GroundFormula, assignment: dict) -> bool:
    """Truth of a ground formula with latent atoms taken from ``assignment``."""
    for a, v, n in zip(gf.atoms, gf.values, gf.negated):
        val = v if v is not None else assignment[a]
        if (val == 1) != n:
            return True
    return False

