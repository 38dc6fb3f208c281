"""Posterior parametrisations: naive, tunable, GNN and GNN+tunable.

Every variant maps a ground atom ``r(c1, .., cn)`` to a logit; the posterior
marginal is its logistic. The embedding variants score atoms with a
predicate-specific two-layer MLP over the concatenated entity embeddings.

The GNN runs message passing on the graph of *observed* facts. Initial
constant embeddings are one shared vector, fact nodes start from a vector
per predicate, and messages use a separate MLP per (direction, argument
position, fact value) and per round unless ``share_rounds`` is set.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .graph import FactorGraph, build_graph
from .kb import KnowledgeBase
from .logic import GroundAtom

VARIANTS = ("naive", "tunable", "gnn", "express")
TUNE_INIT_STD = 0.1


class UnknownEntityError(KeyError):
    pass


class MLP:
    """Two-layer perceptron ``relu(x W1 + b1) W2 + b2``."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator, name: str):
        self.W1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_hidden)), True, f"{name}.W1")
        self.b1 = Tensor(np.zeros(n_hidden), True, f"{name}.b1")
        self.W2 = Tensor(rng.normal(0.0, np.sqrt(1.0 / n_hidden), (n_hidden, n_out)), True, f"{name}.W2")
        self.b2 = Tensor(np.zeros(n_out), True, f"{name}.b2")

    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.relu(ad.add(ad.matmul(x, self.W1), self.b1))
        return ad.add(ad.matmul(h, self.W2), self.b2)


class GnnParams:
    """Message-passing weights; their number does not depend on the entity count."""

    def __init__(self, n_predicates: int, max_arity: int, dim: int, rounds: int,
                 rng: np.random.Generator, share_rounds: bool = False):
        self.dim, self.rounds, self.max_arity = dim, rounds, max_arity
        self.share_rounds = share_rounds
        self.mu_const = Tensor(rng.normal(0.0, 1.0, dim), True, "gnn.mu_const")
        self.mu_pred = Tensor(rng.normal(0.0, 1.0, (n_predicates, dim)), True, "gnn.mu_pred")
        n_blocks = 0 if rounds == 0 else (1 if share_rounds else rounds)
        self.blocks = []
        for t in range(n_blocks):
            msg = {}
            for direction in ("f2c", "c2f"):
                for i in range(max_arity):
                    for v in (0, 1):
                        msg[direction, i, v] = MLP(2 * dim, dim, dim, rng, f"gnn.r{t}.{direction}.{i}.{v}")
            upd_c = MLP(2 * dim, dim, dim, rng, f"gnn.r{t}.upd_const")
            upd_f = MLP(2 * dim, dim, dim, rng, f"gnn.r{t}.upd_fact")
            self.blocks.append((msg, upd_c, upd_f))

    def params(self) -> list:
        out = [self.mu_const, self.mu_pred]
        for msg, upd_c, upd_f in self.blocks:
            for key in sorted(msg):
                out.extend(msg[key].params())
            out.extend(upd_c.params() + upd_f.params())
        return out


def run_gnn(params: GnnParams, graph: FactorGraph):
    """Return ``(constant embeddings (M, d), fact embeddings (F, d))``."""
    M, F = graph.n_constants, graph.n_facts
    ones_c = Tensor(np.ones((M, 1)))
    h_c = ad.mul(ones_c, params.mu_const)
    h_f = ad.take(params.mu_pred, graph.fact_pred)
    groups = []
    for i in range(params.max_arity):
        for v in (0, 1):
            sel = np.flatnonzero((graph.edge_pos == i) & (graph.edge_val == v))
            if len(sel):
                groups.append((i, v, graph.edge_const[sel], graph.edge_fact[sel]))
    for t in range(params.rounds):
        msg, upd_c, upd_f = params.blocks[0 if params.share_rounds else t]
        m_c = Tensor(np.zeros((M, params.dim)))
        m_f = Tensor(np.zeros((F, params.dim)))
        for i, v, ec, ef in groups:
            hc, hf = ad.take(h_c, ec), ad.take(h_f, ef)
            to_c = msg["f2c", i, v](ad.concat([hf, hc], axis=1))
            to_f = msg["c2f", i, v](ad.concat([hc, hf], axis=1))
            m_c = ad.add(m_c, ad.segment_sum(to_c, ec, M))
            m_f = ad.add(m_f, ad.segment_sum(to_f, ef, F))
        h_c, h_f = upd_c(ad.concat([h_c, m_c], axis=1)), upd_f(ad.concat([h_f, m_f], axis=1))
    return h_c, h_f


def naive_offsets(kb: KnowledgeBase) -> np.ndarray:
    """Start index of each predicate's block in the dense per-atom table."""
    sizes = [kb.n_entities ** s.arity for s in kb.schemas]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


class PosteriorModel:
    """Mean-field posterior ``Q(atom) = logistic(logit(atom))``.

    ``variant`` is one of ``naive``, ``tunable``, ``gnn``, ``express``.
    Entity embeddings are cached between optimiser steps; call
    :meth:`invalidate` after changing parameters. Inside an active tape the
    embeddings are always recomputed so gradients flow.
    """

    def __init__(self, kb: KnowledgeBase, variant: str = "express", gnn_dim: int = 64,
                 tune_dim: int = 4, rounds: int = 2, seed: int = 0, share_rounds: bool = False,
                 naive_budget: int = 10 ** 7):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        if gnn_dim < 1 and variant in ("gnn", "express"):
            raise ValueError("gnn_dim must be positive")
        if tune_dim < 0 or rounds < 0:
            raise ValueError("tune_dim and rounds must be non-negative")
        if variant == "tunable" and tune_dim < 1:
            raise ValueError("the tunable variant needs tune_dim >= 1")
        self.kb = kb
        self.variant = variant
        self.gnn_dim, self.tune_dim, self.rounds = gnn_dim, tune_dim, rounds
        self.share_rounds = share_rounds
        self.seed = seed
        self.zero_tunable = False
        rng = np.random.default_rng(seed)
        self.graph = build_graph(kb)
        self.gnn = self.omega = self.table = None
        self.heads: list = []
        if variant == "naive":
            self.offsets = naive_offsets(kb)
            if self.offsets[-1] > naive_budget:
                raise ValueError(f"naive table needs {self.offsets[-1]} entries, budget {naive_budget}")
            self.table = Tensor(np.zeros(int(self.offsets[-1])), True, "naive.logits")
            return
        if variant in ("gnn", "express"):
            max_arity = max((s.arity for s in kb.schemas), default=1)
            self.gnn = GnnParams(len(kb.schemas), max_arity, gnn_dim, rounds, rng, share_rounds)
        if variant in ("tunable", "express") and tune_dim > 0:
            self.omega = Tensor(rng.normal(0.0, TUNE_INIT_STD, (kb.n_entities, tune_dim)), True, "tune.omega")
        width = self.embedding_dim
        self.heads = [MLP(s.arity * width, width, 1, rng, f"head.{s.name}") for s in kb.schemas]
        self._cache = None

    # -- parameters ---------------------------------------------------------

    @property
    def embedding_dim(self) -> int:
        return {"tunable": self.tune_dim, "gnn": self.gnn_dim,
                "express": self.gnn_dim + self.tune_dim}.get(self.variant, 0)

    def params(self) -> list:
        if self.variant == "naive":
            return [self.table]
        out = []
        if self.gnn is not None:
            out.extend(self.gnn.params())
        if self.omega is not None:
            out.append(self.omega)
        for h in self.heads:
            out.extend(h.params())
        return out

    def named_params(self) -> dict:
        return {p.name: p for p in self.params()}

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_params().items()}

    def load_state_dict(self, state: dict) -> None:
        named = self.named_params()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint mismatch for {name}: shape {arr.shape} vs {p.shape}")
            p.data = arr.copy()
        self.invalidate()

    def config(self) -> dict:
        return {"variant": self.variant, "gnn_dim": self.gnn_dim, "tune_dim": self.tune_dim,
                "rounds": self.rounds, "share_rounds": self.share_rounds, "seed": self.seed}

    def invalidate(self) -> None:
        self._cache = None

    # -- embeddings ---------------------------------------------------------

    def _compute_embeddings(self) -> Tensor:
        parts = []
        if self.gnn is not None:
            parts.append(run_gnn(self.gnn, self.graph)[0])
        if self.omega is not None:
            parts.append(Tensor(np.zeros(self.omega.shape)) if self.zero_tunable else self.omega)
        return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)

    def embeddings(self) -> Tensor:
        """Entity embeddings ``(M, embedding_dim)``."""
        if self.variant == "naive":
            raise ValueError("the naive variant has no entity embeddings")
        if Tape.current() is not None:
            return self._compute_embeddings()
        if self._cache is None:
            self._cache = self._compute_embeddings()
        return self._cache

    def embed_entity(self, constant) -> np.ndarray:
        """``[mu_c, omega_c]`` for a constant id or name."""
        c = self._constant_id(constant)
        return self.embeddings().data[c].copy()

    def _constant_id(self, constant) -> int:
        if isinstance(constant, str):
            try:
                return self.kb.constant_ids[constant]
            except KeyError:
                raise UnknownEntityError(constant) from None
        c = int(constant)
        if not 0 <= c < self.kb.n_entities:
            raise UnknownEntityError(constant)
        return c

    # -- scoring ------------------------------------------------------------

    def naive_index(self, atoms: Sequence[GroundAtom]) -> np.ndarray:
        M = self.kb.n_entities
        idx = np.empty(len(atoms), dtype=np.int64)
        for k, a in enumerate(atoms):
            flat = 0
            for c in a.args:
                flat = flat * M + c
            idx[k] = self.offsets[a.predicate] + flat
        return idx

    def logits(self, atoms: Sequence[GroundAtom]) -> Tensor:
        """Logits for ``atoms`` as a ``(len(atoms),)`` tensor."""
        atoms = list(atoms)
        if self.variant == "naive":
            return ad.take(self.table, self.naive_index(atoms))
        emb = self.embeddings()
        preds = np.fromiter((a.predicate for a in atoms), dtype=np.int64, count=len(atoms))
        pieces, order = [], []
        for p in np.unique(preds):
            sel = np.flatnonzero(preds == p)
            args = np.array([atoms[k].args for k in sel], dtype=np.int64)
            x = ad.concat([ad.take(emb, args[:, j]) for j in range(args.shape[1])], axis=1)
            pieces.append(ad.reshape(self.heads[p](x), (len(sel),)))
            order.append(sel)
        if not pieces:
            return Tensor(np.zeros(0))
        flat = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        inverse = np.empty(len(atoms), dtype=np.int64)
        inverse[np.concatenate(order)] = np.arange(len(atoms))
        return ad.take(flat, inverse)

    def q_probs(self, atoms: Iterable[GroundAtom]) -> np.ndarray:
        atoms = list(atoms)
        if not atoms:
            return np.zeros(0)
        return ad.logistic(self.logits(atoms)).data.copy()

    def q_prob(self, atom: GroundAtom) -> float:
        return float(self.q_probs([atom])[0])

    # -- inductive use ------------------------------------------------------

    def rebind(self, kb: KnowledgeBase, zero_tunable: bool = False) -> "PosteriorModel":
        """Copy of this model bound to another KB with the same schemas.

        GNN and head parameters are shared. Tunable rows are matched by
        constant name; entities unseen in training get a zero tunable part.
        """
        if tuple((s.name, s.arity) for s in kb.schemas) != tuple((s.name, s.arity) for s in self.kb.schemas):
            raise ValueError("rebind needs identical predicate schemas")
        if self.variant == "naive":
            raise ValueError("the naive variant cannot be transferred to a new KB")
        new = object.__new__(PosteriorModel)
        new.__dict__.update(self.__dict__)
        new.kb = kb
        new.graph = build_graph(kb)
        new._cache = None
        new.zero_tunable = zero_tunable
        if self.omega is not None:
            rows = np.zeros((kb.n_entities, self.tune_dim))
            old = self.kb.constant_ids
            for c, name in enumerate(kb.constants):
                j = old.get(name)
                if j is not None:
                    rows[c] = self.omega.data[j]
            new.omega = Tensor(rows, True, "tune.omega")
        return new
