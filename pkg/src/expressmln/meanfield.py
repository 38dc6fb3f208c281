"""Mean-field objective, training loop and marginal inference.

The objective for a batch of ground formulae is maximised:

    sum_f w_f E_Q[phi_f] + entropy_weight * sum_a H(Q(a)) + disc_weight * sum_o log Q(o)

where ``a`` ranges over the distinct latent atoms of the batch and ``o``
over its distinct observed-true atoms. Observed atoms are fixed at their
values, so ``E_Q[phi_f]`` is 1 when an observed literal already holds and
otherwise ``1 - prod P(literal false)`` over the distinct latent atoms.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, PlateauSchedule, Tape, Tensor
from .gnn import PosteriorModel
from .kb import KnowledgeBase
from .logic import Clause
from .sampler import GroundFormula, SamplerConfig, SamplerStats, sample_batch

log = logging.getLogger(__name__)

MAX_ENUM_ATOMS = 20


class EnumerationBudgetError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectiveWeights:
    formula: float = 1.0
    entropy: float = 1.0
    disc: float = 0.0

    def __post_init__(self):
        if min(self.formula, self.entropy, self.disc) < 0:
            raise ValueError("objective weights must be non-negative")


@dataclass
class ElboTerms:
    objective: Tensor
    formula: float
    entropy: float
    disc: float

    @property
    def value(self) -> float:
        return self.objective.item()


def _literal_true(value, negated) -> bool:
    return value is not None and (value == 1) != negated


def expected_clause_truth(gf: GroundFormula, model: PosteriorModel) -> Tensor:
    """``E_Q[phi]`` by enumerating the joint states of the distinct latent atoms.

    Reference implementation, differentiable on the active tape.
    """
    if any(_literal_true(v, n) for v, n in zip(gf.values, gf.negated)):
        return Tensor(np.array(1.0))
    latent = gf.latent_atoms
    k = len(latent)
    if k > MAX_ENUM_ATOMS:
        raise EnumerationBudgetError(f"{k} distinct latent atoms exceed the enumeration limit {MAX_ENUM_ATOMS}")
    if k == 0:
        return Tensor(np.array(0.0))
    pos = {a: j for j, a in enumerate(latent)}
    states = ((np.arange(1 << k)[:, None] >> (k - 1 - np.arange(k))[None, :]) & 1).astype(np.float64)
    phi = np.zeros(1 << k)
    for a, v, n in zip(gf.atoms, gf.values, gf.negated):
        if v is None:
            phi = np.maximum(phi, states[:, pos[a]] != n)
    z = model.logits(latent)
    log_q = ad.reshape(ad.log_sigmoid(z), (k, 1))
    log_1mq = ad.reshape(ad.log_sigmoid(ad.neg(z)), (k, 1))
    log_p = ad.add(ad.matmul(Tensor(states), log_q), ad.matmul(Tensor(1.0 - states), log_1mq))
    return ad.sum(ad.mul(Tensor(phi), ad.exp(ad.reshape(log_p, (1 << k,)))))


def elbo_batch(batch: Sequence[GroundFormula], model: PosteriorModel, clauses: Sequence[Clause],
               weights: ObjectiveWeights = ObjectiveWeights(), extra_positive: Sequence = (),
               extra_negative: Sequence = ()) -> ElboTerms:
    """Batch objective in closed form (see module docstring).

    ``extra_positive`` atoms are added to the discriminative term, which is
    how query-anchored training feeds its labelled queries.
    ``extra_negative`` atoms enter it as ``log(1 - Q)``; completion training
    uses corrupted facts here. Atoms also listed as positive are skipped.
    """
    if not batch:
        raise ValueError("elbo_batch needs a nonempty batch")
    latent: dict = {}
    observed_pos: dict = {}
    const_total = 0.0
    rows = []  # (formula slot, [(latent index, negated)])
    w_rows = []
    for gf in batch:
        w = clauses[gf.clause].weight
        if any(_literal_true(v, n) for v, n in zip(gf.values, gf.negated)):
            const_total += w
        else:
            lits = {}
            taut = False
            for a, v, n in zip(gf.atoms, gf.values, gf.negated):
                if v is not None:
                    continue
                j = latent.setdefault(a, len(latent))
                if lits.get(j, n) != n:
                    taut = True
                lits[j] = n
            if taut:
                const_total += w
            elif lits:
                rows.append(sorted(lits.items()))
                w_rows.append(w)
        for a, v in zip(gf.atoms, gf.values):
            if v is None:
                latent.setdefault(a, len(latent))
            elif v == 1:
                observed_pos[a] = None
    for a in extra_positive:
        observed_pos[a] = None

    n = len(latent)
    total = Tensor(np.array(weights.formula * const_total))
    formula_value = const_total
    entropy_value = disc_value = 0.0
    if n:
        z = model.logits(list(latent))
        log_q, log_1mq = ad.log_sigmoid(z), ad.log_sigmoid(ad.neg(z))
        if rows:
            # P(literal false) is 1-q for a positive literal and q for a negated one
            pool = ad.concat([log_1mq, log_q], axis=0)
            idx = np.array([j + n * int(neg) for r in rows for j, neg in r], dtype=np.int64)
            seg = np.repeat(np.arange(len(rows)), [len(r) for r in rows])
            log_false = ad.segment_sum(ad.take(pool, idx), seg, len(rows))
            truth = ad.sub(1.0, ad.exp(log_false))
            term = ad.sum(ad.mul(Tensor(np.asarray(w_rows)), truth))
            formula_value += term.item()
            total = ad.add(total, ad.mul(term, weights.formula))
        if weights.entropy:
            q, one_minus_q = ad.logistic(z), ad.logistic(ad.neg(z))
            ent = ad.neg(ad.sum(ad.add(ad.mul(q, log_q), ad.mul(one_minus_q, log_1mq))))
            entropy_value = ent.item()
            total = ad.add(total, ad.mul(ent, weights.entropy))
    if weights.disc and observed_pos:
        d = ad.sum(ad.log_sigmoid(model.logits(list(observed_pos))))
        disc_value = d.item()
        total = ad.add(total, ad.mul(d, weights.disc))
    negatives = [a for a in dict.fromkeys(extra_negative) if a not in observed_pos]
    if weights.disc and negatives:
        d = ad.sum(ad.log_sigmoid(ad.neg(model.logits(negatives))))
        disc_value += d.item()
        total = ad.add(total, ad.mul(d, weights.disc))
    return ElboTerms(total, formula_value, entropy_value, disc_value)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 10
    steps_per_epoch: int = 50
    lr: float = 5e-4
    formula_weight: float = 1.0
    entropy_weight: float = 1.0
    disc_weight: float = 0.0
    patience: int = 10
    val_batches: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        ObjectiveWeights(self.formula_weight, self.entropy_weight, self.disc_weight)

    @property
    def weights(self) -> ObjectiveWeights:
        return ObjectiveWeights(self.formula_weight, self.entropy_weight, self.disc_weight)


@dataclass
class TrainResult:
    model: PosteriorModel
    history: list = field(default_factory=list)
    sampler_stats: SamplerStats = field(default_factory=SamplerStats)


BatchFn = Callable[[np.random.Generator], tuple]


def train(kb: KnowledgeBase, clauses: Sequence[Clause], model: PosteriorModel,
          sampler: SamplerConfig = SamplerConfig(), config: TrainConfig = TrainConfig(),
          optimizer: Adam | None = None, batch_fn: BatchFn | None = None,
          callback: Callable | None = None) -> TrainResult:
    """Stochastic gradient ascent on the batch objective.

    ``batch_fn(rng)`` may replace the default sampler; it returns
    ``(ground formulae, extra positive atoms)`` with an optional third item
    of extra negative atoms. History holds one row per
    epoch: global step, mean objective, validation loss and learning rate.
    """
    rng = np.random.default_rng(config.seed)
    val_rng = np.random.default_rng([config.seed, 1])
    stats = SamplerStats()
    if batch_fn is None:
        def batch_fn(r):
            return sample_batch(kb, clauses, sampler, r, stats), ()
    params = model.params()
    opt = optimizer or Adam(params, lr=config.lr)
    schedule = PlateauSchedule(opt, patience=config.patience)
    weights = config.weights
    val_sets = [batch_fn(val_rng) for _ in range(config.val_batches if config.epochs else 0)]
    val_sets = [v for v in val_sets if v[0]]
    history = []
    step = 0
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(config.steps_per_epoch):
            batch, *extra = batch_fn(rng)
            if not batch:
                continue
            try:
                with Tape() as tape:
                    terms = elbo_batch(batch, model, clauses, weights, *extra)
                grads = tape.backward(terms.objective, params)
                if not np.isfinite(sum(float(np.sum(g)) for g in grads)):
                    raise NonFiniteError("non-finite gradient")
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}; lr={opt.lr!r}") from exc
            opt.step(grads, maximize=True)
            model.invalidate()
            total += terms.value
            step += 1
        val_loss = -float(np.mean([elbo_batch(b, model, clauses, weights, *e).value for b, *e in val_sets])) \
            if val_sets else float("nan")
        if not math.isnan(val_loss):
            schedule.step(val_loss)
        row = {"step": step, "objective": total / config.steps_per_epoch, "val_metric": val_loss, "lr": opt.lr}
        history.append(row)
        if callback is not None:
            callback(epoch, model, row)
    return TrainResult(model, history, stats)


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "objective", "val_metric", "lr"])
        for row in history:
            w.writerow([row["step"], repr(float(row["objective"])), repr(float(row["val_metric"])),
                        repr(float(row["lr"]))])


def infer_marginals(kb: KnowledgeBase, model: PosteriorModel, queries) -> dict:
    """``{atom: Q(atom)}``; observed atoms are rejected."""
    queries = list(queries)
    for a in queries:
        if kb.value(a) is not None:
            raise ValueError(f"query {kb.format_atom(a)} is observed, not latent")
    return dict(zip(queries, model.q_probs(queries).tolist()))
