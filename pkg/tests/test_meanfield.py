import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fit_full_batch, random_enumerable_mln
from expressmln import autodiff as ad
from expressmln.autodiff import Tape, Tensor
from expressmln.exact import build_mln, enumerate_groundings, exact_log_evidence, exact_marginals
from expressmln.gnn import VARIANTS, PosteriorModel
from expressmln.kb import KnowledgeBase
from expressmln.logic import GroundAtom, PredicateSchema, parse_rules
from expressmln.meanfield import (ObjectiveWeights, TrainConfig, TrainingError, elbo_batch, expected_clause_truth,
                                  infer_marginals, train, write_history)
from expressmln.sampler import GroundFormula, SamplerConfig, sample_batch


def model_for(kb, variant, seed=0):
    return PosteriorModel(kb, variant, gnn_dim=4, tune_dim=2, rounds=1, seed=seed)


class TestObjectiveTerms:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_formula_term_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        kb, groundings, _ = random_enumerable_mln(rng)
        model = model_for(kb, "naive")
        model.table.data = rng.normal(size=model.table.shape)
        batch = [groundings[int(i)] for i in rng.integers(len(groundings), size=12)]
        terms = elbo_batch(batch, model, kb.clauses, ObjectiveWeights(1.0, 0.0, 0.0))
        ref = sum(kb.clauses[gf.clause].weight * expected_clause_truth(gf, model).item() for gf in batch)
        assert abs(terms.value - ref) < 1e-10

    def test_entropy_counts_distinct_atoms_once(self, tiny_kb):
        model = model_for(tiny_kb, "naive")
        gs = enumerate_groundings(tiny_kb, tiny_kb.clauses)
        batch = [g for g in gs if g.latent_atoms] * 2
        terms = elbo_batch(batch, model, tiny_kb.clauses, ObjectiveWeights(0.0, 1.0, 0.0))
        latent = {a for g in batch for a in g.latent_atoms}
        assert abs(terms.entropy - len(latent) * np.log(2)) < 1e-12
        assert abs(terms.value - terms.entropy) < 1e-12

    def test_tautology_and_observed_truth(self):
        s = (PredicateSchema(0, "R", 1),)
        kb = KnowledgeBase(("a", "b"), s, parse_rules("2.0: R(x) | !R(x)\n3.0: R(x)", s),
                           {GroundAtom(0, (0,)): 1})
        model = model_for(kb, "naive")
        r_b = GroundAtom(0, (1,))
        taut = GroundFormula(0, (1,), (r_b, r_b), (False, True), (None, None))
        observed = GroundFormula(1, (0,), (GroundAtom(0, (0,)),), (False,), (1,))
        terms = elbo_batch([taut, observed], model, kb.clauses, ObjectiveWeights(1.0, 0.0, 0.0))
        assert terms.formula == 5.0

    def test_observed_false_contributes_nothing(self):
        s = (PredicateSchema(0, "R", 1),)
        kb = KnowledgeBase(("a",), s, parse_rules("R(x)", s), {GroundAtom(0, (0,)): 0})
        gf = GroundFormula(0, (0,), (GroundAtom(0, (0,)),), (False,), (0,))
        assert elbo_batch([gf], model_for(kb, "naive"), kb.clauses).value == 0.0

    def test_discriminative_term(self, tiny_kb):
        model = model_for(tiny_kb, "naive")
        rng = np.random.default_rng(0)
        model.table.data = rng.normal(size=model.table.shape)
        gs = [g for g in enumerate_groundings(tiny_kb, tiny_kb.clauses) if g.latent_atoms][:3]
        pos = [tiny_kb.atom("Smokes", "bob")]
        neg = [tiny_kb.atom("Cancer", "ann"), tiny_kb.atom("Cancer", "ann")]
        w = ObjectiveWeights(0.0, 0.0, 1.0)
        base = elbo_batch(gs, model, tiny_kb.clauses, w)
        with_extra = elbo_batch(gs, model, tiny_kb.clauses, w, pos, neg)
        observed = {a for g in gs for a, v in zip(g.atoms, g.values) if v == 1}
        q = lambda a: model.q_prob(a)
        assert abs(base.disc - sum(np.log(q(a)) for a in observed)) < 1e-12
        expected = base.disc + np.log(q(pos[0])) + np.log(1 - q(neg[0]))
        assert abs(with_extra.disc - expected) < 1e-12

    def test_empty_batch_rejected(self, tiny_kb):
        with pytest.raises(ValueError):
            elbo_batch([], model_for(tiny_kb, "naive"), tiny_kb.clauses)


def flat_params(model):
    return np.concatenate([p.data.ravel() for p in model.params()])


def set_flat(model, x):
    pos = 0
    for p in model.params():
        p.data = x[pos:pos + p.size].reshape(p.shape).copy()
        pos += p.size
    model.invalidate()


class TestGradients:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_finite_differences(self, tiny_kb, variant):
        rng = np.random.default_rng(1)
        model = model_for(tiny_kb, variant, seed=2)
        if variant == "naive":
            model.table.data = rng.normal(size=model.table.shape)
        batch = sample_batch(tiny_kb, tiny_kb.clauses, SamplerConfig(batch=8), rng)
        extra = [tiny_kb.atom("Smokes", "cat")]
        w = ObjectiveWeights(1.0, 1.0, 0.5)
        params = model.params()
        with Tape() as tape:
            terms = elbo_batch(batch, model, tiny_kb.clauses, w, extra)
        g = np.concatenate([x.ravel() for x in tape.backward(terms.objective, params)])
        x0 = flat_params(model)
        fd = np.zeros_like(x0)
        eps = 1e-6
        for i in range(len(x0)):
            for sign in (1, -1):
                x = x0.copy()
                x[i] += sign * eps
                set_flat(model, x)
                fd[i] += sign * elbo_batch(batch, model, tiny_kb.clauses, w, extra).value
        fd /= 2 * eps
        set_flat(model, x0)
        rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd))
        assert rel < 1e-4


class TestBound:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_elbo_below_log_evidence(self, seed):
        kb, groundings, mln = random_enumerable_mln(np.random.default_rng(seed))
        model = model_for(kb, "naive")
        elbo = fit_full_batch(kb, model, groundings, steps=150)
        assert elbo <= exact_log_evidence(mln) + 1e-9

    def test_independent_atoms_are_exact(self):
        s = (PredicateSchema(0, "R", 1), PredicateSchema(1, "S", 1))
        kb = KnowledgeBase(("a", "b"), s, parse_rules("1.3: R(x)\n-0.4: S(x)", s))
        gs = enumerate_groundings(kb, kb.clauses)
        mln = build_mln(kb, kb.clauses, gs)
        model = model_for(kb, "naive")
        elbo = fit_full_batch(kb, model, gs, steps=2000, lr=0.05)
        assert abs(elbo - exact_log_evidence(mln)) < 1e-8
        marg = exact_marginals(mln)
        for a, p in marg.items():
            assert abs(model.q_prob(a) - p) < 1e-4


class TestTraining:
    def test_history_and_improvement(self, tiny_kb):
        model = model_for(tiny_kb, "express")
        gs = [g for g in enumerate_groundings(tiny_kb, tiny_kb.clauses) if g.latent_atoms]
        before = elbo_batch(gs, model, tiny_kb.clauses).value
        cfg = TrainConfig(epochs=4, steps_per_epoch=20, lr=0.02, seed=1)
        result = train(tiny_kb, tiny_kb.clauses, model, SamplerConfig(batch=8), cfg)
        assert [r["step"] for r in result.history] == [20, 40, 60, 80]
        assert set(result.history[0]) == {"step", "objective", "val_metric", "lr"}
        assert elbo_batch(gs, model, tiny_kb.clauses).value > before
        assert result.sampler_stats.draws > 0

    def test_seeded_training_is_reproducible(self, tiny_kb):
        runs = []
        for _ in range(2):
            model = model_for(tiny_kb, "express")
            train(tiny_kb, tiny_kb.clauses, model, SamplerConfig(batch=4), TrainConfig(epochs=1, steps_per_epoch=5))
            runs.append(flat_params(model))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_non_finite_raises_training_error(self, tiny_kb, monkeypatch):
        model = model_for(tiny_kb, "naive")
        monkeypatch.setattr(model, "logits", lambda atoms: ad.mul(Tensor(np.full(len(atoms), np.inf)), 1.0))
        with pytest.raises(TrainingError, match="epoch 0 step 0"):
            train(tiny_kb, tiny_kb.clauses, model, SamplerConfig(batch=2), TrainConfig(epochs=1, steps_per_epoch=1))

    def test_write_history(self, tmp_path):
        hist = [{"step": 5, "objective": 0.1, "val_metric": float("nan"), "lr": 1e-3}]
        write_history(tmp_path / "h.csv", hist)
        rows = list(csv.reader(open(tmp_path / "h.csv")))
        assert rows[0] == ["step", "objective", "val_metric", "lr"]
        assert rows[1] == ["5", "0.1", "nan", "0.001"]

    def test_infer_marginals(self, tiny_kb):
        model = model_for(tiny_kb, "gnn")
        q = tiny_kb.atom("Cancer", "ann")
        out = infer_marginals(tiny_kb, model, [q])
        assert out[q] == model.q_prob(q)
        with pytest.raises(ValueError, match="observed"):
            infer_marginals(tiny_kb, model, [tiny_kb.atom("Smokes", "ann")])
