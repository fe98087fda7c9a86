"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerance."""
import os
import time

import numpy as np
import pytest

import oracle
from conftest import OVERFIT_MAX_EPOCHS
from dialogmem.baselines import baseline_predictions, build_tfidf, q2a_train
from dialogmem.corpus import CandidateSet, DialogueExample, SourceTag, Utterance, load_corpus
from dialogmem.diagnostics import check_model_gradients, toy_problem, toy_vocab
from dialogmem.encoder import Featurizer, init_embeddings
from dialogmem.entnet import Dims, EntNet, attend, run_memory
from dialogmem.diffmath import Graph
from dialogmem.evaluation import turn_accuracy
from dialogmem.experiments import run_experiment
from dialogmem.sentnet import SOURCES, SEntNet
from dialogmem.synthetic import gen_synthetic
from dialogmem.training import TrainConfig, resolve_corpus, train


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    worst = {}
    for cls in (EntNet, SEntNet):
        model, _ = toy_problem(cls)
        assert (model.dims.d, model.dims.m, model.dims.vocab_size, model.dims.n_candidates) == (4, 2, 20, 3)
        worst[cls.kind] = check_model_gradients(cls, d=4, m=2, eps=1e-4, tol=1e-3).worst
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and elapsed < 30
    detail = ", ".join(f"{k} max rel err {v:.2e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert verdict(1, ok, detail)


def fixed_params(model, seed):
    """Deterministic hand-set parameters, larger than the training init so nonlinearities bite."""
    r = np.random.default_rng(seed)
    for k, v in model.params.items():
        model.params[k] = np.round(r.uniform(-1, 1, size=v.shape), 2)
        if k in ("E", "Epos"):
            model.params[k][0] = 0.0
    return model


def test_criterion_2_reference_forward(verdict):
    errs = {}
    model, batch = toy_problem(EntNet)
    fixed_params(model, 11)
    errs["entnet"] = np.abs(model.predict_proba(batch) - oracle.entnet_proba(model.params, batch)).max()
    model, batch = toy_problem(SEntNet)
    fixed_params(model, 12)
    errs["sentnet"] = np.abs(model.predict_proba(batch) - oracle.sentnet_proba(model.params, batch, SOURCES)).max()
    ok = max(errs.values()) <= 1e-12
    assert verdict(2, ok, ", ".join(f"{k} max abs diff {v:.1e}" for k, v in errs.items()))


def _single_source_batch():
    U = SourceTag.USER
    hist = tuple(Utterance(U, tuple(f"w{i}" for i in ws), t + 1, t + 1)
                 for t, ws in enumerate([[2, 3], [4, 5, 6], [7]]))
    return Featurizer(toy_vocab(), 3).batch([DialogueExample(0, 3, hist, 0)])


def test_criterion_3_structural_invariants(verdict):
    checks = {}
    # unit norms after every update
    r = np.random.default_rng(0)
    K, G, V, W = r.normal(size=(5, 6)), *(r.normal(size=(6, 6)) for _ in range(3))
    norms_ok = True
    for T in range(1, 8):
        h = run_memory(list(r.normal(scale=2.0, size=(T, 6))), K, G, V, W)
        norms_ok &= bool(np.all(np.abs(np.linalg.norm(h, axis=1) - 1) <= 1e-9))
    checks["unit norms"] = norms_ok
    # attention and output simplices
    simplex_ok = True
    for seed in range(5):
        ent, batch = toy_problem(EntNet, seed=seed)
        g = Graph()
        P = ent.bind(g)
        p = attend(g, ent.encode(g, P, batch.query_ids, batch.query_pos), g.const(ent.final_states(batch)))[0].value
        simplex_ok &= bool(np.all(p > 0) and np.all(np.abs(p.sum(1) - 1) <= 1e-9))
        sent, batch = toy_problem(SEntNet, seed=seed)
        for ps in sent.attention(batch).values():
            simplex_ok &= bool(np.all(ps > 0) and np.all(np.abs(ps.sum(1) - 1) <= 1e-9))
        for y in (ent.predict_proba(batch), sent.predict_proba(batch)):
            simplex_ok &= bool(np.all(y >= 0) and np.all(np.abs(y.sum(1) - 1) <= 1e-9))
    checks["simplices"] = simplex_ok
    # tied-parameter reduction on a single-source history
    rng = np.random.default_rng(3)
    vocab = toy_vocab()
    table = init_embeddings("random", vocab, 4, rng)
    dims = Dims(len(vocab), 3, 4, 2, 3)
    ent = fixed_params(EntNet.create(dims, rng, table), 21)
    sent = SEntNet.create(dims, rng, table)
    for k in ("E", "F", "L"):
        sent.params[k] = ent.params[k].copy()
    for n in "KGVW":
        for s in SOURCES:
            sent.params[n + "." + s.name.lower()] = ent.params[n].copy()
    sent.params["H"] = np.hstack([ent.params["H"], np.zeros((4, 8))])
    batch = _single_source_batch()
    checks["reduction"] = bool(
        np.allclose(sent.final_states(batch)[SourceTag.USER], ent.final_states(batch), rtol=0, atol=1e-12)
        and np.allclose(sent.predict_proba(batch), ent.predict_proba(batch), rtol=0, atol=1e-12))
    ok = all(checks.values())
    assert verdict(3, ok, ", ".join(f"{k} {'ok' if v else 'violated'}" for k, v in checks.items()))


def test_criterion_4_overfit(overfit_run, verdict):
    rep = overfit_run
    ok = rep.best_valid_acc == 1.0 and len(rep.epochs) <= OVERFIT_MAX_EPOCHS and rep.wall_clock < 300
    assert verdict(4, ok, f"train accuracy {rep.best_valid_acc:.3f} at epoch {rep.best_epoch}, "
                          f"{rep.wall_clock:.0f}s")


@pytest.mark.slow
def test_criterion_5_source_awareness(verdict):
    t0 = time.perf_counter()
    config = TrainConfig()
    corpus = resolve_corpus(config)
    assert len({ex.dialogue_id for ex in corpus.train + corpus.valid + corpus.test}) == 500
    acc = {m: [train(corpus, config.replace(model=m, seed=s)).report.test_acc for s in (1, 2, 3)]
           for m in ("entnet", "sentnet")}
    elapsed = time.perf_counter() - t0
    gap = np.mean(acc["sentnet"]) - np.mean(acc["entnet"])
    ok = gap >= 0.02 and elapsed < 1800
    assert verdict(5, ok, f"sentnet {np.mean(acc['sentnet']):.4f} vs entnet {np.mean(acc['entnet']):.4f}, "
                          f"gap {100 * gap:.1f} points, {elapsed:.0f}s")


def test_criterion_6_baselines(verdict):
    checks = {}
    corpus = gen_synthetic(200, 7)
    unique, seen = [], set()
    for ex in corpus.train:
        if ex.query.tokens not in seen:
            seen.add(ex.query.tokens)
            unique.append(ex)
    pred = baseline_predictions(q2a_train(unique), unique)
    checks["q2a replay"] = turn_accuracy(pred, [ex.label for ex in unique]).accuracy == 1.0
    cands = CandidateSet(["alpha beta", "gamma", "delta epsilon"])
    index = build_tfidf([], cands)
    sims = index.similarities(["delta", "epsilon"])
    checks["exact copy"] = index.rank(["delta", "epsilon"])[0] == 2 and abs(sims[2] - 1.0) <= 1e-12
    hand = build_tfidf([], CandidateSet(["a b", "b c", "c c d"]))
    checks["hand ranking"] = hand.rank(["a", "c"]) == [0, 2, 1]
    ok = all(checks.values())
    assert verdict(6, ok, ", ".join(f"{k} {'ok' if v else 'wrong'}" for k, v in checks.items()))


REAL_DATA = os.environ.get("SENTNET_DATA_DIR", "")


@pytest.mark.slow
@pytest.mark.skipif(not os.path.isdir(REAL_DATA), reason="set SENTNET_DATA_DIR to a dialog bAbI task directory")
def test_criterion_7_reference_numbers(verdict):
    corpus = load_corpus(REAL_DATA)
    best = {m: max(train(corpus, TrainConfig(model=m, seed=s)).report.test_acc for s in range(1, 11))
            for m in ("entnet", "sentnet")}
    target = {"sentnet": 0.910, "entnet": 0.850}
    ok = all(abs(best[m] - target[m]) <= 0.03 for m in target)
    assert verdict(7, ok, ", ".join(f"{m} best-of-10 {best[m]:.3f} (target {target[m]:.3f})" for m in target))


def test_criterion_8_protocol_shape(tmp_path, verdict):
    corpus = gen_synthetic(40, 7)
    config = TrainConfig(d=16, m=3, max_epochs=3)
    fractions = (0.5, 1.0)
    e2 = run_experiment("E2", corpus, config, seeds=[1, 2, 3], fractions=fractions, out_dir=str(tmp_path / "e2"))
    e4 = run_experiment("E4", corpus, config, seeds=[1, 2, 3], out_dir=str(tmp_path / "e4"))
    grid = {(r.strategy, r.fraction) for r in e2.summary}
    e2_ok = (grid == {(s, f) for s in ("random", "fixed", "oracle") for f in fractions}
             and all(r.n_runs >= 3 and np.isfinite(r.std) for r in e2.summary)
             and (tmp_path / "e2" / "curve.csv").exists())
    fixed = [r for r in e2.runs if r.spec.strategy == "fixed"]
    frozen_ok = bool(fixed) and all(any(row[5] == "embeddings_frozen" for row in r.rows) for r in fixed)
    e4_ok = ([(r.model, r.pos) for r in e4.summary]
             == [("entnet", False), ("entnet", True), ("sentnet", False), ("sentnet", True)]
             and all(r.n_runs >= 3 for r in e4.summary))
    ok = e2_ok and frozen_ok and e4_ok
    assert verdict(8, ok, f"E2 {len(e2.summary)} cells over {len(e2.runs)} runs, "
                          f"{len(fixed)} fixed runs verified frozen, "
                          f"E4 {len(e4.summary)} rows over {len(e4.runs)} runs")
