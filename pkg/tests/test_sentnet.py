import numpy as np
import pytest

import oracle
from dialogmem.corpus import DialogueExample, SourceTag, Utterance, split_history
from dialogmem.diagnostics import check_model_gradients, toy_problem, toy_vocab
from dialogmem.encoder import Featurizer, init_embeddings
from dialogmem.entnet import Dims, EntNet, run_memory
from dialogmem.sentnet import SOURCES, SEntNet, run_source_memory

U, S, B = SourceTag.USER, SourceTag.SYSTEM, SourceTag.KB


def utt(source, words, turn):
    return Utterance(source, tuple(f"w{i}" for i in words), turn, turn)


def batch_of(*histories):
    exs = [DialogueExample(i, 1, tuple(utt(s, w, t + 1) for t, (s, w) in enumerate(h)), 0)
           for i, h in enumerate(histories)]
    return Featurizer(toy_vocab(), 3).batch(exs)


def make(cls, d=4, m=2, seed=0):
    rng = np.random.default_rng(seed)
    vocab = toy_vocab()
    table = init_embeddings("random", vocab, d, rng)
    # larger weights than the default init so structural differences are visible
    model = cls.create(Dims(len(vocab), 3, d, m, 3), rng, table)
    for k in model.params:
        model.params[k] = model.params[k] * 10.0
    model.params["E"][0] = 0.0
    return model


def test_split_history_interleaved():
    h = [utt(U, [2], 1), utt(S, [3], 2), utt(B, [4], 3), utt(U, [5], 4)]
    parts = split_history(h)
    assert parts[U] == [h[0], h[3]] and parts[S] == [h[1]] and parts[B] == [h[2]]


def test_split_history_user_only():
    h = [utt(U, [2], 1), utt(U, [3], 2)]
    parts = split_history(h)
    assert parts[U] == h and parts[S] == [] and parts[B] == []


def test_empty_source_keeps_normalized_keys():
    K = np.random.default_rng(0).normal(size=(3, 4))
    G = V = W = np.eye(4)
    np.testing.assert_allclose(run_source_memory([], K, G, V, W), oracle.unit(K), atol=1e-15)
    model, batch = toy_problem(SEntNet, seed=1)
    states = model.final_states(batch)
    # the second toy example has no system utterance
    np.testing.assert_allclose(states[S][1], oracle.unit(model.params["K.system"]), atol=1e-15)


def test_two_step_kb_fold_matches_hand():
    r = np.random.default_rng(8)
    K = oracle.unit(r.normal(size=(1, 2)))
    G, V, W = (r.normal(size=(2, 2)) for _ in range(3))
    e1, e2 = r.normal(size=(2, 2))
    h = K.copy()
    for e in (e1, e2):
        g = 1 / (1 + np.exp(-(h[0] @ e + K[0] @ e)))
        c = np.maximum(0, G @ h[0] + V @ K[0] + W @ e)
        v = h[0] + g * c
        h = (v / np.sqrt(v[0] ** 2 + v[1] ** 2))[None]
    np.testing.assert_allclose(run_source_memory([e1, e2], K, G, V, W), h, atol=1e-14)


def test_predict_matches_numpy_reference():
    model, batch = toy_problem(SEntNet, d=4, m=2, seed=4)
    ref = oracle.sentnet_proba(model.params, batch, SOURCES)
    np.testing.assert_allclose(model.predict_proba(batch), ref, rtol=0, atol=1e-12)


def test_one_utterance_per_source_reference():
    model = make(SEntNet, seed=2)
    batch = batch_of([(U, [2, 3]), (S, [4]), (B, [5, 6, 7]), (U, [8, 2])])
    ref = oracle.sentnet_proba(model.params, batch, SOURCES)
    np.testing.assert_allclose(model.predict_proba(batch), ref, rtol=0, atol=1e-12)


def test_tied_bundles_single_source_reduce_to_entnet():
    d, m = 4, 2
    ent = make(EntNet, d, m, seed=3)
    sent = make(SEntNet, d, m, seed=3)
    for k in ("E", "F", "L"):
        sent.params[k] = ent.params[k].copy()
    for name in "KGVW":
        for s in SOURCES:
            sent.params[name + "." + s.name.lower()] = ent.params[name].copy()
    batch = batch_of([(U, [2, 3]), (U, [4, 5, 6]), (U, [7])])
    np.testing.assert_allclose(sent.final_states(batch)[U], ent.final_states(batch), atol=1e-14)
    # H = [A | 0 | 0] then routes only the user readout
    sent.params["H"] = np.hstack([ent.params["H"], np.zeros((d, 2 * d))])
    np.testing.assert_allclose(sent.predict_proba(batch), ent.predict_proba(batch), atol=1e-14)


def test_block_H_is_sum_of_readouts():
    model = make(SEntNet, seed=5)
    A = model.params["H"][:, :4].copy()
    model.params["H"] = np.hstack([A, A, A])
    batch = batch_of([(U, [2]), (S, [3, 4]), (B, [5]), (U, [6])])
    P = model.params
    q = oracle.encode(batch.query_ids[0], P["E"], P["F"])
    zs = []
    for s in SOURCES:
        sfx = "." + s.name.lower()
        es = [oracle.encode(i, P["E"], P["F"]) for i in oracle.history(batch.history[s], 0)]
        zs.append(oracle.read(q, oracle.fold(es, *(P[n + sfx] for n in "KGVW")))[1])
    np.testing.assert_allclose(model.predict_proba(batch)[0], oracle.head(q, sum(zs), A, P["L"]), atol=1e-12)
    same = np.ones(4) / 2
    np.testing.assert_allclose(model.params["H"] @ np.concatenate([same] * 3), 3 * A @ same, atol=1e-14)


def test_zero_output_layer_uniform():
    model, batch = toy_problem(SEntNet)
    model.params["L"][:] = 0.0
    np.testing.assert_allclose(model.predict_proba(batch), 1 / 3, atol=1e-15)


def test_per_source_attention_normalized():
    model, batch = toy_problem(SEntNet, seed=6)
    for s, p in model.attention(batch).items():
        assert p.shape == (2, 2) and np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("d,m", [(4, 2), (6, 3), (50, 5)])
def test_parameter_count(d, m):
    ent = make(EntNet, d, m)
    sent = make(SEntNet, d, m)
    assert sent.params["H"].shape == (d, 3 * d)
    assert sent.n_parameters() == ent.n_parameters() + 2 * (m * d + 3 * d * d) + 2 * d * d


def test_no_aliasing_between_sources():
    model = make(SEntNet)
    names = [n + "." + s.name.lower() for n in "KGVW" for s in SOURCES]
    ids = {id(model.params[k]) for k in names}
    assert len(ids) == len(names)


def test_within_source_order_matters():
    model = make(SEntNet, seed=7)
    a = batch_of([(B, [2, 3]), (B, [4, 5]), (U, [6])])
    b = batch_of([(B, [4, 5]), (B, [2, 3]), (U, [6])])
    assert not np.allclose(model.predict_proba(a), model.predict_proba(b))


def test_moving_between_sources_matters():
    model = make(SEntNet, seed=7)
    a = batch_of([(S, [2, 3]), (B, [4, 5]), (U, [6])])
    b = batch_of([(B, [2, 3]), (B, [4, 5]), (U, [6])])
    assert not np.allclose(model.predict_proba(a), model.predict_proba(b))


def test_cross_source_interleaving_is_invisible():
    # each memory only sees its own sequence, so reordering across sources is a no-op
    model = make(SEntNet, seed=7)
    a = batch_of([(S, [2, 3]), (B, [4, 5]), (U, [6])])
    b = batch_of([(B, [4, 5]), (S, [2, 3]), (U, [6])])
    np.testing.assert_array_equal(model.predict_proba(a), model.predict_proba(b))


def test_run_memory_equivalence_with_entnet_fold():
    r = np.random.default_rng(9)
    K, G, V, W = r.normal(size=(2, 3)), *(r.normal(size=(3, 3)) for _ in range(3))
    es = list(r.normal(size=(3, 3)))
    np.testing.assert_array_equal(run_source_memory(es, K, G, V, W), run_memory(es, K, G, V, W))


@pytest.mark.parametrize("use_pos", [False, True])
@pytest.mark.parametrize("l2", [0.0, 0.01])
def test_gradients(use_pos, l2):
    report = check_model_gradients(SEntNet, use_pos=use_pos, l2=l2)
    assert report.passed, report.worst
