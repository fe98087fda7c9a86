import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dialogmem.corpus import Vocab
from dialogmem.diffmath import Graph
from dialogmem.encoder import (
    EmbeddingTable,
    Featurizer,
    PositionalMask,
    encode_graph,
    encode_utterance,
    init_embeddings,
    load_pretrained_vectors,
    load_snapshot,
    max_utterance_length,
    save_snapshot,
)
from dialogmem.errors import ContractError, DimensionError, FormatError, VocabMismatchError


def table_2d():
    E = np.zeros((4, 2))
    E[2] = [2.0, 3.0]
    E[3] = [4.0, 5.0]
    return EmbeddingTable(E)


MASK = PositionalMask(np.array([[1.0, 0.0], [0.0, 1.0]]))


def test_single_token_identity_mask():
    t = table_2d()
    e = encode_utterance([3], t, PositionalMask(np.ones((3, 2))))
    assert np.array_equal(e, t.E[3])


def test_two_token_hand_value():
    assert np.array_equal(encode_utterance([2, 3], table_2d(), MASK), [2.0, 5.0])


def test_permutation_sensitive():
    assert not np.array_equal(encode_utterance([3, 2], table_2d(), MASK), encode_utterance([2, 3], table_2d(), MASK))


def test_truncation_keeps_prefix():
    t = table_2d()
    assert np.array_equal(encode_utterance([2, 3, 3, 3], t, MASK), encode_utterance([2, 3], t, MASK))


def test_pad_contributes_nothing():
    t = table_2d()
    mask = PositionalMask(np.ones((3, 2)))
    assert np.array_equal(encode_utterance([2, 0, 0], t, mask), encode_utterance([2], t, mask))


def test_zero_pos_embeddings_are_identity():
    t = table_2d()
    t_pos = EmbeddingTable(t.E.copy(), Epos=np.zeros((3, 2)))
    assert np.array_equal(encode_utterance([2, 3], t_pos, MASK, [1, 2], use_pos=True),
                          encode_utterance([2, 3], t, MASK))


def test_pos_added_inside_mask():
    t = EmbeddingTable(table_2d().E.copy(), Epos=np.array([[0.0, 0.0], [1.0, 1.0], [10.0, 10.0]]))
    # f_x * (w_x + l_x): (1,0)*((2,3)+(1,1)) + (0,1)*((4,5)+(10,10))
    assert np.array_equal(encode_utterance([2, 3], t, MASK, [1, 2], use_pos=True), [3.0, 15.0])


def test_use_pos_without_tags():
    with pytest.raises(ContractError):
        encode_utterance([2], table_2d(), MASK, None, use_pos=True)


def test_empty_utterance():
    with pytest.raises(ContractError):
        encode_utterance([], table_2d(), MASK)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=5), st.floats(-3, 3).filter(lambda c: c != 0))
def test_encoding_linear_in_tables(ids, c):
    rng = np.random.default_rng(len(ids))
    E = rng.normal(size=(4, 3))
    Epos = rng.normal(size=(3, 3))
    mask = PositionalMask(rng.normal(size=(5, 3)))
    pos = [i % 3 for i in ids]
    base = encode_utterance(ids, EmbeddingTable(E.copy(), Epos=Epos.copy()), mask, pos, use_pos=True)
    scaled = encode_utterance(ids, EmbeddingTable(c * E, Epos=c * Epos), mask, pos, use_pos=True)
    np.testing.assert_allclose(scaled, c * base, rtol=1e-12, atol=1e-12)


def test_graph_encoder_matches_numpy():
    rng = np.random.default_rng(0)
    t = EmbeddingTable(rng.normal(size=(6, 3)), Epos=rng.normal(size=(4, 3)))
    F = rng.normal(size=(4, 3))
    ids = np.array([[2, 5, 1, 0], [3, 0, 0, 0]])
    pos = np.array([[1, 2, 3, 0], [2, 0, 0, 0]])
    g = Graph()
    out = encode_graph(g, g.const(t.E), g.const(F), ids, g.const(t.Epos), pos).value
    for b in range(2):
        n = int((ids[b] > 0).sum())
        ref = encode_utterance(ids[b, :n], t, PositionalMask(F), pos[b, :n], use_pos=True)
        np.testing.assert_allclose(out[b], ref, rtol=0, atol=1e-15)


# -- initialization strategies -----------------------------------------------------

VOCAB = Vocab(["a", "b", "c", "d"])


def test_random_deterministic_and_scaled():
    a = init_embeddings("random", VOCAB, 50, np.random.default_rng(3))
    b = init_embeddings("random", VOCAB, 50, np.random.default_rng(3))
    assert np.array_equal(a.E, b.E)
    assert a.trainable
    assert np.all(a.E[0] == 0)
    big = init_embeddings("random", Vocab([f"w{i}" for i in range(2000)]), 50, np.random.default_rng(0))
    assert abs(big.E[1:].std() - 0.1) < 0.002


def test_fixed_not_trainable():
    t = init_embeddings("fixed", VOCAB, 4, np.random.default_rng(3))
    assert not t.trainable
    assert np.array_equal(t.E, init_embeddings("random", VOCAB, 4, np.random.default_rng(3)).E)


def test_pretrained_partial_coverage():
    text = "a 1 2 3\nzzz 9 9 9\nc 4 5 6\n"
    vecs = load_pretrained_vectors(io.StringIO(text), VOCAB, 3)
    assert vecs.coverage == pytest.approx(2 / 4)
    t = init_embeddings("pretrained", VOCAB, 3, np.random.default_rng(1), source=vecs)
    ref = init_embeddings("random", VOCAB, 3, np.random.default_rng(1))
    assert np.array_equal(t.E[VOCAB.stoi["a"]], [1, 2, 3])
    assert np.array_equal(t.E[VOCAB.stoi["c"]], [4, 5, 6])
    for tok in ("b", "d"):
        assert np.array_equal(t.E[VOCAB.stoi[tok]], ref.E[VOCAB.stoi[tok]])
    assert t.trainable


def test_pretrained_single_token_coverage():
    assert load_pretrained_vectors("b 0.5 0.5\n", VOCAB, 2).coverage == pytest.approx(1 / 4)


def test_pretrained_empty_file():
    vecs = load_pretrained_vectors("", VOCAB, 3)
    assert vecs.rows == {} and vecs.coverage == 0


def test_pretrained_dimension_mismatch():
    with pytest.raises(DimensionError):
        load_pretrained_vectors("a 1 2\n", VOCAB, 3)


def test_pretrained_bad_arity_line_number():
    with pytest.raises(FormatError) as err:
        load_pretrained_vectors("a 1 2 3\nb 1 2\n", VOCAB, 3)
    assert err.value.line == 2


def test_pretrained_float_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    vecs = {t: rng.normal(size=50) for t in "abcd"}
    path = tmp_path / "vec.txt"
    path.write_text("".join(f"{t} " + " ".join(repr(float(x)) for x in v) + "\n" for t, v in vecs.items()))
    with open(path) as fh:
        loaded = load_pretrained_vectors(fh, VOCAB, 50)
    for t, v in vecs.items():
        assert np.array_equal(loaded.rows[t], v)


def test_oracle_snapshot_roundtrip(tmp_path):
    src = init_embeddings("random", VOCAB, 4, np.random.default_rng(9))
    path = tmp_path / "snap.npz"
    save_snapshot(path, src, VOCAB)
    snap = load_snapshot(path)
    assert snap.vocab_hash == VOCAB.hash
    t = init_embeddings("oracle", VOCAB, 4, np.random.default_rng(0), source=snap)
    assert np.array_equal(t.E, src.E) and t.trainable
    # equal tables give equal bytes
    save_snapshot(tmp_path / "again.npz", src, VOCAB)
    assert (tmp_path / "again.npz").read_bytes() == path.read_bytes()


def test_oracle_vocab_mismatch(tmp_path):
    src = init_embeddings("random", VOCAB, 4, np.random.default_rng(9))
    save_snapshot(tmp_path / "s.npz", src, VOCAB)
    other = Vocab(["a", "b", "c", "e"])
    with pytest.raises(VocabMismatchError):
        init_embeddings("oracle", other, 4, np.random.default_rng(0), source=load_snapshot(tmp_path / "s.npz"))


def test_unknown_strategy():
    with pytest.raises(ContractError):
        init_embeddings("glove", VOCAB, 4, np.random.default_rng(0))


# -- batching ---------------------------------------------------------------------

def test_max_len_percentile_and_cap(small_corpus):
    L = max_utterance_length(small_corpus.train)
    lengths = sorted({(ex.dialogue_id, u.global_turn): len(u.tokens)
                      for ex in small_corpus.train for u in ex.history}.values())
    assert L >= lengths[int(0.95 * (len(lengths) - 1))]
    assert max_utterance_length(small_corpus.train, cap=3) == 3


def test_featurizer_shapes(small_corpus):
    f = Featurizer(small_corpus.vocab, 6)
    exs = small_corpus.train[:5]
    b = f.batch(exs)
    assert b.query_ids.shape == (5, 6)
    assert b.history["all"].ids.shape == (5, max(len(e.history) for e in exs), 6)
    np.testing.assert_array_equal(b.history["all"].mask.sum(axis=1), [len(e.history) for e in exs])
    assert b.labels.tolist() == [e.label for e in exs]
