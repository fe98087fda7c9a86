"""Tiny fixed fixtures for gradient checks and structural probes."""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .corpus import DialogueExample, SourceTag, Utterance, Vocab
from .diffmath import GradCheckReport, grad_check
from .encoder import Featurizer, init_embeddings
from .entnet import Dims, MemoryModel

U, S, K = SourceTag.USER, SourceTag.SYSTEM, SourceTag.KB


def toy_vocab(size: int = 20) -> Vocab:
    return Vocab(f"w{i}" for i in range(size - 2))


def toy_pos_vocab() -> Vocab:
    return Vocab(["<pad_tag>", "<unk_tag>", "NOUN", "VERB", "X"][2:])


def _utt(source, words, turn, source_turn, tags=True):
    toks = tuple(f"w{i}" for i in words)
    pos = tuple(("NOUN", "VERB", "X")[i % 3] for i in words) if tags else None
    return Utterance(source, toks, turn, source_turn, pos)


def toy_examples(n_candidates: int = 3) -> List[DialogueExample]:
    """Two examples with user, system and KB utterances of uneven lengths.

    The second history is shorter, so padded memory steps and padded tokens are
    both exercised.
    """
    h1 = (
        _utt(U, [2, 3], 1, 1),
        _utt(S, [4, 5, 6], 2, 1),
        _utt(K, [7, 8, 9], 3, 1),
        _utt(K, [7, 10, 11], 4, 2),
        _utt(U, [12, 3, 13], 5, 2),
    )
    h2 = (
        _utt(U, [14], 1, 1),
        _utt(K, [15, 16, 17], 2, 1),
        _utt(U, [13, 2], 3, 2),
    )
    return [
        DialogueExample(0, 3, h1, 1 % n_candidates),
        DialogueExample(1, 2, h2, 2 % n_candidates),
    ]


def toy_problem(model_cls, d: int = 4, m: int = 2, vocab_size: int = 20, n_candidates: int = 3,
                seed: int = 0, use_pos: bool = False) -> Tuple[MemoryModel, object]:
    """A freshly initialized model and a two-example batch over all three sources."""
    if vocab_size < 20:
        raise ValueError("toy fixture uses 18 content tokens; vocab_size must be >= 20")
    vocab = toy_vocab(vocab_size)
    pos_vocab = toy_pos_vocab() if use_pos else None
    rng = np.random.default_rng(seed)
    max_len = 3
    table = init_embeddings("random", vocab, d, rng, pos_vocab)
    dims = Dims(len(vocab), n_candidates, d, m, max_len, len(pos_vocab) if pos_vocab else 0)
    model = model_cls.create(dims, rng, table, use_pos=use_pos)
    return model, Featurizer(vocab, max_len, pos_vocab).batch(toy_examples(n_candidates))


def check_model_gradients(model_cls, d: int = 4, m: int = 2, eps: float = 1e-4, tol: float = 1e-3,
                          l2: float = 0.0, seed: int = 1, use_pos: bool = False) -> GradCheckReport:
    """Central-difference check of every trainable parameter of a toy model.

    Padding rows of the embedding tables are pinned to zero inside the probed
    function, matching the training contract that they never move.
    """
    model, batch = toy_problem(model_cls, d, m, seed=seed, use_pos=use_pos)

    def loss_and_grads(params):
        saved = {k: params[k][0].copy() for k in ("E", "Epos") if k in params}
        for k in saved:
            params[k][0] = 0.0
        loss, grads, _ = model.loss_and_grads(batch, l2)
        for k, row in saved.items():
            params[k][0] = row
        return loss, grads

    return grad_check(loss_and_grads, model.params, eps=eps, tol=tol, names=model.trainable)
