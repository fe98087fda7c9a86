import numpy as np
import pytest

from dialogmem.synthetic import gen_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    return gen_synthetic(20, 3)


@pytest.fixture(scope="session")
def tiny_corpus():
    return gen_synthetic(10, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


OVERFIT_MAX_EPOCHS = 200


def overfit_corpus(seed=7):
    """Ten synthetic dialogues, all in the training split, validated on themselves."""
    import dataclasses

    from dialogmem.corpus import CandidateSet, make_corpus
    from dialogmem.synthetic import candidate_texts, synthetic_dialogues

    c = make_corpus(synthetic_dialogues(10, seed), [], [], CandidateSet(candidate_texts()))
    return dataclasses.replace(c, valid=c.train)


@pytest.fixture(scope="session")
def overfit_run():
    """Memorization run: full-batch Adam at a constant rate, no dropout or l2, stop at 100%."""
    from dialogmem.training import TrainConfig, train

    corpus = overfit_corpus()
    config = TrainConfig(model="sentnet", max_epochs=OVERFIT_MAX_EPOCHS, dropout=0.0, l2=0.0,
                         decay_every=OVERFIT_MAX_EPOCHS, batch_size=len(corpus.train))
    return train(corpus, config, stop_when=lambda rec: rec.valid_acc == 1.0).report


_ACCEPTANCE = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})"
        _ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
