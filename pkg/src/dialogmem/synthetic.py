"""
Deterministic restaurant-booking dialogues for tests and desk-scale experiments.

Each dialogue follows a fixed flow (greeting, request, party size, api_call,
KB results, recommendation, address). The recommended restaurant is drawn
independently of the requested cuisine and location, so the only place it can
be read from is the KB result block. The user also names a restaurant they
have already visited; it never coincides with the recommendation.
"""
from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np

from .corpus import Corpus, Exchange, KBLine, RawDialogue, make_corpus

CUISINES = ("british", "french", "indian", "italian")
LOCATIONS = ("london", "madrid", "paris", "rome")
PARTY = ("two", "four", "six")
RESTAURANTS = tuple(f"resto_{i:02d}" for i in range(1, 21))
RATINGS = ("1", "2", "3", "4", "5")

GREET_U = ("hello", "hi", "good morning", "hey there")
REQUEST_U = (
    "i'd like to book a table with {c} food in {l}",
    "can you book a table in {l} serving {c} food",
    "may i have a table with {c} cuisine in {l}",
)
PARTY_U = ("we will be {n}", "for {n} people please")
VISITED_U = ("i already tried {r} last week", "we have been to {r} before")
ACCEPT_U = ("let's do it", "that looks great")
ADDRESS_U = ("may i have the address of the restaurant", "what is the address")
THANKS_U = ("thanks", "thank you")

S_GREET = "hello what can i help you with today"
S_ON_IT = "i'm on it"
S_PARTY = "how many people would be in your party"
S_NOTED = "noted i will keep that in mind"
S_LOOKING = "ok let me look into some options for you"
S_API = "api_call {c} {l}"
S_OPTION = "what do you think of this option: {r}"
S_BOOK = "great let me do the reservation"
S_ADDRESS = "here it is {r}_address"
S_WELCOME = "you're welcome"

SILENCE = "<silence>"


def candidate_texts() -> List[str]:
    """Every response the generator can emit, in a fixed order."""
    out = [S_GREET, S_ON_IT, S_PARTY, S_NOTED, S_LOOKING, S_BOOK, S_WELCOME]
    out += [S_API.format(c=c, l=l) for c in CUISINES for l in LOCATIONS]
    out += [S_OPTION.format(r=r) for r in RESTAURANTS]
    out += [S_ADDRESS.format(r=r) for r in RESTAURANTS]
    return out


def is_kb_dependent(response: str) -> bool:
    return response.startswith(("what do you think of this option", "here it is"))


def _dialogue(rng: np.random.Generator) -> RawDialogue:
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    c, l, n = pick(CUISINES), pick(LOCATIONS), pick(PARTY)
    gold, visited = (RESTAURANTS[i] for i in rng.choice(len(RESTAURANTS), 2, replace=False))

    lines = [
        Exchange(pick(GREET_U), S_GREET),
        Exchange(pick(REQUEST_U).format(c=c, l=l), S_ON_IT),
        Exchange(SILENCE, S_PARTY),
        Exchange(pick(PARTY_U).format(n=n), S_LOOKING),
    ]
    # the visited-restaurant remark lands somewhere before the api_call
    lines.insert(int(rng.integers(1, len(lines) + 1)), Exchange(pick(VISITED_U).format(r=visited), S_NOTED))
    lines.append(Exchange(SILENCE, S_API.format(c=c, l=l)))
    lines += [
        KBLine(f"{gold} r_cuisine {c}"),
        KBLine(f"{gold} r_location {l}"),
        KBLine(f"{gold} r_address {gold}_address"),
        KBLine(f"{gold} r_rating {pick(RATINGS)}"),
    ]
    lines += [
        Exchange(SILENCE, S_OPTION.format(r=gold)),
        Exchange(pick(ACCEPT_U), S_BOOK),
        Exchange(pick(ADDRESS_U), S_ADDRESS.format(r=gold)),
        Exchange(pick(THANKS_U), S_WELCOME),
    ]
    return RawDialogue(tuple(lines))


def synthetic_dialogues(n_dialogues: int, seed: int) -> List[RawDialogue]:
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    rng = np.random.default_rng(seed)
    return [_dialogue(rng) for _ in range(n_dialogues)]


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    n_valid = int(math.floor(n * ratios[1]))
    n_test = int(math.floor(n * ratios[2]))
    return n - n_valid - n_test, n_valid, n_test


def pos_lexicon_text() -> str:
    """A static token->tag lexicon covering the generator's vocabulary."""
    from .corpus import tokenize

    tags = {}
    for r in RESTAURANTS:
        tags[r] = "PROPN"
        tags[f"{r}_address"] = "PROPN"
    for w in LOCATIONS:
        tags[w] = "PROPN"
    for w in CUISINES:
        tags[w] = "ADJ"
    for w in PARTY + RATINGS:
        tags[w] = "NUM"
    fixed = {
        "i": "PRON", "we": "PRON", "you": "PRON", "it": "PRON", "that": "PRON", "me": "PRON",
        "i'd": "PRON", "i'm": "PRON", "let's": "VERB", "you're": "PRON",
        "a": "DET", "the": "DET", "this": "DET", "some": "DET",
        "in": "ADP", "with": "ADP", "of": "ADP", "for": "ADP", "to": "ADP", "into": "ADP", "on": "ADP",
        "can": "AUX", "may": "AUX", "will": "AUX", "would": "AUX", "have": "AUX", "be": "AUX",
        "is": "AUX", "been": "AUX", "do": "AUX",
        "hello": "INTJ", "hi": "INTJ", "hey": "INTJ", "ok": "INTJ", "thanks": "INTJ",
        "great": "ADJ", "good": "ADJ", "welcome": "ADJ", "many": "ADJ",
        ":": "PUNCT", "<silence>": "X", "api_call": "X",
        "r_cuisine": "X", "r_location": "X", "r_address": "X", "r_rating": "X",
        "already": "ADV", "there": "ADV", "before": "ADV", "here": "ADV", "how": "ADV",
        "what": "PRON", "which": "PRON", "please": "INTJ",
    }
    tags.update(fixed)
    words = set()
    for text in candidate_texts() + list(GREET_U + REQUEST_U + PARTY_U + VISITED_U + ACCEPT_U + ADDRESS_U + THANKS_U):
        words.update(tokenize(text.replace("{c}", "").replace("{l}", "").replace("{n}", "").replace("{r}", "")))
    for w in sorted(words):
        tags.setdefault(w, "VERB" if w in {"book", "like", "tried", "look", "think", "keep", "find"} else "NOUN")
    return "".join(f"{t}\t{tags[t]}\n" for t in sorted(tags))


def gen_synthetic(
    n_dialogues: int,
    seed: int,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    with_pos: bool = True,
) -> Corpus:
    from .corpus import load_pos_lexicon, CandidateSet

    dialogues = synthetic_dialogues(n_dialogues, seed)
    n_train, n_valid, _ = split_sizes(n_dialogues, ratios)
    lexicon = load_pos_lexicon(pos_lexicon_text()) if with_pos else None
    return make_corpus(
        dialogues[:n_train],
        dialogues[n_train:n_train + n_valid],
        dialogues[n_train + n_valid:],
        CandidateSet(candidate_texts()),
        lexicon,
        name=f"synth{n_dialogues}-s{seed}",
    )
