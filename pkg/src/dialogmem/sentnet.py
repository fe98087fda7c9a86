"""
Source-aware Entity Network.

User, system and KB utterances each feed their own memory (own keys and
``G, V, W``); the encoder tables are shared. Each memory is read with its own
attention over the query, and the three readouts are concatenated in the order
USER, SYSTEM, KB before the ``d x 3d`` projection ``H``.
"""
from __future__ import annotations

from typing import Dict, List, Sequence

import numpy as np

from .corpus import SourceTag
from .diffmath import Graph
from .entnet import (
    NO_DROPOUT,
    MemoryModel,
    attend,
    output_head,
    run_memory,
    run_memory_graph,
)

SOURCES = tuple(SourceTag)  # USER < SYSTEM < KB fixes the concat order


def suffix(source: SourceTag) -> str:
    return "." + source.name.lower()


class SEntNet(MemoryModel):
    kind = "sentnet"

    @classmethod
    def memory_names(cls) -> List[str]:
        return [suffix(s) for s in SOURCES]

    def bundle(self, P, source: SourceTag):
        s = suffix(source)
        return P["K" + s], P["G" + s], P["V" + s], P["W" + s]

    def source_states(self, g, P, batch, dropout=NO_DROPOUT):
        states = {}
        for source in SOURCES:
            block = batch.history[source]
            e = self.encode_history(g, P, block, dropout) if block.steps else None
            states[source] = run_memory_graph(g, e, block.mask, *self.bundle(P, source))
        return states

    def forward(self, g, P, batch, dropout=NO_DROPOUT):
        states = self.source_states(g, P, batch, dropout)
        q = self.encode(g, P, batch.query_ids, batch.query_pos)
        z = g.concat([attend(g, q, states[s])[1] for s in SOURCES])
        return output_head(g, q, dropout(g, z), P["H"], P["L"])

    def final_states(self, batch) -> Dict[SourceTag, np.ndarray]:
        g = Graph()
        P = self.bind(g)
        return {s: node.value for s, node in self.source_states(g, P, batch).items()}

    def attention(self, batch) -> Dict[SourceTag, np.ndarray]:
        """Per-source attention weights (B, m) for inspection."""
        g = Graph()
        P = self.bind(g)
        states = self.source_states(g, P, batch)
        q = self.encode(g, P, batch.query_ids, batch.query_pos)
        return {s: attend(g, q, states[s])[0].value for s in SOURCES}


def run_source_memory(encodings: Sequence[np.ndarray], K, G, V, W) -> np.ndarray:
    """Per-source fold; an empty source keeps the normalized keys."""
    return run_memory(encodings, K, G, V, W, allow_empty=True)
