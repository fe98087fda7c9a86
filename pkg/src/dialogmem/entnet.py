"""
Recurrent Entity Network for response selection.

``m`` gated memory blocks share ``G, V, W``. For every utterance encoding ``e``
and block ``j``::

    g_j   = sigmoid(e.h_j + e.k_j)                 (scalar, broadcast over d)
    cand  = relu(G h_j + V k_j + W e)
    h_j  <- normalize(h_j + g_j * cand)

Blocks start at ``normalize(k_j)``. The readout attends over the final block
states with the query ``q`` (the current user utterance)::

    p = softmax_j(q.h_j);  z = sum_j p_j h_j;  y = softmax(L relu(q + H z))
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .corpus import DialogueExample
from .diffmath import Graph, Node, backward, forward_op
from .encoder import (
    Batch,
    EmbeddingTable,
    Featurizer,
    HistoryBlock,
    PositionalMask,
    encode_graph,
    gaussian,
    write_npz,
)
from .errors import ContractError, FormatError

log = logging.getLogger(__name__)

NLL_FLOOR = 1e-12
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dims:
    vocab_size: int
    n_candidates: int
    d: int
    m: int
    max_len: int
    pos_vocab_size: int = 0


# ---------------------------------------------------------------------------
# graph building blocks (shared with the source-aware model)
# ---------------------------------------------------------------------------

def initial_state(g: Graph, K: Node, batch_size: int) -> Node:
    m, d = K.shape
    return g.broadcast_to(g.l2normalize(K), (batch_size, m, d))


def memory_step(g, h, e_t, eK_t, We_t, GT, VK, step_mask=None):
    """One update of all blocks. h: (B, m, d); e_t, We_t: (B, d); eK_t: (B, m)."""
    B, m, d = h.shape
    gate = g.sigmoid(g.add(g.dot(h, g.reshape(e_t, (B, 1, d))), eK_t))
    cand = g.relu(g.add(g.matmul(h, GT), VK, g.reshape(We_t, (B, 1, d))))
    new = g.l2normalize(g.add(h, g.mul(g.reshape(gate, (B, m, 1)), cand)))
    if step_mask is None or np.all(step_mask == 1.0):
        return new
    return g.blend(new, h, step_mask[:, None, None])


def run_memory_graph(g: Graph, e_seq: Node, mask: np.ndarray, K, G, V, W) -> Node:
    """Fold the memory over ``e_seq`` (B, T, d); padded steps leave the state unchanged."""
    B, T = mask.shape
    h = initial_state(g, K, B)
    if T == 0:
        return h
    GT = g.T(G)
    VK = g.matmul(K, g.T(V))
    We = g.matmul(e_seq, g.T(W))
    eK = g.matmul(e_seq, g.T(K))
    for t in range(T):
        col = (slice(None), t)
        h = memory_step(
            g, h, g.getitem(e_seq, col), g.getitem(eK, col), g.getitem(We, col),
            GT, VK, mask[:, t],
        )
    return h


def attend(g: Graph, q: Node, h: Node) -> tuple:
    """Attention readout of one memory; returns (weights (B, m), z (B, d))."""
    B, m, d = h.shape
    p = g.softmax(g.dot(h, g.reshape(q, (B, 1, d))))
    z = g.sum(g.mul(g.reshape(p, (B, m, 1)), h), axis=1)
    return p, z


def output_head(g: Graph, q: Node, z: Node, H: Node, L: Node) -> Node:
    hidden = g.relu(g.add(q, g.matmul(z, g.T(H))))
    return g.softmax(g.matmul(hidden, g.T(L)))


class DropoutSource:
    """Seeded inverted-dropout masks; ``rate == 0`` disables it."""

    def __init__(self, rate: float, rng: Optional[np.random.Generator]):
        self.keep = 1.0 - rate
        self.rng = rng

    @property
    def active(self):
        return self.rng is not None and self.keep < 1.0

    def __call__(self, g: Graph, x: Node) -> Node:
        if not self.active:
            return x
        mask = (self.rng.random(x.shape) < self.keep).astype(np.float64)
        return g.dropout(x, mask, self.keep)


NO_DROPOUT = DropoutSource(0.0, None)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class MemoryModel:
    """Shared plumbing: parameters, encoder, loss and gradients."""

    kind = "base"

    def __init__(self, params: Dict[str, np.ndarray], dims: Dims, use_pos: bool = False,
                 frozen: Sequence[str] = ()):
        self.params = params
        self.dims = dims
        self.use_pos = use_pos
        self.frozen = set(frozen)
        if use_pos and "Epos" not in params:
            raise ContractError("use_pos requires an Epos table")

    # -- construction -------------------------------------------------------
    @classmethod
    def memory_names(cls) -> List[str]:
        raise NotImplementedError

    @classmethod
    def create(cls, dims: Dims, rng: np.random.Generator, table: EmbeddingTable,
               mask: Optional[PositionalMask] = None, use_pos: bool = False):
        d, m = dims.d, dims.m
        if table.E.shape != (dims.vocab_size, d):
            raise ContractError(f"embedding table {table.E.shape} does not match dims")
        params = {"E": table.E.copy()}
        if table.Epos is not None:
            params["Epos"] = table.Epos.copy()
        params["F"] = (mask.F.copy() if mask is not None else gaussian(rng, (dims.max_len, d)))
        for suffix in cls.memory_names():
            params["K" + suffix] = gaussian(rng, (m, d))
            for name in ("G", "V", "W"):
                params[name + suffix] = gaussian(rng, (d, d))
        params["H"] = gaussian(rng, (d, d * len(cls.memory_names())))
        params["L"] = gaussian(rng, (dims.n_candidates, d))
        frozen = () if table.trainable else ("E",)
        return cls(params, dims, use_pos=use_pos, frozen=frozen)

    @property
    def trainable(self) -> List[str]:
        return [k for k in self.params if k not in self.frozen and (k != "Epos" or self.use_pos)]

    def n_parameters(self, include_pos: bool = False) -> int:
        return sum(v.size for k, v in self.params.items() if k != "Epos" or include_pos)

    def table(self) -> EmbeddingTable:
        Epos = self.params["Epos"].copy() if "Epos" in self.params else None
        return EmbeddingTable(self.params["E"].copy(), "E" not in self.frozen, Epos)

    # -- forward ------------------------------------------------------------
    def bind(self, g: Graph) -> Dict[str, Node]:
        return {k: g.param(k, v) for k, v in self.params.items()}

    def encode(self, g, P, ids, pos):
        if self.use_pos:
            return encode_graph(g, P["E"], P["F"], ids, P["Epos"], pos)
        return encode_graph(g, P["E"], P["F"], ids)

    def encode_history(self, g, P, block: HistoryBlock, dropout: DropoutSource):
        e = self.encode(g, P, block.ids, block.pos)
        return dropout(g, e)

    def forward(self, g: Graph, P: Dict[str, Node], batch: Batch, dropout: DropoutSource = NO_DROPOUT) -> Node:
        raise NotImplementedError

    def predict_proba(self, batch: Batch) -> np.ndarray:
        g = Graph()
        return self.forward(g, self.bind(g), batch).value

    def predict(self, example: DialogueExample, featurizer: Featurizer) -> np.ndarray:
        return self.predict_proba(featurizer.batch([example]))[0]

    # -- training -----------------------------------------------------------
    def loss_and_grads(self, batch: Batch, l2: float = 0.0, dropout: DropoutSource = NO_DROPOUT):
        """Mean NLL + l2 * sum of squared trainable weights, and its gradients."""
        g = Graph()
        P = self.bind(g)
        y = self.forward(g, P, batch, dropout)
        picked = g.take(y, batch.labels)
        if np.any(picked.value < NLL_FLOOR):
            log.warning("predicted gold probability below %g clamped", NLL_FLOOR)
        nll = g.scale(g.mean(g.log(picked, floor=NLL_FLOOR)), -1.0)
        grads = backward(g, nll)
        loss = float(nll.value)
        out = {}
        for k in self.trainable:
            gk = grads[k]
            if l2:
                loss += l2 * float(np.sum(self.params[k] ** 2))
                gk = gk + 2.0 * l2 * self.params[k]
            if k in ("E", "Epos"):
                gk = gk.copy()
                gk[0] = 0.0  # padding row stays zero
            out[k] = gk
        return loss, out, y.value

    # -- persistence ----------------------------------------------------------
    def save(self, path, config: Optional[Mapping] = None, vocab_hash: str = "") -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "dims": self.dims.__dict__,
            "use_pos": self.use_pos,
            "frozen": sorted(self.frozen),
            "vocab_hash": vocab_hash,
            "config": dict(config or {}),
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        write_npz(path, {"meta": np.array(json.dumps(meta, sort_keys=True)), **arrays})


def load_checkpoint(path):
    """Rebuild a model from :meth:`MemoryModel.save` output; returns (model, meta)."""
    from .sentnet import SEntNet

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    cls = {"entnet": EntNet, "sentnet": SEntNet}[meta["kind"]]
    model = cls(params, Dims(**meta["dims"]), use_pos=meta["use_pos"], frozen=meta["frozen"])
    return model, meta


class EntNet(MemoryModel):
    """Source-unaware baseline: one memory over the interleaved history."""

    kind = "entnet"

    @classmethod
    def memory_names(cls):
        return [""]

    def forward(self, g, P, batch, dropout=NO_DROPOUT):
        block = batch.history["all"]
        e = self.encode_history(g, P, block, dropout)
        h = run_memory_graph(g, e, block.mask, P["K"], P["G"], P["V"], P["W"])
        q = self.encode(g, P, batch.query_ids, batch.query_pos)
        _, z = attend(g, q, h)
        return output_head(g, q, dropout(g, z), P["H"], P["L"])

    def final_states(self, batch: Batch) -> np.ndarray:
        g = Graph()
        P = self.bind(g)
        block = batch.history["all"]
        e = self.encode(g, P, block.ids, block.pos)
        return run_memory_graph(g, e, block.mask, P["K"], P["G"], P["V"], P["W"]).value


# ---------------------------------------------------------------------------
# single-example functional forms
# ---------------------------------------------------------------------------

def memory_update(h: np.ndarray, e: np.ndarray, K, G, V, W) -> np.ndarray:
    """Apply one utterance encoding ``e`` (d,) to states ``h`` (m, d)."""
    g = Graph()
    c = g.const
    m, d = h.shape
    e_t = c(np.asarray(e, dtype=float)[None])
    Kn, Gn, Vn, Wn = c(K), c(G), c(V), c(W)
    out = memory_step(
        g, c(np.asarray(h, dtype=float)[None]), e_t,
        g.matmul(e_t, g.T(Kn)), g.matmul(e_t, g.T(Wn)),
        g.T(Gn), g.matmul(Kn, g.T(Vn)),
    )
    return out.value[0]


def run_memory(encodings: Sequence[np.ndarray], K, G, V, W, allow_empty: bool = False) -> np.ndarray:
    """Fold :func:`memory_update` over a list of encodings, starting from normalized keys."""
    if not len(encodings) and not allow_empty:
        raise ContractError("run_memory needs a non-empty history")
    h = forward_op("l2normalize", [K])
    for e in encodings:
        h = memory_update(h, e, K, G, V, W)
    return h
