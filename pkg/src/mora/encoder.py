"""Message-passing graph encoder producing per-node embeddings.

L layers of sum-aggregation with a GIN-style update: each node's state is
(1 + eps) * own state + sum of neighbor states, pushed through a two-layer
MLP. Neighbor sums use compensated summation so the result is the correctly
rounded true sum, which makes permutation equivariance exact at the bit
level rather than merely approximate.

The encoder is randomly initialized and frozen by default; a trainable flag
exists for joint-training experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mora.smiles import MolecularGraph, atom_features
from mora.tensor import Tensor, add, matmul, mul, relu, tape

__all__ = ["EncoderLayer", "EncoderParams", "message_step", "encode_graph", "EmptyGraphError"]

ATOM_FEATURE_DIM = 19


class EmptyGraphError(ValueError):
    """Raised when an empty graph reaches the encoder."""


@dataclass
class EncoderLayer:
    eps: Tensor  # scalar self-weight
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderParams:
    dim: int
    w_in: Tensor
    b_in: Tensor
    layers: list[EncoderLayer]

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        dim: int = 32,
        n_layers: int = 3,
        trainable: bool = False,
    ) -> "EncoderParams":
        def w(rows, cols):
            t = Tensor(
                rng.standard_normal((rows, cols)) / math.sqrt(rows),
                requires_grad=trainable,
            )
            return t if trainable else t.freeze()

        def b(cols):
            t = Tensor(np.zeros(cols), requires_grad=trainable)
            return t if trainable else t.freeze()

        def s():
            t = Tensor(0.0, requires_grad=trainable)
            return t if trainable else t.freeze()

        layers = [
            EncoderLayer(eps=s(), w1=w(dim, dim), b1=b(dim), w2=w(dim, dim), b2=b(dim))
            for _ in range(n_layers)
        ]
        return cls(dim=dim, w_in=w(ATOM_FEATURE_DIM, dim), b_in=b(dim), layers=layers)

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"encoder.w_in": self.w_in, "encoder.b_in": self.b_in}
        for i, layer in enumerate(self.layers):
            named[f"encoder.layer{i}.eps"] = layer.eps
            named[f"encoder.layer{i}.w1"] = layer.w1
            named[f"encoder.layer{i}.b1"] = layer.b1
            named[f"encoder.layer{i}.w2"] = layer.w2
            named[f"encoder.layer{i}.b2"] = layer.b2
        return named


def _exact_gather_sum(data: np.ndarray, groups: list[list[int]]) -> np.ndarray:
    """Row v of the result is the correctly rounded sum of data[groups[v]]."""
    out = np.zeros((len(groups), data.shape[1]), dtype=np.float64)
    for v, members in enumerate(groups):
        if len(members) == 1:
            out[v] = data[members[0]]
        elif len(members) == 2:
            out[v] = data[members[0]] + data[members[1]]
        elif members:
            rows = [data[u] for u in members]
            out[v] = [math.fsum(col) for col in zip(*rows)]
    return out


def _neighbor_sum(h: Tensor, adj: list[list[int]]) -> Tensor:
    out = Tensor(_exact_gather_sum(h.data, adj), requires_grad=h.requires_grad)

    def bwd(g):
        # undirected graph: the transpose aggregation reuses the same lists
        h.accumulate(_exact_gather_sum(g, adj))

    if out.requires_grad:
        tape().record(out, (h,), bwd)
    return out


def message_step(h: Tensor, g: MolecularGraph, layer: EncoderLayer) -> Tensor:
    """One round of sum-aggregation and MLP update; isolated nodes get m=0."""
    if h.shape[0] != g.n_atoms:
        raise ValueError(
            f"state has {h.shape[0]} rows but graph has {g.n_atoms} atoms"
        )
    adj = [[j for j, _order in lst] for lst in g.neighbors()]
    m = _neighbor_sum(h, adj)
    z = add(mul(h, add(layer.eps, 1.0)), m)
    hidden = relu(add(matmul(z, layer.w1), layer.b1))
    return add(matmul(hidden, layer.w2), layer.b2)


def encode_graph(g: MolecularGraph, params: EncoderParams) -> Tensor:
    """Project atom features and run every message-passing layer."""
    if g.n_atoms == 0:
        raise EmptyGraphError("cannot encode an empty graph; use the text-only path")
    h = add(matmul(Tensor(atom_features(g)), params.w_in), params.b_in)
    for layer in params.layers:
        h = message_step(h, g, layer)
    return h
