"""Frozen decoder-only transformer over a character vocabulary.

Pre-norm residual blocks, learned absolute position embeddings, causal
masking, no KV cache. Forward passes optionally run under an injected
AdapterSet; with no adapters the computation is the pure frozen path used
for text-only prompts. Desk-scale defaults live in the config module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mora.injection import AdapterSet, overlay
from mora.tensor import (
    Tensor,
    add,
    gather_rows,
    layer_norm,
    matmul,
    multi_head_attention,
    narrow,
    relu,
)

__all__ = [
    "Vocabulary",
    "TokenizationError",
    "ContextLengthError",
    "BackboneLayer",
    "BackboneParams",
    "forward_lm",
    "greedy_decode",
    "attend_heads",
]

PRINTABLE = "".join(chr(c) for c in range(32, 127))


class TokenizationError(ValueError):
    """Text contains a character outside the vocabulary."""


class ContextLengthError(ValueError):
    """A token sequence does not fit the backbone's context window."""


class Vocabulary:
    """Bijective char <-> id map with PAD/BOS/EOS/SEP specials."""

    PAD, BOS, EOS, SEP = 0, 1, 2, 3

    def __init__(self, chars: str = PRINTABLE):
        if len(set(chars)) != len(chars):
            raise ValueError("vocabulary characters must be unique")
        self.chars = chars
        self._to_id = {c: i + 4 for i, c in enumerate(chars)}

    @property
    def size(self) -> int:
        return len(self.chars) + 4

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as err:
            raise TokenizationError(
                f"character {err.args[0]!r} is not in the vocabulary"
            ) from None

    def decode(self, ids) -> str:
        """Ids back to text; special tokens are skipped."""
        out = []
        for i in ids:
            if i >= 4:
                out.append(self.chars[i - 4])
            elif not 0 <= i < self.size:
                raise TokenizationError(f"id {i} is out of the vocabulary range")
        return "".join(out)

    def to_dict(self) -> dict:
        return {"chars": self.chars}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["chars"])


@dataclass
class BackboneLayer:
    ln1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class BackboneParams:
    dim: int
    n_heads: int
    ffn_dim: int
    context: int
    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[BackboneLayer]
    ln_f: Tensor
    head: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        dim: int = 64,
        n_heads: int = 4,
        ffn_dim: int = 256,
        context: int = 256,
        n_layers: int = 4,
        trainable: bool = False,
    ) -> "BackboneParams":
        if dim % n_heads != 0:
            raise ValueError(f"dim {dim} is not divisible by {n_heads} heads")

        def w(rows, cols, scale=None):
            s = scale if scale is not None else 1.0 / math.sqrt(rows)
            t = Tensor(rng.standard_normal((rows, cols)) * s, requires_grad=trainable)
            return t if trainable else t.freeze()

        def g(n):
            t = Tensor(np.ones(n), requires_grad=trainable)
            return t if trainable else t.freeze()

        layers = [
            BackboneLayer(
                ln1=g(dim),
                wq=w(dim, dim),
                wk=w(dim, dim),
                wv=w(dim, dim),
                wo=w(dim, dim),
                ln2=g(dim),
                w_up=w(dim, ffn_dim),
                w_down=w(ffn_dim, dim),
            )
            for _ in range(n_layers)
        ]
        return cls(
            dim=dim,
            n_heads=n_heads,
            ffn_dim=ffn_dim,
            context=context,
            tok_emb=w(vocab_size, dim, scale=0.1),
            pos_emb=w(context, dim, scale=0.1),
            layers=layers,
            ln_f=g(dim),
            head=w(dim, vocab_size),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "backbone.tok_emb": self.tok_emb,
            "backbone.pos_emb": self.pos_emb,
            "backbone.ln_f": self.ln_f,
            "backbone.head": self.head,
        }
        for i, layer in enumerate(self.layers):
            for field in ("ln1", "wq", "wk", "wv", "wo", "ln2", "w_up", "w_down"):
                named[f"backbone.layer{i}.{field}"] = getattr(layer, field)
        return named

    def freeze_all(self) -> "BackboneParams":
        for t in self.named_tensors().values():
            t.freeze()
        return self


def attend_heads(q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool) -> Tensor:
    """Split projections into column heads, attend, and re-concatenate."""
    return multi_head_attention(q, k, v, n_heads, causal)


def forward_lm(
    params: BackboneParams, tokens, adapters: AdapterSet | None = None
) -> Tensor:
    """Causal forward pass; returns T x V logits.

    With adapters, every targeted linear map runs as an effective linear
    through the overlay; with none, this is the frozen text-only path.
    """
    ids = list(tokens)
    t = len(ids)
    if t < 1:
        raise ContextLengthError("token sequence is empty")
    if t > params.context:
        raise ContextLengthError(
            f"sequence length {t} exceeds context {params.context}"
        )
    ov = overlay(params, adapters)
    x = add(gather_rows(params.tok_emb, ids), narrow(params.pos_emb, 0, 0, t))
    for i, layer in enumerate(params.layers):
        xn = layer_norm(x, layer.ln1)
        q = ov.apply(xn, i, "q", layer.wq)
        k = ov.apply(xn, i, "k", layer.wk)
        v = ov.apply(xn, i, "v", layer.wv)
        attn = attend_heads(q, k, v, params.n_heads, causal=True)
        x = add(x, ov.apply(attn, i, "o", layer.wo))
        xn = layer_norm(x, layer.ln2)
        hidden = relu(ov.apply(xn, i, "f", layer.w_up, part="up"))
        x = add(x, ov.apply(hidden, i, "f", layer.w_down, part="down"))
    x = layer_norm(x, params.ln_f)
    return matmul(x, params.head)


def greedy_decode(
    params: BackboneParams,
    prompt,
    adapters: AdapterSet | None = None,
    max_new: int = 64,
) -> list[int]:
    """Append argmax tokens (ties break to the lowest id) until EOS or max_new."""
    seq = list(prompt)
    for _ in range(max_new):
        logits = forward_lm(params, seq, adapters)
        nxt = int(np.argmax(logits.data[-1]))
        seq.append(nxt)
        if nxt == Vocabulary.EOS:
            break
    return seq
