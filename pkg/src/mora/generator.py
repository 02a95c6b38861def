"""Graph-conditioned weight generator: the only trainable component.

A set of learnable queries is refined by a stack of transformer decoder
blocks (self-attention among the queries, cross-attention into the node
embeddings, a feed-forward update; all pre-norm with residuals). Each
refined query is then projected by a zero-initialized fully-connected head
and reshaped into the left factor of a low-rank weight update; the right
factor is a shared, learnable projector. Zero initialization of the heads
means a fresh generator leaves the backbone's behavior exactly unchanged.

Query assignment is configurable:

- ``shared_across_layers`` (default): one query per target component, each
  with its own head; the resulting update is reused at every adapted layer.
- ``per_layer``: one query per (adapted layer, component) pair, indexed
  layer-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mora.backbone import BackboneParams, attend_heads
from mora.config import ConfigurationError
from mora.injection import COMPONENTS, AdapterSet, FfnUpdate, LowRankUpdate
from mora.tensor import Tensor, add, gelu, layer_norm, matmul, narrow, reshape

__all__ = [
    "GeneratorBlock",
    "ProjectionHead",
    "GeneratorParams",
    "distill_queries",
    "generate_update",
    "generate_adapter_set",
    "ASSIGNMENT_MODES",
]

ASSIGNMENT_MODES = ("shared_across_layers", "per_layer")


@dataclass
class GeneratorBlock:
    ln_sa: Tensor
    sa_wq: Tensor
    sa_wk: Tensor
    sa_wv: Tensor
    sa_wo: Tensor
    ln_ca: Tensor
    ca_wq: Tensor
    ca_wk: Tensor
    ca_wv: Tensor
    ca_wo: Tensor
    ln_ff: Tensor
    ff_w1: Tensor
    ff_w2: Tensor


@dataclass
class ProjectionHead:
    """Zero-initialized map from one query vector to a flattened left factor."""

    w_fc: Tensor  # (dim, d_in * rank)
    d_in: int


@dataclass
class GeneratorParams:
    dim: int
    enc_dim: int
    n_queries: int
    rank: int
    alpha: float
    targets: str
    assignment: str
    adapted_layers: tuple[int, ...]
    llm_dim: int
    llm_ffn_dim: int
    queries: Tensor = field(repr=False, default=None)
    blocks: list[GeneratorBlock] = field(repr=False, default=None)
    ln_out: Tensor = field(repr=False, default=None)
    heads: dict[str, ProjectionHead] = field(repr=False, default=None)
    w_proj: Tensor = field(repr=False, default=None)
    w_proj_ff: Tensor | None = field(repr=False, default=None)

    @staticmethod
    def validate_setup(
        targets: str, assignment: str, n_queries: int, n_adapted: int
    ) -> None:
        """Reject inconsistent query assignments at startup, not at inference."""
        if not targets or any(c not in COMPONENTS for c in targets):
            raise ConfigurationError(
                f"targets must be a non-empty subset of 'qkvof', got {targets!r}"
            )
        if len(set(targets)) != len(targets):
            raise ConfigurationError(f"targets {targets!r} repeats a component")
        if assignment not in ASSIGNMENT_MODES:
            raise ConfigurationError(
                f"assignment must be one of {ASSIGNMENT_MODES}, got {assignment!r}"
            )
        expected = (
            len(targets)
            if assignment == "shared_across_layers"
            else len(targets) * n_adapted
        )
        if n_queries != expected:
            raise ConfigurationError(
                f"assignment {assignment!r} over targets {targets!r} and "
                f"{n_adapted} layers needs {expected} queries, got {n_queries}"
            )

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        backbone: BackboneParams,
        enc_dim: int = 32,
        dim: int = 32,
        n_blocks: int = 2,
        n_queries: int = 5,
        rank: int = 4,
        alpha: float = 4.0,
        targets: str = "qkvof",
        assignment: str = "shared_across_layers",
        adapted_layers: tuple[int, ...] | None = None,
    ) -> "GeneratorParams":
        if adapted_layers is None:
            adapted_layers = tuple(range(len(backbone.layers)))
        if any(not 0 <= i < len(backbone.layers) for i in adapted_layers):
            raise ConfigurationError(
                f"adapted layers {adapted_layers} out of range for "
                f"{len(backbone.layers)}-layer backbone"
            )
        cls.validate_setup(targets, assignment, n_queries, len(adapted_layers))
        if not 1 <= rank <= backbone.dim:
            raise ConfigurationError(f"rank {rank} must be in 1..{backbone.dim}")
        if n_blocks < 1:
            raise ConfigurationError("at least one generator block is required")

        def w(rows, cols):
            return Tensor(
                rng.standard_normal((rows, cols)) / math.sqrt(rows),
                requires_grad=True,
            )

        def g(n):
            return Tensor(np.ones(n), requires_grad=True)

        blocks = [
            GeneratorBlock(
                ln_sa=g(dim),
                sa_wq=w(dim, dim),
                sa_wk=w(dim, dim),
                sa_wv=w(dim, dim),
                sa_wo=w(dim, dim),
                ln_ca=g(dim),
                ca_wq=w(dim, dim),
                ca_wk=w(enc_dim, dim),
                ca_wv=w(enc_dim, dim),
                ca_wo=w(dim, dim),
                ln_ff=g(dim),
                ff_w1=w(dim, 4 * dim),
                ff_w2=w(4 * dim, dim),
            )
            for _ in range(n_blocks)
        ]

        def zero_head(d_in):
            return ProjectionHead(
                w_fc=Tensor(np.zeros((dim, d_in * rank)), requires_grad=True),
                d_in=d_in,
            )

        heads: dict[str, ProjectionHead] = {}
        for key in cls._head_keys(targets, assignment, adapted_layers):
            d_in = backbone.ffn_dim if key.endswith("f_down") else backbone.dim
            heads[key] = zero_head(d_in)

        params = cls(
            dim=dim,
            enc_dim=enc_dim,
            n_queries=n_queries,
            rank=rank,
            alpha=alpha,
            targets=targets,
            assignment=assignment,
            adapted_layers=tuple(adapted_layers),
            llm_dim=backbone.dim,
            llm_ffn_dim=backbone.ffn_dim,
            queries=Tensor(rng.standard_normal((n_queries, dim)), requires_grad=True),
            blocks=blocks,
            ln_out=g(dim),
            heads=heads,
            w_proj=w(rank, backbone.dim),
            w_proj_ff=w(rank, backbone.ffn_dim) if "f" in targets else None,
        )
        return params

    @staticmethod
    def _head_keys(targets, assignment, adapted_layers):
        """Stable head naming: component-keyed, with 'f' split into up/down."""
        def comp_keys(prefix=""):
            keys = []
            for c in targets:
                if c == "f":
                    keys += [f"{prefix}f_up", f"{prefix}f_down"]
                else:
                    keys.append(f"{prefix}{c}")
            return keys

        if assignment == "shared_across_layers":
            return comp_keys()
        keys = []
        for layer in adapted_layers:
            keys += comp_keys(prefix=f"layer{layer}.")
        return keys

    def query_index(self, layer: int, comp: str) -> int:
        if self.assignment == "shared_across_layers":
            return self.targets.index(comp)
        pos = self.adapted_layers.index(layer)
        return pos * len(self.targets) + self.targets.index(comp)

    def named_tensors(self) -> dict[str, Tensor]:
        named = {"generator.queries": self.queries, "generator.ln_out": self.ln_out}
        for i, blk in enumerate(self.blocks):
            for f in (
                "ln_sa", "sa_wq", "sa_wk", "sa_wv", "sa_wo",
                "ln_ca", "ca_wq", "ca_wk", "ca_wv", "ca_wo",
                "ln_ff", "ff_w1", "ff_w2",
            ):
                named[f"generator.block{i}.{f}"] = getattr(blk, f)
        for key, head in self.heads.items():
            named[f"generator.head.{key}.w_fc"] = head.w_fc
        named["generator.w_proj"] = self.w_proj
        if self.w_proj_ff is not None:
            named["generator.w_proj_ff"] = self.w_proj_ff
        return named


def distill_queries(node_embeddings: Tensor, params: GeneratorParams) -> Tensor:
    """Refine the learnable queries against one graph's node embeddings."""
    if node_embeddings.ndim != 2 or node_embeddings.shape[0] < 1:
        raise ValueError("node embeddings must be a non-empty matrix")
    if node_embeddings.shape[1] != params.enc_dim:
        raise ValueError(
            f"node embedding width {node_embeddings.shape[1]} does not match "
            f"generator enc_dim {params.enc_dim}"
        )
    q = params.queries
    for blk in params.blocks:
        qn = layer_norm(q, blk.ln_sa)
        sa = attend_heads(
            matmul(qn, blk.sa_wq),
            matmul(qn, blk.sa_wk),
            matmul(qn, blk.sa_wv),
            n_heads=1,
            causal=False,
        )
        q = add(q, matmul(sa, blk.sa_wo))
        qn = layer_norm(q, blk.ln_ca)
        ca = attend_heads(
            matmul(qn, blk.ca_wq),
            matmul(node_embeddings, blk.ca_wk),
            matmul(node_embeddings, blk.ca_wv),
            n_heads=1,
            causal=False,
        )
        q = add(q, matmul(ca, blk.ca_wo))
        qn = layer_norm(q, blk.ln_ff)
        q = add(q, matmul(gelu(matmul(qn, blk.ff_w1)), blk.ff_w2))
    return layer_norm(q, params.ln_out)


def generate_update(
    q_row: Tensor, head: ProjectionHead, delta_b: Tensor, rank: int, alpha: float
) -> LowRankUpdate:
    """Project one query to a left factor and pair it with the shared right factor."""
    flat = matmul(q_row, head.w_fc)
    delta_a = reshape(flat, (head.d_in, rank))
    return LowRankUpdate(delta_a=delta_a, delta_b=delta_b, scale=alpha / rank)


def generate_adapter_set(
    node_embeddings: Tensor, params: GeneratorParams, provenance: str = ""
) -> AdapterSet:
    """Distill queries, then build the update for every configured target."""
    q_out = distill_queries(node_embeddings, params)

    def build(comp: str, layer: int, head_prefix: str):
        row = narrow(q_out, 0, params.query_index(layer, comp), 1)
        if comp == "f":
            up = generate_update(
                row, params.heads[f"{head_prefix}f_up"], params.w_proj_ff,
                params.rank, params.alpha,
            )
            down = generate_update(
                row, params.heads[f"{head_prefix}f_down"], params.w_proj,
                params.rank, params.alpha,
            )
            return FfnUpdate(up=up, down=down)
        return generate_update(
            row, params.heads[f"{head_prefix}{comp}"], params.w_proj,
            params.rank, params.alpha,
        )

    entries = {}
    if params.assignment == "shared_across_layers":
        shared = {c: build(c, params.adapted_layers[0], "") for c in params.targets}
        for layer in params.adapted_layers:
            for c in params.targets:
                entries[(layer, c)] = shared[c]
    else:
        for layer in params.adapted_layers:
            for c in params.targets:
                entries[(layer, c)] = build(c, layer, f"layer{layer}.")
    return AdapterSet(entries, provenance=provenance)
