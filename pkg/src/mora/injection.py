"""Transient low-rank weight overlays for the frozen backbone.

An overlay never touches the base weights: targeted linear maps are applied
as x @ W + scale * ((x @ dA) @ dB), which is mathematically identical to
x @ (W + scale * dA @ dB) but costs O(d*r) extra instead of O(d^2) and makes
non-mutation structural. Dropping the overlay restores frozen behavior
exactly. Any number of overlays may be live at once over one shared backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Union

import numpy as np

from mora.tensor import Tensor, matmul, tape

if TYPE_CHECKING:  # pragma: no cover
    from mora.backbone import BackboneParams

__all__ = [
    "COMPONENTS",
    "LowRankUpdate",
    "FfnUpdate",
    "AdapterSet",
    "EffectiveLinear",
    "TopologyError",
    "effective_apply",
    "overlay",
    "Overlay",
]

# injection targets: attention query/key/value/output projections, plus "f"
# covering both feed-forward projections
COMPONENTS = ("q", "k", "v", "o", "f")


class TopologyError(ValueError):
    """An adapter references a layer or component the backbone lacks."""


@dataclass(frozen=True)
class LowRankUpdate:
    """One factored weight update: scale * delta_a @ delta_b, rank <= r."""

    delta_a: Tensor  # (d_in, r)
    delta_b: Tensor  # (r, d_out); a view of a shared projector
    scale: float

    @property
    def rank(self) -> int:
        return self.delta_a.shape[1]

    def materialize(self) -> np.ndarray:
        """Dense d_in x d_out update; for tests and rank checks only."""
        return self.scale * (self.delta_a.data @ self.delta_b.data)


@dataclass(frozen=True)
class FfnUpdate:
    """The 'f' target updates both feed-forward projections."""

    up: LowRankUpdate
    down: LowRankUpdate


AdapterEntry = Union[LowRankUpdate, FfnUpdate]


class AdapterSet:
    """Immutable map from (layer index, component) to a low-rank update."""

    def __init__(self, entries: Mapping[tuple[int, str], AdapterEntry], provenance: str = ""):
        for (layer, comp), entry in entries.items():
            if comp not in COMPONENTS:
                raise TopologyError(f"unknown component {comp!r}")
            if comp == "f" and not isinstance(entry, FfnUpdate):
                raise TopologyError("component 'f' requires an up/down update pair")
            if comp != "f" and isinstance(entry, FfnUpdate):
                raise TopologyError(f"component {comp!r} takes a single update")
            if layer < 0:
                raise TopologyError(f"negative layer index {layer}")
        self._entries = dict(entries)
        self.provenance = provenance

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def get(self, layer: int, comp: str) -> AdapterEntry | None:
        return self._entries.get((layer, comp))

    def keys(self):
        return self._entries.keys()

    def items(self):
        return self._entries.items()


@dataclass(frozen=True)
class EffectiveLinear:
    """A frozen base weight plus an optional transient update."""

    base: Tensor
    update: LowRankUpdate | None = None


def _lora_linear(x: Tensor, w: Tensor, a: Tensor, b: Tensor, scale: float) -> Tensor:
    """Fused x @ w + scale * (x @ a) @ b with a single tape entry."""
    xa = x.data @ a.data
    out = Tensor(
        x.data @ w.data + scale * (xa @ b.data),
        requires_grad=x.requires_grad or w.requires_grad or a.requires_grad or b.requires_grad,
    )

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g @ w.data.T + scale * ((g @ b.data.T) @ a.data.T))
        if w.requires_grad:
            w.accumulate(x.data.T @ g)
        if a.requires_grad:
            a.accumulate(scale * (x.data.T @ (g @ b.data.T)))
        if b.requires_grad:
            b.accumulate(scale * (xa.T @ g))

    if out.requires_grad:
        tape().record(out, (x, w, a, b), bwd)
    return out


def effective_apply(x: Tensor, lin: EffectiveLinear) -> Tensor:
    """x @ base, plus the factored low-rank correction when present."""
    up = lin.update
    if up is None:
        return matmul(x, lin.base)
    if (
        up.delta_a.shape[0] != lin.base.shape[0]
        or up.delta_b.shape[1] != lin.base.shape[1]
        or up.delta_a.shape[1] != up.delta_b.shape[0]
    ):
        raise ValueError(
            f"update shapes {up.delta_a.shape} x {up.delta_b.shape} do not fit "
            f"base {lin.base.shape}"
        )
    return _lora_linear(x, lin.base, up.delta_a, up.delta_b, up.scale)


class Overlay:
    """Forward-capable view of a backbone with updates injected.

    Value-like and independent: it holds only references, never writes, and
    leaves no trace once dropped.
    """

    def __init__(self, adapters: AdapterSet | None):
        self._adapters = adapters

    def apply(self, x: Tensor, layer: int, comp: str, base: Tensor, part: str | None = None) -> Tensor:
        entry = self._adapters.get(layer, comp) if self._adapters else None
        if entry is None:
            return matmul(x, base)
        if isinstance(entry, FfnUpdate):
            entry = entry.up if part == "up" else entry.down
        return effective_apply(x, EffectiveLinear(base, entry))


def overlay(backbone: "BackboneParams", adapters: AdapterSet | None) -> Overlay:
    """Validate adapter keys against the backbone topology and build a view."""
    if adapters is not None:
        for layer, comp in adapters.keys():
            if layer >= len(backbone.layers):
                raise TopologyError(
                    f"adapter targets layer {layer} but backbone has {len(backbone.layers)}"
                )
    return Overlay(adapters)
