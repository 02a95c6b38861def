"""Optimization loop: only the generator's parameters ever change.

Each step encodes the graphs in a batch (cached, since the encoder is
frozen), generates a per-instance adapter set, runs the overlaid forward on
``BOS instruction SEP answer EOS`` with the loss masked to the answer and
EOS, and applies AdamW to the trainable group. A static baseline replaces
the generator with one input-independent adapter set of the same shape.
The backbone and encoder groups are hash-audited against their initial
state at the end of every run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mora import data as data_mod
from mora.backbone import BackboneParams, Vocabulary, forward_lm
from mora.checkpoint import Checkpoint, group_hash
from mora.config import ConfigurationError, RunConfig
from mora.data import TrainingExample, rng_for
from mora.encoder import EncoderParams, encode_graph
from mora.generator import GeneratorParams, generate_adapter_set
from mora.injection import AdapterSet, FfnUpdate, LowRankUpdate
from mora.smiles import SmilesParseError, graph_hash, parse_smiles
from mora.tensor import (
    NumericError,
    Tensor,
    backward,
    cross_entropy,
    mul,
    reset_tape,
)

__all__ = [
    "OptimizerState",
    "adamw_update",
    "StaticAdapterParams",
    "Model",
    "TrainingStepError",
    "TrainRun",
    "build_model",
    "example_tokens",
    "example_loss",
    "training_step",
    "train",
    "static_lora_train",
    "pretrain_backbone",
    "cosine_lr",
    "model_group_arrays",
    "write_loss_log",
]


class TrainingStepError(ValueError):
    """A batch element could not be processed; names the offending example."""


def adamw_update(
    param: Tensor,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    if np.isnan(grad).any():
        raise NumericError("NaN gradient; step aborted")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param.data)


@dataclass
class OptimizerState:
    """AdamW moment buffers keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_config(cls, config: RunConfig) -> "OptimizerState":
        return cls(
            lr=config["training.lr"],
            beta1=config["training.beta1"],
            beta2=config["training.beta2"],
            eps=config["training.eps"],
            weight_decay=config["training.weight_decay"],
        )

    def apply(self, named: dict[str, Tensor], lr_now: float | None = None) -> None:
        """Advance one step over every parameter that received a gradient."""
        grads = {}
        for name, t in named.items():
            if t.grad is None:
                continue
            if np.isnan(t.grad).any():
                raise NumericError(f"NaN gradient on {name!r}; step aborted")
            grads[name] = t.grad
        self.step += 1
        lr = self.lr if lr_now is None else lr_now
        for name, grad in grads.items():
            t = named[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(t.data)
                self.v[name] = np.zeros_like(t.data)
            adamw_update(
                t, grad, self.m[name], self.v[name], self.step,
                lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.asarray(float(self.step))}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step = int(np.asarray(arrays["step"]).reshape(-1)[0])
        self.m = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("m.")}
        self.v = {k[2:]: v.copy() for k, v in arrays.items() if k.startswith("v.")}


@dataclass
class StaticAdapterParams:
    """Input-independent adapter: trainable left factors, shared projectors.

    Mirrors the generator's geometry (same targets, rank, and scale) so the
    two variants are directly comparable. Left factors start at zero, so the
    initial loss equals the frozen model's.
    """

    rank: int
    alpha: float
    targets: str
    adapted_layers: tuple[int, ...]
    deltas: dict[str, Tensor]
    w_proj: Tensor
    w_proj_ff: Tensor | None
    _cached_set: AdapterSet | None = None

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        backbone: BackboneParams,
        rank: int = 4,
        alpha: float = 4.0,
        targets: str = "qkvof",
        adapted_layers: tuple[int, ...] | None = None,
    ) -> "StaticAdapterParams":
        if adapted_layers is None:
            adapted_layers = tuple(range(len(backbone.layers)))
        deltas = {}
        for c in targets:
            if c == "f":
                deltas["f_up"] = Tensor(np.zeros((backbone.dim, rank)), requires_grad=True)
                deltas["f_down"] = Tensor(
                    np.zeros((backbone.ffn_dim, rank)), requires_grad=True
                )
            else:
                deltas[c] = Tensor(np.zeros((backbone.dim, rank)), requires_grad=True)
        return cls(
            rank=rank,
            alpha=alpha,
            targets=targets,
            adapted_layers=tuple(adapted_layers),
            deltas=deltas,
            w_proj=Tensor(
                rng.standard_normal((rank, backbone.dim)) / math.sqrt(rank),
                requires_grad=True,
            ),
            w_proj_ff=(
                Tensor(
                    rng.standard_normal((rank, backbone.ffn_dim)) / math.sqrt(rank),
                    requires_grad=True,
                )
                if "f" in targets
                else None
            ),
        )

    def build_adapter_set(self) -> AdapterSet:
        """Same adapter for every input; built once, then reused.

        Entries reference the parameter tensors directly, so the cached set
        always reflects the current values.
        """
        if self._cached_set is not None:
            return self._cached_set
        scale = self.alpha / self.rank
        entries = {}
        shared = {}
        for c in self.targets:
            if c == "f":
                shared[c] = FfnUpdate(
                    up=LowRankUpdate(self.deltas["f_up"], self.w_proj_ff, scale),
                    down=LowRankUpdate(self.deltas["f_down"], self.w_proj, scale),
                )
            else:
                shared[c] = LowRankUpdate(self.deltas[c], self.w_proj, scale)
        for layer in self.adapted_layers:
            for c in self.targets:
                entries[(layer, c)] = shared[c]
        self._cached_set = AdapterSet(entries, provenance="static")
        return self._cached_set

    def named_tensors(self) -> dict[str, Tensor]:
        named = {f"static.delta.{k}": t for k, t in self.deltas.items()}
        named["static.w_proj"] = self.w_proj
        if self.w_proj_ff is not None:
            named["static.w_proj_ff"] = self.w_proj_ff
        return named


@dataclass
class Model:
    """Everything a forward pass needs, plus which group is trainable."""

    config: RunConfig
    vocab: Vocabulary
    backbone: BackboneParams
    encoder: EncoderParams
    generator: GeneratorParams | None = None
    static_adapter: StaticAdapterParams | None = None
    _embedding_cache: dict[str, Tensor] = field(default_factory=dict)
    _hash_cache: dict[str, str] = field(default_factory=dict)

    def trainable_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        if self.generator is not None:
            named.update(self.generator.named_tensors())
        if self.static_adapter is not None:
            named.update(self.static_adapter.named_tensors())
        if self.config["encoder.trainable"]:
            named.update(self.encoder.named_tensors())
        return named

    def node_embeddings(self, smiles: str) -> Tensor:
        """Encoder output for one molecule; cached while the encoder is frozen."""
        if self.config["encoder.trainable"]:
            return encode_graph(parse_smiles(smiles), self.encoder)
        cached = self._embedding_cache.get(smiles)
        if cached is None:
            cached = encode_graph(parse_smiles(smiles), self.encoder)
            self._embedding_cache[smiles] = cached
        return cached

    def adapters_for(self, smiles: str) -> AdapterSet:
        if self.static_adapter is not None:
            return self.static_adapter.build_adapter_set()
        h = self.node_embeddings(smiles)
        provenance = self._hash_cache.get(smiles)
        if provenance is None:
            provenance = graph_hash(parse_smiles(smiles))
            self._hash_cache[smiles] = provenance
        return generate_adapter_set(h, self.generator, provenance=provenance)


def build_model(config: RunConfig, static: bool = False, run_pretrain: bool = True) -> Model:
    """Deterministically construct every parameter group from the config seed."""
    seed = config.seed
    vocab = Vocabulary()
    pretrain_steps = config["backbone.pretrain_steps"] if run_pretrain else 0
    backbone = BackboneParams.init(
        rng_for(seed, "backbone"),
        vocab.size,
        dim=config["backbone.dim"],
        n_heads=config["backbone.heads"],
        ffn_dim=config["backbone.ffn_dim"],
        context=config["backbone.context"],
        n_layers=config["backbone.layers"],
        trainable=pretrain_steps > 0,
    )
    if pretrain_steps > 0:
        pretrain_backbone(config, vocab, backbone, pretrain_steps)
        backbone.freeze_all()
    encoder = EncoderParams.init(
        rng_for(seed, "encoder"),
        dim=config["encoder.dim"],
        n_layers=config["encoder.layers"],
        trainable=config["encoder.trainable"],
    )
    model = Model(config=config, vocab=vocab, backbone=backbone, encoder=encoder)
    if static:
        model.static_adapter = StaticAdapterParams.init(
            rng_for(seed, "static"),
            backbone,
            rank=config["mawgen.rank"],
            alpha=config["mawgen.alpha"],
            targets=config["mawgen.targets"],
        )
    else:
        model.generator = GeneratorParams.init(
            rng_for(seed, "generator"),
            backbone,
            enc_dim=config["encoder.dim"],
            dim=config["mawgen.dim"],
            n_blocks=config["mawgen.blocks"],
            n_queries=config["mawgen.queries"],
            rank=config["mawgen.rank"],
            alpha=config["mawgen.alpha"],
            targets=config["mawgen.targets"],
            assignment=config["mawgen.assignment"],
        )
    return model


def example_tokens(vocab: Vocabulary, ex: TrainingExample) -> tuple[list[int], list[int]]:
    """Inputs and next-token targets with the loss masked to answer plus EOS."""
    ids = (
        [vocab.BOS]
        + vocab.encode(ex.instruction)
        + [vocab.SEP]
        + vocab.encode(ex.answer)
        + [vocab.EOS]
    )
    answer_start = len(vocab.encode(ex.instruction)) + 2
    inputs = ids[:-1]
    targets = [
        ids[pos + 1] if pos + 1 >= answer_start else vocab.PAD
        for pos in range(len(inputs))
    ]
    return inputs, targets


def example_loss(model: Model, ex: TrainingExample, example_id: str = "?") -> Tensor:
    """Adapter-overlaid (or text-only) forward pass and masked cross-entropy."""
    adapters = None
    if ex.smiles is not None:
        try:
            adapters = model.adapters_for(ex.smiles)
        except SmilesParseError as err:
            raise TrainingStepError(f"example {example_id}: {err}") from None
    inputs, targets = example_tokens(model.vocab, ex)
    if len(inputs) + 1 > model.backbone.context:
        raise TrainingStepError(
            f"example {example_id}: prompt of {len(inputs) + 1} tokens exceeds context"
        )
    logits = forward_lm(model.backbone, inputs, adapters)
    return cross_entropy(logits, targets, ignore_index=model.vocab.PAD)


def training_step(
    batch: list[TrainingExample],
    model: Model,
    opt: OptimizerState,
    lr_now: float | None = None,
) -> float:
    """Mean loss over the batch, one backward pass, one AdamW update."""
    if not batch:
        raise TrainingStepError("empty batch")
    reset_tape()
    named = model.trainable_tensors()
    for t in named.values():
        t.zero_grad()
    total = None
    for i, ex in enumerate(batch):
        loss = example_loss(model, ex, example_id=str(i))
        total = loss if total is None else total + loss
    total = mul(total, 1.0 / len(batch))
    backward(total)
    opt.apply(named, lr_now)
    reset_tape()
    return float(total.data)


def cosine_lr(step: int, total_steps: int, lr_max: float, warmup_frac: float) -> float:
    """Linear warm-up into a cosine decay to zero; ``step`` is 1-based."""
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step <= warmup:
        return lr_max * step / warmup
    if total_steps <= warmup:
        return lr_max
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * progress))


def model_group_arrays(model: Model, opt: OptimizerState | None = None):
    groups = {
        "backbone": {k: t.data for k, t in model.backbone.named_tensors().items()},
        "encoder": {k: t.data for k, t in model.encoder.named_tensors().items()},
    }
    if model.generator is not None:
        groups["generator"] = {
            k: t.data for k, t in model.generator.named_tensors().items()
        }
    if model.static_adapter is not None:
        groups["static_adapter"] = {
            k: t.data for k, t in model.static_adapter.named_tensors().items()
        }
    if opt is not None:
        groups["optimizer"] = opt.arrays()
    return groups


def make_checkpoint(model: Model, opt: OptimizerState) -> Checkpoint:
    return Checkpoint(
        config=model.config.as_dict(),
        vocab=model.vocab.to_dict(),
        mode="static" if model.static_adapter is not None else "dynamic",
        groups=model_group_arrays(model, opt),
    )


def load_model(path_or_checkpoint) -> tuple[Model, OptimizerState]:
    """Rebuild a model and optimizer from a checkpoint file or object."""
    ck = (
        path_or_checkpoint
        if isinstance(path_or_checkpoint, Checkpoint)
        else Checkpoint.load(path_or_checkpoint)
    )
    config = RunConfig(ck.config)
    model = build_model(config, static=ck.mode == "static", run_pretrain=False)
    for gname, params in (
        ("backbone", model.backbone),
        ("encoder", model.encoder),
        ("generator", model.generator),
        ("static_adapter", model.static_adapter),
    ):
        if params is None:
            continue
        named = params.named_tensors()
        stored = ck.groups[gname]
        if set(named) != set(stored):
            raise ConfigurationError(
                f"checkpoint group {gname!r} does not match the configured model"
            )
        for name, t in named.items():
            t.data[...] = stored[name]
    opt = OptimizerState.for_config(config)
    if "optimizer" in ck.groups:
        opt.load_arrays(ck.groups["optimizer"])
    return model, opt


def write_loss_log(path: str, rows: list[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,lr,loss\n")
        for step, lr, loss in rows:
            fh.write(f"{step},{lr:.10g},{loss:.10g}\n")


@dataclass
class TrainRun:
    model: Model
    checkpoint: Checkpoint
    losses: list[tuple[int, float, float]]  # (step, lr, loss)


def _resolve_steps(config: RunConfig, n_examples: int) -> int:
    epochs = config["training.epochs"]
    if epochs > 0:
        batches = max(1, math.ceil(n_examples / config["training.batch"]))
        return epochs * batches
    return config["training.steps"]


def _run_training(
    config: RunConfig,
    dataset: list[TrainingExample],
    static: bool,
    checkpoint_path: str | None,
    log_path: str | None,
) -> TrainRun:
    if not dataset:
        raise ConfigurationError("dataset is empty")
    model = build_model(config, static=static)
    opt = OptimizerState.for_config(config)
    frozen_before = {
        "backbone": group_hash({k: t.data for k, t in model.backbone.named_tensors().items()}),
        "encoder": group_hash({k: t.data for k, t in model.encoder.named_tensors().items()}),
    }
    steps = _resolve_steps(config, len(dataset))
    batch_size = config["training.batch"]
    lr_max = config["training.lr"]
    warmup = config["training.warmup_frac"]
    every = config["training.checkpoint_every"]
    shuffle_rng = rng_for(config.seed, "shuffle")

    order: list[int] = []
    rows: list[tuple[int, float, float]] = []
    for step in range(1, steps + 1):
        while len(order) < batch_size:
            order.extend(shuffle_rng.permutation(len(dataset)).tolist())
        batch = [dataset[i] for i in order[:batch_size]]
        order = order[batch_size:]
        lr_now = cosine_lr(step, steps, lr_max, warmup)
        loss = training_step(batch, model, opt, lr_now)
        rows.append((step, lr_now, loss))
        if every and checkpoint_path and step % every == 0:
            make_checkpoint(model, opt).save(checkpoint_path)

    frozen_after = {
        "backbone": group_hash({k: t.data for k, t in model.backbone.named_tensors().items()}),
        "encoder": group_hash({k: t.data for k, t in model.encoder.named_tensors().items()}),
    }
    if frozen_after["backbone"] != frozen_before["backbone"]:
        raise NumericError("freeze audit failed: backbone parameters changed")
    if not config["encoder.trainable"] and frozen_after["encoder"] != frozen_before["encoder"]:
        raise NumericError("freeze audit failed: encoder parameters changed")

    checkpoint = make_checkpoint(model, opt)
    if checkpoint_path:
        checkpoint.save(checkpoint_path)
    if log_path:
        write_loss_log(log_path, rows)
    return TrainRun(model=model, checkpoint=checkpoint, losses=rows)


def train(
    config: RunConfig,
    dataset: list[TrainingExample],
    checkpoint_path: str | None = None,
    log_path: str | None = None,
) -> TrainRun:
    """Instance-specific training: the generator is the trainable group."""
    return _run_training(config, dataset, False, checkpoint_path, log_path)


def static_lora_train(
    config: RunConfig,
    dataset: list[TrainingExample],
    checkpoint_path: str | None = None,
    log_path: str | None = None,
) -> TrainRun:
    """Baseline: one fixed adapter set shared by every input."""
    return _run_training(config, dataset, True, checkpoint_path, log_path)


def pretrain_backbone(
    config: RunConfig, vocab: Vocabulary, backbone: BackboneParams, steps: int
) -> None:
    """Teach the raw backbone the prompt format on an unconditioned corpus.

    Runs before the backbone is frozen; the corpus answers carry no graph
    information, so nothing here can shortcut the adaptation task.
    """
    corpus = data_mod.synth_pretrain(max(64, 4 * config["training.batch"]), config.seed)
    named = backbone.named_tensors()
    opt = OptimizerState(lr=1e-3)
    rng = rng_for(config.seed, "pretrain.shuffle")
    batch_size = config["training.batch"]
    for _ in range(steps):
        reset_tape()
        for t in named.values():
            t.zero_grad()
        picks = rng.integers(0, len(corpus), size=batch_size)
        total = None
        for i in picks:
            ex = corpus[int(i)]
            ids = (
                [vocab.BOS]
                + vocab.encode(ex.instruction)
                + [vocab.SEP]
                + vocab.encode(ex.answer)
                + [vocab.EOS]
            )
            loss = cross_entropy(
                forward_lm(backbone, ids[:-1]), ids[1:], ignore_index=vocab.PAD
            )
            total = loss if total is None else total + loss
        total = mul(total, 1.0 / batch_size)
        backward(total)
        opt.apply(named)
    reset_tape()
