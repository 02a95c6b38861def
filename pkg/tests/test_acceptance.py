"""Acceptance suite: one test per criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s``. The long-running
criteria (the full-budget static-versus-dynamic contrast and its dependents)
share a module-scoped fixture; everything else is self-contained.
"""

import math
import time

import numpy as np
import pytest

from mora import tensor as T
from mora.backbone import forward_lm
from mora.checkpoint import group_hash
from mora.cli import cli
from mora.config import RunConfig
from mora.data import random_molecule, save_dataset, synth_dataset
from mora.evaluation import evaluate, final_training_loss, run_ablation
from mora.generator import generate_adapter_set
from mora.injection import FfnUpdate
from mora.metrics import bleu, exact_match, fingerprint, levenshtein, mae, tanimoto
from mora.smiles import SmilesParseError, parse_smiles, permute_graph
from mora.training import (
    OptimizerState,
    build_model,
    static_lora_train,
    train,
    training_step,
)


def verdict(number: int, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, f"criterion {number}: {detail}"


def randomize_generator(model, rng, scale=0.05):
    for t in model.generator.named_tensors().values():
        t.data[...] += rng.standard_normal(t.shape) * scale


# ---------------------------------------------------------------- criterion 1

def test_c01_zero_init_identity():
    t0 = time.time()
    cfg = RunConfig.defaults()
    model = build_model(cfg)
    rng = np.random.default_rng(11)
    v = model.vocab
    worst = 0.0
    for _ in range(20):
        smiles = random_molecule(rng, int(rng.integers(1, 10)))
        adapters = model.adapters_for(smiles)
        n = int(rng.integers(3, 30))
        prompt = [v.BOS] + [int(i) for i in rng.integers(4, v.size, size=n)]
        frozen = forward_lm(model.backbone, prompt).data
        adapted = forward_lm(model.backbone, prompt, adapters).data
        worst = max(worst, float(np.abs(frozen - adapted).max()))
    elapsed = time.time() - t0
    verdict(
        1,
        worst <= 1e-12 and elapsed < 10.0,
        f"zero-init identity, max |delta logit| = {worst:.2e} over 20 pairs "
        f"({elapsed:.1f}s)",
    )


# ---------------------------------------------------------------- criterion 2

def test_c02_full_pipeline_gradients_match_finite_differences():
    t0 = time.time()
    cfg = RunConfig.defaults().with_overrides(
        {
            "backbone.layers": 1,
            "backbone.dim": 8,
            "backbone.heads": 2,
            "backbone.ffn_dim": 16,
            "backbone.context": 32,
            "encoder.layers": 1,
            "encoder.dim": 8,
            "mawgen.dim": 8,
            "mawgen.blocks": 1,
            "mawgen.rank": 2,
            "mawgen.alpha": 2.0,
        }
    )
    model = build_model(cfg)
    randomize_generator(model, np.random.default_rng(5))
    v = model.vocab
    smiles = "CC(=O)O"
    instruction = "n?"
    answer = "3354"  # 4-token answer
    ids = [v.BOS] + v.encode(instruction) + [v.SEP] + v.encode(answer) + [v.EOS]
    start = len(v.encode(instruction)) + 2
    inputs = ids[:-1]
    targets = [
        ids[p + 1] if p + 1 >= start else v.PAD for p in range(len(inputs))
    ]

    def loss_value() -> float:
        T.reset_tape()
        adapters = model.adapters_for(smiles)
        logits = forward_lm(model.backbone, inputs, adapters)
        return float(T.cross_entropy(logits, targets, ignore_index=v.PAD).data)

    T.reset_tape()
    adapters = model.adapters_for(smiles)
    logits = forward_lm(model.backbone, inputs, adapters)
    loss = T.cross_entropy(logits, targets, ignore_index=v.PAD)
    named = model.generator.named_tensors()
    for t in named.values():
        t.zero_grad()
    T.backward(loss)

    h = 1e-5
    worst = 0.0
    worst_name = ""
    n_leaves = 0
    for name, tensor in named.items():
        assert tensor.grad is not None, f"{name} received no gradient"
        grad = np.asarray(tensor.grad, dtype=np.float64).reshape(-1)
        flat = tensor.data.reshape(-1)
        n_leaves += flat.size
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = loss_value()
            flat[idx] = orig - h
            fm = loss_value()
            flat[idx] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(grad[idx] - fd) / max(abs(fd), abs(grad[idx]), 1e-8)
            if rel > worst:
                worst, worst_name = rel, name
    model._embedding_cache.clear()
    elapsed = time.time() - t0
    verdict(
        2,
        worst < 1e-4 and elapsed < 120.0,
        f"gradients on {n_leaves} generator scalars, worst rel err {worst:.2e} "
        f"({worst_name}); {elapsed:.0f}s",
    )


# ---------------------------------------------------------------- criterion 3

def test_c03_freeze_audit_500_steps():
    cfg = RunConfig.defaults().with_overrides({"training.steps": 500})
    dataset = synth_dataset("atom_count", 200, seed=3)
    model = build_model(cfg)
    opt = OptimizerState.for_config(cfg)

    def hashes():
        return {
            "backbone": group_hash(
                {k: t.data for k, t in model.backbone.named_tensors().items()}
            ),
            "encoder": group_hash(
                {k: t.data for k, t in model.encoder.named_tensors().items()}
            ),
            "generator": group_hash(
                {k: t.data for k, t in model.generator.named_tensors().items()}
            ),
        }

    before = hashes()
    rng = np.random.default_rng(3)
    for step in range(500):
        picks = rng.integers(0, len(dataset), size=cfg["training.batch"])
        training_step([dataset[int(i)] for i in picks], model, opt)
    after = hashes()
    ok = (
        after["backbone"] == before["backbone"]
        and after["encoder"] == before["encoder"]
        and after["generator"] != before["generator"]
    )
    verdict(
        3,
        ok,
        "after 500 steps: backbone and encoder hashes unchanged, generator "
        "hash changed",
    )


# ---------------------------------------------------------------- criterion 4

def test_c04_rank_bound_on_50_updates():
    cfg = RunConfig.defaults()
    model = build_model(cfg)
    rng = np.random.default_rng(44)
    randomize_generator(model, rng, scale=0.2)
    r = model.generator.rank
    worst = 0.0
    checked = 0
    while checked < 50:
        smiles = random_molecule(rng, int(rng.integers(1, 10)))
        adapters = model.adapters_for(smiles)
        for _, entry in adapters.items():
            updates = [entry.up, entry.down] if isinstance(entry, FfnUpdate) else [entry]
            for up in updates:
                s = np.linalg.svd(up.materialize(), compute_uv=False)
                if s[0] > 0:
                    worst = max(worst, float(s[r] / s[0]))
                checked += 1
                if checked >= 50:
                    break
            if checked >= 50:
                break
    verdict(
        4,
        worst < 1e-9,
        f"rank bound sigma_{r + 1}/sigma_1 = {worst:.2e} over 50 materialized updates",
    )


# ---------------------------------------------------------------- criterion 5

def test_c05_permutation_invariance_of_adapter_sets():
    cfg = RunConfig.defaults()
    model = build_model(cfg)
    rng = np.random.default_rng(55)
    randomize_generator(model, rng, scale=0.2)
    worst = 0.0
    for _ in range(20):
        smiles = random_molecule(rng, int(rng.integers(2, 10)))
        g = parse_smiles(smiles)
        base = model.adapters_for(smiles)
        for _ in range(5):
            perm = list(rng.permutation(g.n_atoms))
            from mora.encoder import encode_graph

            h = encode_graph(permute_graph(g, perm), model.encoder)
            other = generate_adapter_set(h, model.generator)
            for key in base.keys():
                e1, e2 = base.get(*key), other.get(*key)
                pairs = (
                    [(e1.up, e2.up), (e1.down, e2.down)]
                    if isinstance(e1, FfnUpdate)
                    else [(e1, e2)]
                )
                for u1, u2 in pairs:
                    worst = max(
                        worst,
                        float(np.abs(u1.materialize() - u2.materialize()).max()),
                    )
    verdict(
        5,
        worst <= 1e-12,
        f"adapter sets under relabeling: max entry difference {worst:.2e} "
        "(20 graphs x 5 permutations)",
    )


# ------------------------------------------------- criteria 6 and 7 (shared)

BUDGET_STEPS = 10_000


@pytest.fixture(scope="module")
def contrast_runs():
    cfg = RunConfig.defaults().with_overrides({"training.steps": BUDGET_STEPS})
    train_set = synth_dataset("atom_count", 500, seed=0, max_atoms=9)
    held_out = synth_dataset("atom_count", 200, seed=991, max_atoms=9)
    t0 = time.time()
    dynamic = train(cfg, train_set)
    static = static_lora_train(cfg, train_set)
    elapsed = time.time() - t0
    return cfg, train_set, held_out, dynamic, static, elapsed


def test_c06_instance_specific_beats_static(contrast_runs):
    cfg, _train_set, held_out, dynamic, static, elapsed = contrast_runs
    dyn = evaluate(dynamic.model, held_out, name="instance_specific", max_new=4)
    sta = evaluate(static.model, held_out, name="static_task_oriented", max_new=4)
    floor = 0.8 * math.log(9)
    ok = (
        sta.metrics["answer_ce"] >= floor
        and dyn.metrics["answer_ce"] <= 0.1
        and dyn.metrics["exact_match"] >= 0.95
        and elapsed < 30 * 60
    )
    verdict(
        6,
        ok,
        f"static answer CE {sta.metrics['answer_ce']:.3f} >= {floor:.3f}; "
        f"instance-specific CE {dyn.metrics['answer_ce']:.4f} <= 0.1, "
        f"EM {dyn.metrics['exact_match']:.3f} >= 0.95 "
        f"(both {BUDGET_STEPS}-step runs in {elapsed / 60:.1f} min)",
    )


def test_c06b_training_loss_threshold_within_5k_steps(contrast_runs):
    # companion check: 500-example task drops under 0.05 nats/token by 5k steps
    _, _, _, dynamic, _, _ = contrast_runs
    upto_5k = [loss for step, _, loss in dynamic.losses if 4500 <= step <= 5000]
    mean_tail = float(np.mean(upto_5k))
    print(f"  (training loss near step 5k: {mean_tail:.4f})")
    assert mean_tail < 0.05


def test_c07_forgetting_passthrough(contrast_runs):
    cfg, _train_set, _held, dynamic, static, _elapsed = contrast_runs
    reference = build_model(cfg)  # the pre-training frozen backbone
    prompts = synth_dataset("text_only", 20, seed=707)
    v = dynamic.model.vocab
    worst = 0.0
    worst_static = 0.0
    for ex in prompts:
        tokens = [v.BOS] + v.encode(ex.instruction) + [v.SEP]
        before = forward_lm(reference.backbone, tokens).data
        after = forward_lm(dynamic.model.backbone, tokens).data
        worst = max(worst, float(np.abs(after - before).max()))
        engaged = forward_lm(
            static.model.backbone,
            tokens,
            static.model.static_adapter.build_adapter_set(),
        ).data
        worst_static = max(worst_static, float(np.abs(engaged - before).max()))
        T.reset_tape()
    verdict(
        7,
        worst == 0.0 and worst_static > 0.0,
        f"text-only path bitwise equal to the pre-training backbone "
        f"(max delta {worst}); static adapter engaged deviates by "
        f"{worst_static:.3e}",
    )


# ---------------------------------------------------------------- criterion 8

def test_c08_injection_target_ablation(tmp_path):
    data_path = tmp_path / "targets.jsonl"
    save_dataset(str(data_path), synth_dataset("atom_count", 250, seed=8))
    cfg_path = tmp_path / "ablation.cfg"
    cfg_path.write_text("training.steps = 600\nseed = 8\n")
    out_dir = tmp_path / "reports"
    code = cli(
        [
            "ablate", "--kind", "targets", "--config", str(cfg_path),
            "--data", str(data_path), "--out", str(out_dir),
        ]
    )
    assert code == 0
    csv_lines = (out_dir / "ablation_targets.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 6  # header + 5 reports
    header = csv_lines[0].split(",")
    loss_col = header.index("final_train_loss")
    losses = {}
    for line in csv_lines[1:]:
        cells = line.split(",")
        assert cells[2] == "", f"sweep member failed: {line}"
        losses[cells[0]] = float(cells[loss_col])
    ok = losses["targets=qkvof"] <= losses["targets=q"]
    verdict(
        8,
        ok,
        f"targets sweep complete; final training loss qkvof "
        f"{losses['targets=qkvof']:.4f} <= q {losses['targets=q']:.4f}",
    )


# ---------------------------------------------------------------- criterion 9

def test_c09_depth_sweep_deterministic(tmp_path):
    cfg = RunConfig.defaults().with_overrides({"training.steps": 150, "seed": 9})
    dataset = synth_dataset("atom_count", 120, seed=9)
    first = run_ablation("depth", cfg, dataset, out_dir=str(tmp_path))
    second = run_ablation("depth", cfg, dataset)
    names_ok = [r.name for r in first] == ["depth=1", "depth=2", "depth=4"]
    clean = all(r.error is None for r in first)
    deterministic = [r.metrics for r in first] == [r.metrics for r in second]
    complete = all(
        "final_train_loss" in r.metrics and r.example_count > 0 for r in first
    )
    verdict(
        9,
        names_ok and clean and deterministic and complete,
        "depth sweep over N in {1,2,4} complete, error-free, and "
        "bitwise repeatable",
    )


# --------------------------------------------------------------- criterion 10

def test_c10_metric_unit_suite():
    checks = [
        levenshtein("kitten", "sitting") == 3,
        bleu(list("abcdef"), list("abcdef")) == pytest.approx(1.0),
        mae([1.0, 2.0], [1.0, 3.0]) == pytest.approx(0.5),
        tanimoto(fingerprint(parse_smiles("CC(=O)O")), fingerprint(parse_smiles("CC(=O)O"))) == 1.0,
        exact_match("CCO", " CCO ") == 1,
    ]
    rng = np.random.default_rng(10)
    crashes = 0
    for _ in range(10_000):
        raw = bytes(rng.integers(0, 256, size=int(rng.integers(0, 24))).tolist())
        try:
            parse_smiles(raw.decode("latin-1"))
        except SmilesParseError:
            pass
        except Exception:
            crashes += 1
    verdict(
        10,
        all(checks) and crashes == 0,
        f"metric spot values exact; parser fuzz over 10k byte strings, "
        f"{crashes} crashes",
    )


# --------------------------------------------------------------- criterion 11

def test_c11_training_determinism(tmp_path):
    cfg = RunConfig.defaults().with_overrides({"training.steps": 300, "seed": 21})
    dataset = synth_dataset("atom_count", 150, seed=21)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    train(cfg, dataset, checkpoint_path=str(a), log_path=str(tmp_path / "a.csv"))
    train(cfg, dataset, checkpoint_path=str(b), log_path=str(tmp_path / "b.csv"))
    same_ckpt = a.read_bytes() == b.read_bytes()
    same_log = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    verdict(
        11,
        same_ckpt and same_log,
        "two identically seeded runs: checkpoints and loss logs byte-identical",
    )
