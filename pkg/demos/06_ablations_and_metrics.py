"""Ablation drivers and the metric toolbox.

Runs the injection-target sweep at a tiny budget and prints the comparable
reports, then exercises each text metric on hand-checkable inputs.
"""

from mora.config import RunConfig
from mora.data import synth_dataset
from mora.evaluation import reports_to_text, run_ablation
from mora.metrics import bleu, exact_match, levenshtein, mae

cfg = RunConfig.defaults().with_overrides({"training.steps": 150})
dataset = synth_dataset("atom_count", 120, seed=0)

print("injection-target sweep (q -> qkvof), 150 steps each:")
reports = run_ablation("targets", cfg, dataset)
print(reports_to_text(reports))

print("passthrough check (text-only prompts vs the pre-training backbone):")
reports = run_ablation("passthrough", cfg, dataset)
print(reports_to_text(reports))

print("metric spot checks:")
print(f"  levenshtein('kitten', 'sitting') = {levenshtein('kitten', 'sitting')}")
print(f"  exact_match('CCO', ' CCO ')      = {exact_match('CCO', ' CCO ')}")
print(f"  bleu over identical strings      = {bleu(list('abcdef'), list('abcdef')):.3f}")
print(f"  mae([1, 2], [1, 3])              = {mae([1.0, 2.0], [1.0, 3.0])}")
