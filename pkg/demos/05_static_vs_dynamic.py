"""Why per-instance weights matter: the counting task with one instruction.

Every example uses the identical instruction string, so the answer is
recoverable only from the molecular graph. A static adapter sees the same
prompt for every molecule and can at best learn the marginal answer
distribution; the instance-specific generator routes graph information into
the weights themselves. The gap in held-out answer cross-entropy makes the
contrast visible even at a small budget.
"""

import math

from mora.config import RunConfig
from mora.data import synth_dataset
from mora.evaluation import evaluate
from mora.training import static_lora_train, train

cfg = RunConfig.defaults().with_overrides({"training.steps": 800})
train_set = synth_dataset("atom_count", 400, seed=0)
held_out = synth_dataset("atom_count", 60, seed=5150)

dynamic = train(cfg, train_set)
static = static_lora_train(cfg, train_set)

dyn = evaluate(dynamic.model, held_out, name="instance_specific", max_new=4)
sta = evaluate(static.model, held_out, name="static_task_oriented", max_new=4)

print(f"answers are uniform over 1..9, so ln 9 = {math.log(9):.3f} nats is the")
print("best any input-blind predictor can do on the answer token.\n")
for rep in (dyn, sta):
    print(f"{rep.name:22} exact_match {rep.metrics['exact_match']:.3f}   "
          f"answer_ce {rep.metrics['answer_ce']:.3f} nats")

print("\nthe frozen backbone itself is untouched by either run: the")
print("text-only path stays bitwise identical (see demos/06 and the")
print("passthrough ablation).")
