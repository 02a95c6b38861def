"""From a molecule to injected weights, step by step.

Shows the three stages of the pipeline: encode the graph into node
embeddings, distill them into query vectors, and project each query into a
low-rank update. Also demonstrates the two structural guarantees: a fresh
(zero-initialized) generator changes nothing, and the injected matrices
have rank at most r.
"""

import numpy as np

from mora.backbone import forward_lm
from mora.config import RunConfig
from mora.smiles import parse_smiles, permute_graph
from mora.training import build_model

cfg = RunConfig.defaults()
model = build_model(cfg)

g = parse_smiles("CC(=O)O")
h = model.node_embeddings("CC(=O)O")
print(f"node embeddings: {h.shape} for {g.n_atoms} atoms")

adapters = model.adapters_for("CC(=O)O")
print(f"adapter set: {len(adapters)} (layer, component) entries")

# zero-init identity: the adapted forward equals the frozen forward exactly
v = model.vocab
tokens = [v.BOS] + v.encode("How many atoms does this molecule have?") + [v.SEP]
frozen = forward_lm(model.backbone, tokens).data
adapted = forward_lm(model.backbone, tokens, adapters).data
print(f"fresh generator, max |adapted - frozen| = {np.abs(adapted - frozen).max():.1e}")

# randomize the projection heads to see non-trivial updates
rng = np.random.default_rng(1)
for head in model.generator.heads.values():
    head.w_fc.data[...] = rng.standard_normal(head.w_fc.shape) * 0.1

update = model.adapters_for("CC(=O)O").get(0, "q")
dense = update.materialize()
s = np.linalg.svd(dense, compute_uv=False)
print(f"materialized q-update: shape {dense.shape}, "
      f"sigma_r+1 / sigma_1 = {s[update.rank] / s[0]:.1e} (rank <= {update.rank})")

# isomorphic inputs produce the same adapters; different molecules do not
perm = list(np.random.default_rng(2).permutation(g.n_atoms))
from mora.generator import generate_adapter_set
from mora.encoder import encode_graph

same = generate_adapter_set(encode_graph(permute_graph(g, perm), model.encoder), model.generator)
other = model.adapters_for("C1CC1N")
print("permuted molecule, max entry difference:",
      f"{np.abs(same.get(0, 'q').materialize() - dense).max():.1e}")
print("different molecule, max entry difference:",
      f"{np.abs(other.get(0, 'q').materialize() - dense).max():.3f}")
