"""Parsing molecules and inspecting graphs, features, and fingerprints."""

import numpy as np

from mora.metrics import fingerprint, tanimoto
from mora.smiles import (
    adjacency_text,
    atom_features,
    parse_smiles,
    permute_graph,
)

for smiles in ["CCO", "CC(=O)O", "c1ccccc1", "C[N+](C)(C)C"]:
    g = parse_smiles(smiles)
    print(f"--- {smiles}")
    print(adjacency_text(g))

# atom features: element one-hot, degree one-hot, charge, ring flag
g = parse_smiles("C1CC1")
print("\ncyclopropane feature rows (all identical by symmetry):")
print(atom_features(g))

# relabeling the nodes permutes feature rows and nothing else
perm = [2, 0, 1]
print("\npermuted graph equals the original up to row order:",
      np.array_equal(atom_features(permute_graph(g, perm))[perm], atom_features(g)))

# fingerprints hash circular environments; similar molecules overlap more
pairs = [("CCO", "CCO"), ("CCO", "CCN"), ("CCO", "c1ccccc1")]
for a, b in pairs:
    t = tanimoto(fingerprint(parse_smiles(a)), fingerprint(parse_smiles(b)))
    print(f"tanimoto({a}, {b}) = {t:.3f}")
