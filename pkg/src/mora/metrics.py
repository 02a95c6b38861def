"""Generation metrics and a simplified circular-environment fingerprint.

Exact match compares whitespace-stripped strings literally (no SMILES
canonicalization; the synthetic datasets emit answers in a fixed normal
form, so the metric is fair). BLEU is sentence-level with add-one smoothing
on the n>1 precisions and brevity penalty min(1, e^(1 - len(ref)/len(pred)));
orders longer than the prediction are dropped. Fingerprints hash iteratively
refined atom environment labels into a fixed-width bit set, which makes
Tanimoto similarity permutation-invariant by construction.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from mora.smiles import MolecularGraph

__all__ = [
    "exact_match",
    "levenshtein",
    "bleu",
    "mae",
    "Fingerprint",
    "fingerprint",
    "environment_labels",
    "tanimoto",
]


def exact_match(pred: str, gold: str) -> int:
    """1 iff the stripped strings are identical."""
    return int(pred.strip() == gold.strip())


def levenshtein(a: str, b: str) -> int:
    """Minimum single-character insertions, deletions, and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def _ngram_counts(tokens, n):
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        key = tuple(tokens[i : i + n])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu(pred, ref, max_n: int = 4) -> float:
    """Sentence BLEU of one prediction against one reference token list."""
    pred, ref = list(pred), list(ref)
    if not pred or not ref:
        return 0.0
    log_sum = 0.0
    used = 0
    for n in range(1, min(max_n, len(pred)) + 1):
        pc = _ngram_counts(pred, n)
        rc = _ngram_counts(ref, n)
        clipped = sum(min(c, rc.get(k, 0)) for k, c in pc.items())
        total = sum(pc.values())
        if n == 1:
            if clipped == 0:
                return 0.0
            p = clipped / total
        else:
            p = (clipped + 1.0) / (total + 1.0)
        log_sum += math.log(p)
        used += 1
    brevity = min(1.0, math.exp(1.0 - len(ref) / len(pred)))
    return brevity * math.exp(log_sum / used)


def mae(preds, golds) -> float:
    """Mean absolute error over paired real values."""
    preds, golds = list(preds), list(golds)
    if not preds or len(preds) != len(golds):
        raise ValueError(
            f"mae needs equal non-empty lists, got {len(preds)} and {len(golds)}"
        )
    return sum(abs(p - g) for p, g in zip(preds, golds)) / len(preds)


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width bit set of hashed circular atom environments."""

    bits: frozenset[int]
    n_bits: int


def environment_labels(g: MolecularGraph, radius: int) -> list[str]:
    """Canonical environment label per (atom, radius <= requested).

    Radius-0 labels combine element, charge, degree, and ring flag; each
    refinement hashes the previous label with the sorted multiset of
    (bond order, neighbor label) pairs, so labels never depend on node order.
    """
    adj = g.neighbors()
    labels = [
        f"{a.element}|{a.charge}|{len(adj[i])}|{int(a.in_ring)}"
        for i, a in enumerate(g.atoms)
    ]
    out = list(labels)
    for _ in range(radius):
        refined = []
        for i in range(g.n_atoms):
            nbrs = sorted(f"{order}:{labels[j]}" for j, order in adj[i])
            combined = labels[i] + "[" + ",".join(nbrs) + "]"
            refined.append(hashlib.sha256(combined.encode()).hexdigest()[:16])
        labels = refined
        out.extend(labels)
    return out


def fingerprint(g: MolecularGraph, n_bits: int = 256, radius: int = 2) -> Fingerprint:
    bits = {
        int(hashlib.sha256(label.encode()).hexdigest(), 16) % n_bits
        for label in environment_labels(g, radius)
    }
    return Fingerprint(bits=frozenset(bits), n_bits=n_bits)


def tanimoto(fp1: Fingerprint, fp2: Fingerprint) -> float:
    """|intersection| / |union| over set bits; two empty sets count as 1."""
    if fp1.n_bits != fp2.n_bits:
        raise ValueError(
            f"fingerprint widths differ: {fp1.n_bits} vs {fp2.n_bits}"
        )
    union = fp1.bits | fp2.bits
    if not union:
        return 1.0
    return len(fp1.bits & fp2.bits) / len(union)
