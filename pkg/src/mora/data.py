"""Training examples: JSONL ingestion and synthetic desk-scale tasks.

Each record is (optional SMILES, instruction, answer, task tag). The counting
tasks use one fixed instruction string for every example, so the answer is
recoverable only from the graph; that is what makes the static-versus-dynamic
contrast information-theoretic rather than empirical.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

from mora.smiles import SmilesParseError, parse_smiles

__all__ = [
    "TrainingExample",
    "DatasetError",
    "load_dataset",
    "save_dataset",
    "synth_dataset",
    "synth_pretrain",
    "random_molecule",
    "TASKS",
    "INSTRUCTIONS",
    "rng_for",
]

TASKS = ("atom_count", "bond_count", "element_presence", "graph_copy", "text_only")

INSTRUCTIONS = {
    "atom_count": "How many atoms does this molecule have?",
    "bond_count": "How many bonds does this molecule have?",
    "graph_copy": "Write the SMILES string of this molecule.",
}

_ELEMENTS = ["C", "C", "C", "C", "C", "C", "N", "N", "O", "O", "S", "P", "F", "Cl"]
_PRESENCE_PROBES = {"N": "nitrogen", "O": "oxygen", "S": "sulfur"}


class DatasetError(ValueError):
    """Malformed dataset record; ``line`` is the 1-based JSONL line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class TrainingExample:
    instruction: str
    answer: str
    smiles: str | None = None
    task_tag: str = ""


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Deterministic child generator for a named purpose."""
    return np.random.default_rng(
        np.random.SeedSequence((seed, zlib.crc32(label.encode())))
    )


def load_dataset(path: str) -> list[TrainingExample]:
    """Read JSONL examples, validating structure and any SMILES per line."""
    examples: list[TrainingExample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetError(f"malformed JSON ({err.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise DatasetError("record is not a JSON object", lineno)
            instruction = rec.get("instruction")
            answer = rec.get("answer")
            smiles = rec.get("smiles")
            tag = rec.get("task_tag", "")
            if not isinstance(instruction, str) or not instruction:
                raise DatasetError("missing or empty 'instruction'", lineno)
            if not isinstance(answer, str) or not answer:
                raise DatasetError("missing or empty 'answer'", lineno)
            if smiles is not None:
                if not isinstance(smiles, str):
                    raise DatasetError("'smiles' must be a string or null", lineno)
                try:
                    parse_smiles(smiles)
                except SmilesParseError as err:
                    raise DatasetError(f"bad SMILES: {err}", lineno) from None
            examples.append(TrainingExample(instruction, answer, smiles, str(tag)))
    return examples


def save_dataset(path: str, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(
                json.dumps(
                    {
                        "smiles": ex.smiles,
                        "instruction": ex.instruction,
                        "answer": ex.answer,
                        "task_tag": ex.task_tag,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _atom_token(element: str, charge: int) -> str:
    if charge == 0:
        return element
    sign = "+" if charge > 0 else "-"
    mag = abs(charge)
    return f"[{element}{sign if mag == 1 else sign + str(mag)}]"


_BOND_TOKEN = {1: "", 2: "=", 3: "#"}


def random_molecule(rng: np.random.Generator, n_atoms: int) -> str:
    """Random connected molecule over the supported grammar, as SMILES.

    A random spanning tree plus up to two extra ring-closing edges; bond
    orders and occasional charged bracket atoms keep the corpus diverse.
    """
    elements = [str(rng.choice(_ELEMENTS)) for _ in range(n_atoms)]
    charges = [
        int(rng.choice([1, -1])) if rng.random() < 0.04 and elements[i] in "NO" else 0
        for i in range(n_atoms)
    ]
    parent = [-1] * n_atoms
    children: list[list[int]] = [[] for _ in range(n_atoms)]
    order: dict[tuple[int, int], int] = {}
    for i in range(1, n_atoms):
        parent[i] = int(rng.integers(0, i))
        children[parent[i]].append(i)
        order[(parent[i], i)] = int(rng.choice([1, 1, 1, 1, 1, 1, 2, 3]))
    edge_keys = {(min(a, b), max(a, b)) for (a, b) in order}
    ring_marks: list[list[tuple[int, int]]] = [[] for _ in range(n_atoms)]
    if n_atoms >= 3:
        digit = 1
        for _ in range(2):
            if rng.random() < 0.3 and digit <= 9:
                i, j = sorted(rng.choice(n_atoms, size=2, replace=False))
                if (i, j) not in edge_keys:
                    edge_keys.add((i, j))
                    ring_marks[i].append((digit, int(rng.choice([1, 1, 1, 2]))))
                    ring_marks[j].append((digit, 0))  # order emitted once
                    digit += 1

    def emit(node: int) -> str:
        s = _atom_token(elements[node], charges[node])
        for digit, bond_order in ring_marks[node]:
            s += _BOND_TOKEN.get(bond_order, "") + str(digit)
        kids = children[node]
        for idx, child in enumerate(kids):
            sub = _BOND_TOKEN[order[(node, child)]] + emit(child)
            s += f"({sub})" if idx < len(kids) - 1 else sub
        return s

    return emit(0)


def synth_dataset(
    task: str, n: int, seed: int, max_atoms: int = 9
) -> list[TrainingExample]:
    """Deterministic synthetic examples for one task."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {TASKS}")
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = rng_for(seed, f"synth.{task}")
    examples = []
    for _ in range(n):
        if task == "text_only":
            word = "".join(
                chr(int(c)) for c in rng.integers(ord("a"), ord("z") + 1, size=int(rng.integers(3, 9)))
            )
            examples.append(
                TrainingExample(f"Repeat exactly: {word}", word, None, task)
            )
            continue
        n_atoms = int(rng.integers(1, max_atoms + 1))
        smiles = random_molecule(rng, n_atoms)
        g = parse_smiles(smiles)
        if task == "atom_count":
            ex = TrainingExample(INSTRUCTIONS[task], str(g.n_atoms), smiles, task)
        elif task == "bond_count":
            ex = TrainingExample(INSTRUCTIONS[task], str(g.n_bonds), smiles, task)
        elif task == "graph_copy":
            ex = TrainingExample(INSTRUCTIONS[task], smiles, smiles, task)
        else:  # element_presence
            probe = str(rng.choice(sorted(_PRESENCE_PROBES)))
            present = any(a.element == probe for a in g.atoms)
            ex = TrainingExample(
                f"Does this molecule contain {_PRESENCE_PROBES[probe]}? Answer yes or no.",
                "yes" if present else "no",
                smiles,
                task,
            )
        examples.append(ex)
    return examples


def synth_pretrain(n: int, seed: int) -> list[TrainingExample]:
    """Format-teaching corpus: real instructions, answers drawn independently.

    Because the answers are unconditioned, pretraining on this corpus can
    teach the prompt format but cannot leak any graph-to-answer mapping.
    """
    rng = rng_for(seed, "pretrain")
    pool = [INSTRUCTIONS["atom_count"], INSTRUCTIONS["bond_count"]]
    examples = []
    for _ in range(n):
        kind = rng.random()
        if kind < 0.6:
            instruction = pool[int(rng.integers(0, len(pool)))]
            answer = str(int(rng.integers(1, 10)))
        elif kind < 0.8:
            instruction = "Does this molecule contain oxygen? Answer yes or no."
            answer = "yes" if rng.random() < 0.5 else "no"
        else:
            word = "".join(
                chr(int(c)) for c in rng.integers(ord("a"), ord("z") + 1, size=5)
            )
            instruction = f"Repeat exactly: {word}"
            answer = word
        examples.append(TrainingExample(instruction, answer, None, "pretrain"))
    return examples
