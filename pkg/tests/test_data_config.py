import json

import numpy as np
import pytest

from mora.config import ConfigurationError, RunConfig
from mora.data import (
    DatasetError,
    TrainingExample,
    load_dataset,
    random_molecule,
    save_dataset,
    synth_dataset,
    synth_pretrain,
)
from mora.smiles import atom_features, parse_smiles


class TestLoadDataset:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("")
        assert load_dataset(str(p)) == []

    def test_single_valid_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text(
            json.dumps(
                {"smiles": "CCO", "instruction": "n?", "answer": "3", "task_tag": "t"}
            )
            + "\n"
        )
        (ex,) = load_dataset(str(p))
        assert ex == TrainingExample("n?", "3", "CCO", "t")

    def test_bad_smiles_cites_line_and_offset(self, tmp_path):
        p = tmp_path / "d.jsonl"
        rows = [
            {"smiles": "C", "instruction": "n?", "answer": "1"},
            {"smiles": "C1CC", "instruction": "n?", "answer": "3"},
        ]
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(DatasetError, match="line 2.*offset 1") as exc:
            load_dataset(str(p))
        assert exc.value.line == 2

    def test_malformed_json_cites_line(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"instruction": "a", "answer": "b"}\n{nope}\n')
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(str(p))

    def test_empty_answer_rejected(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text('{"instruction": "a", "answer": ""}\n')
        with pytest.raises(DatasetError, match="answer"):
            load_dataset(str(p))

    def test_round_trip(self, tmp_path):
        examples = synth_dataset("bond_count", 20, seed=3)
        p = tmp_path / "d.jsonl"
        save_dataset(str(p), examples)
        assert load_dataset(str(p)) == examples


class TestSynthDataset:
    def test_atom_count_answers(self):
        for ex in synth_dataset("atom_count", 30, seed=1):
            assert ex.answer == str(parse_smiles(ex.smiles).n_atoms)
            assert ex.instruction == "How many atoms does this molecule have?"

    def test_bond_count_answers(self):
        for ex in synth_dataset("bond_count", 30, seed=2):
            assert ex.answer == str(parse_smiles(ex.smiles).n_bonds)

    def test_triangle_example_values(self):
        assert parse_smiles("C1CC1").n_bonds == 3
        assert parse_smiles("CCO").n_atoms == 3

    def test_counting_instructions_are_constant(self):
        for task in ("atom_count", "bond_count"):
            instructions = {ex.instruction for ex in synth_dataset(task, 25, seed=4)}
            assert len(instructions) == 1

    def test_graph_copy_answers_are_the_smiles(self):
        for ex in synth_dataset("graph_copy", 10, seed=5):
            assert ex.answer == ex.smiles

    def test_element_presence_consistent(self):
        for ex in synth_dataset("element_presence", 30, seed=6):
            g = parse_smiles(ex.smiles)
            probe = {"nitrogen": "N", "oxygen": "O", "sulfur": "S"}[
                ex.instruction.split("contain ")[1].split("?")[0]
            ]
            expected = "yes" if any(a.element == probe for a in g.atoms) else "no"
            assert ex.answer == expected

    def test_text_only_has_no_smiles(self):
        for ex in synth_dataset("text_only", 10, seed=7):
            assert ex.smiles is None
            assert ex.instruction.endswith(ex.answer)

    def test_determinism(self):
        a = synth_dataset("atom_count", 40, seed=8)
        b = synth_dataset("atom_count", 40, seed=8)
        assert a == b
        c = synth_dataset("atom_count", 40, seed=9)
        assert a != c

    def test_every_molecule_round_trips_through_features(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            s = random_molecule(rng, int(rng.integers(1, 12)))
            f = atom_features(parse_smiles(s))
            assert f.shape[0] >= 1

    def test_atom_counts_span_range(self):
        counts = {
            parse_smiles(ex.smiles).n_atoms
            for ex in synth_dataset("atom_count", 300, seed=11)
        }
        assert counts == set(range(1, 10))

    def test_bad_task_rejected(self):
        with pytest.raises(ValueError, match="unknown task"):
            synth_dataset("nope", 5, seed=0)

    def test_pretrain_corpus_deterministic(self):
        assert synth_pretrain(30, 0) == synth_pretrain(30, 0)


class TestRunConfig:
    def test_defaults_complete(self):
        cfg = RunConfig.defaults()
        assert cfg["mawgen.rank"] == 4
        assert cfg["mawgen.targets"] == "qkvof"
        assert cfg.seed == 0

    def test_paper_preset_records_reference_values(self):
        cfg = RunConfig.defaults("paper")
        assert cfg["mawgen.blocks"] == 8
        assert cfg["mawgen.queries"] == 4
        assert cfg["mawgen.rank"] == 64
        assert cfg["mawgen.alpha"] == 64.0
        assert cfg["training.lr"] == 2e-5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown config key"):
            RunConfig.defaults().with_overrides({"mawgen.rnak": 4})

    def test_file_parsing_with_comments(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(
            "# a comment\n"
            "mawgen.rank = 8   # trailing comment\n"
            "training.lr = 1e-3\n"
            "encoder.trainable = true\n"
            "\n"
        )
        cfg = RunConfig.from_file(str(p))
        assert cfg["mawgen.rank"] == 8
        assert cfg["training.lr"] == 1e-3
        assert cfg["encoder.trainable"] is True

    def test_file_unknown_key_cites_line(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("mawgen.rank = 8\nbogus.key = 1\n")
        with pytest.raises(ConfigurationError, match=":2.*bogus.key"):
            RunConfig.from_file(str(p))

    def test_file_bad_value_type(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("mawgen.rank = smol\n")
        with pytest.raises(ConfigurationError, match="expected int"):
            RunConfig.from_file(str(p))

    def test_preset_key_in_file_selects_base(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("preset = paper\nmawgen.rank = 16\n")
        cfg = RunConfig.from_file(str(p))
        assert cfg["mawgen.blocks"] == 8  # from the paper base
        assert cfg["mawgen.rank"] == 16  # file override wins

    def test_env_seed_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MORA_SEED", "777")
        assert RunConfig.defaults().with_env_seed().seed == 777
        monkeypatch.setenv("MORA_SEED", "x")
        with pytest.raises(ConfigurationError, match="MORA_SEED"):
            RunConfig.defaults().with_env_seed()

    def test_to_text_round_trips(self, tmp_path):
        cfg = RunConfig.defaults().with_overrides({"mawgen.rank": 7})
        p = tmp_path / "c.cfg"
        p.write_text(cfg.to_text())
        assert RunConfig.from_file(str(p)).as_dict() == cfg.as_dict()
