import numpy as np
import pytest

from volclip.corpus import (
    AbnormalityVocab, Corpus, ReportDoc, StudyRecord, check_split_hygiene,
    load_corpus, parse_label_vector, sample_fraction, training_text,
)
from volclip.errors import CorpusError, ManifestRowError

from conftest import manifest_row, write_manifest_rows


def record(study_id, patient_id, split="train", findings="F.", impression="I."):
    return StudyRecord(study_id, patient_id, "/tmp/none.vol",
                       ReportDoc(findings=findings, impression=impression), split)


class TestLoadCorpus:
    def test_three_rows(self, tmp_path, vocab4):
        rows = [manifest_row(f"S{i}", f"P{i}") for i in range(3)]
        path = write_manifest_rows(tmp_path / "m.jsonl", rows)
        corpus = load_corpus(path, vocab4)
        assert len(corpus) == 3
        assert [r.study_id for r in corpus] == ["S0", "S1", "S2"]

    def test_duplicate_study_id_names_the_id(self, tmp_path, vocab4):
        rows = [manifest_row("S0"), manifest_row("S0")]
        path = write_manifest_rows(tmp_path / "m.jsonl", rows)
        with pytest.raises(CorpusError, match="S0"):
            load_corpus(path, vocab4)

    def test_labels_align_to_18_vocab(self, tmp_path, vocab18):
        labels = ",".join(["1"] + ["0"] * 17)
        rows = [manifest_row("S0", labels=labels)]
        path = write_manifest_rows(tmp_path / "m.jsonl", rows)
        corpus = load_corpus(path, vocab18)
        vec = corpus.get("S0").labels
        assert vec.shape == (18,)
        assert vec[0] == 1 and vec[1:].sum() == 0

    def test_malformed_row_reports_index(self, tmp_path, vocab4):
        path = tmp_path / "m.jsonl"
        with path.open("w") as handle:
            import json
            handle.write(json.dumps(manifest_row("S0")) + "\n")
            handle.write("{not json}\n")
        with pytest.raises(ManifestRowError, match="row 1"):
            load_corpus(path, vocab4)

    def test_label_length_mismatch(self, vocab4):
        with pytest.raises(CorpusError, match="entries"):
            parse_label_vector("1,0", vocab4)

    def test_split_counts(self, tmp_path, vocab4):
        rows = [manifest_row("S0", "P0"), manifest_row("S1", "P1", split="valid")]
        corpus = load_corpus(write_manifest_rows(tmp_path / "m.jsonl", rows), vocab4)
        assert corpus.split_counts() == {"train": 1, "valid": 1}


class TestSplitHygiene:
    def test_single_split_patient_passes(self, vocab4):
        corpus = Corpus([record("S0", "P1"), record("S1", "P2", split="valid")], vocab4)
        assert check_split_hygiene(corpus) == set()

    def test_cross_split_patient_flagged(self, vocab4):
        corpus = Corpus([record("S0", "P1"), record("S1", "P1", split="valid")], vocab4)
        assert check_split_hygiene(corpus) == {"P1"}

    def test_matches_bruteforce_cross_join(self, vocab4):
        rng = np.random.default_rng(7)
        records = []
        for i in range(30):
            patient = f"P{rng.integers(0, 10)}"
            split = "train" if rng.random() < 0.5 else "valid"
            records.append(record(f"S{i}", patient, split=split))
        corpus = Corpus(records, vocab4)
        # oracle: pairwise comparison over every record pair
        expected = set()
        for a in records:
            for b in records:
                if a.patient_id == b.patient_id and a.split != b.split:
                    expected.add(a.patient_id)
        assert check_split_hygiene(corpus) == expected


class TestTrainingText:
    def test_both_concatenates_with_space(self, vocab4):
        r = record("S0", "P0", findings="A.", impression="B.")
        assert training_text(r, "both") == "A. B."

    def test_impression_only(self):
        r = record("S0", "P0", findings="A.", impression="B.")
        assert training_text(r, "impression") == "B."

    def test_empty_selected_section_errors(self):
        r = record("S0", "P0", findings="", impression="B.")
        with pytest.raises(CorpusError):
            training_text(r, "findings")

    def test_unknown_mode_errors(self):
        with pytest.raises(CorpusError):
            training_text(record("S0", "P0"), "technique")


class TestSampleFraction:
    def make_corpus(self, n_patients, vocab):
        return Corpus([record(f"S{i}", f"P{i:04d}") for i in range(n_patients)], vocab)

    def test_full_fraction_is_identity(self, vocab4):
        corpus = self.make_corpus(10, vocab4)
        sub = sample_fraction(corpus, 1.0, seed=3)
        assert [r.study_id for r in sub] == [r.study_id for r in corpus]

    def test_paper_fraction_gives_98_of_1000(self, vocab4):
        corpus = self.make_corpus(1000, vocab4)
        sub = sample_fraction(corpus, 0.098, seed=0)
        assert len(sub.patient_ids()) == 98

    def test_same_seed_same_patients(self, vocab4):
        corpus = self.make_corpus(50, vocab4)
        a = sample_fraction(corpus, 0.3, seed=11)
        b = sample_fraction(corpus, 0.3, seed=11)
        assert a.patient_ids() == b.patient_ids()

    def test_nested_subsets_across_fractions(self, vocab4):
        corpus = self.make_corpus(40, vocab4)
        small = set(sample_fraction(corpus, 0.2, seed=5).patient_ids())
        large = set(sample_fraction(corpus, 0.6, seed=5).patient_ids())
        assert small <= large

    def test_bad_fraction_errors(self, vocab4):
        corpus = self.make_corpus(4, vocab4)
        for fraction in (0.0, -0.1, 1.5):
            with pytest.raises(CorpusError):
                sample_fraction(corpus, fraction, seed=0)

    def test_patient_granularity(self, vocab4):
        records = [record(f"S{i}", f"P{i % 5}") for i in range(20)]
        corpus = Corpus(records, vocab4)
        sub = sample_fraction(corpus, 0.4, seed=2)
        kept = set(sub.patient_ids())
        # every record of a sampled patient is included
        expected = [r.study_id for r in records if r.patient_id in kept]
        assert [r.study_id for r in sub] == expected


class TestVocab:
    def test_duplicate_names_rejected(self):
        with pytest.raises(CorpusError):
            AbnormalityVocab(("a", "a"))

    def test_file_round_trip(self, tmp_path, vocab4):
        path = tmp_path / "vocab.txt"
        vocab4.to_file(path)
        assert AbnormalityVocab.from_file(path).names == vocab4.names
