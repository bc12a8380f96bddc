import math

import numpy as np
import pytest

from volclip.corpus import AbnormalityVocab
from volclip.errors import PromptError
from volclip.zeroshot import (
    PromptPair, PromptTemplate, build_prompts, detect_all, detect_matrix,
    detect_one, embed_prompt_bank, load_templates, positive_probability,
    prompt_sweep, template_by_id,
)


class TestTemplates:
    def test_seven_templates_ship_by_default(self):
        templates = load_templates()
        assert sorted(templates) == [1, 2, 3, 4, 5, 6, 7]

    def test_unknown_id_errors(self):
        with pytest.raises(PromptError, match="8"):
            template_by_id(load_templates(), 8)

    def test_slot_validation(self):
        with pytest.raises(PromptError):
            PromptTemplate(9, "no slot here.", "{abnormality} ok.")
        with pytest.raises(PromptError):
            PromptTemplate(9, "{abnormality} {abnormality}", "{abnormality}")


class TestBuildPrompts:
    def test_bare_name_template(self):
        pair = build_prompts("consolidation", template_by_id(load_templates(), 7))
        assert pair.positive == "Consolidation."
        assert pair.negative == "Not consolidation."

    def test_there_is_template(self):
        pair = build_prompts("consolidation", template_by_id(load_templates(), 3))
        assert pair.positive == "There is consolidation."
        assert pair.negative == "There is no consolidation."

    def test_is_seen_template_capitalizes_leading_slot(self):
        pair = build_prompts("lung nodule", template_by_id(load_templates(), 1))
        assert pair.positive == "Lung nodule is seen."
        assert pair.negative == "Lung nodule is not seen."

    def test_pair_forms_never_equal(self):
        with pytest.raises(PromptError):
            PromptPair("x", "Same.", "Same.", 1)


class TestPositiveProbability:
    def test_equal_logits_give_half(self):
        assert positive_probability(1.3, 1.3) == 0.5

    def test_known_value(self):
        assert positive_probability(2.0, -2.0) == pytest.approx(
            1.0 / (1.0 + math.exp(-4.0)), abs=1e-12)

    def test_swap_complement_is_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            a, b = rng.normal(scale=5.0, size=2)
            assert positive_probability(a, b) + positive_probability(b, a) == 1.0

    def test_monotone_in_positive_logit(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            neg = float(rng.normal(scale=3.0))
            lo = float(rng.normal(scale=3.0))
            hi = lo + float(rng.uniform(0.01, 2.0))
            assert positive_probability(hi, neg) > positive_probability(lo, neg)

    def test_open_interval(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b = rng.normal(scale=20.0, size=2)
            p = positive_probability(a, b)
            assert 0.0 < p < 1.0


def fake_encoder(table):
    return lambda text: np.asarray(table[text], dtype=np.float64)


class TestDetect:
    def pair(self):
        return build_prompts("consolidation", template_by_id(load_templates(), 7))

    def test_identical_prompt_embeddings_give_half(self):
        pair = self.pair()
        enc = fake_encoder({pair.positive: [1.0, 0.0], pair.negative: [1.0, 0.0]})
        assert detect_one(np.array([0.3, 0.7]), pair, enc) == 0.5

    def test_swapped_prompts_complement(self):
        pair = self.pair()
        enc = fake_encoder({pair.positive: [1.0, 0.2], pair.negative: [-0.5, 1.0]})
        v = np.array([0.9, -0.1])
        p = detect_one(v, pair, enc, temperature=0.25)
        q = detect_one(v, pair.swapped(), enc, temperature=0.25)
        assert p + q == 1.0

    def test_temperature_scaling_keeps_decision(self):
        pair = self.pair()
        enc = fake_encoder({pair.positive: [1.0, 0.0], pair.negative: [0.0, 1.0]})
        v = np.array([0.8, 0.1])
        p_hot = detect_one(v, pair, enc, temperature=1.0)
        p_cold = detect_one(v, pair, enc, temperature=0.05)
        assert (p_hot > 0.5) == (p_cold > 0.5)
        assert p_hot != p_cold

    def test_bad_temperature_errors(self):
        with pytest.raises(PromptError):
            detect_one(np.ones(2), self.pair(), fake_encoder({}), temperature=0.0)


class TestDetectAll:
    def setup_bank(self, vocab, seed=0, identical=False):
        rng = np.random.default_rng(seed)
        table = {}
        template = template_by_id(load_templates(), 7)
        for name in vocab.names:
            pair = build_prompts(name, template)
            pos = rng.normal(size=4)
            neg = pos if identical else rng.normal(size=4)
            table[pair.positive] = pos
            table[pair.negative] = neg
        return fake_encoder(table), template

    def test_eighteen_probabilities(self, vocab18):
        enc, template = self.setup_bank(vocab18)
        probs = detect_all(np.random.default_rng(1).normal(size=4), vocab18,
                           template, enc)
        assert probs.shape == (18,)
        assert np.all((probs > 0) & (probs < 1))

    def test_identical_pair_embeddings_all_half(self, vocab18):
        enc, template = self.setup_bank(vocab18, identical=True)
        probs = detect_all(np.ones(4), vocab18, template, enc)
        np.testing.assert_array_equal(probs, 0.5)

    def test_order_invariance(self, vocab4):
        enc, template = self.setup_bank(vocab4, seed=2)
        v = np.random.default_rng(3).normal(size=4)
        probs = detect_all(v, vocab4, template, enc)
        shuffled_vocab = AbnormalityVocab(tuple(reversed(vocab4.names)))
        probs_shuffled = detect_all(v, shuffled_vocab, template, enc)
        for i, name in enumerate(vocab4.names):
            j = shuffled_vocab.index(name)
            assert probs[i] == probs_shuffled[j]

    def test_matrix_matches_per_item_path(self, vocab4):
        enc, template = self.setup_bank(vocab4, seed=4)
        rng = np.random.default_rng(5)
        volumes = rng.normal(size=(3, 4))
        pos, neg = embed_prompt_bank(vocab4, template, enc)
        matrix = detect_matrix(volumes, pos, neg, temperature=0.5)
        for i in range(3):
            per_item = detect_all(volumes[i], vocab4, template, enc, temperature=0.5)
            np.testing.assert_allclose(matrix[i], per_item, atol=1e-12)


class TestPromptSweep:
    def test_seven_rows_and_null_model_near_chance(self, vocab4):
        rng = np.random.default_rng(6)
        templates = load_templates()
        table = {}
        for tid, template in templates.items():
            for name in vocab4.names:
                pair = build_prompts(name, template)
                table.setdefault(pair.positive, rng.normal(size=8))
                table.setdefault(pair.negative, rng.normal(size=8))
        volumes = rng.normal(size=(60, 8))
        truths = (rng.random((60, 4)) < 0.5).astype(float)
        truths[0] = 1  # both classes everywhere
        truths[1] = 0
        rows = prompt_sweep(volumes, truths, vocab4, templates, fake_encoder(table))
        assert len(rows) == 7
        assert sum(r["best"] for r in rows) == 1
        best = max(rows, key=lambda r: r["mean_accuracy"])
        assert best["best"]
        for row in rows:
            assert 0.25 <= row["mean_auroc"] <= 0.75
