import math

import numpy as np
import pytest
import torch

from volclip.corpus import AbnormalityVocab
from volclip.errors import TrainingError
from volclip.finetune import (
    FinetuneConfig, LiProHead, PromptLogitHead, VocabFineState, lipro_forward,
    lipro_train, set_trainable, targets_to_labels, vocabfine_step,
    vocabfine_targets, vocabfine_train,
)
from volclip.stats import auroc
from volclip.tokenizer import WordTokenizer
from volclip.training import PairDataset
from volclip.zeroshot import load_templates, template_by_id

from conftest import make_tiny_model


class TestVocabFineTargets:
    def test_true_maps_to_one_zero(self):
        np.testing.assert_array_equal(vocabfine_targets([1, 0]), [1, 0, 0, 1])

    def test_all_ones_alternate(self):
        np.testing.assert_array_equal(
            vocabfine_targets([1, 1, 1]), [1, 0, 1, 0, 1, 0])

    def test_bijection_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            labels = (rng.random(18) < 0.5).astype(float)
            np.testing.assert_array_equal(
                targets_to_labels(vocabfine_targets(labels)), labels)

    def test_non_binary_rejected(self):
        with pytest.raises(TrainingError):
            vocabfine_targets([0.5, 1.0])

    def test_inverse_validates_structure(self):
        with pytest.raises(TrainingError):
            targets_to_labels([1, 1, 0, 1])


def bce_oracle(logits, targets):
    total = 0.0
    for x, y in zip(logits, targets):
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(logits)


class TestBCEOracle:
    def test_torch_bce_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(scale=2.0, size=36)
        targets = (rng.random(36) < 0.5).astype(float)
        expected = bce_oracle(logits, targets)
        got = torch.nn.functional.binary_cross_entropy_with_logits(
            torch.tensor(logits), torch.tensor(targets), reduction="mean")
        assert float(got) == pytest.approx(expected, abs=1e-6)

    def test_saturated_logits_drive_bce_to_zero(self):
        targets = np.array([1.0, 0.0, 1.0, 0.0])
        logits = np.array([30.0, -30.0, 30.0, -30.0])
        got = torch.nn.functional.binary_cross_entropy_with_logits(
            torch.tensor(logits), torch.tensor(targets))
        assert float(got) == pytest.approx(0.0, abs=1e-9)


def build_vocabfine(vocab, seed=0, chunk_size=12, chunk_step_mode="accumulate",
                    scope="all", lr=1e-3, optimizer_cls=torch.optim.SGD):
    texts = [f"{n} is seen" for n in vocab.names] + [f"no {n}" for n in vocab.names]
    tok = WordTokenizer.train(texts)
    model = make_tiny_model(vocab_size=tok.vocab_size, seed=seed, max_len=16)
    template = template_by_id(load_templates(), 1)
    head = PromptLogitHead(model, tok, vocab, template, max_len=16)
    cfg = FinetuneConfig(chunk_size=chunk_size, chunk_step_mode=chunk_step_mode,
                         train_scope=scope, learning_rate=lr)
    frozen = set_trainable(model, scope)
    params = [p for p in model.parameters() if p.requires_grad]
    state = VocabFineState(head, optimizer_cls(params, lr=lr), cfg)
    return model, state, frozen


class TestVocabFineStep:
    def test_v18_gives_36_logits_in_3_chunks(self, vocab18):
        model, state, _ = build_vocabfine(vocab18)
        volumes = torch.zeros(2, 48, 48, 24)
        labels = np.zeros((2, 18))
        labels[:, 0] = 1
        logits = state.head.logits(volumes)
        assert logits.shape == (2, 36)
        assert 36 // state.cfg.chunk_size == 3
        loss = vocabfine_step(volumes, labels, state)
        assert math.isfinite(loss)

    def test_chunk_size_must_divide(self, vocab4):
        model, state, _ = build_vocabfine(vocab4, chunk_size=3)
        with pytest.raises(TrainingError, match="chunk"):
            vocabfine_step(torch.zeros(1, 48, 48, 24), np.array([[1, 0, 1, 0]]), state)

    def test_chunked_accumulate_equals_unchunked(self, vocab4):
        # chunk 2 vs single chunk 8 under SGD: identical updated weights
        rng = np.random.default_rng(2)
        volumes = torch.from_numpy(rng.uniform(-1, 1, (2, 48, 48, 24)).astype(np.float32))
        labels = np.array([[1, 0, 1, 0], [0, 1, 0, 0]], dtype=float)
        states = []
        for chunk in (2, 8):
            model, state, _ = build_vocabfine(vocab4, seed=5, chunk_size=chunk)
            vocabfine_step(volumes, labels, state)
            states.append({k: v.clone() for k, v in model.state_dict().items()})
        for key in states[0]:
            torch.testing.assert_close(states[0][key], states[1][key],
                                       atol=1e-6, rtol=1e-5)

    def test_per_chunk_mode_differs_but_runs(self, vocab4):
        rng = np.random.default_rng(3)
        volumes = torch.from_numpy(rng.uniform(-1, 1, (1, 48, 48, 24)).astype(np.float32))
        labels = np.array([[1, 0, 0, 1]], dtype=float)
        model, state, _ = build_vocabfine(vocab4, seed=6, chunk_size=2,
                                          chunk_step_mode="per_chunk", lr=0.05)
        loss = vocabfine_step(volumes, labels, state)
        assert math.isfinite(loss)

    def test_projections_only_freezes_towers(self, vocab4):
        model, state, frozen = build_vocabfine(vocab4, scope="projections_only",
                                               lr=0.1, chunk_size=2)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        rng = np.random.default_rng(4)
        volumes = torch.from_numpy(rng.uniform(-1, 1, (2, 48, 48, 24)).astype(np.float32))
        vocabfine_step(volumes, np.array([[1, 0, 1, 0], [0, 1, 1, 1]], dtype=float), state)
        assert frozen  # something was actually frozen
        changed = 0
        for name, value in model.state_dict().items():
            if name in frozen:
                assert torch.equal(value, before[name]), name
            elif not torch.equal(value, before[name]):
                changed += 1
        assert changed > 0


class TestVocabFineTrain:
    def test_loss_decreases_on_tiny_set(self, vocab4):
        texts = [f"{n} is seen" for n in vocab4.names] + [f"no {n}" for n in vocab4.names]
        tok = WordTokenizer.train(texts)
        model = make_tiny_model(vocab_size=tok.vocab_size, seed=7, max_len=16)
        rng = np.random.default_rng(7)
        n = 6
        dataset = PairDataset(
            [f"S{i}" for i in range(n)], [f"P{i}" for i in range(n)],
            rng.uniform(-1, 1, (n, 48, 48, 24)).astype(np.float32),
            rng.integers(2, tok.vocab_size, (n, 16)),
            np.ones((n, 16), dtype=np.int64),
            (rng.random((n, 4)) < 0.5).astype(float),
        )
        template = template_by_id(load_templates(), 1)
        cfg = FinetuneConfig(steps=12, batch_size=4, learning_rate=3e-4, seed=7,
                             chunk_size=2)
        history = vocabfine_train(model, tok, vocab4, template, dataset, cfg)
        assert len(history) == 12
        first = np.mean([h["loss"] for h in history[:4]])
        last = np.mean([h["loss"] for h in history[-4:]])
        assert last < first


class TestLiPro:
    def test_zero_head_gives_half(self):
        head = LiProHead(8, 4)
        with torch.no_grad():
            head.linear.weight.zero_()
        probs = lipro_forward(np.ones(8), head)
        np.testing.assert_allclose(probs, 0.5, atol=1e-12)

    def test_v18_head_gives_18_outputs(self):
        head = LiProHead(16, 18)
        probs = lipro_forward(np.random.default_rng(8).normal(size=16), head)
        assert probs.shape == (18,)
        assert np.all((probs > 0) & (probs < 1))

    def test_matches_matrix_by_hand_oracle(self):
        rng = np.random.default_rng(9)
        head = LiProHead(6, 3)
        with torch.no_grad():
            head.linear.weight.copy_(torch.from_numpy(rng.normal(size=(3, 6))).float())
            head.linear.bias.copy_(torch.from_numpy(rng.normal(size=3)).float())
        x = rng.normal(size=6)
        probs = lipro_forward(x, head)
        w, b = head.weight, head.bias
        for i in range(3):
            z = sum(float(w[i, j]) * x[j] for j in range(6)) + float(b[i])
            assert probs[i] == pytest.approx(1.0 / (1.0 + math.exp(-z)), abs=1e-6)

    def test_dim_mismatch_errors(self):
        with pytest.raises(TrainingError):
            lipro_forward(np.ones(5), LiProHead(8, 3))

    def make_separable_dataset(self, model, n=24, seed=10):
        # two volume archetypes (bright sphere vs empty) plus noise give
        # linearly separable embeddings under the frozen tower
        rng = np.random.default_rng(seed)
        vols = np.full((n, 48, 48, 24), -0.9, dtype=np.float32)
        labels = np.zeros((n, 1))
        xs = np.arange(48)[:, None, None]
        ys = np.arange(48)[None, :, None]
        zs = np.arange(24)[None, None, :]
        ball = ((xs - 24) ** 2 + (ys - 24) ** 2 + (2 * (zs - 12)) ** 2) <= 100
        for i in range(n):
            vols[i] += rng.normal(0, 0.02, size=vols[i].shape).astype(np.float32)
            if i % 2 == 0:
                vols[i][ball] = 0.9
                labels[i, 0] = 1
        np.clip(vols, -1.0, 1.0, out=vols)
        return PairDataset(
            [f"S{i}" for i in range(n)], [f"P{i}" for i in range(n)],
            vols, np.ones((n, 4), dtype=np.int64), np.ones((n, 4), dtype=np.int64),
            labels,
        )

    def test_frozen_backbone_bitwise_unchanged(self):
        model = make_tiny_model(seed=11, max_len=16)
        dataset = self.make_separable_dataset(model)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        lipro_train(model, dataset, 1, FinetuneConfig(steps=10, learning_rate=1e-2,
                                                      freeze_backbone=True, seed=11))
        for key, value in model.state_dict().items():
            assert torch.equal(value, before[key]), key

    def test_separable_embeddings_reach_perfect_train_auroc(self):
        model = make_tiny_model(seed=12, max_len=16)
        dataset = self.make_separable_dataset(model, seed=12)
        lipro = lipro_train(model, dataset, 1,
                            FinetuneConfig(steps=200, learning_rate=1e-2,
                                           batch_size=12, freeze_backbone=True,
                                           seed=12))
        probs = lipro.predict_proba(torch.from_numpy(dataset.volumes))
        assert auroc(probs[:, 0], dataset.labels[:, 0]) == pytest.approx(1.0)

    def test_zero_steps_keeps_initial_head(self):
        model = make_tiny_model(seed=13, max_len=16)
        dataset = self.make_separable_dataset(model, seed=13)
        lipro = lipro_train(model, dataset, 1,
                            FinetuneConfig(steps=0, freeze_backbone=True, seed=13))
        fresh = LiProHead(model.shared_dim, 1)
        torch.manual_seed(0)
        assert np.all(np.abs(lipro.head.weight) <= 0.01)
        np.testing.assert_array_equal(lipro.head.bias, np.zeros(1))
        assert fresh.bias.shape == lipro.head.bias.shape

    def test_joint_training_updates_backbone(self):
        model = make_tiny_model(seed=14, max_len=16)
        dataset = self.make_separable_dataset(model, seed=14)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        lipro_train(model, dataset, 1, FinetuneConfig(steps=3, learning_rate=1e-3,
                                                      freeze_backbone=False, seed=14))
        assert any(not torch.equal(v, before[k]) for k, v in model.state_dict().items())
