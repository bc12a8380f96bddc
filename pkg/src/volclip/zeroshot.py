"""Zero-shot multi-abnormality detection from paired positive/negative
prompts, plus the prompt-engineering sweep.

Templates live in a data file (id, positive_form, negative_form with one
{abnormality} slot each); adding a template requires no code change.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .corpus import AbnormalityVocab
from .errors import PromptError
from . import stats

SLOT = "{abnormality}"

TextEncoderFn = Callable[[str], np.ndarray]


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    positive_form: str
    negative_form: str

    def __post_init__(self):
        for form in (self.positive_form, self.negative_form):
            if form.count(SLOT) != 1:
                raise PromptError(
                    f"template {self.id}: each form needs exactly one {SLOT} slot"
                )


@dataclass(frozen=True)
class PromptPair:
    abnormality: str
    positive: str
    negative: str
    template_id: int

    def __post_init__(self):
        if self.positive == self.negative:
            raise PromptError(f"{self.abnormality}: positive and negative prompts equal")

    def swapped(self) -> "PromptPair":
        return PromptPair(self.abnormality, self.negative, self.positive, self.template_id)


def load_templates(path=None) -> Dict[int, PromptTemplate]:
    """Templates keyed by id; defaults to the packaged seven."""
    if path is None:
        raw = resources.files("volclip.data").joinpath("templates.json").read_text()
    else:
        raw = Path(path).read_text()
    templates = {}
    for entry in json.loads(raw):
        t = PromptTemplate(int(entry["id"]), entry["positive_form"], entry["negative_form"])
        if t.id in templates:
            raise PromptError(f"duplicate template id {t.id}")
        templates[t.id] = t
    return templates


def template_by_id(templates: Dict[int, PromptTemplate], template_id: int) -> PromptTemplate:
    try:
        return templates[template_id]
    except KeyError:
        raise PromptError(
            f"unknown template id {template_id}; have {sorted(templates)}"
        ) from None


def _fill(pattern: str, abnormality: str) -> str:
    # sentence-case: capitalize the name when it opens the sentence,
    # lowercase it mid-sentence
    name = abnormality.lower()
    if pattern.startswith(SLOT):
        name = name[:1].upper() + name[1:]
    return pattern.replace(SLOT, name)


def build_prompts(abnormality: str, template: PromptTemplate) -> PromptPair:
    return PromptPair(
        abnormality=abnormality,
        positive=_fill(template.positive_form, abnormality),
        negative=_fill(template.negative_form, abnormality),
        template_id=template.id,
    )


_ALMOST_ONE = math.nextafter(1.0, 0.0)


def positive_probability(logit_pos: float, logit_neg: float) -> float:
    """Softmax over the two logits, keeping the positive entry.

    Computed so that swapping the logits yields exactly the complement: the
    negative-gap branch returns 1 - p of the positive gap, which is exact
    for p in [0.5, 1]. Saturated gaps clamp one ulp inside 1 so the result
    stays in the open interval (0, 1).
    """
    gap = logit_pos - logit_neg
    if gap >= 0:
        return min(1.0 / (1.0 + math.exp(-gap)), _ALMOST_ONE)
    return 1.0 - positive_probability(logit_neg, logit_pos)


def detect_one(volume_embedding, pair: PromptPair, text_encoder: TextEncoderFn,
               temperature: float = 1.0) -> float:
    """Presence probability for one abnormality from its prompt pair."""
    from .encoders import cosine_similarity

    if temperature <= 0:
        raise PromptError(f"temperature must be positive, got {temperature}")
    pos_emb = text_encoder(pair.positive)
    neg_emb = text_encoder(pair.negative)
    logit_pos = cosine_similarity(volume_embedding, pos_emb) / temperature
    logit_neg = cosine_similarity(volume_embedding, neg_emb) / temperature
    return positive_probability(logit_pos, logit_neg)


def detect_all(volume_embedding, vocab: AbnormalityVocab, template: PromptTemplate,
               text_encoder: TextEncoderFn, temperature: float = 1.0) -> np.ndarray:
    """Independent per-abnormality probabilities (multi-label: no
    cross-label normalization)."""
    probs = np.empty(vocab.size, dtype=np.float64)
    for i, name in enumerate(vocab.names):
        pair = build_prompts(name, template)
        probs[i] = detect_one(volume_embedding, pair, text_encoder, temperature)
    return probs


def embed_prompt_bank(vocab: AbnormalityVocab, template: PromptTemplate,
                      text_encoder: TextEncoderFn):
    """Positive and negative prompt embeddings, one row per abnormality."""
    pos, neg = [], []
    for name in vocab.names:
        pair = build_prompts(name, template)
        pos.append(np.asarray(text_encoder(pair.positive), dtype=np.float64))
        neg.append(np.asarray(text_encoder(pair.negative), dtype=np.float64))
    return np.stack(pos), np.stack(neg)


def detect_matrix(volume_embeddings: np.ndarray, pos_bank: np.ndarray,
                  neg_bank: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """(N, D) volume embeddings x (V, D) prompt banks -> (N, V) probabilities."""
    v = volume_embeddings / np.linalg.norm(volume_embeddings, axis=1, keepdims=True)
    p = pos_bank / np.linalg.norm(pos_bank, axis=1, keepdims=True)
    n = neg_bank / np.linalg.norm(neg_bank, axis=1, keepdims=True)
    logit_pos = v @ p.T / temperature
    logit_neg = v @ n.T / temperature
    out = np.empty_like(logit_pos)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = positive_probability(logit_pos[i, j], logit_neg[i, j])
    return out


def make_text_encoder(model, tokenizer, max_len: Optional[int] = None) -> TextEncoderFn:
    """Caching closure: prompt text -> shared-space embedding array."""
    from .encoders import encode_text

    limit = max_len or model.text.cfg.max_len
    cache: dict = {}

    def encoder(text: str) -> np.ndarray:
        if text not in cache:
            cache[text] = encode_text(model, tokenizer.encode(text, limit)).values
        return cache[text]

    return encoder


def prompt_sweep(volume_embeddings: np.ndarray, truths: np.ndarray,
                 vocab: AbnormalityVocab, templates: Dict[int, PromptTemplate],
                 text_encoder: TextEncoderFn, temperature: float = 1.0,
                 threshold_method: str = "corner") -> list:
    """Evaluate every template on a labeled validation set.

    Returns one row per template with mean AUROC/F1/accuracy/precision;
    the best row (by mean accuracy, the selection rule used downstream)
    carries best=True.
    """
    truths = np.asarray(truths, dtype=np.float64)
    rows = []
    for tid in sorted(templates):
        template = templates[tid]
        pos_bank, neg_bank = embed_prompt_bank(vocab, template, text_encoder)
        probs = detect_matrix(volume_embeddings, pos_bank, neg_bank, temperature)
        pred = stats.ScoredPredictions(vocab.names, probs.T, truths.T,
                                       model_tag=f"template_{tid}")
        report = stats.compute_report(pred, bootstrap_iterations=0)
        rows.append({
            "template_id": tid,
            "positive_form": template.positive_form,
            "negative_form": template.negative_form,
            "mean_auroc": report.means["auroc"],
            "mean_f1": report.means["f1"],
            "mean_accuracy": report.means["accuracy"],
            "mean_precision": report.means["precision"],
            "best": False,
        })
    best = max(rows, key=lambda r: r["mean_accuracy"])
    best["best"] = True
    return rows
