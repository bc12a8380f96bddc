"""Rule-based multi-abnormality label extraction from report text.

The default engine is a negation-aware trigger matcher behind the same
interface a scored classifier would use: a label is 1 iff any trigger (or
grouped source term) appears with no negator in the 5 preceding tokens of
the same sentence; unmentioned conditions are 0. Grouping folds source
terms (left/right mucoid impactions, ground-glass and density-increase
opacities, fissural nodules) onto their canonical labels.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .corpus import AbnormalityVocab, ReportDoc
from .errors import LabelerError

NEGATION_WINDOW = 5

_WORD_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_RE = re.compile(r"[.;!?]")


def words_of(text: str) -> list:
    """Lowercased alphanumeric tokens; hyphens and punctuation are
    boundaries, so 'ground-glass' and 'ground glass' normalize alike."""
    return _WORD_RE.findall(text.lower())


def sentences_of(text: str) -> list:
    return [s for s in _SENTENCE_RE.split(text) if s.strip()]


@dataclass(frozen=True)
class LabelRule:
    abnormality: str
    triggers: tuple
    negators: tuple
    grouping: tuple = ()

    def __post_init__(self):
        if not self.triggers:
            raise LabelerError(f"rule {self.abnormality!r}: triggers must be non-empty")


@dataclass
class RuleSet:
    rules: list
    _term_to_label: Dict[tuple, str] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._term_to_label = {}
        grouped_seen = {}
        for rule in self.rules:
            for term in rule.triggers:
                key = tuple(words_of(term))
                if not key:
                    raise LabelerError(f"rule {rule.abnormality!r}: empty trigger {term!r}")
                self._term_to_label.setdefault(key, rule.abnormality)
            for term in rule.grouping:
                key = tuple(words_of(term))
                if key in grouped_seen and grouped_seen[key] != rule.abnormality:
                    raise LabelerError(
                        f"grouping term {term!r} maps to both "
                        f"{grouped_seen[key]!r} and {rule.abnormality!r}"
                    )
                grouped_seen[key] = rule.abnormality
                self._term_to_label[key] = rule.abnormality

    def canonical_label(self, term: str) -> Optional[str]:
        return self._term_to_label.get(tuple(words_of(term)))

    def term_keys(self) -> list:
        # longest phrases first so overlapping matches prefer the most
        # specific term
        return sorted(self._term_to_label, key=len, reverse=True)

    @classmethod
    def from_file(cls, path=None) -> "RuleSet":
        if path is None:
            raw = resources.files("volclip.data").joinpath("label_rules.json").read_text()
        else:
            raw = Path(path).read_text()
        blob = json.loads(raw)
        negators = tuple(blob.get("negators", ()))
        rules = [
            LabelRule(
                abnormality=entry["abnormality"],
                triggers=tuple(entry["triggers"]),
                negators=tuple(entry.get("negators", negators)),
                grouping=tuple(entry.get("grouping", ())),
            )
            for entry in blob["rules"]
        ]
        return cls(rules)


def _find_hits(tokens: Sequence[str], ruleset: RuleSet) -> list:
    """(term_key, start_index) for every term occurrence in the sentence."""
    hits = []
    n = len(tokens)
    for key in ruleset.term_keys():
        span = len(key)
        for start in range(0, n - span + 1):
            if tuple(tokens[start:start + span]) == key:
                hits.append((key, start))
    return hits


def _negated(tokens: Sequence[str], start: int, negators: Sequence[str]) -> bool:
    window = tokens[max(0, start - NEGATION_WINDOW):start]
    return any(tok in negators for tok in window)


def apply_grouping(raw_term_hits: Sequence[str], ruleset: RuleSet) -> list:
    """Map raw term hits onto canonical label names (identity for plain
    triggers)."""
    labels = []
    for term in raw_term_hits:
        label = ruleset.canonical_label(term)
        if label is not None and label not in labels:
            labels.append(label)
    return labels


def extract_labels(report: ReportDoc, ruleset: RuleSet,
                   vocab: AbnormalityVocab) -> np.ndarray:
    """Binary label vector in vocabulary order from the merged
    findings+impression text."""
    text = report.merged_text()
    if not text.strip():
        raise LabelerError("cannot extract labels from an empty report")
    rule_by_label = {r.abnormality: r for r in ruleset.rules}
    found = set()
    for sentence in sentences_of(text):
        tokens = words_of(sentence)
        for key, start in _find_hits(tokens, ruleset):
            label = ruleset.canonical_label(" ".join(key))
            if label is None or label in found:
                continue
            rule = rule_by_label[label]
            if not _negated(tokens, start, rule.negators):
                found.add(label)
    vector = np.zeros(vocab.size, dtype=np.float64)
    for label in found:
        if label in vocab.names:
            vector[vocab.index(label)] = 1.0
    return vector


def eval_extractor(gold_records: Sequence[dict], ruleset: RuleSet,
                   vocab: AbnormalityVocab) -> dict:
    """Per-abnormality precision/recall/F1 of the extractor against gold
    labels ({"text": ..., "labels": [...]} records)."""
    tp = np.zeros(vocab.size)
    fp = np.zeros(vocab.size)
    fn = np.zeros(vocab.size)
    for record in gold_records:
        gold = np.asarray(record["labels"], dtype=np.float64)
        if gold.shape[0] != vocab.size:
            raise LabelerError(
                f"gold labels have length {gold.shape[0]}, vocabulary has {vocab.size}"
            )
        predicted = extract_labels(ReportDoc(findings=record["text"]), ruleset, vocab)
        tp += (predicted == 1) & (gold == 1)
        fp += (predicted == 1) & (gold == 0)
        fn += (predicted == 0) & (gold == 1)
    scores = {}
    for i, name in enumerate(vocab.names):
        precision = tp[i] / (tp[i] + fp[i]) if (tp[i] + fp[i]) > 0 else 0.0
        recall = tp[i] / (tp[i] + fn[i]) if (tp[i] + fn[i]) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        scores[name] = {"precision": precision, "recall": recall, "f1": f1}
    return scores


def load_gold_records(path) -> list:
    """JSON-lines gold annotations: report text plus binary labels."""
    records = []
    for line_no, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        row = json.loads(line)
        labels = row["labels"]
        if isinstance(labels, str):
            labels = [int(v) for v in labels.split(",")]
        records.append({"text": row["text"], "labels": labels})
    return records
