"""Corpus ingestion: JSON-lines manifests, label vocabularies, split hygiene.

A manifest is one JSON object per line with the fields of StudyRecord
(study_id, patient_id, volume_path, findings, impression,
clinical_information, technique, labels, split). Labels are a
comma-separated 0/1 string aligned to the vocabulary order.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import CorpusError, ManifestRowError

logger = logging.getLogger(__name__)

VALID_SPLITS = ("train", "valid")
TEXT_MODES = ("findings", "impression", "both")


@dataclass(frozen=True)
class AbnormalityVocab:
    """Ordered abnormality names. Order is fixed for the lifetime of a run
    because every logit/label layout depends on it."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise CorpusError("vocabulary names must be unique")
        if not self.names:
            raise CorpusError("vocabulary is empty")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise CorpusError(f"abnormality {name!r} not in vocabulary") from None

    @classmethod
    def from_file(cls, path) -> "AbnormalityVocab":
        """Plain text file, one abnormality name per line."""
        names = [
            line.strip()
            for line in Path(path).read_text().splitlines()
            if line.strip()
        ]
        return cls(tuple(names))

    def to_file(self, path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names))


def parse_label_vector(text: str, vocab: AbnormalityVocab) -> np.ndarray:
    """Comma-separated values in vocab order -> float array of length V."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != vocab.size:
        raise CorpusError(
            f"label vector has {len(parts)} entries, vocabulary has {vocab.size}"
        )
    try:
        values = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise CorpusError(f"non-numeric label entry: {exc}") from None
    if np.any(values < 0) or np.any(values > 1):
        raise CorpusError("label values must lie in [0, 1]")
    return values


def labels_to_text(values: Sequence[float]) -> str:
    return ",".join(str(int(v)) if float(v) in (0.0, 1.0) else repr(float(v)) for v in values)


@dataclass(frozen=True)
class ReportDoc:
    clinical_information: str = ""
    technique: str = ""
    findings: str = ""
    impression: str = ""

    def merged_text(self) -> str:
        """Findings and impression joined; the basis for label extraction."""
        parts = [s for s in (self.findings, self.impression) if s]
        return " ".join(parts)


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    patient_id: str
    volume_path: str
    report: ReportDoc
    split: str
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise CorpusError(
                f"study {self.study_id}: split must be one of {VALID_SPLITS}, got {self.split!r}"
            )


@dataclass
class Corpus:
    """Immutable after load; safe for unrestricted concurrent reads."""

    records: list[StudyRecord]
    vocab: AbnormalityVocab
    manifest_path: Optional[str] = None
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {r.study_id: r for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[StudyRecord]:
        return iter(self.records)

    def get(self, study_id: str) -> StudyRecord:
        try:
            return self._by_id[study_id]
        except KeyError:
            raise CorpusError(f"unknown study_id {study_id!r}") from None

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in VALID_SPLITS}
        for r in self.records:
            counts[r.split] += 1
        return counts

    def subset(self, split: str) -> "Corpus":
        return Corpus(
            [r for r in self.records if r.split == split],
            self.vocab,
            self.manifest_path,
        )

    def patient_ids(self) -> list[str]:
        seen = []
        known = set()
        for r in self.records:
            if r.patient_id not in known:
                known.add(r.patient_id)
                seen.append(r.patient_id)
        return seen


MANIFEST_FIELDS = (
    "study_id",
    "patient_id",
    "volume_path",
    "findings",
    "impression",
    "clinical_information",
    "technique",
    "labels",
    "split",
)


def load_corpus(manifest_path, vocab: AbnormalityVocab) -> Corpus:
    """Parse a JSON-lines manifest into a Corpus.

    Malformed rows raise ManifestRowError naming the 0-based row index;
    duplicate study_ids fail the whole load.
    """
    path = Path(manifest_path)
    records = []
    seen_ids = set()
    with path.open() as handle:
        for row_index, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            try:
                record = _parse_row(line, vocab)
            except ManifestRowError:
                raise
            except (json.JSONDecodeError, CorpusError, KeyError, TypeError) as exc:
                raise ManifestRowError(row_index, str(exc)) from None
            if record.study_id in seen_ids:
                raise CorpusError(
                    f"duplicate study_id {record.study_id!r} at manifest row {row_index}"
                )
            seen_ids.add(record.study_id)
            records.append(record)
    corpus = Corpus(records, vocab, manifest_path=str(path))
    counts = corpus.split_counts()
    logger.info(
        "loaded %d records from %s (train=%d, valid=%d)",
        len(records), path, counts["train"], counts["valid"],
    )
    missing = [r.study_id for r in records if not Path(r.volume_path).exists()]
    if missing:
        logger.warning("%d volume paths not resolvable, e.g. %s", len(missing), missing[:3])
    return corpus


def _parse_row(line: str, vocab: AbnormalityVocab) -> StudyRecord:
    row = json.loads(line)
    if not isinstance(row, dict):
        raise CorpusError("row is not a JSON object")
    for key in ("study_id", "patient_id", "volume_path", "split"):
        if key not in row or not isinstance(row[key], str) or not row[key]:
            raise CorpusError(f"missing or empty field {key!r}")
    report = ReportDoc(
        clinical_information=row.get("clinical_information") or "",
        technique=row.get("technique") or "",
        findings=row.get("findings") or "",
        impression=row.get("impression") or "",
    )
    labels = None
    raw_labels = row.get("labels")
    if raw_labels not in (None, ""):
        labels = parse_label_vector(str(raw_labels), vocab)
    return StudyRecord(
        study_id=row["study_id"],
        patient_id=row["patient_id"],
        volume_path=row["volume_path"],
        report=report,
        split=row["split"],
        labels=labels,
    )


def write_manifest(records: Sequence[dict], path) -> None:
    """Inverse of load_corpus for generators and caching steps."""
    with Path(path).open("w") as handle:
        for row in records:
            handle.write(json.dumps(row) + "\n")


def check_split_hygiene(corpus: Corpus) -> set[str]:
    """Patient ids that appear in both splits. Empty set means pass."""
    by_split: dict[str, set[str]] = {s: set() for s in VALID_SPLITS}
    for record in corpus:
        by_split[record.split].add(record.patient_id)
    return by_split["train"] & by_split["valid"]


def training_text(record: StudyRecord, mode: str = "both") -> str:
    """Report text used for the text tower, per section-ablation mode."""
    if mode not in TEXT_MODES:
        raise CorpusError(f"text mode must be one of {TEXT_MODES}, got {mode!r}")
    if mode == "findings":
        text = record.report.findings
    elif mode == "impression":
        text = record.report.impression
    else:
        parts = [s for s in (record.report.findings, record.report.impression) if s]
        text = " ".join(parts)
    if not text:
        raise CorpusError(
            f"study {record.study_id}: selected report section(s) empty for mode {mode!r}"
        )
    return text


def sample_fraction(corpus: Corpus, fraction: float, seed: int) -> Corpus:
    """Patient-level subsample via the prefix of one seeded permutation.

    Prefix sampling makes the subsets nested across fractions under a fixed
    seed, which the dataset-size ablation relies on.
    """
    if not 0.0 < fraction <= 1.0:
        raise CorpusError(f"fraction must be in (0, 1], got {fraction}")
    patients = sorted(corpus.patient_ids())
    if fraction == 1.0:
        return Corpus(list(corpus.records), corpus.vocab, corpus.manifest_path)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    n_keep = max(1, int(np.floor(fraction * len(patients) + 0.5)))
    keep = {patients[i] for i in order[:n_keep]}
    records = [r for r in corpus.records if r.patient_id in keep]
    return Corpus(records, corpus.vocab, corpus.manifest_path)
