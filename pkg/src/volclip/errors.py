"""Exception types shared across the toolkit."""


class VolclipError(Exception):
    """Base class for all toolkit errors."""


class CorpusError(VolclipError):
    """Manifest or corpus-level problem (duplicate ids, bad vocab, ...)."""


class ManifestRowError(CorpusError):
    """A single manifest row failed to parse. Carries the 0-based row index."""

    def __init__(self, row_index, message):
        self.row_index = row_index
        super().__init__(f"manifest row {row_index}: {message}")


class VolumeError(VolclipError):
    """Invalid volume data, geometry, or preprocessing state."""


class EncoderError(VolclipError):
    """Tokenizer or encoder contract violation."""


class TrainingError(VolclipError):
    """Training-loop failure (NaN loss, bad config, ...)."""


class PromptError(VolclipError):
    """Unknown template or malformed prompt construction."""


class RetrievalError(VolclipError):
    """Index or query contract violation."""


class MetricsError(VolclipError):
    """Metric undefined for the given inputs (single-class truths, ...)."""


class LabelerError(VolclipError):
    """Rule file or report-labeling failure."""
