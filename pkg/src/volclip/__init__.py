"""volclip: contrastive volume-language pretraining for chest CT at desk
scale, with zero-shot multi-abnormality detection, two fine-tuning regimes,
embedding retrieval, and a full evaluation/statistics stack."""

__version__ = "0.1.0"
