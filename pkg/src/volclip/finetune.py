"""The two fine-tuning regimes.

Open-vocabulary fine-tuning: the 2V prompt logits (positive/negative
interleaved per abnormality) are trained with binary cross-entropy against
interleaved targets, with gradients run over 12-element chunks. Chunked
accumulation sums to exactly the unchunked step; a per-chunk-step variant
sits behind ``chunk_step_mode``.

Linear probing: a linear classification head on the volume embedding, with
the backbone frozen or jointly trained.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import AbnormalityVocab
from .encoders import ClipModel, Embedding
from .errors import TrainingError
from .tokenizer import WordTokenizer
from .zeroshot import PromptTemplate, build_prompts

logger = logging.getLogger(__name__)

FREEZE_MODES = ("all", "projections_only")


@dataclass
class FinetuneConfig:
    steps: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    chunk_size: int = 12
    chunk_step_mode: str = "accumulate"  # or "per_chunk"
    train_scope: str = "all"             # vocabfine: or "projections_only"
    freeze_backbone: bool = True         # lipro

    def __post_init__(self):
        if self.chunk_step_mode not in ("accumulate", "per_chunk"):
            raise TrainingError(f"unknown chunk_step_mode {self.chunk_step_mode!r}")
        if self.train_scope not in FREEZE_MODES:
            raise TrainingError(f"train_scope must be one of {FREEZE_MODES}")


def vocabfine_targets(labels) -> np.ndarray:
    """Binary labels (V,) -> interleaved targets (2V,): 1 -> [1,0], 0 -> [0,1]."""
    labels = np.asarray(labels, dtype=np.float64)
    if not np.isin(labels, (0.0, 1.0)).all():
        raise TrainingError("vocabfine targets require binary labels")
    out = np.empty(labels.shape[:-1] + (2 * labels.shape[-1],), dtype=np.float64)
    out[..., 0::2] = labels
    out[..., 1::2] = 1.0 - labels
    return out


def targets_to_labels(targets) -> np.ndarray:
    """Inverse of vocabfine_targets; validates the one-hot pair structure."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape[-1] % 2 != 0:
        raise TrainingError("targets length must be even")
    pos = targets[..., 0::2]
    neg = targets[..., 1::2]
    if not np.all(pos + neg == 1.0) or not np.isin(targets, (0.0, 1.0)).all():
        raise TrainingError("exactly one of (pos, neg) must be 1 per abnormality")
    return pos


def set_trainable(model: ClipModel, scope: str) -> list:
    """Mark which parameter groups train; returns the frozen parameter names.

    "projections_only" leaves only the two latent projection layers
    trainable.
    """
    if scope not in FREEZE_MODES:
        raise TrainingError(f"train scope must be one of {FREEZE_MODES}")
    frozen = []
    for name, param in model.named_parameters():
        trainable = scope == "all" or name.startswith(("vision.proj", "text.proj"))
        param.requires_grad_(trainable)
        if not trainable:
            frozen.append(name)
    return frozen


class PromptLogitHead:
    """Precomputed token arrays for the 2V prompts of one template; produces
    the interleaved [pos_1, neg_1, ...] logit array."""

    def __init__(self, model: ClipModel, tokenizer: WordTokenizer,
                 vocab: AbnormalityVocab, template: PromptTemplate,
                 max_len: Optional[int] = None):
        self.model = model
        self.vocab = vocab
        self.template = template
        limit = max_len or model.text.cfg.max_len
        texts = []
        for name in vocab.names:
            pair = build_prompts(name, template)
            texts.extend([pair.positive, pair.negative])
        encoded = [tokenizer.encode(t, limit) for t in texts]
        self.token_ids = torch.tensor([e.token_ids for e in encoded], dtype=torch.long)
        self.masks = torch.tensor([e.attention_mask for e in encoded], dtype=torch.long)

    def logits(self, volumes: torch.Tensor) -> torch.Tensor:
        """(B, X, Y, Z) -> (B, 2V) temperature-scaled prompt similarities."""
        v = self.model.embed_volumes(volumes)
        t = self.model.embed_texts(self.token_ids, self.masks)
        return self.model.similarity_matrix(v, t)


def _bce_sum(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return nn.functional.binary_cross_entropy_with_logits(
        logits, targets, reduction="sum"
    )


def vocabfine_step(volumes: torch.Tensor, labels, state) -> float:
    """One fine-tuning step; state carries (head, optimizer, cfg).

    The 2V logit array is optimized in chunk_size segments. In "accumulate"
    mode the chunk gradients sum into a single optimizer step (equal to the
    unchunked step); "per_chunk" steps the optimizer after every segment.
    """
    head, optimizer, cfg = state.head, state.optimizer, state.cfg
    if volumes.ndim == 3:
        volumes = volumes.unsqueeze(0)
    targets = torch.as_tensor(vocabfine_targets(labels), dtype=torch.float32)
    if targets.ndim == 1:
        targets = targets.unsqueeze(0)
    width = targets.shape[-1]
    if width % cfg.chunk_size != 0:
        raise TrainingError(
            f"chunk size {cfg.chunk_size} does not divide the {width}-element logit array"
        )
    head.model.train()
    optimizer.zero_grad()
    logits = head.logits(volumes)
    if logits.shape != targets.shape:
        raise TrainingError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    total_elems = targets.numel()
    total = 0.0
    n_chunks = width // cfg.chunk_size
    for c in range(n_chunks):
        sl = slice(c * cfg.chunk_size, (c + 1) * cfg.chunk_size)
        chunk_loss = _bce_sum(logits[:, sl], targets[:, sl]) / total_elems
        if not torch.isfinite(chunk_loss):
            raise TrainingError(f"non-finite vocabfine loss in chunk {c}")
        retain = c < n_chunks - 1
        chunk_loss.backward(retain_graph=retain)
        total += float(chunk_loss.detach())
        if cfg.chunk_step_mode == "per_chunk":
            optimizer.step()
            optimizer.zero_grad()
            if retain:
                # weights changed: recompute the remaining logits
                logits = head.logits(volumes)
    if cfg.chunk_step_mode == "accumulate":
        optimizer.step()
    state.step += 1
    return total


@dataclass
class VocabFineState:
    head: PromptLogitHead
    optimizer: torch.optim.Optimizer
    cfg: FinetuneConfig
    step: int = 0


def vocabfine_train(model: ClipModel, tokenizer: WordTokenizer,
                    vocab: AbnormalityVocab, template: PromptTemplate,
                    dataset, cfg: FinetuneConfig) -> list:
    """Fine-tune on a labeled PairDataset; returns the loss history."""
    if dataset.labels is None:
        raise TrainingError("vocabfine requires labels")
    frozen = set_trainable(model, cfg.train_scope)
    if frozen:
        logger.info("vocabfine frozen groups: %d parameters", len(frozen))
    head = PromptLogitHead(model, tokenizer, vocab, template)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    state = VocabFineState(head, optimizer, cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    history = []
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = dataset.batch(idx)
        labels = dataset.labels[np.asarray(idx)]
        loss = vocabfine_step(batch.volumes, labels, state)
        history.append({"step": state.step, "loss": loss})
    set_trainable(model, "all")  # restore grad flags for downstream use
    return history


class LiProHead(nn.Module):
    """Linear classification layer over the volume embedding."""

    def __init__(self, embed_dim: int, n_labels: int, freeze_backbone: bool = True):
        super().__init__()
        self.linear = nn.Linear(embed_dim, n_labels)
        nn.init.uniform_(self.linear.weight, -0.01, 0.01)
        nn.init.zeros_(self.linear.bias)
        self.freeze_backbone = freeze_backbone

    @property
    def weight(self) -> np.ndarray:
        return self.linear.weight.detach().numpy()

    @property
    def bias(self) -> np.ndarray:
        return self.linear.bias.detach().numpy()

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        return self.linear(embeddings)


def lipro_forward(volume_embedding, head: LiProHead) -> np.ndarray:
    """sigmoid(W v + b) per label; accepts Embedding or array."""
    v = volume_embedding.values if isinstance(volume_embedding, Embedding) \
        else np.asarray(volume_embedding, dtype=np.float64)
    w = head.weight.astype(np.float64)
    b = head.bias.astype(np.float64)
    if v.shape[-1] != w.shape[1]:
        raise TrainingError(
            f"embedding dim {v.shape[-1]} does not match head dim {w.shape[1]}"
        )
    z = v @ w.T + b
    return 1.0 / (1.0 + np.exp(-z))


class LiProModel(nn.Module):
    """Vision tower + linear head; the full probing classifier."""

    def __init__(self, clip: ClipModel, n_labels: int, freeze_backbone: bool = True):
        super().__init__()
        self.clip = clip
        self.head = LiProHead(clip.shared_dim, n_labels, freeze_backbone)

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        emb = self.clip.embed_volumes(volumes)
        if self.head.freeze_backbone:
            emb = emb.detach()
        return self.head(emb)

    def predict_proba(self, volumes: torch.Tensor) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return torch.sigmoid(self.forward(volumes)).numpy()


def lipro_train(model: ClipModel, dataset, n_labels: int, cfg: FinetuneConfig) -> LiProModel:
    """BCE training of the probe; backbone frozen (bitwise) or joint."""
    if dataset.labels is None:
        raise TrainingError("lipro requires labels")
    lipro = LiProModel(model, n_labels, cfg.freeze_backbone)
    if cfg.freeze_backbone:
        for p in lipro.clip.parameters():
            p.requires_grad_(False)
        params = list(lipro.head.parameters())
    else:
        for p in lipro.clip.parameters():
            p.requires_grad_(True)
        params = list(lipro.parameters())
    optimizer = torch.optim.AdamW(params, lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    lipro.train()
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = dataset.batch(idx)
        labels = torch.as_tensor(dataset.labels[np.asarray(idx)], dtype=torch.float32)
        optimizer.zero_grad()
        logits = lipro(batch.volumes)
        loss = nn.functional.binary_cross_entropy_with_logits(logits, labels)
        if not torch.isfinite(loss):
            raise TrainingError("non-finite lipro loss")
        loss.backward()
        optimizer.step()
    if cfg.freeze_backbone:
        for p in lipro.clip.parameters():
            p.requires_grad_(True)
    lipro.eval()
    return lipro
