"""Contrastive pre-training of the two towers, plus the dataset-fraction
ablation driver.

The objective is symmetric InfoNCE over the temperature-scaled cosine
matrix: cross-entropy of each row and each column against the diagonal.
An MSE-to-identity objective is available behind ``loss="mse_identity"``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import volio
from .corpus import Corpus, training_text
from .encoders import ClipModel, save_checkpoint
from .errors import TrainingError
from .tokenizer import WordTokenizer
from .volume import TargetGeometry, preprocess
from .corpus import sample_fraction

logger = logging.getLogger(__name__)


@dataclass
class SimilarityMatrix:
    """n x n matrix with entry (i, j) = cosine(volume_i, text_j) / temperature."""

    values: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.temperature <= 0:
            raise TrainingError(f"temperature must be positive, got {self.temperature}")


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 200
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    fraction: float = 1.0
    text_mode: str = "both"
    accum_steps: int = 1
    temperature_init: float = 0.07
    loss: str = "infonce"
    noise_augment: float = 0.0  # std of fresh per-batch voxel noise
    shift_augment: int = 0      # max |voxels| of random per-sample roll
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.loss not in ("infonce", "mse_identity"):
            raise TrainingError(f"unknown loss {self.loss!r}")


def contrastive_loss(sim) -> torch.Tensor:
    """Symmetric cross-entropy against the diagonal.

    Accepts a SimilarityMatrix, numpy array, or torch tensor; returns a
    scalar tensor (differentiable when the input is a tensor).
    """
    values = sim.values if isinstance(sim, SimilarityMatrix) else sim
    t = values if isinstance(values, torch.Tensor) else torch.as_tensor(
        np.asarray(values, dtype=np.float64)
    )
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise TrainingError(f"similarity matrix must be square, got {tuple(t.shape)}")
    targets = torch.arange(t.shape[0], device=t.device)
    row = torch.nn.functional.cross_entropy(t, targets)
    col = torch.nn.functional.cross_entropy(t.T, targets)
    return (row + col) / 2


def mse_identity_loss(cosines) -> torch.Tensor:
    """Alternate objective: mean squared deviation of the cosine matrix from
    the identity."""
    t = cosines if isinstance(cosines, torch.Tensor) else torch.as_tensor(
        np.asarray(cosines, dtype=np.float64)
    )
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise TrainingError(f"similarity matrix must be square, got {tuple(t.shape)}")
    eye = torch.eye(t.shape[0], dtype=t.dtype, device=t.device)
    return ((t - eye) ** 2).mean()


@dataclass
class PairBatch:
    volumes: torch.Tensor      # (B, X, Y, Z) normalized
    token_ids: torch.Tensor    # (B, L)
    masks: torch.Tensor        # (B, L)
    study_ids: Sequence[str] = ()


@dataclass
class TrainState:
    model: ClipModel
    optimizer: torch.optim.Optimizer
    step: int = 0


def make_state(model: ClipModel, cfg: TrainConfig) -> TrainState:
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    return TrainState(model, optimizer)


def _batch_loss(model: ClipModel, batch: PairBatch, loss_kind: str) -> torch.Tensor:
    v = model.embed_volumes(batch.volumes)
    t = model.embed_texts(batch.token_ids, batch.masks)
    if loss_kind == "mse_identity":
        vn = torch.nn.functional.normalize(v, dim=-1)
        tn = torch.nn.functional.normalize(t, dim=-1)
        return mse_identity_loss(vn @ tn.T)
    return contrastive_loss(model.similarity_matrix(v, t))


def train_step(batch: PairBatch, state: TrainState, loss_kind: str = "infonce",
               micro_batch: Optional[int] = None) -> float:
    """One optimizer step over the batch; mutates state, returns the loss.

    micro_batch enables gradient accumulation so the full-geometry path can
    run with physical batch 1: embeddings are first computed without a
    graph, the loss gradient w.r.t. each embedding is cached, then each
    micro-batch is re-encoded with grad and backpropagated against its
    cached cotangent. The accumulated step equals the full-batch step.
    """
    model = state.model
    model.train()
    state.optimizer.zero_grad()
    n = batch.volumes.shape[0]
    if micro_batch is None or micro_batch >= n:
        loss = _batch_loss(model, batch, loss_kind)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step}; "
                f"batch study_ids={list(batch.study_ids)[:8]}"
            )
        loss.backward()
        total = float(loss.detach())
    else:
        size = max(1, micro_batch)
        with torch.no_grad():
            v_all = torch.cat([
                model.embed_volumes(batch.volumes[s:s + size])
                for s in range(0, n, size)
            ])
            t_all = torch.cat([
                model.embed_texts(batch.token_ids[s:s + size], batch.masks[s:s + size])
                for s in range(0, n, size)
            ])
        v_leaf = v_all.detach().clone().requires_grad_(True)
        t_leaf = t_all.detach().clone().requires_grad_(True)
        if loss_kind == "mse_identity":
            vn = torch.nn.functional.normalize(v_leaf, dim=-1)
            tn = torch.nn.functional.normalize(t_leaf, dim=-1)
            loss = mse_identity_loss(vn @ tn.T)
        else:
            loss = contrastive_loss(model.similarity_matrix(v_leaf, t_leaf))
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step}; "
                f"batch study_ids={list(batch.study_ids)[:8]}"
            )
        loss.backward()  # populates leaf grads and the temperature grad
        for s in range(0, n, size):
            sl = slice(s, min(s + size, n))
            model.embed_volumes(batch.volumes[sl]).backward(v_leaf.grad[sl])
            model.embed_texts(batch.token_ids[sl], batch.masks[sl]).backward(t_leaf.grad[sl])
        total = float(loss.detach())
    state.optimizer.step()
    with torch.no_grad():
        # CLIP-style floor keeps similarity logits bounded
        model.log_temperature.clamp_(min=float(np.log(0.01)))
    state.step += 1
    return total


@dataclass
class PairDataset:
    """Preprocessed, tokenized training pairs held in memory.

    alt_token_ids/alt_masks, when present, hold (N, K, L) sentence-subset
    variants of each report (variant 0 is the full text) for text-side
    augmentation.
    """

    study_ids: list
    patient_ids: list
    volumes: np.ndarray    # (N, X, Y, Z) float32
    token_ids: np.ndarray  # (N, L) int64
    masks: np.ndarray      # (N, L) int64
    labels: Optional[np.ndarray] = None  # (N, V)
    alt_token_ids: Optional[np.ndarray] = None  # (N, K, L)
    alt_masks: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.study_ids)

    @property
    def n_variants(self) -> int:
        return 1 if self.alt_token_ids is None else self.alt_token_ids.shape[1]

    def batch(self, indices, variants=None) -> PairBatch:
        idx = np.asarray(indices)
        if variants is None or self.alt_token_ids is None:
            ids, masks = self.token_ids[idx], self.masks[idx]
        else:
            ks = np.asarray(variants)
            ids = self.alt_token_ids[idx, ks]
            masks = self.alt_masks[idx, ks]
        return PairBatch(
            torch.from_numpy(self.volumes[idx]),
            torch.from_numpy(ids),
            torch.from_numpy(masks),
            [self.study_ids[i] for i in idx],
        )


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def sentence_variants(text: str, n_variants: int, keep_prob: float,
                      rng: np.random.Generator) -> list:
    """Full text first, then random sentence subsets (never empty)."""
    sentences = [s for s in _SENTENCE_SPLIT.split(text) if s.strip()]
    variants = [text]
    for _ in range(max(0, n_variants - 1)):
        if len(sentences) <= 1:
            variants.append(text)
            continue
        keep = rng.random(len(sentences)) < keep_prob
        if not keep.any():
            keep[rng.integers(0, len(sentences))] = True
        variants.append(" ".join(s for s, k in zip(sentences, keep) if k))
    return variants


def build_pair_dataset(corpus: Corpus, tokenizer: WordTokenizer,
                       geometry: TargetGeometry, text_mode: str = "both",
                       max_len: int = 512, text_variants: int = 1,
                       sentence_keep_prob: float = 0.5,
                       variant_seed: int = 0) -> PairDataset:
    """Load, preprocess, and tokenize every record of the corpus.

    text_variants > 1 precomputes sentence-subset tokenizations per report
    so training can sample snippet-level texts (keeps short prompt-style
    inputs in-distribution for the text tower).
    """
    volumes = np.empty((len(corpus), *geometry.shape), dtype=np.float32)
    ids = np.zeros((len(corpus), max_len), dtype=np.int64)
    masks = np.zeros((len(corpus), max_len), dtype=np.int64)
    alt_ids = alt_masks = None
    if text_variants > 1:
        alt_ids = np.zeros((len(corpus), text_variants, max_len), dtype=np.int64)
        alt_masks = np.zeros((len(corpus), text_variants, max_len), dtype=np.int64)
    rng = np.random.default_rng(variant_seed)
    labels = None
    study_ids, patient_ids = [], []
    for i, record in enumerate(corpus):
        grid = volio.load_volume(record.volume_path)
        if grid.unit != "normalized":
            grid = preprocess(grid, geometry)
        if grid.shape != geometry.shape:
            raise TrainingError(
                f"{record.study_id}: cached volume shape {grid.shape} != {geometry.shape}"
            )
        volumes[i] = grid.data
        text = training_text(record, text_mode)
        toks = tokenizer.encode(text, max_len)
        ids[i] = toks.token_ids
        masks[i] = toks.attention_mask
        if alt_ids is not None:
            for k, variant in enumerate(sentence_variants(text, text_variants,
                                                          sentence_keep_prob, rng)):
                vt = tokenizer.encode(variant, max_len)
                alt_ids[i, k] = vt.token_ids
                alt_masks[i, k] = vt.attention_mask
        study_ids.append(record.study_id)
        patient_ids.append(record.patient_id)
        if record.labels is not None:
            if labels is None:
                labels = np.zeros((len(corpus), record.labels.shape[0]))
            labels[i] = record.labels
    return PairDataset(study_ids, patient_ids, volumes, ids, masks, labels,
                       alt_ids, alt_masks)


def fit(model: ClipModel, dataset: PairDataset, cfg: TrainConfig,
        out_dir: Optional[Path] = None, resume: bool = False,
        on_step: Optional[Callable[[int, float], None]] = None) -> list:
    """Single-stream training loop; deterministic under cfg.seed.

    Returns the loss history as a list of {"step", "loss"} dicts and, when
    out_dir is given, appends them to metrics.jsonl and keeps a resumable
    train_state.pt.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    state = make_state(model, cfg)
    start_step = 0
    if resume and out_dir is not None and (Path(out_dir) / "train_state.pt").exists():
        snapshot = torch.load(Path(out_dir) / "train_state.pt", weights_only=False)
        model.load_state_dict(snapshot["model_state"])
        state.optimizer.load_state_dict(snapshot["optimizer_state"])
        start_step = state.step = snapshot["step"]
        logger.info("resumed training at step %d", start_step)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    batch_size = min(cfg.batch_size, n)
    # replay the shuffle stream from step 0 so a resumed run sees the same
    # batch order it would have seen uninterrupted
    order: list = []
    history = []
    metrics_path = Path(out_dir) / "metrics.jsonl" if out_dir is not None else None
    handle = metrics_path.open("a") if metrics_path else None
    try:
        for step in range(cfg.steps):
            while len(order) < batch_size:
                order.extend(rng.permutation(n).tolist())
            indices = order[:batch_size]
            del order[:batch_size]
            variants = None
            if dataset.n_variants > 1:
                variants = rng.integers(0, dataset.n_variants, size=len(indices))
            if step < start_step:
                continue
            batch = dataset.batch(indices, variants)
            if cfg.shift_augment > 0 or cfg.noise_augment > 0:
                # fresh jitter each draw: incidental texture and exact
                # placement cannot be memorized, geometric structure can
                vols = batch.volumes
                if cfg.shift_augment > 0:
                    s = cfg.shift_augment
                    vols = torch.stack([
                        torch.roll(v, shifts=tuple(rng.integers(-s, s + 1, 3)),
                                   dims=(0, 1, 2))
                        for v in vols
                    ])
                if cfg.noise_augment > 0:
                    jitter = rng.normal(0.0, cfg.noise_augment,
                                        size=tuple(vols.shape))
                    vols = (vols + torch.from_numpy(jitter.astype(np.float32)))
                    vols = vols.clamp_(-1.0, 1.0)
                batch = PairBatch(vols, batch.token_ids, batch.masks,
                                  batch.study_ids)
            micro = None if cfg.accum_steps <= 1 else max(1, batch_size // cfg.accum_steps)
            loss = train_step(batch, state, cfg.loss, micro)
            entry = {"step": state.step, "loss": loss}
            history.append(entry)
            if handle:
                handle.write(json.dumps(entry) + "\n")
            if on_step:
                on_step(state.step, loss)
            if cfg.log_every and state.step % cfg.log_every == 0:
                logger.info("step %d loss %.4f", state.step, loss)
    finally:
        if handle:
            handle.close()
    if out_dir is not None:
        torch.save(
            {"model_state": model.state_dict(),
             "optimizer_state": state.optimizer.state_dict(),
             "step": state.step},
            Path(out_dir) / "train_state.pt",
        )
    return history


def run_ablation(corpus: Corpus, fractions: Sequence[float], cfg: TrainConfig,
                 build_model_fn: Callable[[WordTokenizer], ClipModel],
                 tokenizer_fn: Callable[[Corpus], WordTokenizer],
                 geometry: TargetGeometry,
                 evaluate_fn: Optional[Callable[[ClipModel, WordTokenizer], dict]] = None,
                 out_dir: Optional[Path] = None) -> list:
    """Train one model per dataset fraction on nested patient subsets.

    Returns one row per fraction: fraction, patient/record counts, final
    loss, and whatever metrics evaluate_fn reports on the validation split.
    """
    rows = []
    for fraction in fractions:
        sub = sample_fraction(corpus.subset("train"), fraction, cfg.seed)
        tokenizer = tokenizer_fn(sub)
        model = build_model_fn(tokenizer)
        dataset = build_pair_dataset(sub, tokenizer, geometry, cfg.text_mode,
                                     model.text.cfg.max_len)
        frac_dir = None
        if out_dir is not None:
            frac_dir = Path(out_dir) / f"fraction_{fraction:g}"
            frac_dir.mkdir(parents=True, exist_ok=True)
        history = fit(model, dataset, cfg, out_dir=frac_dir)
        row = {
            "fraction": fraction,
            "n_patients": len(sub.patient_ids()),
            "n_records": len(sub),
            "final_loss": history[-1]["loss"] if history else None,
        }
        if evaluate_fn is not None:
            row.update(evaluate_fn(model, tokenizer))
        if frac_dir is not None:
            save_checkpoint(frac_dir / "checkpoint.pt", model, tokenizer,
                            extra={"fraction": fraction, "train_config": asdict(cfg)})
        rows.append(row)
        logger.info("fraction %.3g done: %s", fraction, row)
    if out_dir is not None:
        with (Path(out_dir) / "ablation.json").open("w") as handle:
            json.dump(rows, handle, indent=2)
    return rows
