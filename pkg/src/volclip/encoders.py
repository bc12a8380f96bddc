"""The two towers.

Vision: 3D patch embedding, learned positional encodings, factorized
attention (spatial within each axial patch group, then across the z-group
axis), all tokens flattened and linearly projected into the shared space.

Text: token + position embeddings, standard transformer blocks with key
padding masks, masked sum over the token span, linear projection into the
shared space.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .errors import EncoderError
from .tokenizer import WordTokenizer, TokenizedText
from .volume import UNIT_NORMALIZED, VolumeGrid

CHECKPOINT_VERSION = 2


@dataclass(frozen=True)
class PatchConfig:
    patch_xyz: Tuple[int, int, int] = (30, 30, 15)
    embed_dim: int = 512
    depth_spatial: int = 4
    depth_temporal: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0


@dataclass(frozen=True)
class TextConfig:
    vocab_size: int
    max_len: int = 512
    embed_dim: int = 768
    depth: int = 4
    heads: int = 8
    mlp_ratio: float = 4.0


@dataclass
class Embedding:
    """Shared-space vector from either tower."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.normalized:
            norm = float(np.linalg.norm(self.values))
            if abs(norm - 1.0) > 1e-6:
                raise EncoderError(f"normalized embedding has norm {norm}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def normalize(self) -> "Embedding":
        norm = float(np.linalg.norm(self.values))
        if norm == 0.0:
            raise EncoderError("cannot normalize a zero embedding")
        return Embedding(self.values / norm, normalized=True)


def cosine_similarity(a, b) -> float:
    """dot(a/|a|, b/|b|); accepts Embedding or array-like."""
    va = a.values if isinstance(a, Embedding) else np.asarray(a, dtype=np.float64)
    vb = b.values if isinstance(b, Embedding) else np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise EncoderError("cosine similarity undefined for zero-norm vectors")
    return float(np.dot(va / na, vb / nb))


def patch_grid(shape: Sequence[int], patch_xyz: Sequence[int]) -> Tuple[int, int, int]:
    """Patch counts (nx, ny, nz); errors name the offending axis."""
    grid = []
    for axis, (n, p) in enumerate(zip(shape, patch_xyz)):
        if p <= 0:
            raise EncoderError(f"patch size must be positive on axis {'xyz'[axis]}")
        if n % p != 0:
            raise EncoderError(
                f"volume extent {n} not divisible by patch {p} on axis {'xyz'[axis]}"
            )
        grid.append(n // p)
    return tuple(grid)


def patchify(data: np.ndarray, patch_xyz: Sequence[int]):
    """(X, Y, Z) volume -> (N, px*py*pz) patch matrix plus the (nx, ny, nz) grid.

    Token order is z-major, then y, then x; each patch's voxels are flattened
    in C order over (x, y, z).
    """
    data = np.asarray(data)
    nx, ny, nz = patch_grid(data.shape, patch_xyz)
    px, py, pz = patch_xyz
    blocks = data.reshape(nx, px, ny, py, nz, pz)
    blocks = blocks.transpose(4, 2, 0, 1, 3, 5)  # (nz, ny, nx, px, py, pz)
    patches = blocks.reshape(nz * ny * nx, px * py * pz)
    return patches, (nx, ny, nz)


def unpatchify(patches: np.ndarray, grid: Sequence[int], patch_xyz: Sequence[int]) -> np.ndarray:
    nx, ny, nz = grid
    px, py, pz = patch_xyz
    blocks = np.asarray(patches).reshape(nz, ny, nx, px, py, pz)
    blocks = blocks.transpose(2, 3, 1, 4, 0, 5)  # (nx, px, ny, py, nz, pz)
    return blocks.reshape(nx * px, ny * py, nz * pz)


class TransformerBlock(nn.Module):
    """Pre-norm attention + MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x, key_padding_mask=None):
        h = self.norm1(x)
        attn_out, _ = self.attn(
            h, h, h, key_padding_mask=key_padding_mask, need_weights=False
        )
        x = x + attn_out
        return x + self.mlp(self.norm2(x))


class VisionTower(nn.Module):
    """3D patch transformer with factorized spatial / z-axis attention."""

    def __init__(self, volume_shape: Tuple[int, int, int], cfg: PatchConfig,
                 shared_dim: int = 512):
        super().__init__()
        self.volume_shape = tuple(volume_shape)
        self.cfg = cfg
        self.shared_dim = shared_dim
        nx, ny, nz = patch_grid(volume_shape, cfg.patch_xyz)
        self.grid = (nx, ny, nz)
        px, py, pz = cfg.patch_xyz
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(px * py * pz, d)
        self.pos_spatial = nn.Parameter(torch.zeros(ny * nx, d))
        self.pos_z = nn.Parameter(torch.zeros(nz, d))
        nn.init.normal_(self.pos_spatial, std=0.02)
        nn.init.normal_(self.pos_z, std=0.02)
        self.spatial_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_spatial)
        )
        self.temporal_blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth_temporal)
        )
        self.norm = nn.LayerNorm(d)
        self.proj = nn.Linear(nz * ny * nx * d, shared_dim)

    def forward(self, volumes: torch.Tensor) -> torch.Tensor:
        """volumes: (B, X, Y, Z) normalized values -> (B, shared_dim)."""
        if tuple(volumes.shape[1:]) != self.volume_shape:
            raise EncoderError(
                f"expected volume shape {self.volume_shape}, got {tuple(volumes.shape[1:])}"
            )
        b = volumes.shape[0]
        nx, ny, nz = self.grid
        px, py, pz = self.cfg.patch_xyz
        d = self.cfg.embed_dim
        s = ny * nx
        x = volumes.reshape(b, nx, px, ny, py, nz, pz)
        x = x.permute(0, 5, 3, 1, 2, 4, 6).reshape(b, nz, s, px * py * pz)
        x = self.patch_embed(x)
        x = x + self.pos_spatial.unsqueeze(0).unsqueeze(0) + self.pos_z.unsqueeze(0).unsqueeze(2)
        x = x.reshape(b * nz, s, d)
        for block in self.spatial_blocks:
            x = block(x)
        x = x.reshape(b, nz, s, d).transpose(1, 2).reshape(b * s, nz, d)
        for block in self.temporal_blocks:
            x = block(x)
        x = x.reshape(b, s, nz, d).transpose(1, 2)  # (b, nz, s, d)
        x = self.norm(x)
        return self.proj(x.reshape(b, nz * s * d))


class TextTower(nn.Module):
    """Token transformer with masked-sum pooling over the token span."""

    def __init__(self, cfg: TextConfig, shared_dim: int = 512, pad_id: int = 0):
        super().__init__()
        self.cfg = cfg
        self.shared_dim = shared_dim
        self.pad_id = pad_id
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim, padding_idx=pad_id)
        self.pos = nn.Parameter(torch.zeros(cfg.max_len, cfg.embed_dim))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.proj = nn.Linear(cfg.embed_dim, shared_dim)

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        """(B, L) ids and mask -> (B, shared_dim); invariant to pad length."""
        if token_ids.shape != attention_mask.shape:
            raise EncoderError("token ids and attention mask shapes differ")
        length = token_ids.shape[1]
        if length > self.cfg.max_len:
            raise EncoderError(
                f"sequence length {length} exceeds max_len {self.cfg.max_len}"
            )
        if bool((attention_mask.sum(dim=1) == 0).any()):
            raise EncoderError("all-padding input to the text tower")
        x = self.tok_embed(token_ids) + self.pos[:length].unsqueeze(0)
        key_padding = attention_mask == 0
        for block in self.blocks:
            x = block(x, key_padding_mask=key_padding)
        x = self.norm(x)
        pooled = (x * attention_mask.unsqueeze(-1).to(x.dtype)).sum(dim=1)
        return self.proj(pooled)


class ClipModel(nn.Module):
    """Both towers plus the learnable log-parameterized temperature."""

    def __init__(self, volume_shape, patch_cfg: PatchConfig, text_cfg: TextConfig,
                 shared_dim: int = 512, temperature_init: float = 0.07):
        super().__init__()
        if temperature_init <= 0:
            raise EncoderError("temperature must be positive")
        self.vision = VisionTower(volume_shape, patch_cfg, shared_dim)
        self.text = TextTower(text_cfg, shared_dim)
        self.log_temperature = nn.Parameter(
            torch.tensor(float(np.log(temperature_init)), dtype=torch.float32)
        )
        self.shared_dim = shared_dim

    @property
    def temperature(self) -> float:
        return float(torch.exp(self.log_temperature.detach()))

    def embed_volumes(self, volumes: torch.Tensor) -> torch.Tensor:
        return self.vision(volumes)

    def embed_texts(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.text(token_ids, attention_mask)

    def similarity_matrix(self, volume_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
        """Entry (i, j) = cosine(volume_i, text_j) / temperature."""
        v = torch.nn.functional.normalize(volume_emb, dim=-1)
        t = torch.nn.functional.normalize(text_emb, dim=-1)
        return v @ t.T / torch.exp(self.log_temperature)


def encode_volume(model: ClipModel, volume: VolumeGrid) -> Embedding:
    """Eval-mode volume embedding. Expects a preprocessed (normalized) grid."""
    if volume.unit != UNIT_NORMALIZED:
        raise EncoderError(f"encode_volume expects a normalized volume, got unit={volume.unit}")
    model.eval()
    with torch.no_grad():
        tens = torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32))
        emb = model.embed_volumes(tens.unsqueeze(0))[0]
    return Embedding(emb.numpy())


def encode_text(model: ClipModel, tokens: TokenizedText) -> Embedding:
    model.eval()
    with torch.no_grad():
        ids = torch.tensor([tokens.token_ids], dtype=torch.long)
        mask = torch.tensor([tokens.attention_mask], dtype=torch.long)
        emb = model.embed_texts(ids, mask)[0]
    return Embedding(emb.numpy())


def build_model(volume_shape, patch_cfg: PatchConfig, text_cfg: TextConfig,
                shared_dim: int = 512, temperature_init: float = 0.07,
                seed: Optional[int] = None) -> ClipModel:
    if seed is not None:
        torch.manual_seed(seed)
    return ClipModel(volume_shape, patch_cfg, text_cfg, shared_dim, temperature_init)


@dataclass
class Checkpoint:
    """Versioned container for weights + configs + tokenizer vocabulary."""

    regime: str  # clip | vocabfine | lipro
    volume_shape: Tuple[int, int, int]
    patch_cfg: PatchConfig
    text_cfg: TextConfig
    shared_dim: int
    model_state: dict
    tokenizer_tokens: list
    freeze_flags: dict = field(default_factory=dict)
    head_state: Optional[dict] = None
    vocab_names: Optional[list] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, model: ClipModel, tokenizer: WordTokenizer,
                    regime: str = "clip", freeze_flags: Optional[dict] = None,
                    head_state: Optional[dict] = None,
                    vocab_names: Optional[Sequence[str]] = None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "regime": regime,
        "volume_shape": list(model.vision.volume_shape),
        "patch_cfg": asdict(model.vision.cfg),
        "text_cfg": asdict(model.text.cfg),
        "shared_dim": model.shared_dim,
        "model_state": model.state_dict(),
        "tokenizer_tokens": tokenizer.tokens,
        "freeze_flags": dict(freeze_flags or {}),
        "head_state": head_state,
        "vocab_names": list(vocab_names) if vocab_names is not None else None,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns (model, tokenizer, Checkpoint)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise EncoderError(f"unsupported checkpoint version {version}")
    patch_cfg = PatchConfig(**{**payload["patch_cfg"],
                               "patch_xyz": tuple(payload["patch_cfg"]["patch_xyz"])})
    text_cfg = TextConfig(**payload["text_cfg"])
    model = ClipModel(tuple(payload["volume_shape"]), patch_cfg, text_cfg,
                      payload["shared_dim"])
    model.load_state_dict(payload["model_state"])
    model.eval()
    tokenizer = WordTokenizer(payload["tokenizer_tokens"])
    meta = Checkpoint(
        regime=payload["regime"],
        volume_shape=tuple(payload["volume_shape"]),
        patch_cfg=patch_cfg,
        text_cfg=text_cfg,
        shared_dim=payload["shared_dim"],
        model_state=payload["model_state"],
        tokenizer_tokens=payload["tokenizer_tokens"],
        freeze_flags=payload.get("freeze_flags", {}),
        head_state=payload.get("head_state"),
        vocab_names=payload.get("vocab_names"),
        extra=payload.get("extra", {}),
    )
    return model, tokenizer, meta
