"""Read-only HTTP query surface over a built embedding index.

Endpoints: GET /healthz, GET /index/info, POST /query/text, POST
/query/volume, GET /volumes/{id}/meta, GET /volumes/{id}/slice/{axis}/{i}
(8-bit grayscale PNG windowed from normalized values). All stateless; the
index is immutable, so concurrent reads need no coordination beyond a small
lock around the volume cache.
"""

from __future__ import annotations

import io
import threading
from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from . import retrieval, volio
from .errors import RetrievalError, VolumeError
from .retrieval import EmbeddingIndex

AXIS_NAMES = {
    "x": 0, "y": 1, "z": 2,
    "0": 0, "1": 1, "2": 2,
    "sagittal": 0, "coronal": 1, "axial": 2,
}


class VolumeStore:
    """study_id -> preprocessed volume, lazily loaded with a tiny cache."""

    def __init__(self, paths: Dict[str, str], cache_size: int = 8):
        self.paths = dict(paths)
        self.cache_size = cache_size
        self._cache: dict = {}
        self._lock = threading.Lock()

    def __contains__(self, study_id: str) -> bool:
        return study_id in self.paths

    def get(self, study_id: str):
        with self._lock:
            if study_id in self._cache:
                return self._cache[study_id]
        if study_id not in self.paths:
            raise KeyError(study_id)
        grid = volio.load_volume(self.paths[study_id])
        with self._lock:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[study_id] = grid
        return grid

    @classmethod
    def from_manifest(cls, corpus) -> "VolumeStore":
        return cls({r.study_id: r.volume_path for r in corpus})


class TextQuery(BaseModel):
    text: str = Field(min_length=1)
    k: int = Field(default=5, ge=1)


class VolumeQuery(BaseModel):
    study_id: Optional[str] = None
    embedding: Optional[list] = None
    k: int = Field(default=5, ge=1)


def _slice_png(data: np.ndarray) -> bytes:
    """Normalized [-1, 1] slice -> 8-bit grayscale PNG bytes."""
    from PIL import Image

    window = np.clip((data.astype(np.float32) + 1.0) / 2.0, 0.0, 1.0)
    img = Image.fromarray((window * 255.0).round().astype(np.uint8).T, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(index: EmbeddingIndex,
               text_encoder: Optional[Callable[[str], np.ndarray]] = None,
               volumes: Optional[VolumeStore] = None) -> FastAPI:
    app = FastAPI(title="volclip retrieval service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def result_payload(result: retrieval.RetrievalResult) -> dict:
        items = []
        for study_id, score in result.ranked:
            entry = {"study_id": study_id, "score": score}
            if index.labels is not None and index.label_names:
                row = index.labels[index.position(study_id)]
                entry["labels"] = [
                    name for name, v in zip(index.label_names, row) if v == 1
                ]
            items.append(entry)
        return {"query_kind": result.query_kind, "results": items}

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.get("/index/info")
    def info():
        return {
            "count": len(index),
            "dim": index.dim,
            "encoder_tag": index.encoder_tag,
            "label_names": list(index.label_names),
            "has_volumes": volumes is not None,
        }

    @app.post("/query/text")
    def query_text(query: TextQuery):
        if text_encoder is None:
            raise HTTPException(503, "text queries need a loaded text encoder")
        try:
            result = retrieval.query_by_text(index, query.text, query.k, text_encoder)
        except RetrievalError as exc:
            raise HTTPException(400, str(exc))
        return result_payload(result)

    @app.post("/query/volume")
    def query_volume(query: VolumeQuery):
        if (query.study_id is None) == (query.embedding is None):
            raise HTTPException(400, "provide exactly one of study_id or embedding")
        try:
            probe = query.study_id if query.study_id is not None \
                else np.asarray(query.embedding, dtype=np.float64)
            result = retrieval.query_by_volume(index, probe, query.k)
        except RetrievalError as exc:
            status = 404 if "unknown study_id" in str(exc) else 400
            raise HTTPException(status, str(exc))
        return result_payload(result)

    @app.get("/volumes/{study_id}/meta")
    def volume_meta(study_id: str):
        if volumes is None or study_id not in volumes:
            raise HTTPException(404, f"no volume for study {study_id!r}")
        try:
            grid = volumes.get(study_id)
        except (VolumeError, OSError) as exc:
            raise HTTPException(500, f"volume load failed: {exc}")
        return {
            "study_id": study_id,
            "shape": list(grid.shape),
            "spacing_mm": list(grid.spacing_mm),
            "unit": grid.unit,
        }

    @app.get("/volumes/{study_id}/slice/{axis}/{idx}")
    def volume_slice(study_id: str, axis: str, idx: int):
        if volumes is None or study_id not in volumes:
            raise HTTPException(404, f"no volume for study {study_id!r}")
        if axis not in AXIS_NAMES:
            raise HTTPException(400, f"axis must be one of {sorted(AXIS_NAMES)}")
        grid = volumes.get(study_id)
        ax = AXIS_NAMES[axis]
        if not 0 <= idx < grid.shape[ax]:
            raise HTTPException(404, f"slice index {idx} out of range for axis {axis}")
        data = np.take(grid.data, idx, axis=ax)
        return Response(content=_slice_png(data), media_type="image/png")

    return app


def serve(index: EmbeddingIndex, text_encoder=None, volumes=None,
          host: str = "127.0.0.1", port: int = 8000) -> None:
    """Run the query service until interrupted."""
    import uvicorn

    app = create_app(index, text_encoder, volumes)
    uvicorn.run(app, host=host, port=port, log_level="info")
