"""HTTP query service over an immutable flat index.

POST /v1/query takes either a raw vector (normalized and searched locally)
or text, which is forwarded to a configured external encoder endpoint
(POST {url} {"text": ...} -> {"vector": [...]}) and then searched. The core
stays model-free; text encoding is always delegated.
"""

from __future__ import annotations

import time
from typing import Callable

import httpx
import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .index import FlatIndex, normalize_query, search

__all__ = ["QueryRequest", "QueryMatch", "QueryResponse", "create_app", "EncoderError"]


class EncoderError(RuntimeError):
    """The delegated text encoder failed or answered nonsense."""


class QueryRequest(BaseModel):
    vector: list[float] | None = None
    text: str | None = None
    top_k: int | None = None


class QueryMatch(BaseModel):
    image_id: str
    score: float


class QueryResponse(BaseModel):
    results: list[QueryMatch]
    top_k: int
    latency_ms: float


class StatsResponse(BaseModel):
    vectors: int
    images: int
    channels: int


class HealthResponse(BaseModel):
    status: str


def _http_encoder(url: str) -> Callable[[str], np.ndarray]:
    def encode(text: str) -> np.ndarray:
        try:
            resp = httpx.post(url, json={"text": text}, timeout=30.0)
            resp.raise_for_status()
            data = resp.json()
        except httpx.HTTPError as e:
            raise EncoderError(f"encoder at {url} unreachable: {e}") from e
        except ValueError as e:
            raise EncoderError(f"encoder returned invalid JSON: {e}") from e
        vector = data.get("vector") if isinstance(data, dict) else None
        if not isinstance(vector, list) or not vector:
            raise EncoderError("encoder response has no 'vector' list")
        return np.asarray(vector, dtype=np.float32)

    return encode


def create_app(
    index: FlatIndex,
    *,
    max_top_k: int = 1000,
    encoder_url: str | None = None,
    encode_fn: Callable[[str], np.ndarray] | None = None,
) -> FastAPI:
    """Build the service app; ``encode_fn`` overrides the HTTP encoder (tests)."""
    if encode_fn is None and encoder_url is not None:
        encode_fn = _http_encoder(encoder_url)

    app = FastAPI(title="clusterlens-query")
    app.state.index = index

    @app.post("/v1/query", response_model=QueryResponse)
    def query(req: QueryRequest) -> QueryResponse:
        idx: FlatIndex = app.state.index
        started = time.perf_counter()
        top_k = req.top_k if req.top_k is not None else min(50, max_top_k)
        if top_k < 1:
            raise HTTPException(status_code=400, detail="top_k must be >= 1")
        if top_k > max_top_k:
            raise HTTPException(
                status_code=400, detail=f"top_k {top_k} exceeds maximum {max_top_k}"
            )
        if (req.vector is None) == (req.text is None):
            raise HTTPException(
                status_code=400, detail="provide exactly one of 'vector' or 'text'"
            )
        if req.vector is not None:
            raw = np.asarray(req.vector, dtype=np.float32)
            if raw.shape != (idx.channels,):
                raise HTTPException(
                    status_code=400,
                    detail=f"vector has {raw.shape[0]} channels, index expects {idx.channels}",
                )
        else:
            if encode_fn is None:
                raise HTTPException(
                    status_code=400,
                    detail="no text encoder configured; this index answers vector queries only",
                )
            try:
                raw = encode_fn(req.text)
            except EncoderError as e:
                raise HTTPException(status_code=502, detail=str(e)) from e
            if raw.shape != (idx.channels,):
                raise HTTPException(
                    status_code=502,
                    detail=f"encoder returned {raw.shape[0]} channels, index expects {idx.channels}",
                )
        try:
            q = normalize_query(raw)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        ranked = search(idx, q, top_k)
        latency_ms = (time.perf_counter() - started) * 1000.0
        return QueryResponse(
            results=[QueryMatch(image_id=i, score=s) for i, s in ranked.entries],
            top_k=top_k,
            latency_ms=latency_ms,
        )

    @app.get("/v1/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(status="ok")

    @app.get("/v1/stats", response_model=StatsResponse)
    def stats() -> StatsResponse:
        idx: FlatIndex = app.state.index
        return StatsResponse(
            vectors=idx.vector_count, images=idx.image_count, channels=idx.channels
        )

    return app
