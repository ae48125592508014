"""Request and response models for the HTTP service."""

from __future__ import annotations

import base64

import numpy as np
from pydantic import BaseModel, Field, field_validator


def encode_raster(array: np.ndarray, dtype=np.float32) -> str:
    """Base64 of the raster in little-endian ``dtype``, row-major."""
    return base64.b64encode(np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()).decode()


def decode_raster(text: str, shape: tuple[int, ...], dtype=np.float32) -> np.ndarray:
    raw = base64.b64decode(text, validate=True)
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise ValueError(f"raster has {len(raw)} bytes, expected {expected} for shape {shape}")
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(np.float64)


class Intrinsics(BaseModel):
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)


class SessionCreate(BaseModel):
    intrinsics: Intrinsics
    config: dict[str, str] = Field(default_factory=dict, description="key = value overrides of the run configuration")


class SessionInfo(BaseModel):
    id: str
    frames_processed: int
    submitted: int
    delivered: int
    dropped: int
    pending: int
    points: int


class Prior(BaseModel):
    R: list[float] = Field(min_length=9, max_length=9, description="row-major rotation")
    T: list[float] = Field(min_length=3, max_length=3)


class Correspondence(BaseModel):
    id: int = 0
    previous: list[float] = Field(min_length=3, max_length=3)
    current: list[float] = Field(min_length=3, max_length=3)


class FramePayload(BaseModel):
    frame_index: int = Field(ge=0)
    depth: str = Field(description="base64 float32 little-endian depth in mm, H*W row-major")
    color: str | None = Field(default=None, description="base64 uint8 RGB, H*W*3 row-major")
    prior: Prior | None = None
    correspondences: list[Correspondence] = Field(default_factory=list)

    @field_validator("depth")
    @classmethod
    def _not_empty(cls, v: str) -> str:
        if not v:
            raise ValueError("depth raster is empty")
        return v


class FrameAck(BaseModel):
    frame_index: int
    arrival: int
    superseded: int | None = None


class StepResult(BaseModel):
    processed: bool
    frame: int | None = None
    skipped: bool = False
    stages: list[str] = Field(default_factory=list)
    metrics: dict[str, float | int | str] = Field(default_factory=dict)


class ReportRequest(BaseModel):
    metrics: str = Field(description="metrics CSV text")
    baseline: str | None = Field(default=None, description="second metrics CSV for a difference series")


class ReportResponse(BaseModel):
    frames: int
    summary: dict[str, dict[str, float]]
    difference: list[dict[str, float]] | None = None
