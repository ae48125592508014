"""External pose/feature feed and the latest-wins hand-off to the dense pipeline."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .geometry import DepthScan
from .warpfield import WarpField

log = logging.getLogger(__name__)


class OrderingError(ValueError):
    """A frame arrived with an index not greater than the last submitted one."""


@dataclass
class PosePrior:
    """World-to-camera pose estimate: ``x_cam = R @ x_world + T``."""

    R: np.ndarray
    T: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-6) or abs(np.linalg.det(self.R) - 1) > 1e-6:
            raise ValueError("prior rotation must be orthonormal with det +1")

    @classmethod
    def identity(cls, frame_index: int = 0) -> "PosePrior":
        return cls(np.eye(3), np.zeros(3), frame_index)


@dataclass
class FeatureCorrespondence:
    """A tracked feature: position in the previous camera frame and in the current one."""

    previous: np.ndarray
    current: np.ndarray
    feature_id: int = 0

    def __post_init__(self):
        self.previous = np.asarray(self.previous, dtype=np.float64).reshape(3)
        self.current = np.asarray(self.current, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.previous)) and np.all(np.isfinite(self.current))):
            raise ValueError("correspondence coordinates must be finite")


@dataclass
class FrameEnvelope:
    scan: DepthScan
    prior: PosePrior | None = None
    correspondences: list[FeatureCorrespondence] = field(default_factory=list)
    arrival: int = 0

    @property
    def frame_index(self) -> int:
        return self.scan.frame_index

    def correspondence_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.correspondences:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (
            np.array([c.previous for c in self.correspondences]),
            np.array([c.current for c in self.correspondences]),
        )


@dataclass
class Ack:
    frame_index: int
    arrival: int
    superseded: int | None = None  # frame index that this submission displaced


class LatestFeed:
    """Single-slot, latest-wins buffer between one producer and one consumer.

    Submitting while an envelope is still pending replaces it and counts a
    drop. ``take_latest`` hands over and clears the slot.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._pending: FrameEnvelope | None = None
        self._last_index: int | None = None
        self._arrivals = 0
        self.submitted = 0
        self.delivered = 0
        self.dropped = 0
        self.dropped_frames: list[int] = []

    def submit(self, envelope: FrameEnvelope) -> Ack:
        with self._lock:
            idx = envelope.frame_index
            if self._last_index is not None and idx <= self._last_index:
                raise OrderingError(f"frame {idx} is not newer than frame {self._last_index}")
            self._last_index = idx
            envelope.arrival = self._arrivals
            self._arrivals += 1
            self.submitted += 1
            superseded = None
            if self._pending is not None:
                superseded = self._pending.frame_index
                self.dropped += 1
                self.dropped_frames.append(superseded)
                log.debug("frame %d superseded by %d", superseded, idx)
            self._pending = envelope
            return Ack(idx, envelope.arrival, superseded)

    def take_latest(self) -> FrameEnvelope | None:
        with self._lock:
            env, self._pending = self._pending, None
            if env is not None:
                self.delivered += 1
            return env

    @property
    def pending(self) -> int:
        with self._lock:
            return int(self._pending is not None)


def apply_prior(field: WarpField, prior: PosePrior | None, frame_index: int | None = None) -> tuple[WarpField, bool]:
    """Initialise the global pose from the prior; node parameters are untouched.

    Returns ``(field, applied)``. Without a usable prior the field is returned
    unchanged and ``applied`` is False.
    """
    if prior is None:
        return field, False
    if frame_index is not None and prior.frame_index != frame_index:
        log.warning("prior for frame %d does not match frame %d; ignored", prior.frame_index, frame_index)
        return field, False
    return field.with_pose(prior.R, prior.T), True
