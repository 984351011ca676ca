"""Sustained ingest a training node needs: GPUs x samples/s x bytes/sample."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import Ros2Error, Status


@dataclass(frozen=True)
class IngestSpec:
    gpus: float
    rate: float  # samples per second per GPU
    sample_bytes: float

    def validate(self) -> "IngestSpec":
        for name in ("gpus", "rate", "sample_bytes"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v) or v <= 0:
                raise Ros2Error(Status.NONPOSITIVE, f"{name} must be a positive number, got {v!r}")
        return self


def required_ingest(gpus: float, rate: float, sample_bytes: float):
    """Bytes per second; exact (an int) when every input is an int."""
    IngestSpec(gpus, rate, sample_bytes).validate()
    return gpus * rate * sample_bytes
