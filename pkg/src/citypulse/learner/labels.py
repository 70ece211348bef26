from __future__ import annotations

from enum import IntEnum


class CongestionLabel(IntEnum):
    """Ordered congestion levels; adjacent values are adjacent levels."""

    Low = 0
    Medium = 1
    High = 2

    @classmethod
    def parse(cls, text: str) -> "CongestionLabel":
        try:
            return cls[text]
        except KeyError:
            raise ValueError(f"unknown congestion label {text!r}") from None


LABELS = tuple(CongestionLabel)
N_CLASSES = len(LABELS)
