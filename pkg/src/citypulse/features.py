"""The four model inputs and their fixed column order."""
from __future__ import annotations

from typing import NamedTuple

FEATURE_NAMES = ("v_vel", "v_acc", "space_headway", "time_headway")
FEATURE_HEADERS = ("v_Vel", "v_Acc", "Space_Headway", "Time_Headway")


class FeatureVector(NamedTuple):
    v_vel: float
    v_acc: float
    space_headway: float
    time_headway: float
