"""Exponential-moving-average update of the teacher's encoder and projector."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")


def ema_update(teacher, student, alpha):
    """teacher <- alpha * teacher + (1 - alpha) * student, in place.

    Applies to encoder and projector parameters only; the student's decoder
    has no teacher counterpart. Returns the mutated teacher.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if teacher.arch != student.arch:
        raise ValueError("teacher/student architecture mismatch")
    for name in teacher.encoder_projector_names():
        t, s = teacher.params[name], student.params[name]
        if t.data.shape != s.data.shape:
            raise ValueError(f"shape mismatch for '{name}'")
        t.data = alpha * t.data + (1.0 - alpha) * s.data
    return teacher
