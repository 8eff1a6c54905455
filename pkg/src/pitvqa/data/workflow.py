"""Latent surgical workflow: one frame state per sampled video frame."""

from __future__ import annotations

from dataclasses import dataclass

from ..rng import stream
from .taxonomy import TAXONOMY

# P(number of instruments = 0, 1, 2)
INSTRUMENT_COUNT_PROBS = (0.25, 0.5, 0.25)
# P(note is the step's usual note) versus a uniform draw
NOTE_STICKINESS = 0.6


@dataclass(frozen=True)
class FrameState:
    procedure_id: int
    frame_index: int
    phase: int
    step: int
    instruments: tuple[tuple[int, int], ...]  # (instrument, position) pairs
    note: int

    @property
    def quantity(self) -> int:
        return len(self.instruments)


def _emit(seed: int, procedure_id: int, frame_index: int, step: int) -> tuple[tuple[tuple[int, int], ...], int]:
    rng = stream(seed, "frame", procedure_id, frame_index)
    n = int(rng.choice(3, p=INSTRUMENT_COUNT_PROBS))
    tools = rng.choice(len(TAXONOMY.instruments), size=n, replace=False)
    slots = rng.choice(len(TAXONOMY.positions), size=n, replace=False)
    pairs = tuple(sorted((int(t), int(s)) for t, s in zip(tools, slots)))
    if rng.random() < NOTE_STICKINESS:
        note = step % len(TAXONOMY.notes)
    else:
        note = int(rng.integers(len(TAXONOMY.notes)))
    return pairs, note


def sample_procedure(seed: int, n_frames: int, procedure_id: int = 0) -> list[FrameState]:
    """Left-to-right walk through the steps of every phase.

    The walk advances to the next step with a fixed per-frame probability
    sized so that a procedure typically reaches its last step around 2/3 of
    the way through ``n_frames``.  Per-frame emissions (instruments,
    positions, note) use an independent stream keyed by frame index.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    order = [s for steps in TAXONOMY.phase_steps for s in steps]
    advance = min(1.0, 1.5 * (len(order) - 1) / n_frames)
    walk = stream(seed, "walk", procedure_id)
    k = 0
    frames = []
    for f in range(n_frames):
        if f and k < len(order) - 1 and walk.random() < advance:
            k += 1
        step = order[k]
        pairs, note = _emit(seed, procedure_id, f, step)
        frames.append(FrameState(procedure_id, f, TAXONOMY.phase_of_step(step), step, pairs, note))
    return frames
