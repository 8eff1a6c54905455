"""Procedural 64x64 RGB frames that make every label recoverable from pixels.

Layout (row, column ranges, inclusive-exclusive):

* background: solid colour per phase
* border (2 px): four sides, each lit or dark, binary code of ``note + 1``
* step code: four 6x6 squares in rows 3..9, binary code of ``step + 1``
* instrument slots: 12x12 glyphs at five fixed regions; a glyph is a 2x3
  grid of cells lit by the binary code of ``instrument + 1``
"""

from __future__ import annotations

import numpy as np

from ..rng import stream
from .workflow import FrameState

SIZE = 64
NOISE_SIGMA = 0.05

PHASE_COLOURS = np.array(
    [
        [0.80, 0.30, 0.30],
        [0.30, 0.75, 0.35],
        [0.30, 0.35, 0.80],
        [0.80, 0.75, 0.30],
    ]
)

# top-left corner of each 12x12 instrument slot, indexed by position class
SLOT_ORIGINS = ((10, 10), (10, 42), (26, 26), (42, 10), (42, 42))
GLYPH = 12
STEP_ORIGIN = (3, 18)
STEP_CELL = 6
BORDER = 2
LIT, DARK = 1.0, 0.05


def _bits(value: int, n: int) -> list[int]:
    return [(value >> i) & 1 for i in range(n)]


def draw_clean(state: FrameState) -> np.ndarray:
    """Noise-free frame, ``[3, 64, 64]`` in [0, 1]."""
    img = np.empty((3, SIZE, SIZE))
    img[:] = PHASE_COLOURS[state.phase][:, None, None]

    top, right, bottom, left = _bits(state.note + 1, 4)
    b = BORDER
    img[:, :b, :] = LIT if top else DARK
    img[:, :, SIZE - b:] = LIT if right else DARK
    img[:, SIZE - b:, :] = LIT if bottom else DARK
    img[:, :, :b] = LIT if left else DARK

    r0, c0 = STEP_ORIGIN
    for i, bit in enumerate(_bits(state.step + 1, 4)):
        c = c0 + i * (STEP_CELL + 1)
        img[:, r0:r0 + STEP_CELL, c:c + STEP_CELL] = LIT if bit else DARK

    for tool, pos in state.instruments:
        r, c = SLOT_ORIGINS[pos]
        code = _bits(tool + 1, 6)
        for k, bit in enumerate(code):
            rr = r + (k // 3) * (GLYPH // 2)
            cc = c + (k % 3) * (GLYPH // 3)
            img[:, rr:rr + GLYPH // 2, cc:cc + GLYPH // 3] = LIT if bit else DARK
    return img


def render_frame(state: FrameState, seed: int) -> np.ndarray:
    """Rendered frame with seeded Gaussian noise, clipped to [0, 1].

    Values are rounded to float32 precision so the on-disk format is
    lossless.
    """
    rng = stream(seed, "render", state.procedure_id, state.frame_index)
    img = draw_clean(state) + rng.normal(0.0, NOISE_SIGMA, (3, SIZE, SIZE))
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
