"""Templated question-answer pairs for a frame state.

Each frame gets six scene questions (phase and step twice with different
wordings, quantity, operation note) plus, for every instrument present, one
"which instrument is at <position>" and one "where is <instrument>"
question.  With 0-2 instruments that is 6-10 pairs, 8 on average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import TAXONOMY
from .workflow import FrameState

TEMPLATES: dict[str, tuple[str, ...]] = {
    "phase": (
        "What is the surgical phase of the image?",
        "Which surgical phase is shown in this image?",
        "What phase of the surgery is being performed here?",
        "Which phase is shown in this frame?",
    ),
    "step": (
        "What is the surgical step of the image?",
        "Which step of the surgery is shown in this image?",
        "What surgical step is being performed in this frame?",
        "Which of the surgical steps is being performed in this video frame?",
    ),
    "quantity": (
        "How many instruments are present in the image?",
        "How many surgical instruments can be seen in this frame?",
    ),
    "note": (
        "What is the operation note for this image?",
        "Which operation note describes the current surgical scene?",
    ),
    "instrument": (
        "What instrument is located at the {position} of the image?",
        "Which instrument can be seen in the {position} region?",
    ),
    "position": (
        "Where is the {instrument} located in the image?",
        "In which region of the image is the {instrument}?",
        "In which region of the endoscopic image is the {instrument} placed?",
    ),
}


@dataclass(frozen=True)
class QAPair:
    question: str
    answer_idx: int
    category: str


def _pick(rng: np.random.Generator, category: str) -> str:
    bank = TEMPLATES[category]
    return bank[int(rng.integers(len(bank)))]


def generate_qa(state: FrameState, rng: np.random.Generator) -> list[QAPair]:
    t = TAXONOMY
    out = []
    for cat, local in (("phase", state.phase), ("step", state.step)):
        first, second = rng.choice(len(TEMPLATES[cat]), size=2, replace=False)
        for k in (first, second):
            out.append(QAPair(TEMPLATES[cat][int(k)], t.class_index(cat, local), cat))
    out.append(QAPair(_pick(rng, "quantity"), t.class_index("quantity", state.quantity), "quantity"))
    out.append(QAPair(_pick(rng, "note"), t.class_index("note", state.note), "note"))
    for tool, pos in state.instruments:
        q = _pick(rng, "instrument").format(position=t.positions[pos])
        out.append(QAPair(q, t.class_index("instrument", tool), "instrument"))
        q = _pick(rng, "position").format(instrument=t.instruments[tool])
        out.append(QAPair(q, t.class_index("position", pos), "position"))
    return out


def all_template_questions() -> list[str]:
    """Every question the generator can emit (all templates x all fillers)."""
    out = []
    for cat, bank in TEMPLATES.items():
        for tpl in bank:
            if "{position}" in tpl:
                out.extend(tpl.format(position=p) for p in TAXONOMY.positions)
            elif "{instrument}" in tpl:
                out.extend(tpl.format(instrument=i) for i in TAXONOMY.instruments)
            else:
                out.append(tpl)
    return out


def word_count(question: str) -> int:
    return len(question.split())

