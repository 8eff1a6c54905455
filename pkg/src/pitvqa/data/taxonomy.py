"""The 59-class answer space.

Names are synthetic placeholders with the right cardinalities; they make no
clinical claim.  Global class indices follow category order: phases,
steps, instruments, quantities, positions, operation notes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

TAXONOMY_VERSION = 1

CATEGORIES = ("phase", "step", "instrument", "quantity", "position", "note")

PHASE_STEPS: dict[str, tuple[str, ...]] = {
    "nasal access": ("nasal preparation", "septal flap", "turbinate lateralisation", "choana exposure"),
    "sphenoid opening": ("sphenoidotomy", "septum removal", "mucosa stripping", "sella exposure"),
    "sellar work": ("dural opening", "tumour debulking", "capsule dissection", "haemostasis"),
    "closure": ("graft placement", "sealant application", "nasal packing"),
}

INSTRUMENTS = (
    "suction",
    "kerrisons",
    "freer elevator",
    "pituitary rongeurs",
    "spatula dissector",
    "bipolar forceps",
    "cottle elevator",
    "drill",
    "scissors",
    "ring curette",
    "blakesley forceps",
    "needle",
    "irrigation syringe",
    "haemostatic foam",
    "tissue glue",
    "nasal speculum",
    "retractable knife",
    "cup forceps",
)

QUANTITIES = ("zero", "one", "two")

POSITIONS = ("top left", "top right", "centre", "bottom left", "bottom right")

NOTES = (
    "clear view",
    "bleeding present",
    "smoke present",
    "blurred lens",
    "bone exposed",
    "dura exposed",
    "tumour visible",
    "csf leak",
    "graft visible",
    "irrigation ongoing",
    "lens cleaning",
    "instrument exchange",
    "tissue retracted",
    "sealant visible",
)


@dataclass(frozen=True)
class Taxonomy:
    phases: tuple[str, ...]
    steps: tuple[str, ...]
    instruments: tuple[str, ...]
    quantities: tuple[str, ...]
    positions: tuple[str, ...]
    notes: tuple[str, ...]
    phase_steps: tuple[tuple[int, ...], ...]
    version: int = TAXONOMY_VERSION

    def names(self, category: str) -> tuple[str, ...]:
        return {
            "phase": self.phases,
            "step": self.steps,
            "instrument": self.instruments,
            "quantity": self.quantities,
            "position": self.positions,
            "note": self.notes,
        }[category]

    @cached_property
    def offsets(self) -> dict[str, int]:
        out, k = {}, 0
        for cat in CATEGORIES:
            out[cat] = k
            k += len(self.names(cat))
        return out

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(self.names(c)) for c in CATEGORIES)

    @property
    def n_classes(self) -> int:
        return sum(self.sizes)

    def class_index(self, category: str, local: int) -> int:
        n = len(self.names(category))
        if not 0 <= local < n:
            raise IndexError(f"{category} index {local} outside [0, {n})")
        return self.offsets[category] + local

    def class_of(self, index: int) -> tuple[str, int]:
        """Inverse of :meth:`class_index`: ``(category, local index)``."""
        for cat in reversed(CATEGORIES):
            off = self.offsets[cat]
            if index >= off:
                if index - off >= len(self.names(cat)):
                    break
                return cat, index - off
        raise IndexError(f"class index {index} outside [0, {self.n_classes})")

    def class_name(self, index: int) -> str:
        cat, local = self.class_of(index)
        return self.names(cat)[local]

    def category_range(self, category: str) -> range:
        off = self.offsets[category]
        return range(off, off + len(self.names(category)))

    def phase_of_step(self, step: int) -> int:
        for ph, steps in enumerate(self.phase_steps):
            if step in steps:
                return ph
        raise IndexError(f"step {step} belongs to no phase")


def build_taxonomy() -> Taxonomy:
    steps: list[str] = []
    phase_steps = []
    for names in PHASE_STEPS.values():
        phase_steps.append(tuple(range(len(steps), len(steps) + len(names))))
        steps.extend(names)
    return Taxonomy(
        phases=tuple(PHASE_STEPS),
        steps=tuple(steps),
        instruments=INSTRUMENTS,
        quantities=QUANTITIES,
        positions=POSITIONS,
        notes=NOTES,
        phase_steps=tuple(phase_steps),
    )


TAXONOMY = build_taxonomy()
