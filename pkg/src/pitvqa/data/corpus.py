"""Corpus assembly, procedure-level splitting, and the on-disk format.

Directory layout::

    manifest.jsonl      one JSON record per QA sample
    frames/*.bin        b"PVQF", u16 width, u16 height (little-endian), then
                        3*H*W float32 little-endian values, channel-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..rng import stream
from .questions import generate_qa
from .render import render_frame
from .taxonomy import CATEGORIES, TAXONOMY
from .workflow import FrameState, sample_procedure

FRAME_MAGIC = b"PVQF"
MANIFEST = "manifest.jsonl"
FIELDS = ("frame_path", "question", "answer_idx", "category", "split", "procedure_id")
SPLITS = ("train", "val")


class ManifestError(ValueError):
    """A manifest line could not be parsed or validated."""


@dataclass(frozen=True)
class VQASample:
    frame_path: str
    question: str
    answer_idx: int
    category: str
    procedure_id: int
    split: str = "train"


@dataclass
class Corpus:
    samples: list[VQASample]
    images: dict[str, np.ndarray]
    frames: list[FrameState] = field(default_factory=list, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.samples == other.samples
            and self.images.keys() == other.images.keys()
            and all(np.array_equal(v, other.images[k]) for k, v in self.images.items())
        )

    @property
    def procedures(self) -> list[int]:
        return sorted({s.procedure_id for s in self.samples})

    def subset(self, procedure_ids, split: str | None = None) -> "Corpus":
        keep = set(procedure_ids)
        samples = [
            s if split is None else replace(s, split=split)
            for s in self.samples
            if s.procedure_id in keep
        ]
        paths = {s.frame_path for s in samples}
        images = {k: v for k, v in self.images.items() if k in paths}
        frames = [f for f in self.frames if f.procedure_id in keep]
        return Corpus(samples, images, frames)


def frame_path(procedure_id: int, frame_index: int) -> str:
    return f"frames/p{procedure_id:03d}_f{frame_index:05d}.bin"


def generate_corpus(seed: int, n_procedures: int, n_frames: int) -> Corpus:
    """Frames, renders, and QA pairs for ``n_procedures`` synthetic videos."""
    samples: list[VQASample] = []
    images: dict[str, np.ndarray] = {}
    frames: list[FrameState] = []
    for pid in range(n_procedures):
        for state in sample_procedure(seed, n_frames, pid):
            path = frame_path(pid, state.frame_index)
            images[path] = render_frame(state, seed)
            frames.append(state)
            qa_rng = stream(seed, "qa", pid, state.frame_index)
            for qa in generate_qa(state, qa_rng):
                samples.append(VQASample(path, qa.question, qa.answer_idx, qa.category, pid))
    return Corpus(samples, images, frames)


def split_by_procedure(corpus: Corpus, train_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Partition whole procedures into train and validation corpora."""
    pids = corpus.procedures
    if len(pids) < 2:
        raise ValueError(f"need at least 2 procedures to split, got {len(pids)}")
    n_train = min(len(pids) - 1, max(1, round(train_fraction * len(pids))))
    order = stream(seed, "split").permutation(len(pids))
    train_ids = sorted(pids[i] for i in order[:n_train])
    val_ids = sorted(pids[i] for i in order[n_train:])
    return corpus.subset(train_ids, "train"), corpus.subset(val_ids, "val")


def merge(*parts: Corpus) -> Corpus:
    samples, images, frames = [], {}, []
    for c in parts:
        samples.extend(c.samples)
        images.update(c.images)
        frames.extend(c.frames)
    return Corpus(samples, images, frames)


def encode_frame(image: np.ndarray) -> bytes:
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"frames must have 3 channels, got {c}")
    return FRAME_MAGIC + struct.pack("<HH", w, h) + np.asarray(image, dtype="<f4").tobytes()


def decode_frame(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8 or raw[:4] != FRAME_MAGIC:
        raise OSError(f"{name}: not a PVQF frame file")
    w, h = struct.unpack("<HH", raw[4:8])
    expected = 8 + 3 * h * w * 4
    if len(raw) != expected:
        raise OSError(f"{name}: truncated or oversized frame ({len(raw)} bytes, expected {expected})")
    return np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float64).reshape(3, h, w)


def manifest_line(s: VQASample) -> str:
    rec = {
        "frame_path": s.frame_path,
        "question": s.question,
        "answer_idx": s.answer_idx,
        "category": s.category,
        "split": s.split,
        "procedure_id": s.procedure_id,
    }
    return json.dumps(rec, ensure_ascii=False)


def write_dataset(path, corpus: Corpus) -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    for name in sorted(corpus.images):
        (root / name).write_bytes(encode_frame(corpus.images[name]))
    with open(root / MANIFEST, "w", encoding="utf-8", newline="\n") as fh:
        for s in corpus.samples:
            fh.write(manifest_line(s) + "\n")


def parse_record(line: str, lineno: int) -> VQASample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(rec, dict) or set(rec) != set(FIELDS):
        raise ManifestError(f"line {lineno}: expected fields {sorted(FIELDS)}")
    cat = rec["category"]
    if cat not in CATEGORIES:
        raise ManifestError(f"line {lineno}: unknown category {cat!r}")
    ans = rec["answer_idx"]
    if not isinstance(ans, int) or ans not in TAXONOMY.category_range(cat):
        raise ManifestError(f"line {lineno}: answer_idx {ans!r} is not a {cat} class")
    if rec["split"] not in SPLITS:
        raise ManifestError(f"line {lineno}: unknown split {rec['split']!r}")
    if not isinstance(rec["procedure_id"], int) or not isinstance(rec["question"], str):
        raise ManifestError(f"line {lineno}: bad procedure_id or question type")
    return VQASample(rec["frame_path"], rec["question"], ans, cat, rec["procedure_id"], rec["split"])


def read_dataset(path) -> Corpus:
    root = Path(path)
    samples = []
    with open(root / MANIFEST, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                samples.append(parse_record(line, lineno))
    images = {}
    for s in samples:
        if s.frame_path not in images:
            f = root / s.frame_path
            if not f.is_file():
                raise FileNotFoundError(f"missing frame file {f}")
            images[s.frame_path] = decode_frame(f.read_bytes(), str(f))
    return Corpus(samples, images)
